use lipdiff::audiofeat::{align_window, MelSpectrogram, N_MELS, WINDOW_ROWS};
use lipdiff::metrics::{pearson, psnr, ssim};
use lipdiff::raster::{BinaryMask, Image};
use lipdiff::schedule::{make_cosine_schedule, make_linear_schedule, NoiseSchedule};
use lipdiff::trainer::masked_loss_images;
use lipdiff::videoprep::apply_forward_noise;
use proptest::prelude::*;

fn schedule(cosine: bool, steps: usize) -> NoiseSchedule {
    if cosine {
        make_cosine_schedule(steps, 0.008).unwrap()
    } else {
        make_linear_schedule(steps, 1e-4, 0.05).unwrap()
    }
}

fn image(c: usize, h: usize, w: usize, values: &[f32]) -> Image {
    let n = c * h * w;
    Image::new(c, h, w, values.iter().cycle().take(n).copied().collect()).unwrap()
}

fn rect_mask(h: usize, w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> BinaryMask {
    let mut m = BinaryMask::full(h, w, false);
    for y in y0..y1 {
        for x in x0..x1 {
            m.set(y, x, true);
        }
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn q_sample_is_the_closed_form(
        cosine in any::<bool>(),
        steps in 2usize..300,
        t_frac in 0.0f64..1.0,
        y0 in prop::collection::vec(-1.0f32..1.0, 16),
        eps in prop::collection::vec(-3.0f32..3.0, 16),
    ) {
        let s = schedule(cosine, steps);
        let t = ((steps - 1) as f64 * t_frac) as usize;
        let ab = s.alpha_bars()[t];
        let y = s.q_sample(&y0, t, &eps).unwrap();
        for i in 0..16 {
            let expected = ab.sqrt() * y0[i] as f64 + (1.0 - ab).sqrt() * eps[i] as f64;
            prop_assert!((y[i] as f64 - expected).abs() < 1e-5);
        }
        // Zero noise scales the signal, zero signal scales the noise.
        let zeros = vec![0.0f32; 16];
        let signal_only = s.q_sample(&y0, t, &zeros).unwrap();
        let noise_only = s.q_sample(&zeros, t, &eps).unwrap();
        for i in 0..16 {
            prop_assert!((signal_only[i] + noise_only[i] - y[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn respaced_schedules_keep_selected_alpha_bars(
        cosine in any::<bool>(),
        steps in 2usize..400,
        frac in 0.0f64..1.0,
    ) {
        let s = schedule(cosine, steps);
        let k = 1 + ((steps - 1) as f64 * frac) as usize;
        let r = s.respace(k).unwrap();
        prop_assert_eq!(r.num_steps(), k);
        prop_assert_eq!(*r.timesteps().last().unwrap(), steps - 1);
        prop_assert!(r.timesteps().windows(2).all(|w| w[0] < w[1]));
        for (j, &t) in r.timesteps().iter().enumerate() {
            prop_assert_eq!(r.alpha_bars()[j].to_bits(), s.alpha_bars()[t].to_bits());
        }
        let mut product = 1.0;
        for j in 0..k {
            product *= r.alphas()[j];
            prop_assert!((product - r.alpha_bars()[j]).abs() <= 1e-12 * r.alpha_bars()[j].max(1e-300) + 1e-15);
        }
    }

    #[test]
    fn forward_noise_leaves_outside_bit_identical(
        values in prop::collection::vec(-1.0f32..1.0, 1..64),
        noise in prop::collection::vec(-3.0f32..3.0, 1..64),
        y0 in 0usize..8, x0 in 0usize..8, dy in 1usize..8, dx in 1usize..8,
        t in 0usize..100,
    ) {
        let (h, w) = (8, 8);
        let frame = image(3, h, w, &values);
        let eps = image(3, h, w, &noise);
        let mask = rect_mask(h, w, y0, (y0 + dy).min(h), x0, (x0 + dx).min(w));
        let out = apply_forward_noise(&frame, &mask, t, &eps, &schedule(true, 100)).unwrap();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    if !mask.is_set(y, x) {
                        prop_assert_eq!(out.get(c, y, x).to_bits(), frame.get(c, y, x).to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn masked_loss_ignores_prediction_outside(
        pred in prop::collection::vec(-2.0f32..2.0, 1..48),
        target in prop::collection::vec(-2.0f32..2.0, 1..48),
        junk in prop::collection::vec(-50.0f32..50.0, 1..48),
        y0 in 0usize..5, x0 in 0usize..5,
    ) {
        let (h, w) = (6, 6);
        let mask = rect_mask(h, w, y0, y0 + 2, x0, x0 + 2);
        let a = image(3, h, w, &pred);
        let b = image(3, h, w, &target);
        let mut a2 = a.clone();
        let fill = image(3, h, w, &junk);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    if !mask.is_set(y, x) {
                        a2.set(c, y, x, fill.get(c, y, x));
                    }
                }
            }
        }
        let l1 = masked_loss_images(&a, &b, &mask).unwrap();
        let l2 = masked_loss_images(&a2, &b, &mask).unwrap();
        prop_assert_eq!(l1.to_bits(), l2.to_bits());
        prop_assert!(l1 >= 0.0);
    }

    #[test]
    fn windows_are_five_rows_centred_on_2i(rows in 1usize..40, n in 1usize..30, i_frac in 0.0f64..1.0) {
        let values: Vec<f32> = (0..rows * N_MELS).map(|k| (k / N_MELS) as f32 + 1.0).collect();
        let silence = vec![-7.0f32; N_MELS];
        let spec = MelSpectrogram::from_rows(rows, values, silence.clone()).unwrap();
        let i = ((n - 1) as f64 * i_frac) as usize;
        let win = align_window(&spec, i, n).unwrap();
        prop_assert_eq!(win.shape(), (WINDOW_ROWS, N_MELS));
        for k in 0..WINDOW_ROWS {
            let r = 2 * i as isize + k as isize - 2;
            let expected = if r >= 0 && (r as usize) < rows.min(2 * n) {
                spec.row(r as usize)
            } else {
                &silence[..]
            };
            prop_assert_eq!(win.row(k), expected);
        }
    }

    #[test]
    fn pearson_is_symmetric_and_bounded(
        a in prop::collection::vec(-10.0f64..10.0, 3..30),
        b in prop::collection::vec(-10.0f64..10.0, 3..30),
        scale in 0.1f64..10.0,
        shift in -5.0f64..5.0,
    ) {
        let n = a.len().min(b.len());
        let (a, b) = (&a[..n], &b[..n]);
        if let (Ok(ab), Ok(ba)) = (pearson(a, b), pearson(b, a)) {
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
            let moved: Vec<f64> = a.iter().map(|v| v * scale + shift).collect();
            prop_assert!((pearson(&moved, b).unwrap() - ab).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_images_score_perfectly(values in prop::collection::vec(-1.0f32..1.0, 1..200)) {
        let img = image(3, 16, 16, &values);
        prop_assert_eq!(ssim(&img, &img, None).unwrap(), 1.0);
        prop_assert_eq!(psnr(&img, &img, None).unwrap(), 100.0);
    }
}
