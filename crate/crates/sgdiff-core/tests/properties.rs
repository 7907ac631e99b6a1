//! Randomized property checks across the public core API.

use proptest::prelude::*;
use sgdiff_core::datagen::{box_down, generate_one};
use sgdiff_core::diffusion::{forward_noise, NoiseSchedule};
use sgdiff_core::metrics::inception_score;
use sgdiff_core::rng::{stream, Prng};
use sgdiff_core::scenegraph::{
    caption_for, load_scene_graph, parse_caption, random_graph, serialize_scene_graph,
};
use sgdiff_core::swin::{window_partition, window_reverse};
use sgdiff_core::{ParamStore, Session};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Softmax output rows are distributions for any finite input.
    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..5,
        cols in 1usize..8,
        seed in 0u64..1000,
    ) {
        let store = ParamStore::<f64>::new();
        let mut sess = Session::new(&store);
        let mut rng = Prng::new(seed, stream::EVAL);
        let data: Vec<f64> = (0..rows * cols).map(|_| 8.0 * rng.normal()).collect();
        let x = sess.constant_f64(&data, vec![rows, cols]).unwrap();
        let y = sess.tape.softmax(x).unwrap();
        let v = sess.value(y);
        for r in 0..rows {
            let sum: f64 = v[r * cols..(r + 1) * cols].iter().map(|e| *e).sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(v[r * cols..(r + 1) * cols].iter().all(|&p| p >= 0.0));
        }
    }

    // Shifted window partitioning is a permutation: reversing restores
    // the input bit-for-bit.
    #[test]
    fn window_partition_round_trips(
        side_pow in 1usize..4,
        win_pow in 0usize..3,
        shift_raw in 0usize..4,
        seed in 0u64..1000,
        cols in 1usize..5,
    ) {
        let side = 1usize << side_pow;
        let win = 1usize << win_pow.min(side_pow);
        let shift = if win > 1 { shift_raw % win } else { 0 };
        let store = ParamStore::<f64>::new();
        let mut sess = Session::new(&store);
        let mut rng = Prng::new(seed, stream::EVAL);
        let data: Vec<f64> = rng.normal_vec(side * side * cols);
        let x = sess.constant_f64(&data, vec![side * side, cols]).unwrap();
        let parts = window_partition(&mut sess, x, side, side, win, shift).unwrap();
        let back = window_reverse(&mut sess, parts, side, side, win, shift).unwrap();
        prop_assert_eq!(sess.value(back), sess.value(x));
    }

    // Graph documents survive a serialize/load round trip exactly.
    #[test]
    fn graph_documents_round_trip(seed in 0u64..2000) {
        let mut rng = Prng::new(seed, stream::DATAGEN);
        let g = random_graph(&mut rng, 3);
        let doc = serialize_scene_graph(&g);
        let back = load_scene_graph(&doc).unwrap();
        prop_assert_eq!(&g, &back);
        // And the caption grammar inverts the renderer.
        let reparsed = parse_caption(&caption_for(&g)).unwrap();
        prop_assert_eq!(&g, &reparsed);
    }

    // Box averaging conserves per-channel mean for arbitrary images.
    #[test]
    fn box_average_preserves_mean(
        res_pow in 1usize..5,
        seed in 0u64..1000,
    ) {
        let res = 1usize << res_pow;
        let mut rng = Prng::new(seed, stream::EVAL);
        let img: Vec<f64> = rng.normal_vec(res * res * 3);
        let down = box_down(&img, res, 3).unwrap();
        for ch in 0..3 {
            let hi: f64 = (0..res * res).map(|p| img[p * 3 + ch]).sum::<f64>()
                / (res * res) as f64;
            let half = res / 2;
            let lo: f64 = (0..half * half).map(|p| down[p * 3 + ch]).sum::<f64>()
                / (half * half) as f64;
            prop_assert!((hi - lo).abs() < 1e-6);
        }
    }

    // Respaced schedules always agree with the fine schedule at the
    // strided timesteps.
    #[test]
    fn respacing_always_aligns(steps in 1usize..200) {
        let s = NoiseSchedule::default_train();
        let (sub, taus) = s.respaced(steps).unwrap();
        for (k, &tau) in taus.iter().enumerate() {
            prop_assert!((sub.alpha_bar(k + 1) - s.alpha_bar(tau)).abs() < 1e-12);
        }
        prop_assert_eq!(*taus.last().unwrap(), s.len());
    }

    // The noising interpolation keeps values bounded by the two inputs'
    // scales: |z| <= |x0| + |eps| elementwise.
    #[test]
    fn forward_noise_is_a_bounded_mix(
        t in 0usize..=200,
        seed in 0u64..1000,
    ) {
        let s = NoiseSchedule::default_train();
        let mut rng = Prng::new(seed, stream::EVAL);
        let x0: Vec<f64> = rng.normal_vec(16);
        let eps: Vec<f64> = rng.normal_vec(16);
        let z = forward_noise(&s, &x0, t, &eps).unwrap();
        for i in 0..16 {
            prop_assert!(z[i].abs() <= x0[i].abs() + eps[i].abs() + 1e-12);
        }
    }

    // The diversity score stays inside its analytic bounds for any batch
    // of valid distributions.
    #[test]
    fn diversity_score_stays_bounded(
        n in 2usize..20,
        classes in 2usize..10,
        seed in 0u64..1000,
    ) {
        let mut rng = Prng::new(seed, stream::EVAL);
        let mut probs = vec![0.0; n * classes];
        for r in 0..n {
            let mut sum = 0.0;
            for c in 0..classes {
                let v = (1.0 + rng.normal().abs()).exp();
                probs[r * classes + c] = v;
                sum += v;
            }
            for c in 0..classes {
                probs[r * classes + c] /= sum;
            }
        }
        let s = inception_score(&probs, n, classes).unwrap();
        prop_assert!(s >= 1.0 - 1e-9);
        prop_assert!(s <= classes as f64 + 1e-9);
    }

    // Every generated sample's caption parses back to its own graph.
    #[test]
    fn generated_captions_always_parse(seed in 0u64..300, index in 0u64..50) {
        let s = generate_one(seed, index).unwrap();
        let parsed = parse_caption(&s.caption).unwrap();
        prop_assert!(parsed.is_isomorphic(&s.graph));
        prop_assert!(s.image32.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
