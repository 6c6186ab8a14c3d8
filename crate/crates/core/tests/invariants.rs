//! Property tests over randomly drawn shapes, seeds and weights.

use mrp_lab::dataset::{build_feature_dictionary, sample_dataset, DataParams, FeatureId, MaskVector, View};
use mrp_lab::io::{read_checkpoint, write_checkpoint};
use mrp_lab::network::{
    log_sum_exp, smoothed_relu, smoothed_relu_prime, softmax, ActivationParams, EncoderWeights, HeadWeights,
};
use mrp_lab::pretrain_mae::{expected_loss_mae, masked_loss_mae};
use mrp_lab::pretrain_ts::{expected_loss_ts, grad_ts, masked_loss_ts, tau_schedule, TauMode, TsConfig};
use mrp_lab::probe::{argmax_kernels, candidate_sets, correlation_matrix};
use mrp_lab::seeds::{rng_for, Stream};
use ndarray::Array1;
use proptest::prelude::*;

fn small_params(k: usize, d: usize, s: f64) -> DataParams {
    DataParams { k, d, num_patches: 16, s, ..DataParams::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn activation_is_monotone_and_bounded(q in 2u32..7, varrho in 0.01f64..0.9, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let act = ActivationParams::new(q, varrho).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(smoothed_relu(lo, &act) <= smoothed_relu(hi, &act));
        let y = smoothed_relu(a, &act);
        prop_assert!(y >= 0.0 && y <= a.max(0.0));
        let g = smoothed_relu_prime(a, &act);
        prop_assert!((0.0..=1.0).contains(&g));
    }

    #[test]
    fn activation_is_continuous_at_the_kinks(q in 2u32..7, varrho in 0.01f64..0.9) {
        let act = ActivationParams::new(q, varrho).unwrap();
        let h = 1e-9;
        for z in [0.0, varrho] {
            prop_assert!((smoothed_relu(z + h, &act) - smoothed_relu(z - h, &act)).abs() < 1e-8);
            prop_assert!((smoothed_relu_prime(z + h, &act) - smoothed_relu_prime(z - h, &act)).abs() < 1e-6 * q as f64 / varrho);
        }
    }

    #[test]
    fn dictionary_is_orthonormal(k in 2usize..8, extra in 0usize..40, seed in any::<u64>()) {
        let d = 2 * k + extra;
        let dict = build_feature_dictionary(k, d, &mut rng_for(seed, Stream::Dictionary)).unwrap();
        let m = dict.matrix();
        let gram = m.dot(&m.t());
        for ((i, j), &g) in gram.indexed_iter() {
            let want = if i == j { 1.0 } else { 0.0 };
            prop_assert!((g - want).abs() < 1e-12, "gram[{i},{j}] = {g}");
        }
    }

    #[test]
    fn samples_respect_the_generative_process(k in 2usize..6, s in 0.0f64..1.5, seed in any::<u64>()) {
        let params = small_params(k, 4 * k + 8, s);
        let dict = build_feature_dictionary(k, params.d, &mut rng_for(seed, Stream::Dictionary)).unwrap();
        let data = sample_dataset(20, &dict, &params, &mut rng_for(seed, Stream::PretrainData)).unwrap();
        let rho = params.effective_rho();
        for x in &data.samples {
            prop_assert!(x.label < k);
            prop_assert_eq!(x.active[0].feature, FeatureId::new(x.label, 0));
            prop_assert_eq!(x.active[1].feature, FeatureId::new(x.label, 1));
            let mut used: Vec<usize> = x.active.iter().flat_map(|a| a.patches.clone()).collect();
            prop_assert!(x.active.iter().all(|a| a.patches.len() == params.cp));
            let n = used.len();
            used.sort_unstable();
            used.dedup();
            prop_assert_eq!(used.len(), n, "patch sets overlap");
            for a in &x.active {
                let mass = x.z_mass(a.feature).unwrap();
                let iv = if a.feature.class != x.label {
                    params.z_sum_offclass
                } else {
                    match x.view {
                        View::Single { main_slot } if main_slot != a.feature.slot => [rho, 1.5 * rho],
                        _ => params.z_sum_main,
                    }
                };
                prop_assert!(mass >= iv[0] - 1e-12 && mass <= iv[1] + 1e-12, "mass {mass} outside {iv:?}");
            }
        }
        let s = &data.summary;
        prop_assert_eq!(s.multi_total() + s.single_total(), data.len());
    }

    #[test]
    fn expected_losses_are_non_negative(seed in any::<u64>(), theta in 0.05f64..1.0, tau in 1.0f64..3.0, sigma in 0.05f64..0.5) {
        let params = small_params(3, 24, 0.5);
        let dict = build_feature_dictionary(3, 24, &mut rng_for(seed, Stream::Dictionary)).unwrap();
        let x = sample_dataset(1, &dict, &params, &mut rng_for(seed, Stream::TestData)).unwrap().samples.remove(0);
        let w = EncoderWeights::gaussian(3, 2, 24, sigma, &mut rng_for(seed, Stream::Init));
        let act = ActivationParams::new(4, 0.2).unwrap();
        prop_assert!(expected_loss_ts(&w, tau, theta, &x, &act).unwrap() >= 0.0);
        prop_assert!(expected_loss_mae(&w, theta, &x, &act).unwrap() >= 0.0);
    }

    #[test]
    fn keeping_every_patch_makes_expectation_exact(seed in any::<u64>(), tau in 1.0f64..3.0) {
        let params = small_params(3, 24, 0.5);
        let dict = build_feature_dictionary(3, 24, &mut rng_for(seed, Stream::Dictionary)).unwrap();
        let x = sample_dataset(1, &dict, &params, &mut rng_for(seed, Stream::TestData)).unwrap().samples.remove(0);
        let w = EncoderWeights::gaussian(3, 2, 24, 0.3, &mut rng_for(seed, Stream::Init));
        let act = ActivationParams::default();
        let ones = MaskVector::all_ones(x.num_patches());
        let e = expected_loss_ts(&w, tau, 1.0, &x, &act).unwrap();
        let m = masked_loss_ts(&w, tau, 1.0, &x, &ones, &act).unwrap();
        prop_assert!((e - m).abs() <= 1e-12 * e.abs().max(1.0));
        let e = expected_loss_mae(&w, 1.0, &x, &act).unwrap();
        let m = masked_loss_mae(&w, 1.0, &x, &ones, &act).unwrap();
        prop_assert!((e - m).abs() <= 1e-12 * e.abs().max(1.0));
    }

    #[test]
    fn no_mask_and_no_teacher_scale_means_no_signal(seed in any::<u64>()) {
        let params = small_params(3, 24, 0.5);
        let dict = build_feature_dictionary(3, 24, &mut rng_for(seed, Stream::Dictionary)).unwrap();
        let x = sample_dataset(1, &dict, &params, &mut rng_for(seed, Stream::TestData)).unwrap().samples.remove(0);
        let w = EncoderWeights::gaussian(3, 2, 24, 0.3, &mut rng_for(seed, Stream::Init));
        let act = ActivationParams::default();
        prop_assert_eq!(expected_loss_ts(&w, 1.0, 1.0, &x, &act).unwrap(), 0.0);
        prop_assert!(grad_ts(&w, 1.0, 1.0, &x, &act).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let logits = Array1::from(v);
        let p = softmax(&logits.view());
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!((p.sum() - 1.0).abs() < 1e-12);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = log_sum_exp(&logits.view());
        prop_assert!(lse >= max && lse <= max + (logits.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn tau_decays_to_its_floor(theta in 0.05f64..1.0, c1 in 0.0f64..3.0, cp in 1usize..4, inverse_t in any::<bool>(), t in 0usize..10_000) {
        let cfg = TsConfig {
            theta,
            tau_c1: c1,
            tau_mode: if inverse_t { TauMode::InverseT } else { TauMode::InverseTPow1OverQ },
            ..TsConfig::default()
        };
        let floor = 1.0 + (1.0 - theta) / (cp as f64 * theta);
        let now = tau_schedule(t, theta, cp, &cfg);
        let next = tau_schedule(t + 1, theta, cp, &cfg);
        prop_assert!(now >= floor && next <= now);
        prop_assert!((tau_schedule(0, theta, cp, &cfg) - floor - c1).abs() < 1e-12);
    }

    #[test]
    fn initial_winners_are_candidates(k in 3usize..8, m in 1usize..6, seed in any::<u64>()) {
        let d = 4 * k;
        let dict = build_feature_dictionary(k, d, &mut rng_for(seed, Stream::Dictionary)).unwrap();
        let w = EncoderWeights::gaussian(k, m, d, 0.2, &mut rng_for(seed, Stream::Init));
        let corr = correlation_matrix(&w, &dict).unwrap();
        if let Ok(m0) = candidate_sets(&corr.view(), 1.0) {
            for (f, &r) in argmax_kernels(&corr.view()).iter().enumerate() {
                prop_assert!(m0.contains(FeatureId::from_index(f), r));
            }
        }
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly(k in 2usize..5, m in 1usize..4, d in 4usize..20, seed in any::<u64>(), sigma0 in 1e-4f64..3.0, iter in proptest::option::of(0usize..5000)) {
        let w = EncoderWeights::gaussian(k, m, d, sigma0, &mut rng_for(seed, Stream::Init));
        let mut head = HeadWeights::zeros(k, k * m);
        head.u.iter_mut().zip(w.kernels.iter()).for_each(|(u, &v)| *u = v * 3.0);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &w, Some(&head), iter).unwrap();
        let (w2, h2, header) = read_checkpoint(&buf[..]).unwrap();
        prop_assert_eq!(w2, w);
        prop_assert_eq!(h2, Some(head));
        prop_assert_eq!(header.iteration, iter);
    }
}
