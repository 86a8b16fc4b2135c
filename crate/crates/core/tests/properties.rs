use num_complex::Complex64;
use proptest::prelude::*;
use qprecode::channel::{gen_rayleigh, gen_symbols, CMatrix, ChannelModel};
use qprecode::dataset::ChannelDataset;
use qprecode::energy::gnn_flops;
use qprecode::gnn::reference::counted_forward;
use qprecode::gnn::{logits_batch, probabilities, GnnConfig, GnnWeights};
use qprecode::linalg::hermitian_eigenvalues;
use qprecode::metrics::{estimate_bussgang, rate_from_snidr, snidr, snidr_from_samples};
use qprecode::precoders::{linear_quantized_tx, mrt, zf, PrecoderKind};
use qprecode::quantizer::{lloyd_max, Resolution};
use qprecode::rng::{substream, Stream};
use qprecode::trainer::{adam_step, forward_train, AdamParams, GumbelDraw, PassParams, SelectMode};
use qprecode::gnn::checkpoint::OptimizerState;

proptest! {
    #![proptest_config(ProptestConfig { cases: 20, ..ProptestConfig::default() })]

    #[test]
    fn flop_formula_matches_counter(m in 1usize..6, k in 1usize..4, d_h in 1usize..10, n_h in 1usize..4, b in 1u32..4, seed in 0u64..1000) {
        let f = gnn_flops(m, k, d_h, n_h, b).unwrap();
        let cfg = GnnConfig::new(m, k, b, d_h, n_h).unwrap();
        let w = GnnWeights::init(&cfg, seed);
        let h = gen_rayleigh(m, k, seed).unwrap();
        let s = gen_symbols(k, 1, seed).unwrap().as_columns();
        let sv: Vec<Complex64> = s.iter().copied().collect();
        let (_, c) = counted_forward(&cfg, &w, h.entries(), &sv);
        prop_assert_eq!((c.input.mul, c.input.add), f.input);
        prop_assert_eq!((c.hidden.mul, c.hidden.add), f.hidden);
        prop_assert_eq!((c.output.mul, c.output.add), f.output);
        prop_assert_eq!(f.total, f.mul + f.add);
    }

    #[test]
    fn quantizer_structure(b in 1u32..7, x in -6.0f64..6.0) {
        let q = lloyd_max(b, Default::default()).unwrap();
        let lv = q.levels();
        prop_assert!(lv.windows(2).all(|w| w[0] < w[1]));
        let th = q.thresholds();
        prop_assert_eq!(th.len(), lv.len() + 1);
        prop_assert!(th[0] == f64::NEG_INFINITY && th[lv.len()] == f64::INFINITY);
        for i in 0..lv.len() - 1 {
            prop_assert!((th[i + 1] - 0.5 * (lv[i] + lv[i + 1])).abs() < 1e-9);
        }
        // Symmetric around zero.
        for (a, c) in lv.iter().zip(lv.iter().rev()) {
            prop_assert!((a + c).abs() < 1e-9);
        }
        let y = q.quantize(x).unwrap();
        prop_assert_eq!(q.quantize(y).unwrap(), y);
        prop_assert!(lv.contains(&y));
    }

    #[test]
    fn rate_decreases_with_noise(seed in 0u64..500, s1 in 0.01f64..1.0, ds in 0.0f64..1.0) {
        let h = gen_rayleigh(8, 2, seed).unwrap();
        let s = gen_symbols(2, 64, seed + 1).unwrap();
        let q = Resolution::Finite(lloyd_max(1, Default::default()).unwrap());
        let y = linear_quantized_tx(&h, PrecoderKind::Mrt, &q, &s, 8.0).unwrap();
        let est = estimate_bussgang(&s.as_columns(), &y).unwrap();
        let r1 = rate_from_snidr(&snidr(&h, &est, s1).unwrap());
        let r2 = rate_from_snidr(&snidr(&h, &est, s1 + ds).unwrap());
        prop_assert!(r2 <= r1 + 1e-12);
    }

    #[test]
    fn snidr_paths_agree_and_follow_user_permutation(seed in 0u64..500) {
        let h = gen_rayleigh(8, 3, seed).unwrap();
        let s = gen_symbols(3, 80, seed + 1).unwrap();
        let q = Resolution::Finite(lloyd_max(2, Default::default()).unwrap());
        let y = linear_quantized_tx(&h, PrecoderKind::Zf, &q, &s, 8.0).unwrap();
        let sc = s.as_columns();
        let a = snidr_from_samples(&h, &sc, &y, 0.1).unwrap();
        let est = estimate_bussgang(&sc, &y).unwrap();
        let b = snidr(&h, &est, 0.1).unwrap();
        for (x, z) in a.iter().zip(&b) {
            prop_assert!((x - z).abs() <= 1e-8 * x.abs().max(1.0));
        }
        let perm = [2usize, 0, 1];
        let hp = qprecode::ChannelMatrix::new(CMatrix::from_fn(8, 3, |i, j| h.entries()[(i, perm[j])]), ChannelModel::Rayleigh).unwrap();
        let sp = CMatrix::from_fn(3, 80, |i, j| sc[(perm[i], j)]);
        let c = snidr_from_samples(&hp, &sp, &y, 0.1).unwrap();
        for (j, &p) in perm.iter().enumerate() {
            prop_assert!((c[j] - a[p]).abs() <= 1e-8 * a[p].abs().max(1.0));
        }
        // Distortion covariance is Hermitian PSD up to round-off.
        prop_assert!((&est.c_q - est.c_q.adjoint()).norm() < 1e-10);
        let ev = hermitian_eigenvalues(&est.c_q);
        prop_assert!(ev.min() >= -1e-8 * est.c_q.trace().re);
    }

    #[test]
    fn linear_precoders_meet_power(seed in 0u64..500, p_t in 0.5f64..40.0) {
        let h = gen_rayleigh(12, 3, seed).unwrap();
        for w in [mrt(&h, p_t).unwrap(), zf(&h, p_t).unwrap()] {
            let p = (w.w() * w.w().adjoint()).trace().re;
            prop_assert!((p - p_t).abs() < 1e-9 * p_t);
        }
    }

    #[test]
    fn gnn_permutations(seed in 0u64..1000, m in 2usize..6, k in 1usize..4, rot in 1usize..5) {
        let cfg = GnnConfig::new(m, k, 1, 5, 1).unwrap();
        let w = GnnWeights::init(&cfg, seed);
        let h = gen_rayleigh(m, k, seed).unwrap().into_entries();
        let s = gen_symbols(k, 3, seed).unwrap().as_columns();
        let base = logits_batch(&cfg, &w, &h, &s).unwrap();
        let r = rot % m;
        let hp = CMatrix::from_fn(m, k, |a, u| h[((a + r) % m, u)]);
        let out = logits_batch(&cfg, &w, &hp, &s).unwrap();
        for t in 0..3 {
            for a in 0..m {
                prop_assert!(out.column(t * m + a) == base.column(t * m + (a + r) % m));
            }
        }
        let p = probabilities(&base, cfg.levels());
        for row in p.p_re.row_iter().chain(p.p_im.row_iter()) {
            prop_assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn training_outputs_hit_power_target(seed in 0u64..1000, p_t in 0.5f64..50.0) {
        let cfg = GnnConfig::new(4, 2, 2, 4, 1).unwrap();
        let w = GnnWeights::init(&cfg, seed);
        let q = lloyd_max(2, Default::default()).unwrap();
        let h = gen_rayleigh(4, 2, seed).unwrap();
        let s = gen_symbols(2, 20, seed).unwrap().as_columns();
        let g = GumbelDraw::sample(&mut substream(seed, Stream::Gumbel, 0), 20, 4, 4);
        let p = PassParams { cfg: &cfg, q: &q, tau: 0.5, p_t, sigma2: 0.1, mode: SelectMode::StraightThrough };
        let f = forward_train(h.entries(), &s, &w, &p, &g).unwrap();
        let pw = f.y.iter().map(|z| z.norm_sqr()).sum::<f64>() / 20.0;
        prop_assert!((pw - p_t).abs() <= 1e-9 * p_t);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op(seed in 0u64..1000, lr in 1e-4f64..1e-1) {
        let cfg = GnnConfig::new(3, 1, 1, 4, 1).unwrap();
        let w0 = GnnWeights::init(&cfg, seed);
        let mut w = w0.clone();
        let mut st = OptimizerState::new(&cfg);
        adam_step(&mut w, &GnnWeights::zeros(&cfg), &mut st, lr, &AdamParams::default());
        prop_assert_eq!(w, w0);
        prop_assert_eq!(st.step, 1);
    }

    #[test]
    fn dataset_round_trip(seed in 0u64..1000, n in 0usize..5, los in any::<bool>()) {
        let model = if los { ChannelModel::LosUla } else { ChannelModel::Rayleigh };
        let ds = ChannelDataset::generate(model, 4, 2, n, seed).unwrap();
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        prop_assert_eq!(ChannelDataset::from_bytes(&buf).unwrap(), ds);
    }
}
