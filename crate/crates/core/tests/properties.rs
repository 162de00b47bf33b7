//! Invariants of attention, the open-set head, metrics and segmentation,
//! checked over generated inputs.

use hsa_core::attention::{aggregator_attention, modular_block, scaled_dot_product_attention, AggregatorParams, ModularBlockParams};
use hsa_core::data::{session_count, SessionConfig};
use hsa_core::layers::Forward;
use hsa_core::metrics::macro_f1;
use hsa_core::numerics::{ParamStore, Tape, Tensor};
use hsa_core::openset::{kl_divergence, OpenSetCalibration};
use hsa_core::rng_from_seed;
use proptest::prelude::*;

const D: usize = 8;

fn rows(t: usize, d: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-2.0f64..2.0, t * d)
}

fn permute_rows(x: &[f64], d: usize, perm: &[usize]) -> Vec<f64> {
    perm.iter().flat_map(|&r| x[r * d..(r + 1) * d].iter().copied()).collect()
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attention_rows_are_convex_combinations(
        (t, q, k, v) in (1usize..7).prop_flat_map(|t| (Just(t), rows(t, 4), rows(t, 4), rows(t, 3)))
    ) {
        let mut tape = Tape::new();
        let m = |d: Vec<f64>, c: usize| Tensor::new(vec![t, c], d).unwrap();
        let (qv, kv, vv) = (tape.constant(&m(q, 4)).unwrap(), tape.constant(&m(k, 4)).unwrap(), tape.constant(&m(v.clone(), 3)).unwrap());
        let (out, w) = scaled_dot_product_attention(&mut tape, qv, kv, vv).unwrap();
        for row in tape.value(w).chunks(t) {
            prop_assert!(row.iter().all(|x| *x >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        for (i, o) in tape.value(out).iter().enumerate() {
            let col = i % 3;
            let (lo, hi) = (0..t).map(|r| v[r * 3 + col]).fold((f64::MAX, f64::MIN), |(l, h), x| (l.min(x), h.max(x)));
            prop_assert!(*o >= lo - 1e-12 && *o <= hi + 1e-12);
        }
    }

    #[test]
    fn modular_block_is_permutation_equivariant(
        (t, x, perm, seed) in (2usize..7).prop_flat_map(|t| (Just(t), rows(t, D), permutation(t), any::<u64>()))
    ) {
        let mut store = ParamStore::new();
        let p = ModularBlockParams::new(&mut store, &mut rng_from_seed(seed), "b", D, 2, 16).unwrap();
        let run = |x: Vec<f64>| {
            let mut fwd = Forward::eval(&store);
            let xv = fwd.constant(&Tensor::new(vec![t, D], x).unwrap()).unwrap();
            let y = modular_block(&mut fwd, xv, &p).unwrap();
            fwd.tape.value(y).to_vec()
        };
        let direct = permute_rows(&run(x.clone()), D, &perm);
        let permuted = run(permute_rows(&x, D, &perm));
        prop_assert!(close(&direct, &permuted, 1e-9));
    }

    #[test]
    fn aggregator_is_permutation_invariant(
        (t, x, perm, seed) in (2usize..9).prop_flat_map(|t| (Just(t), rows(t, D), permutation(t), any::<u64>()))
    ) {
        let mut store = ParamStore::new();
        let p = AggregatorParams::new(&mut store, &mut rng_from_seed(seed), "a", D, 16).unwrap();
        let run = |x: Vec<f64>| {
            let mut fwd = Forward::eval(&store);
            let xv = fwd.constant(&Tensor::new(vec![t, D], x).unwrap()).unwrap();
            let pooled = aggregator_attention(&mut fwd, xv, &p).unwrap();
            (fwd.tape.value(pooled.output).to_vec(), pooled.weights)
        };
        let (a, wa) = run(x.clone());
        let (b, wb) = run(permute_rows(&x, D, &perm));
        prop_assert!(close(&a, &b, 1e-9));
        prop_assert!((wa.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(close(&permute_rows(&wa, 1, &perm), &wb, 1e-12));
    }

    #[test]
    fn kl_is_non_negative(
        (mean, log_var) in (1usize..10).prop_flat_map(|n| (
            proptest::collection::vec(-5.0f64..5.0, n),
            proptest::collection::vec(-6.0f64..6.0, n),
        ))
    ) {
        prop_assert!(kl_divergence(&mean, &log_var) >= 0.0);
    }

    #[test]
    fn threshold_decreases_with_alpha(
        losses in proptest::collection::vec(0.0f64..50.0, 2..40),
        a in 0.0f64..=0.5,
        b in 0.0f64..=0.5,
    ) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let c_lo = OpenSetCalibration::from_losses(&losses, lo).unwrap();
        let c_hi = OpenSetCalibration::from_losses(&losses, hi).unwrap();
        prop_assert!(c_hi.threshold <= c_lo.threshold);
        let flagged = |c: &OpenSetCalibration| losses.iter().filter(|&&l| l > c.threshold).count();
        prop_assert!(flagged(&c_hi) >= flagged(&c_lo));
    }

    #[test]
    fn macro_f1_ignores_sample_order(
        (pairs, perm) in (1usize..30).prop_flat_map(|n| (
            proptest::collection::vec((0usize..4, 0usize..4), n),
            permutation(n),
        ))
    ) {
        let (truth, pred): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let a = macro_f1(4, &truth, &pred).unwrap();
        let truth_p: Vec<usize> = perm.iter().map(|&i| truth[i]).collect();
        let pred_p: Vec<usize> = perm.iter().map(|&i| pred[i]).collect();
        let b = macro_f1(4, &truth_p, &pred_p).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn session_count_matches_enumeration(len in 0usize..600, wl in 1usize..20, n in 1usize..6, stride in 1usize..50) {
        let cfg = SessionConfig { window_len: wl, windows_per_session: n, stride: Some(stride), null_label: None };
        let span = cfg.span();
        let enumerated = (0..len).step_by(stride).filter(|s| s + span <= len).count();
        prop_assert_eq!(session_count(len, span, cfg.stride()), enumerated);
    }
}

#[test]
fn zero_key_gives_uniform_pooling_weights() {
    // zero key: every row scores the same
    let mut store = ParamStore::new();
    let p = AggregatorParams::new(&mut store, &mut rng_from_seed(5), "a", D, 16).unwrap();
    store.get_mut(p.key).data_mut().fill(0.0);
    let mut fwd = Forward::eval(&store);
    let x: Vec<f64> = (0..3 * D).map(|i| (i as f64 * 0.37).sin()).collect();
    let xv = fwd.constant(&Tensor::new(vec![3, D], x).unwrap()).unwrap();
    let pooled = aggregator_attention(&mut fwd, xv, &p).unwrap();
    for w in &pooled.weights {
        assert!((w - 1.0 / 3.0).abs() < 1e-15);
    }
}
