use proptest::prelude::*;

use lpq_core::lab::{self, ConvexProblemSpec, LabRegime};
use lpq_core::quant::{self, QuantSpec, RoundingMode};
use lpq_core::regimes;
use lpq_core::store::{DeltaLayout, QuantizedEmbeddingTable, RoundingKey};

fn table(rows: usize, dim: usize, mode: RoundingMode, layout: DeltaLayout, seed: u64) -> QuantizedEmbeddingTable {
    let spec = QuantSpec::new(8, 0.01, mode).unwrap();
    QuantizedEmbeddingTable::init(rows, dim, spec, layout, 0.5, Some(0.01), seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn deterministic_fake_quantize_is_idempotent(w in -10.0f64..10.0, bits in 2u8..=16, delta in 1e-4f64..0.5) {
        let once = quant::fake_quantize_det(w, bits, delta).unwrap();
        let twice = quant::fake_quantize_det(once, bits, delta).unwrap();
        prop_assert!((once - twice).abs() <= 1e-12 * once.abs().max(1.0));
    }

    #[test]
    fn scatter_keeps_codes_in_range(
        seed: u64,
        updates in proptest::collection::vec(-100.0f64..100.0, 12),
        stochastic: bool,
    ) {
        let mode = if stochastic { RoundingMode::Stochastic } else { RoundingMode::Deterministic };
        let mut t = table(6, 4, mode, DeltaLayout::FeatureWise, seed);
        let ids = [1u32, 4, 5];
        t.scatter_requantize(&ids, &updates, None, RoundingKey { seed, iteration: 1 }).unwrap();
        for r in 0..t.rows() {
            for c in t.row_codes(r) {
                prop_assert!((-128..=127).contains(&c));
            }
        }
    }

    #[test]
    fn gather_is_pure(seed: u64, ids in proptest::collection::vec(0u32..10, 0..20)) {
        let t = table(10, 3, RoundingMode::Stochastic, DeltaLayout::Global, seed);
        let a = t.gather(&ids).unwrap();
        let b = t.gather(&ids).unwrap();
        prop_assert_eq!(a.len(), ids.len() * 3);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_round_trips(seed: u64, feature_wise: bool) {
        let layout = if feature_wise { DeltaLayout::FeatureWise } else { DeltaLayout::Global };
        let t = table(7, 5, RoundingMode::Stochastic, layout, seed);
        let mut buf = Vec::new();
        t.write_checkpoint(&mut buf).unwrap();
        let back = QuantizedEmbeddingTable::read_checkpoint(buf.as_slice()).unwrap();
        prop_assert_eq!(back, t);
    }

    /// Under deterministic rounding, a row whose every update stays below
    /// half a step never changes.
    #[test]
    fn small_updates_never_move_deterministic_codes(
        seed: u64,
        grads in proptest::collection::vec(-1.0f64..1.0, 4),
        steps in 1u64..50,
    ) {
        let mut t = table(3, 4, RoundingMode::Deterministic, DeltaLayout::FeatureWise, seed);
        let before = t.row_codes(2);
        let delta = t.delta(2);
        // |lr * g| <= 0.49 delta
        let lr = 0.49 * delta;
        for it in 0..steps {
            regimes::lpt_update(&mut t, &[2], &grads, lr, None, RoundingKey { seed, iteration: it }).unwrap();
        }
        prop_assert_eq!(t.row_codes(2), before);
    }
}

#[test]
fn lab_rounding_residuals_are_unbiased_under_sr() {
    let spec = ConvexProblemSpec::default();
    for seed in 0..5 {
        let traj = lab::run_synthetic(LabRegime::LptSr, &spec, 200, seed, &[]).unwrap();
        let (bias, bound) = lab::rounding_bias_check(&traj);
        assert!(bias <= bound, "seed {seed}: |sum r| = {bias} > {bound}");
    }
}

#[test]
fn lab_dr_runs_freeze_and_meet_residual_bounds() {
    let spec = ConvexProblemSpec::default();
    let traj = lab::run_synthetic(LabRegime::LptDr, &spec, 100, 3, &[10]).unwrap();
    assert!(traj.frozen_after);
    assert!(lab::residual_check(&traj).passed());
    assert_eq!(traj.snapshots.len(), 1);
}
