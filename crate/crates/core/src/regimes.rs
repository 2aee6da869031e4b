//! Update rules for the embedding table.
//!
//! | kind       | stored between batches            | step size            |
//! |------------|-----------------------------------|----------------------|
//! | `Fp`       | f64 table                         | none                 |
//! | `QatLsq`   | f64 shadow table                  | global, learned      |
//! | `QatPact`  | f64 shadow table                  | `alpha / q`, learned |
//! | `Lpt`      | integer codes                     | fixed                |
//! | `Alpt`     | integer codes                     | per row, learned     |
//!
//! LPT dequantizes the batch rows, takes a gradient step and requantizes.
//! ALPT additionally runs a second forward/backward pass on the
//! deterministically quantized updated rows to obtain a step-size gradient,
//! updates each row's step size, and requantizes with the new step.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelError;
use crate::optim::{self, AdamConfig, OptimError, RowOptimizer};
use crate::quant::{self, QuantError, QuantSpec, RoundingMode};
use crate::store::{DeltaLayout, QuantizedEmbeddingTable, RoundingKey, StoreError, DELTA_FLOOR};

#[derive(Debug, Error)]
pub enum RegimeError {
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("adaptive step sizes need a feature-wise table")]
    NeedsFeatureWise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegimeKind {
    Fp,
    QatLsq,
    QatPact,
    Lpt,
    Alpt,
}

impl RegimeKind {
    pub fn name(self) -> &'static str {
        match self {
            RegimeKind::Fp => "fp",
            RegimeKind::QatLsq => "qat-lsq",
            RegimeKind::QatPact => "qat-pact",
            RegimeKind::Lpt => "lpt",
            RegimeKind::Alpt => "alpt",
        }
    }

    /// Whether a full-precision copy of the table is kept during training.
    pub fn keeps_full_precision(self) -> bool {
        matches!(self, RegimeKind::Fp | RegimeKind::QatLsq | RegimeKind::QatPact)
    }
}

impl std::str::FromStr for RegimeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fp" => Ok(RegimeKind::Fp),
            "qat-lsq" => Ok(RegimeKind::QatLsq),
            "qat-pact" => Ok(RegimeKind::QatPact),
            "lpt" => Ok(RegimeKind::Lpt),
            "alpt" => Ok(RegimeKind::Alpt),
            other => Err(format!("unknown regime {other:?}")),
        }
    }
}

/// Scaling applied to raw step-size gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradScale {
    /// `g = 1`
    None,
    /// `g = 1 / sqrt(d q)`
    Dq,
    /// `g = 1 / sqrt(b d q)`
    Bdq,
}

impl GradScale {
    pub fn factor(self, batch: usize, dim: usize, bits: u8) -> f64 {
        let q = f64::from(quant::code_max(bits));
        match self {
            GradScale::None => 1.0,
            GradScale::Dq => 1.0 / (dim as f64 * q).sqrt(),
            GradScale::Bdq => 1.0 / (batch as f64 * dim as f64 * q).sqrt(),
        }
    }
}

impl std::str::FromStr for GradScale {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(GradScale::None),
            "dq" => Ok(GradScale::Dq),
            "bdq" => Ok(GradScale::Bdq),
            other => Err(format!("unknown gradient scale {other:?}")),
        }
    }
}

/// How learned step sizes (or clip values) move.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSizeUpdate {
    pub lr: f64,
    pub weight_decay: f64,
    /// Multiplies the raw gradient only, not the weight-decay term.
    pub grad_scale: f64,
    pub optimizer: RowOptimizer,
    pub adam: AdamConfig,
}

impl StepSizeUpdate {
    pub fn sgd(lr: f64, grad_scale: f64) -> Self {
        Self {
            lr,
            weight_decay: 0.0,
            grad_scale,
            optimizer: RowOptimizer::Sgd,
            adam: AdamConfig::default(),
        }
    }

    /// Apply one update to a positive scalar, clamping at the floor.
    /// Returns the new value and whether the floor was hit.
    pub fn apply(&self, value: f64, raw_grad: f64) -> Result<(f64, bool), OptimError> {
        let mut p = [value];
        self.optimizer.step(
            &mut p,
            &[self.grad_scale * raw_grad],
            self.lr,
            self.weight_decay,
            self.adam,
        )?;
        if p[0].is_finite() && p[0] >= DELTA_FLOOR {
            Ok((p[0], false))
        } else {
            Ok((DELTA_FLOOR, true))
        }
    }
}

/// Accounting of full-precision embedding values held by a training loop.
///
/// `persistent` counts values that outlive a batch (shadow tables); `peak`
/// is the largest number of transient values alive at once.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FpMeter {
    live: usize,
    peak: usize,
    persistent: usize,
}

impl FpMeter {
    pub fn alloc(&mut self, n: usize) {
        self.live += n;
        self.peak = self.peak.max(self.live);
    }

    pub fn free(&mut self, n: usize) {
        self.live = self.live.saturating_sub(n);
    }

    pub fn hold(&mut self, n: usize) {
        self.persistent += n;
    }

    pub fn peak_transient(&self) -> usize {
        self.peak
    }

    pub fn persistent(&self) -> usize {
        self.persistent
    }

    pub fn live(&self) -> usize {
        self.live
    }
}

/// Write-back summary for LPT and ALPT.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WriteBackStats {
    pub entries: usize,
    pub changed_codes: usize,
    /// Entries whose update was non-zero but whose stored value did not move.
    pub stagnant: usize,
    /// Step sizes that hit the floor.
    pub clamped_deltas: usize,
}

/// Plain SGD on the shadow weights using gradients taken at the quantized
/// weights.
pub fn qat_update(shadow: &mut [f64], grads_wrt_quantized: &[f64], lr: f64) -> Result<(), RegimeError> {
    optim::sgd_step(shadow, grads_wrt_quantized, lr, 0.0)?;
    Ok(())
}

/// `sum_i grad_i * dQ_D(w_i)/d delta` for a shared step size.
pub fn lsq_delta_grad(weights: &[f64], grads: &[f64], spec: &QuantSpec) -> Result<f64, RegimeError> {
    if weights.len() != grads.len() {
        return Err(RegimeError::Shape {
            expected: weights.len(),
            got: grads.len(),
        });
    }
    let mut acc = 0.0;
    for (&w, &g) in weights.iter().zip(grads) {
        acc += g * quant::lsq_step_grad(w, spec)?;
    }
    Ok(acc)
}

/// `Q_D` with a learned symmetric clip: step size `alpha / q`, inputs clipped
/// to `[-alpha, alpha]` first.
pub fn pact_quantize(w: f64, alpha: f64, bits: u8) -> Result<f64, RegimeError> {
    let delta = alpha / f64::from(quant::code_max(bits));
    let c = quant::clip(w, -alpha, alpha)?;
    Ok(quant::fake_quantize_det(c, bits, delta)?)
}

/// `sum_i grad_i * d clip(w_i, -alpha, alpha)/d alpha`.
pub fn pact_alpha_grad(weights: &[f64], grads: &[f64], alpha: f64) -> Result<f64, RegimeError> {
    if weights.len() != grads.len() {
        return Err(RegimeError::Shape {
            expected: weights.len(),
            got: grads.len(),
        });
    }
    let mut acc = 0.0;
    for (&w, &g) in weights.iter().zip(grads) {
        acc += g * quant::pact_clip_grad(w, alpha)?;
    }
    Ok(acc)
}

struct RowSnapshot {
    codes: Vec<i32>,
    deltas: Vec<f64>,
}

fn snapshot(table: &QuantizedEmbeddingTable, ids: &[u32]) -> RowSnapshot {
    let mut codes = Vec::with_capacity(ids.len() * table.dim());
    let mut deltas = Vec::with_capacity(ids.len());
    for &id in ids {
        let r = id as usize;
        codes.extend((0..table.dim()).map(|k| table.code(r, k)));
        deltas.push(table.delta(r));
    }
    RowSnapshot { codes, deltas }
}

fn count_stagnant(
    table: &QuantizedEmbeddingTable,
    ids: &[u32],
    before: &RowSnapshot,
    new_weights: &[f64],
) -> usize {
    let d = table.dim();
    let mut stagnant = 0;
    for (j, &id) in ids.iter().enumerate() {
        let r = id as usize;
        for k in 0..d {
            let old = quant::dequantize(before.codes[j * d + k], before.deltas[j]);
            let now = quant::dequantize(table.code(r, k), table.delta(r));
            if new_weights[j * d + k] != old && now == old {
                stagnant += 1;
            }
        }
    }
    stagnant
}

fn check_ids(table: &QuantizedEmbeddingTable, ids: &[u32], values: &[f64]) -> Result<(), RegimeError> {
    if values.len() != ids.len() * table.dim() {
        return Err(RegimeError::Shape {
            expected: ids.len() * table.dim(),
            got: values.len(),
        });
    }
    Ok(())
}

/// Requantize updated rows with the table's fixed step sizes, optionally
/// clipping to `[-clip, clip]` first.
pub fn lpt_requantize(
    table: &mut QuantizedEmbeddingTable,
    ids: &[u32],
    new_weights: &mut [f64],
    clip: Option<f64>,
    key: RoundingKey,
) -> Result<WriteBackStats, RegimeError> {
    check_ids(table, ids, new_weights)?;
    if let Some(alpha) = clip {
        for w in new_weights.iter_mut() {
            *w = quant::clip(*w, -alpha, alpha)?;
        }
    }
    let before = snapshot(table, ids);
    let stats = table.scatter_requantize(ids, new_weights, None, key)?;
    Ok(WriteBackStats {
        entries: new_weights.len(),
        changed_codes: stats.changed_codes,
        stagnant: count_stagnant(table, ids, &before, new_weights),
        clamped_deltas: 0,
    })
}

/// One LPT step with SGD: `w <- Q(w_hat - lr * grad)`.
pub fn lpt_update(
    table: &mut QuantizedEmbeddingTable,
    ids: &[u32],
    grads: &[f64],
    lr: f64,
    clip: Option<f64>,
    key: RoundingKey,
) -> Result<WriteBackStats, RegimeError> {
    let mut w = table.gather(ids)?;
    optim::sgd_step(&mut w, grads, lr, 0.0)?;
    lpt_requantize(table, ids, &mut w, clip, key)
}

/// Second half of an ALPT iteration, given the updated full-precision rows
/// `w^{t+1}`.
///
/// `refeed` receives `Q_D(w^{t+1}, delta^t)` for the batch rows and returns
/// the loss gradient with respect to those quantized values. Each row's step
/// size then moves along `sum_k refeed_k * dQ_D(w_k)/d delta`, after which the
/// rows are requantized with the new step sizes.
pub fn alpt_requantize<F>(
    table: &mut QuantizedEmbeddingTable,
    ids: &[u32],
    new_weights: &[f64],
    step: &StepSizeUpdate,
    mut refeed: F,
    key: RoundingKey,
    meter: &mut FpMeter,
) -> Result<WriteBackStats, RegimeError>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>, RegimeError>,
{
    if table.layout() != DeltaLayout::FeatureWise {
        return Err(RegimeError::NeedsFeatureWise);
    }
    check_ids(table, ids, new_weights)?;
    let d = table.dim();
    let mut specs = Vec::with_capacity(ids.len());
    for &id in ids {
        specs.push(table.row_spec(id as usize)?.with_mode(RoundingMode::Deterministic));
    }

    let mut requantized = Vec::with_capacity(new_weights.len());
    meter.alloc(new_weights.len());
    for (j, spec) in specs.iter().enumerate() {
        for &w in &new_weights[j * d..(j + 1) * d] {
            requantized.push(quant::dequantize(quant::quantize_to_int(w, spec, None)?, spec.delta()));
        }
    }
    let refeed_grads = refeed(&requantized);
    meter.free(new_weights.len());
    drop(requantized);
    let refeed_grads = refeed_grads?;
    check_ids(table, ids, &refeed_grads)?;

    let mut new_deltas = Vec::with_capacity(ids.len());
    let mut clamped = 0;
    for (j, spec) in specs.iter().enumerate() {
        let rows = j * d..(j + 1) * d;
        let raw = lsq_delta_grad(&new_weights[rows.clone()], &refeed_grads[rows], spec)?;
        let (delta, hit_floor) = step.apply(spec.delta(), raw)?;
        clamped += usize::from(hit_floor);
        new_deltas.push(delta);
    }

    let before = snapshot(table, ids);
    let stats = table.scatter_requantize(ids, new_weights, Some(&new_deltas), key)?;
    Ok(WriteBackStats {
        entries: new_weights.len(),
        changed_codes: stats.changed_codes,
        stagnant: count_stagnant(table, ids, &before, new_weights),
        clamped_deltas: clamped,
    })
}

/// One ALPT iteration with SGD on the rows.
pub fn alpt_update<F>(
    table: &mut QuantizedEmbeddingTable,
    ids: &[u32],
    grads_step1: &[f64],
    lr: f64,
    step: &StepSizeUpdate,
    refeed: F,
    key: RoundingKey,
) -> Result<WriteBackStats, RegimeError>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>, RegimeError>,
{
    let mut w = table.gather(ids)?;
    optim::sgd_step(&mut w, grads_step1, lr, 0.0)?;
    let mut meter = FpMeter::default();
    alpt_requantize(table, ids, &w, step, refeed, key, &mut meter)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(delta: f64, mode: RoundingMode, rows: usize, dim: usize) -> QuantizedEmbeddingTable {
        QuantizedEmbeddingTable::zeros(
            rows,
            dim,
            QuantSpec::new(8, delta, mode).unwrap(),
            DeltaLayout::FeatureWise,
        )
        .unwrap()
    }

    fn set_row(t: &mut QuantizedEmbeddingTable, id: u32, w: &[f64]) {
        let delta = t.delta(id as usize);
        let codes: Vec<i32> = w.iter().map(|v| (v / delta).round() as i32).collect();
        t.set_row_codes(id, &codes).unwrap();
    }

    #[test]
    fn qat_examples() {
        let mut w = [0.1];
        qat_update(&mut w, &[0.2], 0.1).unwrap();
        assert!((w[0] - 0.08).abs() < 1e-15);
        let mut w = [0.1, -0.3];
        qat_update(&mut w, &[0.0, 0.0], 0.1).unwrap();
        assert_eq!(w, [0.1, -0.3]);
    }

    #[test]
    fn lsq_delta_chain_rule() {
        // hand composition: grads [1, -2, 0.5] against dQ/dDelta [-0.4, 127, ...]
        let spec = QuantSpec::new(8, 0.01, RoundingMode::Deterministic).unwrap();
        let w = [0.014, 5.0, -0.0262];
        let g = [1.0, -2.0, 0.5];
        // -0.0262/0.01 = -2.62 -> R_D = -3 -> -3 + 2.62 = -0.38
        let expected = 1.0 * -0.4 + -2.0 * 127.0 + 0.5 * -0.38;
        assert!((lsq_delta_grad(&w, &g, &spec).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn pact_helpers() {
        assert_eq!(pact_alpha_grad(&[2.0, -2.0, 0.05], &[1.0, 1.0, 1.0], 0.1).unwrap(), 0.0);
        assert_eq!(pact_alpha_grad(&[2.0, -2.0, 0.05], &[1.0, -1.0, 3.0], 0.1).unwrap(), 2.0);
        let q = pact_quantize(5.0, 1.27, 8).unwrap();
        assert!((q - 1.27).abs() < 1e-12);
        assert!(pact_quantize(0.0, 0.0, 8).is_err());
    }

    #[test]
    fn lpt_dr_rounds_update() {
        let mut t = table(0.01, RoundingMode::Deterministic, 1, 1);
        set_row(&mut t, 0, &[0.05]);
        assert_eq!(t.code(0, 0), 5);
        // 0.05 - 0.1 * 0.123 = 0.0377 -> 3.77 -> 4
        let st = lpt_update(&mut t, &[0], &[0.123], 0.1, None, RoundingKey { seed: 1, iteration: 1 }).unwrap();
        assert_eq!(t.code(0, 0), 4);
        assert!((t.gather(&[0]).unwrap()[0] - 0.04).abs() < 1e-9);
        assert_eq!(st.stagnant, 0);
    }

    #[test]
    fn lpt_dr_erases_small_update() {
        let mut t = table(0.01, RoundingMode::Deterministic, 1, 1);
        set_row(&mut t, 0, &[0.05]);
        let st = lpt_update(&mut t, &[0], &[0.003], 0.1, None, RoundingKey { seed: 1, iteration: 1 }).unwrap();
        assert_eq!(t.code(0, 0), 5);
        assert_eq!(st.stagnant, 1);
    }

    #[test]
    fn lpt_sr_small_update_probability() {
        let n = 100_000u64;
        let mut down = 0u64;
        for it in 0..n {
            let mut t = table(0.01, RoundingMode::Stochastic, 1, 1);
            set_row(&mut t, 0, &[0.05]);
            lpt_update(&mut t, &[0], &[0.003], 0.1, None, RoundingKey { seed: 5, iteration: it + 1 }).unwrap();
            match t.code(0, 0) {
                4 => down += 1,
                5 => {}
                c => panic!("code {c}"),
            }
        }
        let p = down as f64 / n as f64;
        let sigma = (0.03f64 * 0.97 / n as f64).sqrt();
        assert!((p - 0.03).abs() < 4.0 * sigma, "p {p}");
    }

    #[test]
    fn lpt_clip_applies_before_quantizing() {
        let mut t = table(0.001, RoundingMode::Deterministic, 1, 2);
        let mut w = vec![0.5, -0.5];
        lpt_requantize(&mut t, &[0], &mut w, Some(0.01), RoundingKey { seed: 0, iteration: 1 }).unwrap();
        assert_eq!(t.row_codes(0), vec![10, -10]);
    }

    #[test]
    fn dr_stagnation_with_frozen_gradient_feed() {
        let mut t = table(0.01, RoundingMode::Deterministic, 3, 2);
        set_row(&mut t, 0, &[0.05, -0.03]);
        set_row(&mut t, 1, &[0.5, 0.0]);
        let before = t.clone();
        for it in 1..=500u64 {
            let lr = 1.0 / (it as f64).sqrt();
            // |lr * g| < delta / 2 always
            let g = [0.0049, -0.0049, 0.004, -0.001];
            lpt_update(&mut t, &[0, 1], &g, lr, None, RoundingKey { seed: 3, iteration: it }).unwrap();
        }
        assert_eq!(t, before);
    }

    #[test]
    fn alpt_zero_refeed_keeps_step_size() {
        let mut t = table(0.01, RoundingMode::Stochastic, 2, 2);
        let step = StepSizeUpdate::sgd(0.001, 1.0);
        alpt_update(
            &mut t,
            &[0, 1],
            &[0.1, -0.2, 0.3, 0.0],
            0.1,
            &step,
            |q| Ok(vec![0.0; q.len()]),
            RoundingKey { seed: 2, iteration: 1 },
        )
        .unwrap();
        assert_eq!(t.delta(0), 0.01f32 as f64);
        assert_eq!(t.delta(1), 0.01f32 as f64);
    }

    #[test]
    fn alpt_scalar_step_size_update() {
        // w^{t+1} = 0.014 with delta 0.01: dQ/dDelta = R_D(1.4) - 1.4 = -0.4.
        // delta' = 0.01 - 0.001 * (1/sqrt(127)) * (1.0 * -0.4)
        let mut t = table(0.01, RoundingMode::Stochastic, 1, 1);
        let g = GradScale::Bdq.factor(1, 1, 8);
        assert!((g - 1.0 / 127f64.sqrt()).abs() < 1e-15);
        let step = StepSizeUpdate::sgd(0.001, g);
        let mut seen = Vec::new();
        let mut meter = FpMeter::default();
        alpt_requantize(
            &mut t,
            &[0],
            &[0.014],
            &step,
            |q| {
                seen.extend_from_slice(q);
                Ok(vec![1.0])
            },
            RoundingKey { seed: 2, iteration: 1 },
            &mut meter,
        )
        .unwrap();
        let expected = 0.01f32 as f64 - 0.001 * g * -0.4;
        assert!((expected - 0.0100355).abs() < 1e-7);
        assert!((t.delta(0) - expected).abs() < 1e-9, "{}", t.delta(0));
        // the refeed saw Q_D(0.014, 0.01) = 0.01
        assert!((seen[0] - 0.01).abs() < 1e-9);
        assert_eq!(meter.live(), 0);
        assert_eq!(meter.peak_transient(), 1);
    }

    #[test]
    fn alpt_rows_update_independently() {
        let mut t = table(0.01, RoundingMode::Stochastic, 3, 1);
        let step = StepSizeUpdate::sgd(0.001, 1.0);
        let mut meter = FpMeter::default();
        alpt_requantize(
            &mut t,
            &[0, 2],
            &[0.014, 0.014],
            &step,
            |_| Ok(vec![1.0, 0.0]),
            RoundingKey { seed: 2, iteration: 1 },
            &mut meter,
        )
        .unwrap();
        assert!(t.delta(0) > 0.01f32 as f64);
        assert_eq!(t.delta(1), 0.01f32 as f64);
        assert_eq!(t.delta(2), 0.01f32 as f64);
    }

    #[test]
    fn alpt_clamps_at_floor() {
        let mut t = table(0.01, RoundingMode::Stochastic, 1, 1);
        let step = StepSizeUpdate::sgd(1.0, 1.0);
        let mut meter = FpMeter::default();
        let st = alpt_requantize(
            &mut t,
            &[0],
            &[5.0],
            &step,
            |_| Ok(vec![1.0]),
            RoundingKey { seed: 2, iteration: 1 },
            &mut meter,
        )
        .unwrap();
        assert_eq!(st.clamped_deltas, 1);
        assert!((t.delta(0) - DELTA_FLOOR).abs() < 1e-12);
    }

    #[test]
    fn alpt_requires_feature_wise() {
        let mut t = QuantizedEmbeddingTable::zeros(
            1,
            1,
            QuantSpec::new(8, 0.01, RoundingMode::Stochastic).unwrap(),
            DeltaLayout::Global,
        )
        .unwrap();
        let step = StepSizeUpdate::sgd(0.001, 1.0);
        let r = alpt_update(&mut t, &[0], &[0.0], 0.1, &step, |q| Ok(q.to_vec()), RoundingKey { seed: 0, iteration: 1 });
        assert!(matches!(r, Err(RegimeError::NeedsFeatureWise)));
    }

    #[test]
    fn alpt_with_zero_step_lr_matches_lpt_sr() {
        let init = QuantizedEmbeddingTable::init(
            50,
            4,
            QuantSpec::new(8, 1.0, RoundingMode::Stochastic).unwrap(),
            DeltaLayout::FeatureWise,
            0.05,
            None,
            8,
        )
        .unwrap();
        let mut a = init.clone();
        let mut b = init;
        let step = StepSizeUpdate::sgd(0.0, 1.0);
        for it in 1..=50u64 {
            let ids: Vec<u32> = (0..10).map(|i| ((i * 7 + it * 3) % 50) as u32).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
            let grads: Vec<f64> = (0..ids.len() * 4).map(|i| ((i as f64 + it as f64) * 0.37).sin() * 0.01).collect();
            let key = RoundingKey { seed: 77, iteration: it };
            lpt_update(&mut a, &ids, &grads, 0.05, None, key).unwrap();
            alpt_update(&mut b, &ids, &grads, 0.05, &step, |q| Ok(q.iter().map(|v| v * 3.0).collect()), key).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn grad_scale_factors() {
        assert_eq!(GradScale::None.factor(256, 16, 8), 1.0);
        assert!((GradScale::Dq.factor(256, 16, 8) - 1.0 / (16.0f64 * 127.0).sqrt()).abs() < 1e-15);
        assert!((GradScale::Bdq.factor(256, 16, 8) - 1.0 / (256.0f64 * 16.0 * 127.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn meter_tracks_peak() {
        let mut m = FpMeter::default();
        m.alloc(10);
        m.alloc(5);
        m.free(15);
        m.alloc(3);
        assert_eq!(m.peak_transient(), 15);
        assert_eq!(m.live(), 3);
        m.hold(100);
        assert_eq!(m.persistent(), 100);
    }
}
