//! Convex test bed for low-precision SGD.
//!
//! Every coordinate is an independent one-dimensional problem
//! `f(w) = (w - 0.5)^2`, so a run over `n` coordinates is `n` i.i.d. instances
//! with `d = 1`. Diameter and gradient bound are taken over the quantizer's
//! representable range.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::{OptimError, Schedule};
use crate::quant::{self, QuantError, QuantSpec, RngStream, RoundingMode};

pub const OPTIMUM: f64 = 0.5;
pub const HISTOGRAM_BINS: usize = 50;
pub const DEFAULT_SNAPSHOTS: [u64; 3] = [10, 100, 1000];

// Relative float slack for per-coordinate residual checks.
const RESIDUAL_SLACK: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum LabError {
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("invalid lab parameter {name} = {value}")]
    Parameter { name: &'static str, value: f64 },
    #[error("trajectory has {have} steps, {want} requested")]
    TooShort { have: u64, want: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabRegime {
    Fp,
    LptDr,
    LptSr,
}

impl LabRegime {
    pub const ALL: [LabRegime; 3] = [LabRegime::Fp, LabRegime::LptDr, LabRegime::LptSr];

    pub fn name(self) -> &'static str {
        match self {
            LabRegime::Fp => "fp",
            LabRegime::LptDr => "lpt-dr",
            LabRegime::LptSr => "lpt-sr",
        }
    }

    pub fn rounding(self) -> Option<RoundingMode> {
        match self {
            LabRegime::Fp => None,
            LabRegime::LptDr => Some(RoundingMode::Deterministic),
            LabRegime::LptSr => Some(RoundingMode::Stochastic),
        }
    }
}

impl std::str::FromStr for LabRegime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fp" => Ok(LabRegime::Fp),
            "lpt-dr" => Ok(LabRegime::LptDr),
            "lpt-sr" => Ok(LabRegime::LptSr),
            other => Err(format!("unknown lab regime {other:?}")),
        }
    }
}

/// Inputs to the bound formulas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub diameter: f64,
    pub grad_bound: f64,
    pub dim: usize,
    pub eta: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexProblemSpec {
    pub params: usize,
    pub bits: u8,
    pub delta: f64,
    pub schedule: Schedule,
}

impl Default for ConvexProblemSpec {
    fn default() -> Self {
        Self {
            params: 1000,
            bits: 8,
            delta: 0.01,
            schedule: Schedule::inverse_sqrt(1.0),
        }
    }
}

impl ConvexProblemSpec {
    pub fn validate(&self) -> Result<(), LabError> {
        if self.params == 0 {
            return Err(LabError::Parameter {
                name: "params",
                value: 0.0,
            });
        }
        if !(self.schedule.base_lr.is_finite() && self.schedule.base_lr > 0.0) {
            return Err(LabError::Parameter {
                name: "eta",
                value: self.schedule.base_lr,
            });
        }
        self.quant_spec(RoundingMode::Deterministic)?;
        Ok(())
    }

    pub fn quant_spec(&self, mode: RoundingMode) -> Result<QuantSpec, QuantError> {
        QuantSpec::new(self.bits, self.delta, mode)
    }

    /// `[-2^(m-1) delta, (2^(m-1) - 1) delta]`
    pub fn representable_range(&self) -> (f64, f64) {
        (
            f64::from(quant::code_min(self.bits)) * self.delta,
            f64::from(quant::code_max(self.bits)) * self.delta,
        )
    }

    pub fn diameter(&self) -> f64 {
        let (lo, hi) = self.representable_range();
        hi - lo
    }

    /// `sup |f'(w)| = 2 max |w - 0.5|` over the representable range.
    pub fn grad_bound(&self) -> f64 {
        let (lo, hi) = self.representable_range();
        2.0 * (lo - OPTIMUM).abs().max((hi - OPTIMUM).abs())
    }

    pub fn bound_inputs(&self) -> BoundInputs {
        BoundInputs {
            diameter: self.diameter(),
            grad_bound: self.grad_bound(),
            dim: 1,
            eta: self.schedule.base_lr,
            delta: self.delta,
        }
    }

    pub fn t0(&self) -> u64 {
        t0(&self.bound_inputs())
    }
}

pub fn objective(w: f64) -> f64 {
    (w - OPTIMUM) * (w - OPTIMUM)
}

pub fn gradient(w: f64) -> f64 {
    2.0 * (w - OPTIMUM)
}

/// `floor(2 eta G / (sqrt(d) delta))`, zero when `delta = 0`.
pub fn t0(b: &BoundInputs) -> u64 {
    if b.delta <= 0.0 {
        return 0;
    }
    let x = 2.0 * b.eta * b.grad_bound / ((b.dim as f64).sqrt() * b.delta);
    // 4 / 0.01 and friends can land one ulp under the integer they denote
    let nearest = x.round();
    if (x - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest as u64
    } else {
        x.floor() as u64
    }
}

/// Stochastic-rounding bound:
/// `D^2 / (2 eta sqrt(T)) + eta G^2 / sqrt(T) + sqrt(d) delta G / 2`.
pub fn sr_bound(b: &BoundInputs, t: u64) -> f64 {
    let st = (t.max(1) as f64).sqrt();
    b.diameter * b.diameter / (2.0 * b.eta * st)
        + b.eta * b.grad_bound * b.grad_bound / st
        + (b.dim as f64).sqrt() * b.delta * b.grad_bound / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrBoundTerms {
    pub t0: u64,
    pub distance: f64,
    pub gradient: f64,
    pub floor: f64,
    pub early: f64,
    pub late: f64,
    pub total: f64,
}

/// Deterministic-rounding bound, split into its five terms.
pub fn dr_bound(b: &BoundInputs, t: u64) -> DrBoundTerms {
    let t = t.max(1);
    let tf = t as f64;
    let st = tf.sqrt();
    let sd = (b.dim as f64).sqrt();
    let t0 = t0(b);
    let distance = b.diameter * b.diameter / (2.0 * b.eta * st);
    let gradient = 3.0 * b.eta * b.grad_bound * b.grad_bound / st;
    let floor = sd * b.delta * b.grad_bound / 2.0;
    let early = if b.delta > 0.0 {
        let sum: f64 = (1..=t0.min(t)).map(|s| (s as f64).sqrt()).sum();
        sd * b.diameter * b.delta * sum / (2.0 * b.eta * tf)
    } else {
        0.0
    };
    let late = t.saturating_sub(t0) as f64 * b.diameter * b.grad_bound / tf;
    DrBoundTerms {
        t0,
        distance,
        gradient,
        floor,
        early,
        late,
        total: distance + gradient + floor + early + late,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub t: u64,
    pub bin_left: Vec<f64>,
    pub counts: Vec<u32>,
    pub below: u32,
    pub above: u32,
}

impl Histogram {
    /// Uniform bins over `[0, 1]`; the last bin is closed on the right.
    pub fn of(t: u64, values: &[f64]) -> Self {
        let width = 1.0 / HISTOGRAM_BINS as f64;
        let mut counts = vec![0u32; HISTOGRAM_BINS];
        let (mut below, mut above) = (0, 0);
        for &v in values {
            if v < 0.0 {
                below += 1;
            } else if v > 1.0 {
                above += 1;
            } else {
                let b = ((v / width) as usize).min(HISTOGRAM_BINS - 1);
                counts[b] += 1;
            }
        }
        Self {
            t,
            bin_left: (0..HISTOGRAM_BINS).map(|i| i as f64 * width).collect(),
            counts,
            below,
            above,
        }
    }
}

/// Per-update aggregates over all coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based update index; the update takes `w^t` to `w^{t+1}`.
    pub t: u64,
    pub lr: f64,
    /// Coordinates with `|lr * f'(w)| < delta / 2`.
    pub below_half_step: usize,
    /// Coordinates whose value changed in this update.
    pub changed: usize,
    /// Mean of `r^2` with `r = Q(x) - x`, `x = w - lr f'(w)`.
    pub residual_sq_mean: f64,
    pub residual_sq_max: f64,
    pub residual_sum: f64,
    /// Sum over coordinates of the rounding variance `delta^2 p (1 - p)`.
    pub rounding_var_sum: f64,
    /// Coordinates where `r^2 > delta^2 / 4`.
    pub half_step_violations: usize,
    /// Coordinates where `r^2 > (lr f'(w))^2`.
    pub update_violations: usize,
    /// Mean of `f(wbar^{t})` with `wbar^t` the average of `w^1..w^t`.
    pub suboptimality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub regime: LabRegime,
    pub seed: u64,
    pub spec: ConvexProblemSpec,
    pub initial: Vec<f64>,
    pub last: Vec<f64>,
    pub steps: Vec<StepRecord>,
    pub snapshots: Vec<Histogram>,
    /// First update index at which every coordinate had
    /// `|lr f'(w)| < delta / 2`.
    pub all_below_half_step_at: Option<u64>,
    /// Whether no coordinate changed after `all_below_half_step_at`.
    pub frozen_after: bool,
}

impl Trajectory {
    pub fn iterations(&self) -> u64 {
        self.steps.len() as u64
    }

    /// `mean_i f(wbar_i^T)`.
    pub fn suboptimality(&self, t: u64) -> Result<f64, LabError> {
        if t == 0 || t > self.iterations() {
            return Err(LabError::TooShort {
                have: self.iterations(),
                want: t,
            });
        }
        Ok(self.steps[(t - 1) as usize].suboptimality)
    }
}

/// Run coordinate-wise SGD for `iterations` updates.
///
/// Coordinates start uniform in `[0, 1)`, quantized with the regime's rounding
/// mode. Coordinate `i` draws its start and all of its rounding decisions from
/// its own stream, so results do not depend on evaluation order.
pub fn run_synthetic(
    regime: LabRegime,
    spec: &ConvexProblemSpec,
    iterations: u64,
    seed: u64,
    snapshots: &[u64],
) -> Result<Trajectory, LabError> {
    spec.validate()?;
    let n = spec.params;
    let qspec = regime.rounding().map(|m| spec.quant_spec(m)).transpose()?;
    let delta = spec.delta;

    let mut rngs: Vec<RngStream> = (0..n as u64).map(|i| RngStream::keyed(seed, i, 0)).collect();
    let mut w = Vec::with_capacity(n);
    for rng in rngs.iter_mut() {
        let u = rng.next_unit();
        w.push(match &qspec {
            Some(q) => quant::dequantize(quant::quantize_to_int(u, q, Some(rng))?, delta),
            None => u,
        });
    }
    let initial = w.clone();
    let mut sum = vec![0.0; n];
    let mut steps = Vec::with_capacity(iterations as usize);
    let mut hists = Vec::new();
    let mut all_below_at = None;
    let mut frozen_after = true;

    for t in 1..=iterations {
        // w currently holds w^t
        let mut sub = 0.0;
        for i in 0..n {
            sum[i] += w[i];
            sub += objective(sum[i] / t as f64);
        }
        let lr = spec.schedule.lr_at(t)?;
        let mut rec = StepRecord {
            t,
            lr,
            below_half_step: 0,
            changed: 0,
            residual_sq_mean: 0.0,
            residual_sq_max: 0.0,
            residual_sum: 0.0,
            rounding_var_sum: 0.0,
            half_step_violations: 0,
            update_violations: 0,
            suboptimality: sub / n as f64,
        };
        let mut sq_sum = 0.0;
        for i in 0..n {
            let step = lr * gradient(w[i]);
            if step.abs() < delta / 2.0 {
                rec.below_half_step += 1;
            }
            let x = w[i] - step;
            let next = match &qspec {
                Some(q) => {
                    let scaled = x / delta;
                    let p = scaled - scaled.floor();
                    rec.rounding_var_sum += delta * delta * p * (1.0 - p);
                    quant::dequantize(quant::quantize_to_int(x, q, Some(&mut rngs[i]))?, delta)
                }
                None => x,
            };
            let r = next - x;
            let r2 = r * r;
            sq_sum += r2;
            rec.residual_sum += r;
            rec.residual_sq_max = rec.residual_sq_max.max(r2);
            if r2 > delta * delta / 4.0 * (1.0 + RESIDUAL_SLACK) && qspec.is_some() {
                rec.half_step_violations += 1;
            }
            if r2 > step * step * (1.0 + RESIDUAL_SLACK) {
                rec.update_violations += 1;
            }
            if next != w[i] {
                rec.changed += 1;
            }
            w[i] = next;
        }
        rec.residual_sq_mean = sq_sum / n as f64;
        if all_below_at.is_some() && rec.changed > 0 {
            frozen_after = false;
        }
        if all_below_at.is_none() && rec.below_half_step == n {
            all_below_at = Some(t);
            if rec.changed > 0 {
                frozen_after = false;
            }
        }
        steps.push(rec);
        if snapshots.contains(&t) {
            hists.push(Histogram::of(t, &w));
        }
    }

    Ok(Trajectory {
        regime,
        seed,
        spec: spec.clone(),
        initial,
        last: w,
        steps,
        snapshots: hists,
        all_below_half_step_at: all_below_at,
        frozen_after,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub regime: LabRegime,
    pub seed: u64,
    pub t: u64,
    pub t0: u64,
    pub sr_bound: f64,
    pub dr_bound: DrBoundTerms,
    pub measured: f64,
    /// The inequality that applies to this regime.
    pub bound: f64,
    pub holds: bool,
    /// Mean squared quantization error of updates `1..=t`.
    pub residual_sq: Vec<f64>,
}

/// Bound report for a quantized trajectory at `t`. Stochastic runs are held to
/// the first bound, deterministic runs to the second. Full-precision runs have
/// no report.
pub fn bound_report(traj: &Trajectory, t: u64) -> Result<Option<BoundReport>, LabError> {
    let mode = match traj.regime.rounding() {
        Some(m) => m,
        None => return Ok(None),
    };
    let measured = traj.suboptimality(t)?;
    let b = traj.spec.bound_inputs();
    let sr = sr_bound(&b, t);
    let dr = dr_bound(&b, t);
    let bound = match mode {
        RoundingMode::Stochastic => sr,
        RoundingMode::Deterministic => dr.total,
    };
    Ok(Some(BoundReport {
        regime: traj.regime,
        seed: traj.seed,
        t,
        t0: dr.t0,
        sr_bound: sr,
        dr_bound: dr,
        measured,
        bound,
        holds: measured <= bound,
        residual_sq: traj.steps[..t as usize].iter().map(|s| s.residual_sq_mean).collect(),
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualViolation {
    pub t: u64,
    pub check: String,
    pub measured: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub coordinate_steps: u64,
    /// Largest `measured / bound` over steps, for each aggregate check.
    pub max_ratio_linear: f64,
    pub max_ratio_min: f64,
    pub violations: Vec<ResidualViolation>,
}

impl ResidualReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check quantization residuals of a deterministic run against
///
/// * per coordinate: `r^2 <= delta^2 / 4` and `r^2 <= (lr f'(w))^2`;
/// * mean over coordinates: `<= sqrt(d) delta lr G` and
///   `<= min(d delta^2 / 4, lr^2 G^2)`.
pub fn residual_check(traj: &Trajectory) -> ResidualReport {
    let b = traj.spec.bound_inputs();
    let d = b.dim as f64;
    let mut report = ResidualReport {
        coordinate_steps: 0,
        max_ratio_linear: 0.0,
        max_ratio_min: 0.0,
        violations: Vec::new(),
    };
    for s in &traj.steps {
        report.coordinate_steps += traj.spec.params as u64;
        let l1 = d.sqrt() * b.delta * s.lr * b.grad_bound;
        let l2 = (d * b.delta * b.delta / 4.0).min(s.lr * s.lr * b.grad_bound * b.grad_bound);
        let r1 = s.residual_sq_mean / l1;
        let r2 = s.residual_sq_mean / l2;
        report.max_ratio_linear = report.max_ratio_linear.max(r1);
        report.max_ratio_min = report.max_ratio_min.max(r2);
        let mut flag = |check: &str, measured: f64, bound: f64| {
            report.violations.push(ResidualViolation {
                t: s.t,
                check: check.to_string(),
                measured,
                bound,
            })
        };
        if s.residual_sq_mean > l1 * (1.0 + RESIDUAL_SLACK) {
            flag("mean-sq <= sqrt(d) delta lr G", s.residual_sq_mean, l1);
        }
        if s.residual_sq_mean > l2 * (1.0 + RESIDUAL_SLACK) {
            flag("mean-sq <= min(d delta^2/4, lr^2 G^2)", s.residual_sq_mean, l2);
        }
        if s.half_step_violations > 0 {
            flag("coord r^2 <= delta^2/4", s.residual_sq_max, b.delta * b.delta / 4.0);
        }
        if s.update_violations > 0 {
            flag("coord r^2 <= (lr f')^2", s.update_violations as f64, 0.0);
        }
    }
    report
}

/// Pooled test of `E[r] = 0` over every coordinate-step:
/// returns `(|sum r|, 4 sqrt(sum var))`.
pub fn rounding_bias_check(traj: &Trajectory) -> (f64, f64) {
    let sum: f64 = traj.steps.iter().map(|s| s.residual_sum).sum();
    let var: f64 = traj.steps.iter().map(|s| s.rounding_var_sum).sum();
    (sum.abs(), 4.0 * var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ConvexProblemSpec {
        ConvexProblemSpec::default()
    }

    #[test]
    fn representable_constants() {
        let s = spec();
        let (lo, hi) = s.representable_range();
        assert!((lo + 1.28).abs() < 1e-12 && (hi - 1.27).abs() < 1e-12);
        assert!((s.diameter() - 2.55).abs() < 1e-12);
        assert!((s.grad_bound() - 3.56).abs() < 1e-12);
        assert_eq!(s.t0(), 712);
    }

    #[test]
    fn t0_examples() {
        let b = BoundInputs {
            diameter: 1.0,
            grad_bound: 2.0,
            dim: 1,
            eta: 1.0,
            delta: 0.01,
        };
        assert_eq!(t0(&b), 400);
        assert_eq!(t0(&BoundInputs { delta: 0.0, ..b }), 0);
        assert_eq!(t0(&BoundInputs { delta: 0.03, ..b }), 133);
    }

    #[test]
    fn sr_bound_limits() {
        let b = spec().bound_inputs();
        let (d, g, eta) = (b.diameter, b.grad_bound, b.eta);
        let z = BoundInputs { delta: 0.0, ..b };
        let t = 100u64;
        let classic = d * d / (2.0 * eta * 10.0) + eta * g * g / 10.0;
        assert!((sr_bound(&z, t) - classic).abs() < 1e-12);
        let far = sr_bound(&b, 10u64.pow(16));
        assert!((far - b.delta * g / 2.0).abs() < 1e-6);
        // 2.55^2/(2*sqrt(1000)) + 3.56^2/sqrt(1000) + 0.01*3.56/2
        let v = sr_bound(&b, 1000);
        let hand = 6.5025 / (2.0 * 1000f64.sqrt()) + 12.6736 / 1000f64.sqrt() + 0.0178;
        assert!((v - hand).abs() < 1e-12);
    }

    #[test]
    fn dr_bound_terms() {
        let b = spec().bound_inputs();
        let z = BoundInputs { delta: 0.0, ..b };
        let r = dr_bound(&z, 100);
        assert_eq!(r.t0, 0);
        assert_eq!(r.floor, 0.0);
        assert_eq!(r.early, 0.0);
        // with delta = 0 every step is "late"; this term is the DG floor
        assert!((r.late - b.diameter * b.grad_bound).abs() < 1e-12);

        // T <= T0: late term empty
        let r = dr_bound(&b, 500);
        assert_eq!(r.t0, 712);
        assert_eq!(r.late, 0.0);
        let direct: f64 = (1..=500).map(|s| (s as f64).sqrt()).sum::<f64>() * b.diameter * b.delta / (2.0 * 500.0);
        assert!((r.early - direct).abs() < 1e-12);

        // T >> T0: late term approaches DG
        let r = dr_bound(&b, 10_000_000);
        assert!((r.late - b.diameter * b.grad_bound).abs() < 1e-3);

        for t in [1, 10, 100, 712, 713, 1000, 5000] {
            let r = dr_bound(&b, t);
            assert!(r.total >= sr_bound(&b, t));
            assert!(r.gradient >= b.eta * b.grad_bound * b.grad_bound / (t as f64).sqrt());
            let sum = r.distance + r.gradient + r.floor + r.early + r.late;
            assert!((r.total - sum).abs() < 1e-12);
        }
    }

    #[test]
    fn fp_first_step_reflects() {
        let tr = run_synthetic(LabRegime::Fp, &spec(), 2, 3, &[]).unwrap();
        let first = run_synthetic(LabRegime::Fp, &spec(), 1, 3, &[]).unwrap();
        for (a, b) in tr.initial.iter().zip(&first.last) {
            assert!((b - (1.0 - a)).abs() < 1e-15);
        }
    }

    #[test]
    fn quantized_start_is_on_grid() {
        for r in [LabRegime::LptDr, LabRegime::LptSr] {
            let tr = run_synthetic(r, &spec(), 1, 9, &[]).unwrap();
            for &w in &tr.initial {
                let k = w / 0.01;
                assert!((k - k.round()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn dr_freezes() {
        let tr = run_synthetic(LabRegime::LptDr, &spec(), 1000, 1, &DEFAULT_SNAPSHOTS).unwrap();
        let at = tr.all_below_half_step_at.unwrap();
        assert!(at <= 15, "{at}");
        assert!(tr.frozen_after);
        assert_eq!(tr.snapshots.len(), 3);
        assert_eq!(tr.snapshots[1].counts, tr.snapshots[2].counts);
        for s in &tr.steps[at as usize..] {
            assert_eq!(s.changed, 0);
        }
    }

    #[test]
    fn residual_checks_pass_on_dr() {
        let tr = run_synthetic(LabRegime::LptDr, &spec(), 1000, 4, &[]).unwrap();
        let rep = residual_check(&tr);
        assert!(rep.passed(), "{:?}", &rep.violations[..rep.violations.len().min(5)]);
        assert_eq!(rep.coordinate_steps, 1_000_000);
        assert!(rep.max_ratio_min <= 1.0 + 1e-9);
    }

    #[test]
    fn bound_reports() {
        let fp = run_synthetic(LabRegime::Fp, &spec(), 100, 2, &[]).unwrap();
        assert!(bound_report(&fp, 100).unwrap().is_none());
        let sr = run_synthetic(LabRegime::LptSr, &spec(), 100, 2, &[]).unwrap();
        let rep = bound_report(&sr, 100).unwrap().unwrap();
        assert_eq!(rep.bound, rep.sr_bound);
        assert!(rep.holds);
        assert_eq!(rep.residual_sq.len(), 100);
        assert!(bound_report(&sr, 101).is_err());
    }

    #[test]
    fn histogram_bins() {
        let h = Histogram::of(1, &[0.0, 0.019, 0.02, 0.5, 1.0, -0.1, 1.2]);
        assert_eq!(h.counts.len(), 50);
        assert_eq!(h.counts[0], 2);
        assert_eq!(h.counts[1], 1);
        assert_eq!(h.counts[25], 1);
        assert_eq!(h.counts[49], 1);
        assert_eq!((h.below, h.above), (1, 1));
        assert!((h.bin_left[1] - 0.02).abs() < 1e-15);
    }

    #[test]
    fn constant_schedule_oscillates_in_fp() {
        let s = ConvexProblemSpec {
            schedule: Schedule::constant(1.0),
            ..spec()
        };
        let tr = run_synthetic(LabRegime::Fp, &s, 11, 5, &[]).unwrap();
        for (a, b) in tr.initial.iter().zip(&tr.last) {
            assert!((b - (1.0 - a)).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = run_synthetic(LabRegime::LptSr, &spec(), 200, 11, &[10, 100]).unwrap();
        let b = run_synthetic(LabRegime::LptSr, &spec(), 200, 11, &[10, 100]).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = run_synthetic(LabRegime::LptSr, &spec(), 200, 12, &[10, 100]).unwrap();
        assert_ne!(a.initial, c.initial);
    }
}
