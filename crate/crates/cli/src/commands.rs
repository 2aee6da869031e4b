use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use log::{info, warn};
use serde::Serialize;
use toml::{Table, Value};

use lpq_core::data::{self, DataError, DatasetKind, InputSchema};
use lpq_core::lab::{self, ConvexProblemSpec, LabError, LabRegime};
use lpq_core::optim::Schedule;
use lpq_core::quant::{self, QuantError};
use lpq_core::regimes::{RegimeError, RegimeKind};
use lpq_core::store::StoreError;
use lpq_core::train::{self, MetricRecord, RunManifest, Split, TrainError};

use crate::config;
use crate::{BoundsArgs, LabArgs, PreprocessArgs, TrainArgs};

pub const OTHER: u8 = 1;
pub const CONFIG: u8 = 2;
pub const NUMERIC: u8 = 3;
pub const INVARIANT: u8 = 4;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

fn with<E: Into<anyhow::Error>>(code: u8) -> impl FnOnce(E) -> Failure {
    move |e| Failure { code, error: e.into() }
}

fn invariant(msg: String) -> Failure {
    Failure {
        code: INVARIANT,
        error: anyhow!(msg),
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        with(OTHER)(e)
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        with(OTHER)(e)
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        with(OTHER)(e)
    }
}

fn quant_code(e: &QuantError) -> u8 {
    match e {
        QuantError::NonFinite(_) => NUMERIC,
        QuantError::InvalidBits(_) | QuantError::InvalidDelta(_) | QuantError::InvalidParameter { .. } => CONFIG,
        _ => INVARIANT,
    }
}

fn store_code(e: &StoreError) -> u8 {
    match e {
        StoreError::Quant(q) => quant_code(q),
        StoreError::InitScale(_) | StoreError::EmptyTable { .. } => CONFIG,
        StoreError::Io(_) | StoreError::Checkpoint(_) => OTHER,
        _ => INVARIANT,
    }
}

fn data_code(e: &DataError) -> u8 {
    match e {
        DataError::Empty
        | DataError::Threshold
        | DataError::MissingColumn(_)
        | DataError::TooFewToSplit(_)
        | DataError::Parameter { .. } => CONFIG,
        DataError::TooManyMalformed { .. } => INVARIANT,
        DataError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => CONFIG,
        _ => OTHER,
    }
}

fn train_code(e: &TrainError) -> u8 {
    match e {
        TrainError::Config(_) => CONFIG,
        TrainError::NonFinite { .. } => NUMERIC,
        TrainError::Quant(q) => quant_code(q),
        TrainError::Store(s) => store_code(s),
        TrainError::Regime(r) => match r {
            RegimeError::Quant(q) => quant_code(q),
            RegimeError::Store(s) => store_code(s),
            _ => INVARIANT,
        },
        TrainError::Model(_) | TrainError::Optim(_) => INVARIANT,
        TrainError::Data(d) => data_code(d),
        TrainError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => CONFIG,
        TrainError::Io(_) | TrainError::Json(_) => OTHER,
    }
}

fn train_failure(e: TrainError) -> Failure {
    Failure {
        code: train_code(&e),
        error: e.into(),
    }
}

fn lab_failure(e: LabError) -> Failure {
    let code = match &e {
        LabError::Parameter { .. } | LabError::TooShort { .. } => CONFIG,
        LabError::Quant(q) => quant_code(q),
        LabError::Optim(_) => INVARIANT,
    };
    Failure { code, error: e.into() }
}

fn print_json<T: Serialize>(v: &T) -> Result<(), Failure> {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), Failure> {
    std::fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

#[derive(Serialize)]
struct FieldReport<'a> {
    name: &'a str,
    kept_tokens: usize,
    collapsed_tokens: u64,
    collapsed_occurrences: u64,
}

#[derive(Serialize)]
struct IngestReport<'a> {
    kind: DatasetKind,
    threshold: u64,
    rows: usize,
    malformed: usize,
    samples: usize,
    vocab_size: u32,
    total_collapsed_tokens: u64,
    fields: Vec<FieldReport<'a>>,
    schema: &'a InputSchema,
}

pub fn preprocess(a: &PreprocessArgs) -> Result<(), Failure> {
    let kind = match a.kind.as_str() {
        "criteo" => DatasetKind::Criteo,
        "avazu" => DatasetKind::Avazu,
        _ => DatasetKind::Generic,
    };
    let threshold = a.threshold.unwrap_or_else(|| kind.default_threshold());
    let input = File::open(&a.input)
        .with_context(|| format!("opening {}", a.input.display()))
        .map_err(with(CONFIG))?;
    let fail = |e: DataError| Failure {
        code: data_code(&e),
        error: e.into(),
    };
    let (table, schema, stats) = data::read_delimited(BufReader::new(input), kind).map_err(fail)?;
    if stats.malformed > 0 {
        warn!("skipped {} malformed rows of {}", stats.malformed, stats.rows);
    }
    let vocab = data::build_vocab(&table, threshold).map_err(fail)?;
    let encoded = data::encode(&table, &vocab);

    std::fs::create_dir_all(&a.out)?;
    let mut w = BufWriter::new(File::create(a.out.join("dataset.bin"))?);
    encoded.write(&mut w).map_err(fail)?;
    w.flush()?;
    write_json(&a.out.join("vocab.json"), &vocab)?;
    let report = IngestReport {
        kind,
        threshold,
        rows: stats.rows,
        malformed: stats.malformed,
        samples: encoded.samples(),
        vocab_size: vocab.size,
        total_collapsed_tokens: vocab.total_collapsed(),
        fields: vocab
            .fields
            .iter()
            .map(|f| FieldReport {
                name: &f.name,
                kept_tokens: f.tokens.len(),
                collapsed_tokens: f.collapsed_tokens,
                collapsed_occurrences: f.collapsed_occurrences,
            })
            .collect(),
        schema: &schema,
    };
    write_json(&a.out.join("ingest.json"), &report)?;
    info!(
        "{} samples, {} fields, vocabulary {} ({} tokens collapsed)",
        report.samples,
        vocab.fields.len(),
        vocab.size,
        report.total_collapsed_tokens
    );
    print_json(&report)
}

fn build_table(a: &TrainArgs) -> anyhow::Result<(Table, Option<PathBuf>)> {
    let mut table = config::read_table(a.config.as_deref())?;
    config::apply_sets(&mut table, &a.sets)?;
    let out = match table.remove("out") {
        Some(Value::String(s)) => Some(PathBuf::from(s)),
        Some(other) => return Err(anyhow!("out must be a path string, got {other}")),
        None => None,
    };
    let s = |v: &str| Value::String(v.to_string());
    let mut flags: Vec<(&str, Value)> = Vec::new();
    if let Some(v) = &a.regime {
        flags.push(("regime", s(v)));
    }
    if let Some(v) = &a.rounding {
        flags.push(("rounding", s(v)));
    }
    if let Some(v) = a.bits {
        flags.push(("bits", Value::Integer(i64::from(v))));
    }
    if let Some(v) = a.delta_init {
        flags.push(("delta_init", Value::Float(v)));
    }
    if let Some(v) = a.delta_lr {
        flags.push(("delta_lr", Value::Float(v)));
    }
    if let Some(v) = &a.grad_scale {
        flags.push(("grad_scale", s(v)));
    }
    if let Some(v) = a.lr {
        flags.push(("lr", Value::Float(v)));
    }
    let int = |v: u64| i64::try_from(v).map(Value::Integer).map_err(|_| anyhow!("{v} is too large"));
    if let Some(v) = a.epochs {
        flags.push(("epochs", int(v)?));
    }
    if let Some(v) = a.batch_size {
        flags.push(("batch_size", int(v as u64)?));
    }
    if let Some(v) = a.dim {
        flags.push(("dim", int(v as u64)?));
    }
    if let Some(v) = a.seed {
        flags.push(("seed", int(v)?));
    }
    for (k, v) in flags {
        config::set_path(&mut table, k, v)?;
    }
    if let Some(path) = &a.data {
        let mut d = Table::new();
        d.insert("source".into(), s("encoded"));
        d.insert("path".into(), s(&path.to_string_lossy()));
        if let Some(v) = &a.vocab {
            d.insert("vocab".into(), s(&v.to_string_lossy()));
        }
        table.insert("data".into(), Value::Table(d));
    }
    Ok((table, out))
}

#[derive(Serialize)]
struct Diagnostic<'a> {
    error: String,
    records_before_failure: usize,
    last_record: Option<&'a MetricRecord>,
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    run_id: &'a str,
    out: String,
    best_epoch: u64,
    test_logloss: f64,
    test_auc: Option<f64>,
    training_ratio: f64,
    inference_ratio: f64,
    peak_transient_fp_values: usize,
    persistent_fp_values: usize,
}

/// One record per (epoch, split) and non-decreasing iterations.
fn check_stream(records: &[MetricRecord]) -> Result<(), String> {
    let mut seen = std::collections::HashSet::new();
    let mut last = 0;
    for r in records {
        if r.iteration < last {
            return Err(format!("iteration went back from {last} to {}", r.iteration));
        }
        last = r.iteration;
        let split = match r.split {
            Split::Train => 0,
            Split::Validation => 1,
            Split::Test => 2,
        };
        if !seen.insert((r.epoch, split)) {
            return Err(format!("duplicate record for epoch {} split {:?}", r.epoch, r.split));
        }
    }
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<(), Failure> {
    let (table, out_from_file) = build_table(a).map_err(with(CONFIG))?;
    let cfg = config::into_config(table).map_err(with(CONFIG))?;
    let data = train::load_data(&cfg).map_err(train_failure)?;
    let manifest = RunManifest::new(&cfg, &data);
    let out_dir = a
        .out
        .clone()
        .or(out_from_file)
        .unwrap_or_else(|| PathBuf::from("runs").join(&manifest.run_id));
    info!("run {} -> {}", manifest.run_id, out_dir.display());

    let mut seen: Vec<MetricRecord> = Vec::new();
    let result = train::run_experiment(&cfg, &data, |r| {
        info!(
            "epoch {} {:?} logloss {:.5} auc {}",
            r.epoch,
            r.split,
            r.logloss,
            r.auc.map_or("-".to_string(), |v| format!("{v:.5}"))
        );
        seen.push(r.clone());
        Ok(())
    });
    let out = match result {
        Ok(out) => out,
        Err(e) => {
            let code = train_code(&e);
            if code == NUMERIC {
                std::fs::create_dir_all(&out_dir)?;
                write_json(&out_dir.join("manifest.json"), &manifest)?;
                let mut m = BufWriter::new(File::create(out_dir.join("metrics.jsonl"))?);
                for r in &seen {
                    serde_json::to_writer(&mut m, r)?;
                    m.write_all(b"\n")?;
                }
                m.flush()?;
                write_json(
                    &out_dir.join("diagnostic.json"),
                    &Diagnostic {
                        error: e.to_string(),
                        records_before_failure: seen.len(),
                        last_record: seen.last(),
                    },
                )?;
            }
            return Err(Failure { code, error: e.into() });
        }
    };
    train::write_run(&out_dir, &out).map_err(train_failure)?;

    check_stream(&out.records).map_err(invariant)?;
    let low_precision = matches!(cfg.regime, RegimeKind::Lpt | RegimeKind::Alpt);
    if low_precision && out.meter.persistent() > 0 {
        return Err(invariant(format!(
            "{} keeps {} full-precision values between batches",
            cfg.regime.name(),
            out.meter.persistent()
        )));
    }
    let test = out.test();
    print_json(&TrainSummary {
        run_id: &out.manifest.run_id,
        out: out_dir.display().to_string(),
        best_epoch: out.best_epoch,
        test_logloss: test.logloss,
        test_auc: test.auc,
        training_ratio: out.footprint.training_ratio,
        inference_ratio: out.footprint.inference_ratio,
        peak_transient_fp_values: out.meter.peak_transient(),
        persistent_fp_values: out.meter.persistent(),
    })
}

#[derive(Serialize)]
struct RegimeSummary {
    regime: LabRegime,
    seeds: u64,
    /// `(t, mean suboptimality over seeds)`
    suboptimality: Vec<(u64, f64)>,
    /// Latest iteration over seeds at which every coordinate was below half a step.
    all_below_half_step_at: Option<u64>,
    bound_checks: usize,
    bound_violations: usize,
    residual_coordinate_steps: u64,
    residual_violations: usize,
    freeze_violations: usize,
}

#[derive(Serialize)]
struct LabSummary {
    spec: ConvexProblemSpec,
    t0: u64,
    regimes: Vec<RegimeSummary>,
}

pub fn synth_lab(a: &LabArgs) -> Result<(), Failure> {
    let regimes: Vec<LabRegime> = a
        .regimes
        .iter()
        .map(|r| r.parse::<LabRegime>().map_err(|e| anyhow!("{e}")))
        .collect::<anyhow::Result<_>>()
        .map_err(with(CONFIG))?;
    if a.seeds == 0 || a.iterations == 0 {
        return Err(with(CONFIG)(anyhow!("seeds and iterations must be positive")));
    }
    if let Some(&t) = a.snapshots.iter().find(|&&t| t == 0 || t > a.iterations) {
        return Err(with(CONFIG)(anyhow!("snapshot {t} outside 1..={}", a.iterations)));
    }
    let spec = ConvexProblemSpec {
        params: a.params,
        bits: a.bits,
        delta: a.delta,
        schedule: Schedule::inverse_sqrt(a.eta),
    };
    spec.validate().map_err(lab_failure)?;

    std::fs::create_dir_all(&a.out)?;
    let mut hist = csv::Writer::from_path(a.out.join("histograms.csv"))?;
    hist.write_record(["regime", "seed", "t", "bin_left", "bin_right", "count"])?;
    let mut steps = csv::Writer::from_path(a.out.join("steps.csv"))?;
    steps.write_record([
        "regime",
        "seed",
        "t",
        "lr",
        "below_half_step",
        "changed",
        "residual_sq_mean",
        "suboptimality",
    ])?;
    let mut bounds = BufWriter::new(File::create(a.out.join("bounds.jsonl"))?);

    let mut summaries = Vec::new();
    for &regime in &regimes {
        let mut sum = RegimeSummary {
            regime,
            seeds: a.seeds,
            suboptimality: a.snapshots.iter().map(|&t| (t, 0.0)).collect(),
            all_below_half_step_at: None,
            bound_checks: 0,
            bound_violations: 0,
            residual_coordinate_steps: 0,
            residual_violations: 0,
            freeze_violations: 0,
        };
        let mut every_seed_froze = true;
        for seed in a.seed..a.seed + a.seeds {
            let traj = lab::run_synthetic(regime, &spec, a.iterations, seed, &a.snapshots).map_err(lab_failure)?;
            let name = regime.name();
            for h in &traj.snapshots {
                let width = lab::HISTOGRAM_BINS as f64;
                let (s, t) = (seed.to_string(), h.t.to_string());
                hist.write_record([name, &s, &t, "-inf", "0", &h.below.to_string()])?;
                for (left, count) in h.bin_left.iter().zip(&h.counts) {
                    let right = left + 1.0 / width;
                    hist.write_record([name, &s, &t, &left.to_string(), &right.to_string(), &count.to_string()])?;
                }
                hist.write_record([name, &s, &t, "1", "inf", &h.above.to_string()])?;
            }
            for r in &traj.steps {
                steps.write_record([
                    name.to_string(),
                    seed.to_string(),
                    r.t.to_string(),
                    r.lr.to_string(),
                    r.below_half_step.to_string(),
                    r.changed.to_string(),
                    r.residual_sq_mean.to_string(),
                    r.suboptimality.to_string(),
                ])?;
            }
            for (i, &t) in a.snapshots.iter().enumerate() {
                sum.suboptimality[i].1 += traj.suboptimality(t).map_err(lab_failure)? / a.seeds as f64;
                if let Some(rep) = lab::bound_report(&traj, t).map_err(lab_failure)? {
                    sum.bound_checks += 1;
                    if !rep.holds {
                        sum.bound_violations += 1;
                        warn!("{name} seed {seed} t={t}: measured {} > bound {}", rep.measured, rep.bound);
                    }
                    serde_json::to_writer(&mut bounds, &rep)?;
                    bounds.write_all(b"\n")?;
                }
            }
            match traj.all_below_half_step_at {
                Some(at) => {
                    sum.all_below_half_step_at = Some(sum.all_below_half_step_at.unwrap_or(0).max(at));
                }
                None => every_seed_froze = false,
            }
            if regime == LabRegime::LptDr {
                let rep = lab::residual_check(&traj);
                sum.residual_coordinate_steps += rep.coordinate_steps;
                sum.residual_violations += rep.violations.len();
                if traj.all_below_half_step_at.is_some() && !traj.frozen_after {
                    sum.freeze_violations += 1;
                }
            }
        }
        if !every_seed_froze {
            sum.all_below_half_step_at = None;
        }
        info!(
            "{}: suboptimality {:?}, all below half step at {:?}",
            regime.name(),
            sum.suboptimality,
            sum.all_below_half_step_at
        );
        summaries.push(sum);
    }
    hist.flush()?;
    steps.flush()?;
    bounds.flush()?;

    let summary = LabSummary {
        t0: spec.t0(),
        spec,
        regimes: summaries,
    };
    write_json(&a.out.join("summary.json"), &summary)?;
    print_json(&summary)?;
    let broken: usize = summary
        .regimes
        .iter()
        .map(|s| s.bound_violations + s.residual_violations + s.freeze_violations)
        .sum();
    if broken > 0 {
        return Err(invariant(format!("{broken} bound, residual or freeze violations")));
    }
    Ok(())
}

pub fn bounds(a: &BoundsArgs) -> Result<(), Failure> {
    let bad = |m: String| with(CONFIG)(anyhow!(m));
    if !(a.delta.is_finite() && a.delta >= 0.0) {
        return Err(bad(format!("delta must be non-negative, got {}", a.delta)));
    }
    if !(a.eta.is_finite() && a.eta > 0.0) || a.dim == 0 {
        return Err(bad("eta and dim must be positive".into()));
    }
    if a.ts.contains(&0) {
        return Err(bad("every T must be at least 1".into()));
    }
    let range = if a.delta > 0.0 {
        quant::QuantSpec::new(a.bits, a.delta, quant::RoundingMode::Deterministic)
            .map_err(with(CONFIG))?;
        Some(ConvexProblemSpec {
            bits: a.bits,
            delta: a.delta,
            ..ConvexProblemSpec::default()
        })
    } else {
        None
    };
    let diameter = a
        .diameter
        .or_else(|| range.as_ref().map(|s| s.diameter()))
        .ok_or_else(|| bad("--diameter is required when delta is 0".into()))?;
    let grad_bound = a
        .grad_bound
        .or_else(|| range.as_ref().map(|s| s.grad_bound()))
        .ok_or_else(|| bad("--grad-bound is required when delta is 0".into()))?;
    if !(diameter > 0.0 && grad_bound > 0.0) {
        return Err(bad("diameter and grad bound must be positive".into()));
    }
    let b = lab::BoundInputs {
        diameter,
        grad_bound,
        dim: a.dim,
        eta: a.eta,
        delta: a.delta,
    };

    let sink: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(File::create(p)?),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record([
        "t",
        "t0",
        "sr_bound",
        "dr_bound",
        "distance",
        "gradient",
        "floor",
        "early",
        "late",
        "dr_bound_ge_sr_bound",
    ])?;
    let mut inverted = Vec::new();
    for &t in &a.ts {
        let t1 = lab::sr_bound(&b, t);
        let t2 = lab::dr_bound(&b, t);
        let ge = t2.total >= t1;
        if !ge {
            inverted.push(t);
        }
        w.write_record([
            t.to_string(),
            t2.t0.to_string(),
            t1.to_string(),
            t2.total.to_string(),
            t2.distance.to_string(),
            t2.gradient.to_string(),
            t2.floor.to_string(),
            t2.early.to_string(),
            t2.late.to_string(),
            ge.to_string(),
        ])?;
    }
    w.flush()?;
    if !inverted.is_empty() {
        return Err(invariant(format!("deterministic bound below stochastic bound at T = {inverted:?}")));
    }
    Ok(())
}
