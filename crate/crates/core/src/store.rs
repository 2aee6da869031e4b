//! Compressed embedding table: integer codes plus step sizes.
//!
//! Codes for `m <= 8` live in `i8` cells, wider codes in `i16` cells. Step
//! sizes are kept as `f32`, one per row (feature-wise) or one for the whole
//! table (global). All arithmetic on dequantized values is done in `f64`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quant::{self, QuantError, QuantSpec, RngStream, RoundingMode};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LPQE";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Smallest step size any update may leave behind.
pub const DELTA_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error("row {id} out of range for table with {rows} rows")]
    IndexOutOfRange { id: u32, rows: usize },
    #[error("shape mismatch: expected {expected} values, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("step size for row {row} must be positive, got {value}")]
    NonPositiveDelta { row: u32, value: f64 },
    #[error("per-row step sizes given for a table with a global step size")]
    GlobalLayout,
    #[error("table dimensions must be positive (rows {rows}, dim {dim})")]
    EmptyTable { rows: usize, dim: usize },
    #[error("init scale must be positive, got {0}")]
    InitScale(f64),
    #[error("code {code} outside [{lo}, {hi}]")]
    CodeRange { code: i32, lo: i32, hi: i32 },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeltaLayout {
    Global,
    FeatureWise,
}

impl DeltaLayout {
    fn to_byte(self) -> u8 {
        match self {
            DeltaLayout::Global => 0,
            DeltaLayout::FeatureWise => 1,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(DeltaLayout::Global),
            1 => Some(DeltaLayout::FeatureWise),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Codes {
    Narrow(Vec<i8>),
    Wide(Vec<i16>),
}

impl Codes {
    fn zeros(bits: u8, len: usize) -> Self {
        if bits <= 8 {
            Codes::Narrow(vec![0; len])
        } else {
            Codes::Wide(vec![0; len])
        }
    }

    #[inline]
    fn get(&self, i: usize) -> i32 {
        match self {
            Codes::Narrow(v) => i32::from(v[i]),
            Codes::Wide(v) => i32::from(v[i]),
        }
    }

    // Callers guarantee `c` is inside the bit width's code range.
    #[inline]
    fn set(&mut self, i: usize, c: i32) {
        match self {
            Codes::Narrow(v) => v[i] = c as i8,
            Codes::Wide(v) => v[i] = c as i16,
        }
    }

    fn cell_bytes(&self) -> usize {
        match self {
            Codes::Narrow(_) => 1,
            Codes::Wide(_) => 2,
        }
    }
}

/// Storage width in bytes for an `m`-bit code.
pub fn cell_bytes(bits: u8) -> usize {
    if bits <= 8 {
        1
    } else {
        2
    }
}

/// Deduplicated rows touched by a mini-batch and the per-sample slot mapping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseBatch {
    feature_ids: Vec<u32>,
    slots: Vec<u32>,
    fields: usize,
}

impl SparseBatch {
    /// Build from flattened per-sample feature ids (`samples * fields` entries).
    /// Rows are kept in first-occurrence order.
    pub fn from_samples(ids: &[u32], fields: usize, rows: usize) -> Result<Self, StoreError> {
        if fields == 0 || ids.len() % fields != 0 {
            return Err(StoreError::Shape {
                expected: fields,
                got: ids.len(),
            });
        }
        let mut local = std::collections::HashMap::with_capacity(ids.len());
        let mut feature_ids = Vec::new();
        let mut slots = Vec::with_capacity(ids.len());
        for &id in ids {
            if id as usize >= rows {
                return Err(StoreError::IndexOutOfRange { id, rows });
            }
            let next = feature_ids.len() as u32;
            let slot = *local.entry(id).or_insert_with(|| {
                feature_ids.push(id);
                next
            });
            slots.push(slot);
        }
        Ok(Self {
            feature_ids,
            slots,
            fields,
        })
    }

    pub fn feature_ids(&self) -> &[u32] {
        &self.feature_ids
    }

    /// Per-sample, per-field index into `feature_ids`.
    pub fn slots(&self) -> &[u32] {
        &self.slots
    }

    pub fn fields(&self) -> usize {
        self.fields
    }

    pub fn samples(&self) -> usize {
        self.slots.len() / self.fields
    }

    pub fn len(&self) -> usize {
        self.feature_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.feature_ids.is_empty()
    }
}

/// Storage accounting against a 32-bit full-precision table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryFootprint {
    pub fp_bytes: u64,
    pub quantized_bytes: u64,
    pub step_size_bytes: u64,
    pub training_ratio: f64,
    pub inference_ratio: f64,
}

impl MemoryFootprint {
    /// Footprint of a table stored as codes during both training and inference.
    pub fn quantized(rows: usize, dim: usize, bits: u8, layout: DeltaLayout) -> Self {
        let fp_bytes = (rows * dim * 4) as u64;
        let quantized_bytes = (rows * dim * cell_bytes(bits)) as u64;
        let step_size_bytes = match layout {
            DeltaLayout::Global => 4,
            DeltaLayout::FeatureWise => (rows * 4) as u64,
        };
        let ratio = fp_bytes as f64 / (quantized_bytes + step_size_bytes) as f64;
        Self {
            fp_bytes,
            quantized_bytes,
            step_size_bytes,
            training_ratio: ratio,
            inference_ratio: ratio,
        }
    }

    /// Full-precision table throughout.
    pub fn full_precision(rows: usize, dim: usize) -> Self {
        let fp_bytes = (rows * dim * 4) as u64;
        Self {
            fp_bytes,
            quantized_bytes: fp_bytes,
            step_size_bytes: 0,
            training_ratio: 1.0,
            inference_ratio: 1.0,
        }
    }

    /// Full-precision shadow while training, codes plus a global step size after.
    pub fn shadow_trained(rows: usize, dim: usize, bits: u8) -> Self {
        let q = Self::quantized(rows, dim, bits, DeltaLayout::Global);
        Self {
            training_ratio: 1.0,
            ..q
        }
    }
}

/// Per-call summary of a requantizing write-back.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ScatterStats {
    pub rows: usize,
    pub changed_codes: usize,
}

/// Key for the stochastic rounding decisions of one write-back. Row `r`
/// draws from `RngStream::keyed(seed, r, iteration)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundingKey {
    pub seed: u64,
    pub iteration: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedEmbeddingTable {
    rows: usize,
    dim: usize,
    bits: u8,
    mode: RoundingMode,
    layout: DeltaLayout,
    deltas: Vec<f32>,
    codes: Codes,
}

impl QuantizedEmbeddingTable {
    /// All-zero codes with every step size set to `delta`.
    pub fn zeros(
        rows: usize,
        dim: usize,
        spec: QuantSpec,
        layout: DeltaLayout,
    ) -> Result<Self, StoreError> {
        if rows == 0 || dim == 0 {
            return Err(StoreError::EmptyTable { rows, dim });
        }
        let n_deltas = match layout {
            DeltaLayout::Global => 1,
            DeltaLayout::FeatureWise => rows,
        };
        Ok(Self {
            rows,
            dim,
            bits: spec.bits(),
            mode: spec.mode(),
            layout,
            deltas: vec![spec.delta() as f32; n_deltas],
            codes: Codes::zeros(spec.bits(), rows * dim),
        })
    }

    /// Draw entries from `Uniform(-init_scale, init_scale)` and store them with
    /// stochastic rounding. The step size defaults to `init_scale / q`.
    pub fn init(
        rows: usize,
        dim: usize,
        spec: QuantSpec,
        layout: DeltaLayout,
        init_scale: f64,
        delta_init: Option<f64>,
        seed: u64,
    ) -> Result<Self, StoreError> {
        if !(init_scale.is_finite() && init_scale > 0.0) {
            return Err(StoreError::InitScale(init_scale));
        }
        let delta = delta_init.unwrap_or(init_scale / f64::from(spec.levels()));
        let spec = spec.with_delta(delta)?;
        if init_scale < spec.delta() / 2.0 {
            log::warn!(
                "init scale {init_scale} is below half the step size {}; \
                 deterministic rounding would zero every entry",
                spec.delta()
            );
        }
        let mut table = Self::zeros(rows, dim, spec, layout)?;
        let sr = spec.with_mode(RoundingMode::Stochastic);
        for r in 0..rows {
            let mut rng = RngStream::keyed(seed, r as u64, 0);
            let row_spec = sr.with_delta(table.delta(r))?;
            for k in 0..dim {
                let w = (2.0 * rng.next_unit() - 1.0) * init_scale;
                let c = quant::quantize_to_int(w, &row_spec, Some(&mut rng))?;
                table.codes.set(r * dim + k, c);
            }
        }
        Ok(table)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn mode(&self) -> RoundingMode {
        self.mode
    }

    pub fn layout(&self) -> DeltaLayout {
        self.layout
    }

    pub fn deltas(&self) -> &[f32] {
        &self.deltas
    }

    #[inline]
    pub fn delta(&self, row: usize) -> f64 {
        match self.layout {
            DeltaLayout::Global => f64::from(self.deltas[0]),
            DeltaLayout::FeatureWise => f64::from(self.deltas[row]),
        }
    }

    #[inline]
    pub fn code(&self, row: usize, k: usize) -> i32 {
        self.codes.get(row * self.dim + k)
    }

    pub fn row_codes(&self, row: usize) -> Vec<i32> {
        (0..self.dim).map(|k| self.code(row, k)).collect()
    }

    /// Quantizer for `row` in the table's rounding mode.
    pub fn row_spec(&self, row: usize) -> Result<QuantSpec, QuantError> {
        QuantSpec::new(self.bits, self.delta(row), self.mode)
    }

    /// Replace the single step size of a global-layout table, or every row's
    /// step size of a feature-wise one, without touching codes.
    pub fn set_all_deltas(&mut self, delta: f64) -> Result<(), StoreError> {
        if !(delta.is_finite() && delta > 0.0) {
            return Err(StoreError::NonPositiveDelta {
                row: 0,
                value: delta,
            });
        }
        self.deltas.iter_mut().for_each(|d| *d = delta as f32);
        Ok(())
    }

    /// Overwrite one row's codes directly.
    pub fn set_row_codes(&mut self, id: u32, codes: &[i32]) -> Result<(), StoreError> {
        let r = self.check_id(id)?;
        if codes.len() != self.dim {
            return Err(StoreError::Shape {
                expected: self.dim,
                got: codes.len(),
            });
        }
        let (lo, hi) = (quant::code_min(self.bits), quant::code_max(self.bits));
        if let Some(&c) = codes.iter().find(|&&c| c < lo || c > hi) {
            return Err(StoreError::CodeRange { code: c, lo, hi });
        }
        for (k, &c) in codes.iter().enumerate() {
            self.codes.set(r * self.dim + k, c);
        }
        Ok(())
    }

    fn check_id(&self, id: u32) -> Result<usize, StoreError> {
        let r = id as usize;
        if r >= self.rows {
            return Err(StoreError::IndexOutOfRange {
                id,
                rows: self.rows,
            });
        }
        Ok(r)
    }

    /// Dequantize the given rows, row-major `ids.len() x dim`.
    pub fn gather(&self, ids: &[u32]) -> Result<Vec<f64>, StoreError> {
        let mut out = Vec::with_capacity(ids.len() * self.dim);
        for &id in ids {
            let r = self.check_id(id)?;
            let delta = self.delta(r);
            let base = r * self.dim;
            out.extend((0..self.dim).map(|k| quant::dequantize(self.codes.get(base + k), delta)));
        }
        Ok(out)
    }

    pub fn dequantize_all(&self) -> Vec<f64> {
        let ids: Vec<u32> = (0..self.rows as u32).collect();
        self.gather(&ids).expect("all ids in range")
    }

    /// Requantize new full-precision values for `ids` back into codes.
    ///
    /// When `new_deltas` is given (feature-wise tables only), each row's step
    /// size is replaced first and the row is quantized with the new step.
    /// Rows not listed are left untouched.
    pub fn scatter_requantize(
        &mut self,
        ids: &[u32],
        new_weights: &[f64],
        new_deltas: Option<&[f64]>,
        key: RoundingKey,
    ) -> Result<ScatterStats, StoreError> {
        if new_weights.len() != ids.len() * self.dim {
            return Err(StoreError::Shape {
                expected: ids.len() * self.dim,
                got: new_weights.len(),
            });
        }
        if let Some(ds) = new_deltas {
            if self.layout == DeltaLayout::Global {
                return Err(StoreError::GlobalLayout);
            }
            if ds.len() != ids.len() {
                return Err(StoreError::Shape {
                    expected: ids.len(),
                    got: ds.len(),
                });
            }
            for (&id, &d) in ids.iter().zip(ds) {
                if !(d.is_finite() && d > 0.0) {
                    return Err(StoreError::NonPositiveDelta { row: id, value: d });
                }
            }
        }
        for &id in ids {
            self.check_id(id)?;
        }

        let mut stats = ScatterStats {
            rows: ids.len(),
            changed_codes: 0,
        };
        for (j, &id) in ids.iter().enumerate() {
            let r = id as usize;
            if let Some(ds) = new_deltas {
                self.deltas[r] = ds[j] as f32;
            }
            let spec = self.row_spec(r)?;
            let mut rng = RngStream::keyed(key.seed, u64::from(id), key.iteration);
            let row = &new_weights[j * self.dim..(j + 1) * self.dim];
            for (k, &w) in row.iter().enumerate() {
                let c = quant::quantize_to_int(w, &spec, Some(&mut rng))?;
                let idx = r * self.dim + k;
                if self.codes.get(idx) != c {
                    stats.changed_codes += 1;
                }
                self.codes.set(idx, c);
            }
        }
        Ok(stats)
    }

    pub fn footprint(&self) -> MemoryFootprint {
        MemoryFootprint::quantized(self.rows, self.dim, self.bits, self.layout)
    }

    /// Serialize as `LPQE` little-endian: header, step sizes as `f32`, then
    /// codes row-major in 8- or 16-bit cells.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<(), StoreError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.rows as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&[self.bits, self.mode.to_byte(), self.layout.to_byte()])?;
        for d in &self.deltas {
            w.write_all(&d.to_le_bytes())?;
        }
        match &self.codes {
            Codes::Narrow(v) => {
                let bytes: Vec<u8> = v.iter().map(|&c| c as u8).collect();
                w.write_all(&bytes)?;
            }
            Codes::Wide(v) => {
                let mut bytes = Vec::with_capacity(v.len() * 2);
                for c in v {
                    bytes.extend_from_slice(&c.to_le_bytes());
                }
                w.write_all(&bytes)?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self, StoreError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(StoreError::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(StoreError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let rows = read_u64(&mut r)? as usize;
        let dim = read_u32(&mut r)? as usize;
        let mut tail = [0u8; 3];
        r.read_exact(&mut tail)?;
        let [bits, mode, layout] = tail;
        if !(quant::MIN_BITS..=quant::MAX_BITS).contains(&bits) {
            return Err(StoreError::Checkpoint(format!("bit width {bits}")));
        }
        let mode = RoundingMode::from_byte(mode)
            .ok_or_else(|| StoreError::Checkpoint(format!("rounding mode byte {mode}")))?;
        let layout = DeltaLayout::from_byte(layout)
            .ok_or_else(|| StoreError::Checkpoint(format!("delta layout byte {layout}")))?;
        if rows == 0 || dim == 0 {
            return Err(StoreError::EmptyTable { rows, dim });
        }
        let n_deltas = match layout {
            DeltaLayout::Global => 1,
            DeltaLayout::FeatureWise => rows,
        };
        let mut deltas = Vec::with_capacity(n_deltas);
        for _ in 0..n_deltas {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            let d = f32::from_le_bytes(b);
            if !(d.is_finite() && d > 0.0) {
                return Err(StoreError::Checkpoint(format!("step size {d}")));
            }
            deltas.push(d);
        }
        let n = rows * dim;
        let mut codes = Codes::zeros(bits, n);
        let mut raw = vec![0u8; n * codes.cell_bytes()];
        r.read_exact(&mut raw)?;
        let (lo, hi) = (quant::code_min(bits), quant::code_max(bits));
        for i in 0..n {
            let c = match codes {
                Codes::Narrow(_) => i32::from(raw[i] as i8),
                Codes::Wide(_) => i32::from(i16::from_le_bytes([raw[2 * i], raw[2 * i + 1]])),
            };
            if c < lo || c > hi {
                return Err(StoreError::Checkpoint(format!(
                    "code {c} outside {bits}-bit range"
                )));
            }
            codes.set(i, c);
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(StoreError::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            rows,
            dim,
            bits,
            mode,
            layout,
            deltas,
            codes,
        })
    }
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(bits: u8, delta: f64, mode: RoundingMode) -> QuantSpec {
        QuantSpec::new(bits, delta, mode).unwrap()
    }

    #[test]
    fn init_delta_from_scale() {
        let t = QuantizedEmbeddingTable::init(
            1,
            1,
            spec(8, 1.0, RoundingMode::Stochastic),
            DeltaLayout::FeatureWise,
            0.127,
            None,
            1,
        )
        .unwrap();
        assert!((t.delta(0) - 0.001).abs() < 1e-9);
        let c = t.code(0, 0);
        assert!((-128..=127).contains(&c));
    }

    #[test]
    fn init_rejects_non_positive_scale() {
        let s = spec(8, 1.0, RoundingMode::Stochastic);
        assert!(matches!(
            QuantizedEmbeddingTable::init(4, 4, s, DeltaLayout::FeatureWise, 0.0, None, 1),
            Err(StoreError::InitScale(_))
        ));
        assert!(QuantizedEmbeddingTable::init(0, 4, s, DeltaLayout::FeatureWise, 0.1, None, 1).is_err());
    }

    #[test]
    fn init_is_centered() {
        // Uniform(-s, s) has variance s^2/3; SR adds at most delta^2/4 per entry.
        let s = 0.01;
        let t = QuantizedEmbeddingTable::init(
            6250,
            16,
            spec(8, 1.0, RoundingMode::Stochastic),
            DeltaLayout::FeatureWise,
            s,
            None,
            42,
        )
        .unwrap();
        let vals = t.dequantize_all();
        let n = vals.len() as f64;
        assert_eq!(vals.len(), 100_000);
        let mean = vals.iter().sum::<f64>() / n;
        let delta = s / 127.0;
        let sigma = ((s * s / 3.0 + delta * delta / 4.0) / n).sqrt();
        assert!(mean.abs() < 4.0 * sigma, "mean {mean} sigma {sigma}");
    }

    #[test]
    fn gather_examples() {
        let mut t = QuantizedEmbeddingTable::zeros(
            3,
            2,
            spec(8, 0.01, RoundingMode::Deterministic),
            DeltaLayout::FeatureWise,
        )
        .unwrap();
        t.scatter_requantize(&[1], &[0.01, -0.02], None, RoundingKey { seed: 0, iteration: 1 })
            .unwrap();
        assert_eq!(t.row_codes(1), vec![1, -2]);
        let g = t.gather(&[1]).unwrap();
        // step sizes are stored as f32
        assert!((g[0] - 0.01).abs() < 1e-9 && (g[1] + 0.02).abs() < 1e-9, "{g:?}");
        assert!(t.gather(&[]).unwrap().is_empty());
        assert_eq!(t.gather(&[1, 0]).unwrap(), t.gather(&[1, 0]).unwrap());
        assert!(matches!(
            t.gather(&[3]),
            Err(StoreError::IndexOutOfRange { id: 3, rows: 3 })
        ));
    }

    #[test]
    fn scatter_stochastic_probability() {
        let n = 100_000;
        let mut fours = 0usize;
        let mut t = QuantizedEmbeddingTable::zeros(
            1,
            1,
            spec(8, 0.01, RoundingMode::Stochastic),
            DeltaLayout::FeatureWise,
        )
        .unwrap();
        for it in 0..n {
            t.scatter_requantize(&[0], &[0.0377], Some(&[0.01]), RoundingKey { seed: 9, iteration: it })
                .unwrap();
            match t.code(0, 0) {
                4 => fours += 1,
                3 => {}
                c => panic!("unexpected code {c}"),
            }
        }
        let p = fours as f64 / n as f64;
        let sigma = (0.77f64 * 0.23 / n as f64).sqrt();
        assert!((p - 0.77).abs() < 4.0 * sigma, "p {p}");
    }

    #[test]
    fn scatter_clipped_and_untouched_rows() {
        let mut t = QuantizedEmbeddingTable::init(
            4,
            3,
            spec(8, 0.01, RoundingMode::Stochastic),
            DeltaLayout::FeatureWise,
            1.0,
            Some(0.01),
            3,
        )
        .unwrap();
        let before = t.clone();
        t.scatter_requantize(&[2], &[10.0, 10.0, -10.0], None, RoundingKey { seed: 1, iteration: 5 })
            .unwrap();
        assert_eq!(t.row_codes(2), vec![127, 127, -128]);
        for r in [0, 1, 3] {
            assert_eq!(t.row_codes(r), before.row_codes(r));
            assert_eq!(t.delta(r), before.delta(r));
        }
    }

    #[test]
    fn scatter_rejects_bad_input() {
        let mut t = QuantizedEmbeddingTable::zeros(
            2,
            2,
            spec(8, 0.01, RoundingMode::Stochastic),
            DeltaLayout::FeatureWise,
        )
        .unwrap();
        let key = RoundingKey { seed: 0, iteration: 0 };
        assert!(matches!(
            t.scatter_requantize(&[0], &[0.0, 0.0], Some(&[0.0]), key),
            Err(StoreError::NonPositiveDelta { .. })
        ));
        assert!(matches!(
            t.scatter_requantize(&[0], &[0.0], None, key),
            Err(StoreError::Shape { .. })
        ));
        let mut g = QuantizedEmbeddingTable::zeros(
            2,
            2,
            spec(8, 0.01, RoundingMode::Stochastic),
            DeltaLayout::Global,
        )
        .unwrap();
        assert!(matches!(
            g.scatter_requantize(&[0], &[0.0, 0.0], Some(&[0.02]), key),
            Err(StoreError::GlobalLayout)
        ));
    }

    #[test]
    fn footprint_ratios() {
        let fw = MemoryFootprint::quantized(1000, 16, 8, DeltaLayout::FeatureWise);
        assert_eq!(fw.fp_bytes, 64_000);
        assert_eq!(fw.quantized_bytes, 16_000);
        assert_eq!(fw.step_size_bytes, 4_000);
        assert_eq!(fw.training_ratio, 3.2);
        let g = MemoryFootprint::quantized(1000, 16, 8, DeltaLayout::Global);
        assert_eq!(g.training_ratio, 64_000.0 / 16_004.0);
        assert!((g.training_ratio - 4.0).abs() < 1e-3);
        let g16 = MemoryFootprint::quantized(1000, 16, 16, DeltaLayout::Global);
        assert!((g16.training_ratio - 2.0).abs() < 1e-3);
        let qat = MemoryFootprint::shadow_trained(1000, 16, 8);
        assert_eq!(qat.training_ratio, 1.0);
        assert!((qat.inference_ratio - 4.0).abs() < 1e-3);
    }

    #[test]
    fn feature_wise_ratio_formula() {
        for d in [1usize, 4, 16, 32, 64] {
            for bits in [2u8, 4, 8, 12, 16] {
                let f = MemoryFootprint::quantized(100, d, bits, DeltaLayout::FeatureWise);
                let m_store = (cell_bytes(bits) * 8) as f64;
                let expected = 32.0 * d as f64 / (m_store * d as f64 + 32.0);
                assert!((f.training_ratio - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wide_codes_round_trip() {
        let mut t = QuantizedEmbeddingTable::zeros(
            2,
            2,
            spec(12, 0.001, RoundingMode::Deterministic),
            DeltaLayout::Global,
        )
        .unwrap();
        t.scatter_requantize(&[0, 1], &[1.5, -2.048, 0.0, 100.0], None, RoundingKey { seed: 0, iteration: 0 })
            .unwrap();
        assert_eq!(t.row_codes(0), vec![1500, -2048]);
        assert_eq!(t.row_codes(1), vec![0, 2047]);
        let mut buf = Vec::new();
        t.write_checkpoint(&mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 4 + 8 + 4 + 3 + 4 + 8);
        let back = QuantizedEmbeddingTable::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn checkpoint_header_layout() {
        let t = QuantizedEmbeddingTable::zeros(
            3,
            2,
            spec(8, 0.5, RoundingMode::Stochastic),
            DeltaLayout::FeatureWise,
        )
        .unwrap();
        let mut buf = Vec::new();
        t.write_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[0..4], b"LPQE");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..16], &3u64.to_le_bytes());
        assert_eq!(&buf[16..20], &2u32.to_le_bytes());
        assert_eq!(&buf[20..23], &[8, 1, 1]);
        assert_eq!(&buf[23..27], &0.5f32.to_le_bytes());
        assert_eq!(buf.len(), 23 + 3 * 4 + 6);
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(QuantizedEmbeddingTable::read_checkpoint(&bad[..]).is_err());
        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(QuantizedEmbeddingTable::read_checkpoint(&trailing[..]).is_err());
    }

    #[test]
    fn sparse_batch_dedup() {
        let b = SparseBatch::from_samples(&[5, 2, 5, 7, 2, 2], 2, 8).unwrap();
        assert_eq!(b.feature_ids(), &[5, 2, 7]);
        assert_eq!(b.slots(), &[0, 1, 0, 2, 1, 1]);
        assert_eq!(b.samples(), 3);
        assert!(SparseBatch::from_samples(&[9], 1, 8).is_err());
        assert!(SparseBatch::from_samples(&[1, 2, 3], 2, 8).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn random_scatters_keep_invariants(
            seed: u64,
            bits in 2u8..=16,
            updates in prop::collection::vec(
                (0u32..20, prop::collection::vec(-50.0f64..50.0, 3), 1e-8f64..2.0),
                1..40,
            ),
        ) {
            let mut t = QuantizedEmbeddingTable::init(
                20, 3, spec(bits, 0.1, RoundingMode::Stochastic),
                DeltaLayout::FeatureWise, 0.5, None, seed,
            ).unwrap();
            for (it, (id, w, d)) in updates.iter().enumerate() {
                let before = t.clone();
                let stats = t.scatter_requantize(&[*id], w, Some(&[*d]),
                    RoundingKey { seed, iteration: it as u64 + 1 }).unwrap();
                prop_assert!(stats.changed_codes <= 3);
                for r in 0..20usize {
                    if r != *id as usize {
                        prop_assert_eq!(t.row_codes(r), before.row_codes(r));
                        prop_assert_eq!(t.delta(r), before.delta(r));
                    }
                }
            }
            let (lo, hi) = (quant::code_min(bits), quant::code_max(bits));
            for r in 0..20 {
                prop_assert!(t.delta(r) > 0.0);
                for k in 0..3 {
                    let c = t.code(r, k);
                    prop_assert!(c >= lo && c <= hi);
                }
            }
            let mut buf = Vec::new();
            t.write_checkpoint(&mut buf).unwrap();
            let back = QuantizedEmbeddingTable::read_checkpoint(&buf[..]).unwrap();
            let mut buf2 = Vec::new();
            back.write_checkpoint(&mut buf2).unwrap();
            prop_assert_eq!(buf, buf2);
            prop_assert_eq!(back, t);
        }
    }
}
