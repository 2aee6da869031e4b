//! Small CTR predictor over gathered embedding rows with exact gradients.
//!
//! Two heads are supported:
//!
//! - `LinearSum`: `bias + sum_f sum_k e[f,k] * v[k]`
//! - `Fm`: `bias + 1/2 sum_k ((sum_f e[f,k])^2 - sum_f e[f,k]^2)`

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("slot {slot} refers past the {rows} gathered rows")]
    MissingRow { slot: u32, rows: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("tape does not match this backward call: {0}")]
    StaleTape(String),
    #[error("AUC undefined without both positive and negative labels")]
    SingleClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Head {
    LinearSum,
    Fm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub head: Head,
    pub fields: usize,
    pub dim: usize,
}

/// Parameters outside the embedding table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseParams {
    pub bias: f64,
    /// Projection vector `v` for the linear-sum head; empty for FM.
    pub weights: Vec<f64>,
}

impl DenseParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        let n = match config.head {
            Head::LinearSum => config.dim,
            Head::Fm => 0,
        };
        Self {
            bias: 0.0,
            weights: vec![0.0; n],
        }
    }

    /// Flattened `[bias, weights...]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(1 + self.weights.len());
        v.push(self.bias);
        v.extend_from_slice(&self.weights);
        v
    }

    pub fn assign(&mut self, flat: &[f64]) {
        self.bias = flat[0];
        self.weights.copy_from_slice(&flat[1..]);
    }
}

/// Cached intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    config: ModelConfig,
    params: DenseParams,
    rows: Vec<f64>,
    slots: Vec<u32>,
    /// Per sample and dim: `sum_f e[f,k]`.
    sums: Vec<f64>,
    /// Per sample and dim: `sum_f e[f,k]^2` (FM only).
    sq_sums: Vec<f64>,
}

impl ForwardTape {
    pub fn samples(&self) -> usize {
        self.slots.len() / self.config.fields
    }

    /// Recompute the logits from the cached sums.
    pub fn replay(&self) -> Vec<f64> {
        (0..self.samples()).map(|s| self.logit(s)).collect()
    }

    fn logit(&self, s: usize) -> f64 {
        let d = self.config.dim;
        let sums = &self.sums[s * d..(s + 1) * d];
        match self.config.head {
            Head::LinearSum => {
                let mut z = self.params.bias;
                for k in 0..d {
                    z += sums[k] * self.params.weights[k];
                }
                z
            }
            Head::Fm => {
                let sq = &self.sq_sums[s * d..(s + 1) * d];
                let mut inter = 0.0;
                for k in 0..d {
                    inter += sums[k] * sums[k] - sq[k];
                }
                self.params.bias + 0.5 * inter
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Same layout as the gathered rows passed to `forward`.
    pub rows: Vec<f64>,
    pub bias: f64,
    pub weights: Vec<f64>,
}

impl Gradients {
    pub fn dense_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(1 + self.weights.len());
        v.push(self.bias);
        v.extend_from_slice(&self.weights);
        v
    }
}

/// Forward pass. `rows` is `n_rows x dim` row-major; `slots` holds, for each
/// sample and field, the index of the row that sample uses.
pub fn forward(
    config: &ModelConfig,
    params: &DenseParams,
    rows: &[f64],
    slots: &[u32],
) -> Result<(Vec<f64>, ForwardTape), ModelError> {
    let d = config.dim;
    if d == 0 || config.fields == 0 {
        return Err(ModelError::Shape("fields and dim must be positive".into()));
    }
    if rows.len() % d != 0 {
        return Err(ModelError::Shape(format!(
            "{} row values is not a multiple of dim {d}",
            rows.len()
        )));
    }
    if slots.len() % config.fields != 0 {
        return Err(ModelError::Shape(format!(
            "{} slots is not a multiple of {} fields",
            slots.len(),
            config.fields
        )));
    }
    let expected_weights = match config.head {
        Head::LinearSum => d,
        Head::Fm => 0,
    };
    if params.weights.len() != expected_weights {
        return Err(ModelError::Shape(format!(
            "dense weights have length {}, head needs {expected_weights}",
            params.weights.len()
        )));
    }
    let n_rows = rows.len() / d;
    if let Some(&slot) = slots.iter().find(|&&s| s as usize >= n_rows) {
        return Err(ModelError::MissingRow { slot, rows: n_rows });
    }

    let samples = slots.len() / config.fields;
    let mut sums = vec![0.0; samples * d];
    let mut sq_sums = match config.head {
        Head::Fm => vec![0.0; samples * d],
        Head::LinearSum => Vec::new(),
    };
    for s in 0..samples {
        let acc = &mut sums[s * d..(s + 1) * d];
        for &slot in &slots[s * config.fields..(s + 1) * config.fields] {
            let e = &rows[slot as usize * d..(slot as usize + 1) * d];
            for k in 0..d {
                acc[k] += e[k];
            }
            if config.head == Head::Fm {
                let sq = &mut sq_sums[s * d..(s + 1) * d];
                for k in 0..d {
                    sq[k] += e[k] * e[k];
                }
            }
        }
    }
    let tape = ForwardTape {
        config: *config,
        params: params.clone(),
        rows: rows.to_vec(),
        slots: slots.to_vec(),
        sums,
        sq_sums,
    };
    let logits = tape.replay();
    Ok((logits, tape))
}

/// Backward pass given `dloss/dlogit` per sample.
pub fn backward(tape: ForwardTape, dlogits: &[f64]) -> Result<Gradients, ModelError> {
    let samples = tape.samples();
    if dlogits.len() != samples {
        return Err(ModelError::StaleTape(format!(
            "tape holds {samples} samples, got {} logit gradients",
            dlogits.len()
        )));
    }
    let d = tape.config.dim;
    let fields = tape.config.fields;
    let mut g_rows = vec![0.0; tape.rows.len()];
    let mut g_bias = 0.0;
    let mut g_w = vec![0.0; tape.params.weights.len()];
    for s in 0..samples {
        let dz = dlogits[s];
        g_bias += dz;
        let sums = &tape.sums[s * d..(s + 1) * d];
        if tape.config.head == Head::LinearSum {
            for k in 0..d {
                g_w[k] += dz * sums[k];
            }
        }
        for &slot in &tape.slots[s * fields..(s + 1) * fields] {
            let base = slot as usize * d;
            match tape.config.head {
                Head::LinearSum => {
                    for k in 0..d {
                        g_rows[base + k] += dz * tape.params.weights[k];
                    }
                }
                Head::Fm => {
                    for k in 0..d {
                        g_rows[base + k] += dz * (sums[k] - tape.rows[base + k]);
                    }
                }
            }
        }
    }
    Ok(Gradients {
        rows: g_rows,
        bias: g_bias,
        weights: g_w,
    })
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy on a logit, returning `(loss, dloss/dlogit)`.
pub fn logloss(logit: f64, label: bool) -> (f64, f64) {
    let y = if label { 1.0 } else { 0.0 };
    // max(z, 0) - z*y + ln(1 + e^{-|z|})
    let loss = logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p();
    (loss, sigmoid(logit) - y)
}

/// Area under the ROC curve via the rank-sum statistic, ties at average rank.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, ModelError> {
    if scores.len() != labels.len() {
        return Err(ModelError::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(ModelError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share their mean
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k]).count();
        pos_rank_sum += avg_rank * pos_in_group as f64;
        i = j;
    }
    let n_pos_f = n_pos as f64;
    Ok((pos_rank_sum - n_pos_f * (n_pos_f + 1.0) / 2.0) / (n_pos_f * n_neg as f64))
}
