//! Synthetic CTR data with a known factorization-machine ground truth.
//!
//! Field `f` owns tokens `f * per_field .. (f + 1) * per_field`, drawn with
//! Zipf-like frequencies. Every token has a latent vector `u ~ N(0, s^2 I_k)`
//! with `s` chosen so the pairwise interaction sum has unit variance. The
//! label of a sample is `Bernoulli(sigmoid(bias + signal * sum_{f<g} <u_f, u_g>))`.

use std::io::Write;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::data::{DataError, EncodedDataset};
use crate::model::{logloss, sigmoid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub fields: usize,
    /// Total tokens over all fields.
    pub vocab_size: usize,
    pub samples: usize,
    pub signal_strength: f64,
    pub latent_dim: usize,
    /// Token frequency within a field is proportional to `rank^-zipf_exponent`.
    pub zipf_exponent: f64,
    pub bias: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            fields: 10,
            vocab_size: 10_000,
            samples: 50_000,
            signal_strength: 2.0,
            latent_dim: 4,
            zipf_exponent: 1.0,
            bias: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub data: EncodedDataset,
    /// Ground-truth logits per sample.
    pub logits: Vec<f64>,
    /// Mean binary entropy of the true click probabilities: the expected
    /// logloss of a perfect model.
    pub bayes_logloss: f64,
}

impl SynthDataset {
    /// Logloss of the true logits against the drawn labels on a subset.
    pub fn oracle_logloss(&self, idx: &[usize]) -> f64 {
        let s: f64 = idx
            .iter()
            .map(|&i| logloss(self.logits[i], self.data.labels[i]).0)
            .sum();
        s / idx.len().max(1) as f64
    }

    /// Headered CSV: `label,f0,...` with tokens written as `t<id>`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), DataError> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["label".to_string()];
        header.extend((0..self.data.fields).map(|f| format!("f{f}")));
        wr.write_record(&header)?;
        for i in 0..self.data.samples() {
            let mut rec = vec![u8::from(self.data.labels[i]).to_string()];
            rec.extend(self.data.row(i).iter().map(|id| format!("t{id}")));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn binary_entropy(p: f64) -> f64 {
    let h = |q: f64| if q > 0.0 { -q * q.ln() } else { 0.0 };
    h(p) + h(1.0 - p)
}

pub fn synth_ctr(config: &SynthConfig) -> Result<SynthDataset, DataError> {
    let c = config;
    let bad = |name: &'static str, value: f64| Err(DataError::Parameter { name, value });
    if c.fields < 2 {
        return bad("fields", c.fields as f64);
    }
    if c.vocab_size < c.fields {
        return bad("vocab_size", c.vocab_size as f64);
    }
    if c.samples == 0 {
        return bad("samples", 0.0);
    }
    if c.latent_dim == 0 {
        return bad("latent_dim", 0.0);
    }
    if !(c.signal_strength.is_finite() && c.signal_strength >= 0.0) {
        return bad("signal_strength", c.signal_strength);
    }
    if !(c.zipf_exponent.is_finite() && c.zipf_exponent >= 0.0) {
        return bad("zipf_exponent", c.zipf_exponent);
    }
    if !c.bias.is_finite() {
        return bad("bias", c.bias);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let per_field = c.vocab_size / c.fields;
    let k = c.latent_dim;
    let pairs = (c.fields * (c.fields - 1) / 2) as f64;
    let scale = (pairs * k as f64).powf(-0.25);
    let normal = Normal::new(0.0, scale).expect("positive scale");
    let latent: Vec<f64> = (0..per_field * c.fields * k).map(|_| normal.sample(&mut rng)).collect();

    let weights: Vec<f64> = (1..=per_field).map(|r| (r as f64).powf(-c.zipf_exponent)).collect();
    let pick = WeightedIndex::new(&weights).expect("positive weights");
    // shuffle which token id gets which frequency rank, per field
    let mut rank_to_token: Vec<Vec<u32>> = Vec::with_capacity(c.fields);
    for f in 0..c.fields {
        let mut ids: Vec<u32> = (0..per_field).map(|j| (f * per_field + j) as u32).collect();
        for i in (1..ids.len()).rev() {
            ids.swap(i, rng.gen_range(0..=i));
        }
        rank_to_token.push(ids);
    }

    let mut ids = Vec::with_capacity(c.samples * c.fields);
    let mut labels = Vec::with_capacity(c.samples);
    let mut logits = Vec::with_capacity(c.samples);
    let mut entropy = 0.0;
    let mut sum = vec![0.0; k];
    for _ in 0..c.samples {
        let start = ids.len();
        for tokens in &rank_to_token {
            ids.push(tokens[pick.sample(&mut rng)]);
        }
        sum.iter_mut().for_each(|s| *s = 0.0);
        let mut sq = 0.0;
        for &id in &ids[start..] {
            let u = &latent[id as usize * k..(id as usize + 1) * k];
            for j in 0..k {
                sum[j] += u[j];
                sq += u[j] * u[j];
            }
        }
        let pairwise = 0.5 * (sum.iter().map(|s| s * s).sum::<f64>() - sq);
        let z = c.bias + c.signal_strength * pairwise;
        let p = sigmoid(z);
        entropy += binary_entropy(p);
        labels.push(rng.gen::<f64>() < p);
        logits.push(z);
    }

    Ok(SynthDataset {
        config: c.clone(),
        data: EncodedDataset {
            fields: c.fields,
            vocab_size: (per_field * c.fields) as u32,
            labels,
            ids,
        },
        logits,
        bayes_logloss: entropy / c.samples as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::auc;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            samples: 5000,
            vocab_size: 1000,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn zero_signal_is_coin_flip() {
        let d = synth_ctr(&SynthConfig {
            signal_strength: 0.0,
            ..small(1)
        })
        .unwrap();
        assert!((d.bayes_logloss - std::f64::consts::LN_2).abs() < 1e-12);
        let pos = d.data.labels.iter().filter(|&&l| l).count() as f64 / 5000.0;
        assert!((pos - 0.5).abs() < 4.0 * (0.25f64 / 5000.0).sqrt());
    }

    #[test]
    fn strong_signal_oracle_auc() {
        let d = synth_ctr(&SynthConfig {
            signal_strength: 50.0,
            ..small(2)
        })
        .unwrap();
        let a = auc(&d.logits, &d.data.labels).unwrap();
        assert!(a > 0.97, "{a}");
        assert!(d.bayes_logloss < 0.15);
    }

    #[test]
    fn interaction_scale_is_unit() {
        let d = synth_ctr(&SynthConfig {
            signal_strength: 1.0,
            ..small(3)
        })
        .unwrap();
        let n = d.logits.len() as f64;
        let mean = d.logits.iter().sum::<f64>() / n;
        let var = d.logits.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / n;
        assert!(var > 0.4 && var < 2.5, "{var}");
    }

    #[test]
    fn ids_respect_fields() {
        let d = synth_ctr(&small(4)).unwrap();
        for i in 0..d.data.samples() {
            for (f, &id) in d.data.row(i).iter().enumerate() {
                assert_eq!(id as usize / 100, f);
            }
        }
    }

    #[test]
    fn csv_is_deterministic() {
        let mut a = Vec::new();
        let mut b = Vec::new();
        synth_ctr(&small(5)).unwrap().write_csv(&mut a).unwrap();
        synth_ctr(&small(5)).unwrap().write_csv(&mut b).unwrap();
        assert_eq!(a, b);
        let mut c = Vec::new();
        synth_ctr(&small(6)).unwrap().write_csv(&mut c).unwrap();
        assert_ne!(a, c);
        assert!(String::from_utf8(a).unwrap().starts_with("label,f0,f1"));
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(synth_ctr(&SynthConfig { fields: 1, ..small(0) }).is_err());
        assert!(synth_ctr(&SynthConfig { samples: 0, ..small(0) }).is_err());
        assert!(synth_ctr(&SynthConfig { signal_strength: -1.0, ..small(0) }).is_err());
    }
}
