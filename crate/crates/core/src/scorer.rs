//! Synthetic candidate universe and the fixed logistic decision model.
//!
//! Features are drawn independently per column from normal marginals whose
//! mean and spread are themselves random, then min-max normalized. The
//! normalization constants are kept in [`FeatureMarginals`] so candidates
//! generated later during simulation share the training-time scale.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, RecordKind, RecordReader, RecordWriter};
use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_examples: usize,
    pub num_features: usize,
    pub label_noise_sigma: f64,
    pub label_threshold: f64,
    pub weight_range: (f64, f64),
    pub mean_range: (f64, f64),
    pub std_range: (f64, f64),
    pub rng_seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_examples: 10_000,
            num_features: 10,
            label_noise_sigma: 0.05,
            label_threshold: 0.5,
            weight_range: (0.1, 1.0),
            mean_range: (0.0, 1.0),
            std_range: (0.05, 0.3),
            rng_seed: 42,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.num_features == 0 {
            return bad("num_features must be >= 1");
        }
        if self.num_examples < 2 {
            return bad("num_examples must be >= 2 for min-max normalization");
        }
        if !(self.label_noise_sigma >= 0.0) {
            return bad("label_noise_sigma must be >= 0");
        }
        let (lo, hi) = self.weight_range;
        if !(lo > 0.0 && hi <= 1.0 && lo <= hi) {
            return bad("weight_range must lie within (0, 1] with lo <= hi");
        }
        let (slo, shi) = self.std_range;
        if !(slo > 0.0 && slo <= shi) {
            return bad("std_range must be positive with lo <= hi");
        }
        if self.mean_range.0 > self.mean_range.1 {
            return bad("mean_range must have lo <= hi");
        }
        Ok(())
    }
}

/// Per-feature generating marginals plus the frozen min-max constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMarginals {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
}

impl FeatureMarginals {
    pub fn num_features(&self) -> usize {
        self.means.len()
    }

    /// Draws one candidate on the frozen scale. Values beyond the training
    /// extremes are clamped into the unit box.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.means
            .iter()
            .zip(&self.stds)
            .zip(self.mins.iter().zip(&self.maxs))
            .map(|((&mu, &sd), (&lo, &hi))| {
                let raw = mu + sd * standard_normal(rng);
                normalize(raw, lo, hi).clamp(0.0, 1.0)
            })
            .collect()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        write_file(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn normalize(v: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        (v - lo) / (hi - lo)
    } else {
        0.5
    }
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: Array2<f64>,
    pub labels: Vec<u8>,
    /// Normalized generating weights; kept for audit, never used by the model.
    pub generating_weights: Vec<f64>,
    pub marginals: FeatureMarginals,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.features.ncols()
    }

    /// Writes `f0..f{z-1},label` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..self.num_features()).map(|i| format!("f{i}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for (row, &label) in self.features.outer_iter().zip(&self.labels) {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(label.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a dataset written by [`write_csv`](Self::write_csv). Marginals
    /// are not part of the CSV and must be supplied by the caller.
    pub fn read_csv<R: Read>(input: R, marginals: FeatureMarginals) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        let z = header.len().checked_sub(1).filter(|&z| z > 0).ok_or(Error::Parse {
            line: 1,
            msg: "expected at least one feature column and a label column".into(),
        })?;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let line = i + 2;
            let rec = rec?;
            if rec.len() != z + 1 {
                return Err(Error::Parse { line, msg: format!("expected {} fields, got {}", z + 1, rec.len()) });
            }
            for field in rec.iter().take(z) {
                let v: f64 = field.parse().map_err(|e| Error::Parse { line, msg: format!("{e}") })?;
                data.push(v);
            }
            let label: u8 = rec[z].parse().map_err(|e| Error::Parse { line, msg: format!("{e}") })?;
            if label > 1 {
                return Err(Error::Parse { line, msg: format!("label {label} is not binary") });
            }
            labels.push(label);
        }
        let features = Array2::from_shape_vec((labels.len(), z), data)
            .map_err(|e| Error::Parse { line: 0, msg: e.to_string() })?;
        Ok(LabeledDataset { features, labels, generating_weights: Vec::new(), marginals })
    }
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let z = spec.num_features;
    let n = spec.num_examples;

    let means: Vec<f64> = (0..z).map(|_| uniform(&mut rng, spec.mean_range)).collect();
    let stds: Vec<f64> = (0..z).map(|_| uniform(&mut rng, spec.std_range)).collect();
    let raw_weights: Vec<f64> = (0..z).map(|_| uniform(&mut rng, spec.weight_range)).collect();
    let wsum: f64 = raw_weights.iter().sum();
    let weights: Vec<f64> = raw_weights.iter().map(|w| w / wsum).collect();

    let mut features = Array2::<f64>::zeros((n, z));
    for mut row in features.outer_iter_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = means[j] + stds[j] * standard_normal(&mut rng);
        }
    }
    let mut mins = vec![0.0; z];
    let mut maxs = vec![0.0; z];
    for (j, col) in features.axis_iter(Axis(1)).enumerate() {
        mins[j] = col.fold(f64::INFINITY, |a, &b| a.min(b));
        maxs[j] = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    }
    for mut row in features.outer_iter_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = normalize(*v, mins[j], maxs[j]);
        }
    }

    let noise = Normal::new(0.0, spec.label_noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let labels = features
        .outer_iter()
        .map(|row| {
            let s: f64 = row.iter().zip(&weights).map(|(x, w)| x * w).sum::<f64>() + noise.sample(&mut rng);
            u8::from(s > spec.label_threshold)
        })
        .collect();

    Ok(LabeledDataset {
        features,
        labels,
        generating_weights: weights,
        marginals: FeatureMarginals { means, stds, mins, maxs },
    })
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub final_loss: f64,
    pub accuracy: f64,
}

/// The decision model `score(x) = sigmoid(w·x + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub meta: TrainingMeta,
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl ScoreModel {
    pub fn new(weights: Vec<f64>, bias: f64) -> Self {
        ScoreModel { weights, bias, meta: TrainingMeta::default() }
    }

    pub fn num_features(&self) -> usize {
        self.weights.len()
    }

    /// Affine pre-activation `w·x + b`; caller guarantees the width.
    #[inline]
    pub fn logit_of(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }

    #[inline]
    pub fn score_of(&self, x: &[f64]) -> f64 {
        sigmoid(self.logit_of(x))
    }

    pub fn score(&self, x: &[f64]) -> Result<f64> {
        check_len(self.weights.len(), x.len())?;
        Ok(self.score_of(x))
    }

    pub fn accuracy(&self, data: &LabeledDataset) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let hits = data
            .features
            .outer_iter()
            .zip(&data.labels)
            .filter(|(row, &y)| {
                let p = self.score_of(row.as_slice().expect("row-major dataset"));
                u8::from(p > 0.5) == y
            })
            .count();
        hits as f64 / data.len() as f64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = RecordWriter::new(RecordKind::ScoreModel);
        w.u32(self.weights.len() as u32);
        for &v in &self.weights {
            w.f64(v);
        }
        w.f64(self.bias);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = RecordReader::new(bytes, RecordKind::ScoreModel)?;
        let z = r.u32()? as usize;
        let weights = (0..z).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let bias = r.f64()?;
        r.finish()?;
        Ok(ScoreModel::new(weights, bias))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&checkpoint::read_file(path)?)
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Default number of full-batch epochs.
pub const DEFAULT_EPOCHS: usize = 500;
/// Default step size. Features live in [0, 1], so a large fixed step is stable.
pub const DEFAULT_LR: f64 = 4.0;

/// Full-batch gradient descent on mean binary cross-entropy, starting from
/// the zero model.
pub fn train_score_model(data: &LabeledDataset, epochs: usize, lr: f64) -> Result<ScoreModel> {
    if data.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    if !(lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    let n = data.len() as f64;
    let z = data.num_features();
    let y: Array1<f64> = data.labels.iter().map(|&l| f64::from(l)).collect();
    let mut w = Array1::<f64>::zeros(z);
    let mut b = 0.0;
    let mut loss = std::f64::consts::LN_2;

    for epoch in 0..epochs {
        let logits = data.features.dot(&w) + b;
        let mut residual = Array1::<f64>::zeros(data.len());
        let mut total = 0.0;
        for ((r, &s), &t) in residual.iter_mut().zip(&logits).zip(&y) {
            let p = sigmoid(s);
            *r = p - t;
            // log(1 + e^s) - t*s, computed stably
            total += s.max(0.0) + (-s.abs()).exp().ln_1p() - t * s;
        }
        loss = total / n;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("score model loss became non-finite at epoch {epoch} with lr={lr}")));
        }
        let grad_w = data.features.t().dot(&residual) / n;
        let grad_b = residual.sum() / n;
        w.scaled_add(-lr, &grad_w);
        b -= lr * grad_b;
    }

    let mut model = ScoreModel::new(w.to_vec(), b);
    model.meta = TrainingMeta { epochs, final_loss: loss, accuracy: model.accuracy(data) };
    log::info!("score model trained: epochs={epochs} loss={loss:.5} accuracy={:.4}", model.meta.accuracy);
    Ok(model)
}
