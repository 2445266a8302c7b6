//! Training and evaluation on the synthetic bars task.

use std::io::Write;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::array::DenseArray;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{self, is_quad_param, BindMode, LayerAux, Model, ModelConfig};
use crate::synth::{self, Dataset, Split, SynthSpec};

pub const LOG_SCHEMA: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            min_lr: 1e-5,
            weight_decay: 0.05,
            betas: [0.9, 0.999],
            eps: 1e-8,
        }
    }
}

/// A model given inline or by preset name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Preset(String),
    Config(ModelConfig),
}

impl ModelSpec {
    pub fn resolve(&self) -> Result<ModelConfig> {
        match self {
            ModelSpec::Preset(name) => ModelConfig::preset(name).ok_or_else(|| {
                Error::Config(format!("unknown preset `{name}`; known: {}", ModelConfig::PRESETS.join(", ")))
            }),
            ModelSpec::Config(c) => Ok(c.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub seed: u64,
    /// Overrides the model's penalty weight when set.
    pub lambda: Option<f64>,
    /// Keep the quadrangle heads at their initial (zero) value.
    pub freeze_quad: bool,
    /// Directory holding `train.bin` and `test.bin`; generated from `synth`
    /// when absent.
    pub data: Option<PathBuf>,
    pub synth: SynthSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::Preset("qformer-micro-h".into()),
            optimizer: AdamWConfig::default(),
            epochs: 20,
            batch_size: 32,
            warmup_epochs: 2,
            seed: 0,
            lambda: None,
            freeze_quad: false,
            data: None,
            synth: SynthSpec::default(),
        }
    }
}

impl TrainConfig {
    /// Resolved model configuration with the λ override applied.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = self.model.resolve()?;
        if let Some(l) = self.lambda {
            cfg.lambda = l;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.epochs == 0 {
            problems.push("epochs must be positive".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".to_string());
        }
        if self.lambda.is_some_and(|l| !(l >= 0.0)) {
            problems.push(format!("lambda must be >= 0, got {:?}", self.lambda));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !(o.min_lr >= 0.0) || !(o.weight_decay >= 0.0) || !(o.eps > 0.0) {
            problems.push("optimizer needs lr > 0, min_lr >= 0, weight_decay >= 0, eps > 0".into());
        }
        if o.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            problems.push(format!("betas must lie in [0, 1), got {:?}", o.betas));
        }
        if let Err(e) = self.model_config() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Train and test splits, loaded from `data` or generated.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        match &self.data {
            Some(dir) => Ok((
                Dataset::load(dir.join(Split::Train.file_name()))?,
                Dataset::load(dir.join(Split::Test.file_name()))?,
            )),
            None => Ok((synth::generate(&self.synth, Split::Train)?, synth::generate(&self.synth, Split::Test)?)),
        }
    }
}

/// Linear warmup to `lr`, then cosine decay to `min_lr`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// AdamW with decoupled weight decay on matrices only.
pub struct AdamW {
    cfg: AdamWConfig,
    step: i32,
    moments: IndexMap<String, (Vec<f64>, Vec<f64>)>,
}

fn decays(name: &str, value: &DenseArray) -> bool {
    value.rank() >= 2 && !name.ends_with("rel_pos_bias")
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    /// Applies one update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut IndexMap<String, DenseArray>, grads: &IndexMap<String, DenseArray>, lr: f64) {
        self.step += 1;
        let [b1, b2] = self.cfg.betas;
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
            let wd = if decays(name, p) { self.cfg.weight_decay } else { 0.0 };
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + self.cfg.eps);
                *x -= lr * (update + wd * *x);
            }
        }
    }
}

/// Distribution of one surrogate parameter across windows and heads.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComponentStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub non_finite: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerTStats {
    pub layer: String,
    pub t: Vec<ComponentStats>,
}

fn component_stats(values: impl Iterator<Item = f64>) -> ComponentStats {
    let (mut n, mut sum, mut sq, mut min, mut max, mut bad) = (0usize, 0.0, 0.0, f64::INFINITY, f64::NEG_INFINITY, 0);
    for v in values {
        if !v.is_finite() {
            bad += 1;
            continue;
        }
        n += 1;
        sum += v;
        sq += v * v;
        min = min.min(v);
        max = max.max(v);
    }
    let mean = sum / n.max(1) as f64;
    ComponentStats {
        mean,
        std: (sq / n.max(1) as f64 - mean * mean).max(0.0).sqrt(),
        min,
        max,
        non_finite: bad,
    }
}

/// Per-layer statistics of the predicted surrogate parameters `t`.
pub fn t_statistics(tape: &Tape, layers: &[LayerAux]) -> Vec<LayerTStats> {
    layers
        .iter()
        .filter_map(|l| {
            let t = tape.value(l.attention.params?);
            let t = (0..9).map(|i| component_stats(t.data().iter().skip(i).step_by(9).copied())).collect();
            Some(LayerTStats {
                layer: l.name.clone(),
                t,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub cross_entropy: f64,
    pub reg_loss: f64,
    pub count: usize,
}

/// Accuracy, mean cross-entropy and mean penalty of `model` on `data`.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<EvalMetrics> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut correct, mut ce, mut reg) = (0usize, 0.0, 0.0);
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, BindMode::Inference);
        let xv = tape.constant(x);
        let out = model.loss(&mut tape, &bound, xv, &y)?;
        ce += tape.value(out.cross_entropy).item() * chunk.len() as f64;
        reg += out.reg_loss.map_or(0.0, |r| tape.value(r).item()) * chunk.len() as f64;
        correct += count_correct(tape.value(out.forward.logits), &y);
    }
    let n = data.len().max(1) as f64;
    Ok(EvalMetrics {
        accuracy: correct as f64 / n,
        cross_entropy: ce / n,
        reg_loss: reg / n,
        count: data.len(),
    })
}

fn count_correct(logits: &DenseArray, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            best == y
        })
        .count()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub schema: u32,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_ce: f64,
    pub train_reg: f64,
    pub train_acc: f64,
    pub test_ce: f64,
    pub test_reg: f64,
    pub test_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Model,
    pub last: Model,
    pub best_epoch: usize,
    pub history: Vec<EpochMetrics>,
}

impl TrainOutcome {
    pub fn best_test_acc(&self) -> f64 {
        self.history[self.best_epoch].test_acc
    }
}

/// Trains `model` in place of a fresh initialization. Each epoch's metrics
/// are appended to `log` as one JSON line.
pub fn train(
    cfg: &TrainConfig,
    mut model: Model,
    train_set: &Dataset,
    test_set: &Dataset,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mc = model.config();
    if train_set.height != mc.image_size || train_set.width != mc.image_size {
        return Err(Error::Config(format!(
            "dataset images are {}×{}, model expects {}",
            train_set.height, train_set.width, mc.image_size
        )));
    }
    if let Some(l) = cfg.lambda {
        model.set_lambda(l)?;
    }
    let mode = if cfg.freeze_quad { BindMode::FrozenQuad } else { BindMode::Train };
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let schedule = Schedule {
        lr: cfg.optimizer.lr,
        min_lr: cfg.optimizer.min_lr,
        warmup_steps: cfg.warmup_epochs * steps_per_epoch,
        total_steps: cfg.epochs * steps_per_epoch,
    };
    let mut opt = AdamW::new(cfg.optimizer.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let (mut best, mut best_epoch) = (model.clone(), 0);
    let mut last_t: Vec<LayerTStats> = Vec::new();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum_loss, mut sum_ce, mut sum_reg, mut correct) = (0.0, 0.0, 0.0, 0usize);
        let mut lr = schedule.at(step);
        for chunk in order.chunks(cfg.batch_size) {
            lr = schedule.at(step);
            let (x, y) = train_set.batch(chunk);
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, mode);
            let xv = tape.constant(x);
            let out = match model.loss(&mut tape, &bound, xv, &y) {
                Ok(o) => o,
                Err(Error::Numeric(msg)) => return Err(numeric_abort(&msg, epoch, step, &last_t)),
                Err(e) => return Err(e),
            };
            let loss = tape.value(out.total).item();
            last_t = t_statistics(&tape, &out.forward.layers);
            if !loss.is_finite() {
                return Err(numeric_abort(&format!("loss is {loss}"), epoch, step, &last_t));
            }
            tape.backward(out.total)?;
            let mut grads = IndexMap::new();
            for (name, var) in bound.iter() {
                if let Some(g) = tape.grad(var) {
                    grads.insert(name.to_string(), g.clone());
                }
            }
            opt.step(model.params_mut(), &grads, lr);

            let n = chunk.len() as f64;
            sum_loss += loss * n;
            sum_ce += tape.value(out.cross_entropy).item() * n;
            sum_reg += out.reg_loss.map_or(0.0, |r| tape.value(r).item()) * n;
            correct += count_correct(tape.value(out.forward.logits), &y);
            step += 1;
        }
        let test = evaluate(&model, test_set, cfg.batch_size.max(64))?;
        let n = train_set.len() as f64;
        let m = EpochMetrics {
            schema: LOG_SCHEMA,
            epoch,
            lr,
            train_loss: sum_loss / n,
            train_ce: sum_ce / n,
            train_reg: sum_reg / n,
            train_acc: correct as f64 / n,
            test_ce: test.cross_entropy,
            test_reg: test.reg_loss,
            test_acc: test.accuracy,
        };
        if let Some(w) = log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &m)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        if epoch == 0 || m.test_acc > history.iter().map(|h: &EpochMetrics| h.test_acc).fold(0.0, f64::max) {
            best = model.clone();
            best_epoch = epoch;
        }
        history.push(m);
    }
    Ok(TrainOutcome {
        best,
        last: model,
        best_epoch,
        history,
    })
}

fn numeric_abort(reason: &str, epoch: usize, step: usize, stats: &[LayerTStats]) -> Error {
    let dump = serde_json::to_string(stats).unwrap_or_default();
    Error::Numeric(format!("{reason} at epoch {epoch}, step {step}; t statistics of the last finite step: {dump}"))
}

/// Files written by [`run`].
pub struct RunArtifacts {
    pub metrics: PathBuf,
    pub best: PathBuf,
    pub last: PathBuf,
    pub outcome: TrainOutcome,
}

/// Full training run: data, seeded init, metric log and checkpoints in `out`.
pub fn run(cfg: &TrainConfig, out: &Path) -> Result<RunArtifacts> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let (train_set, test_set) = cfg.datasets()?;
    let model = Model::new(cfg.model_config()?, cfg.seed)?;
    std::fs::write(out.join("train_config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
    let metrics = out.join("metrics.jsonl");
    let mut file = std::io::BufWriter::new(std::fs::File::create(&metrics)?);
    let outcome = train(cfg, model, &train_set, &test_set, Some(&mut file))?;
    file.flush()?;
    let best = out.join("best.ckpt");
    let last = out.join("last.ckpt");
    model::save(&outcome.best, &best)?;
    model::save(&outcome.last, &last)?;
    Ok(RunArtifacts {
        metrics,
        best,
        last,
        outcome,
    })
}

/// Names of the parameters that `freeze_quad` keeps fixed.
pub fn frozen_parameters(model: &Model) -> Vec<&str> {
    model.params().keys().map(String::as_str).filter(|n| is_quad_param(n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        let mut m = ModelConfig::micro_hierarchical();
        m.image_size = 16;
        TrainConfig {
            model: ModelSpec::Config(m),
            epochs: 2,
            batch_size: 8,
            warmup_epochs: 1,
            synth: SynthSpec {
                image_size: 16,
                bar_length: [6.0, 11.0],
                train_count: 24,
                test_count: 8,
                ..SynthSpec::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let s = Schedule {
            lr: 1.0,
            min_lr: 0.0,
            warmup_steps: 4,
            total_steps: 14,
        };
        assert_eq!(s.at(0), 0.25);
        assert_eq!(s.at(3), 1.0);
        assert!((s.at(4) - 1.0).abs() < 1e-12);
        assert!((s.at(9) - 0.5).abs() < 1e-12);
        assert!(s.at(13) < 0.03);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = IndexMap::from([("w".to_string(), DenseArray::full(vec![2, 2], 1.0))]);
        let g = IndexMap::from([("w".to_string(), DenseArray::full(vec![2, 2], 3.0))]);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        opt.step(&mut p, &g, 0.1);
        assert!(p["w"].data().iter().all(|v| (v - 0.9).abs() < 1e-6));
    }

    #[test]
    fn decay_skips_vectors() {
        assert!(!decays("b", &DenseArray::zeros(vec![3])));
        assert!(decays("w", &DenseArray::zeros(vec![3, 3])));
        assert!(!decays("x.attn.rel_pos_bias", &DenseArray::zeros(vec![9, 2])));
    }

    #[test]
    fn identical_seeds_give_identical_logs() {
        let cfg = tiny();
        let (tr, te) = cfg.datasets().unwrap();
        let mut a = Vec::new();
        let mut b = Vec::new();
        let m = Model::new(cfg.model_config().unwrap(), 0).unwrap();
        let oa = train(&cfg, m.clone(), &tr, &te, Some(&mut a)).unwrap();
        train(&cfg, m, &tr, &te, Some(&mut b)).unwrap();
        assert_eq!(a, b);
        assert_eq!(String::from_utf8(a).unwrap().lines().count(), 2);
        assert_eq!(oa.history.len(), 2);
    }

    #[test]
    fn frozen_quad_stays_zero() {
        let cfg = TrainConfig {
            freeze_quad: true,
            ..tiny()
        };
        let (tr, te) = cfg.datasets().unwrap();
        let m = Model::new(cfg.model_config().unwrap(), 0).unwrap();
        let out = train(&cfg, m, &tr, &te, None).unwrap();
        for n in frozen_parameters(&out.last) {
            assert!(out.last.param(n).unwrap().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn bad_config_is_config_error() {
        let e = TrainConfig::from_json(r#"{"epochs": 0, "model": "qformer-nope"}"#).unwrap_err();
        let msg = e.to_string();
        assert!(matches!(e, Error::Config(_)));
        assert!(msg.contains("epochs") && msg.contains("qformer-nope"), "{msg}");
    }

    #[test]
    fn huge_learning_rate_aborts_with_t_dump() {
        let mut cfg = tiny();
        cfg.optimizer.lr = 1e6;
        cfg.warmup_epochs = 0;
        cfg.epochs = 6;
        let (tr, te) = cfg.datasets().unwrap();
        let m = Model::new(cfg.model_config().unwrap(), 0).unwrap();
        match train(&cfg, m, &tr, &te, None) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("t statistics"), "{msg}"),
            Ok(o) => panic!("trained: {:?}", o.history.last()),
            Err(e) => panic!("{e}"),
        }
    }
}
