//! SGD training with deep supervision and optional MixUp batches, fold
//! splitting, validation and checkpointing.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{mixup_with_lambda, random_flip, sample_lambda, sample_patch, BezierCurve};
use crate::blocks::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::inference::{aggregated_dsc, sliding_window, DEFAULT_OVERLAP};
use crate::io::Archive;
use crate::losses::{deep_supervised_loss, mixup_loss, one_hot, LabelPyramid};
use crate::models::{Model, ModelConfig};
use crate::params::{round_to_storage, ParamStore};
use crate::tensor::{Graph, Tensor};
use crate::volume::LabelMap;

/// Exponent of the polynomial learning-rate decay.
pub const LR_DECAY_POWER: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Raw patches per step; MixUp adds as many mixed patches.
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub patch: [usize; 3],
    pub fg_prob: f64,
    pub mixup: bool,
    pub mixup_alpha: f64,
    /// Probability of a Bézier intensity remap of the primary image channel.
    pub bezier_prob: f64,
    pub seed: u64,
    pub fold: usize,
    pub num_folds: usize,
    /// Seed of the case-to-fold assignment.
    pub split_seed: u64,
    /// Validate every this many epochs (and after the last one).
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1000,
            steps_per_epoch: 50,
            batch_size: 2,
            lr0: 0.01,
            momentum: 0.99,
            weight_decay: 3e-5,
            patch: [56, 224, 160],
            fg_prob: 1.0 / 3.0,
            mixup: false,
            mixup_alpha: crate::augment::MIXUP_ALPHA,
            bezier_prob: 0.0,
            seed: 0,
            fold: 0,
            num_folds: 5,
            split_seed: 0,
            val_every: 1,
        }
    }
}

fn parse<T: std::str::FromStr>(pairs: &BTreeMap<String, String>, key: &str, out: &mut T) -> Result<()> {
    if let Some(v) = pairs.get(key) {
        *out = v
            .parse()
            .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))?;
    }
    Ok(())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 || self.val_every == 0 {
            return bad("epochs, steps_per_epoch, batch_size and val_every must be positive".into());
        }
        if !(self.lr0 > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("lr0 must be positive, momentum in [0, 1), weight_decay non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.fg_prob) || !(0.0..=1.0).contains(&self.bezier_prob) {
            return bad("fg_prob and bezier_prob must lie in [0, 1]".into());
        }
        if !(self.mixup_alpha > 0.0) {
            return bad("mixup_alpha must be positive".into());
        }
        if self.patch.contains(&0) {
            return bad(format!("patch {:?} must be positive", self.patch));
        }
        if self.num_folds < 2 || self.fold >= self.num_folds {
            return bad(format!("fold {} outside 0..{}", self.fold, self.num_folds));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let p = self.patch;
        vec![
            ("train.epochs".into(), self.epochs.to_string()),
            ("train.steps_per_epoch".into(), self.steps_per_epoch.to_string()),
            ("train.batch_size".into(), self.batch_size.to_string()),
            ("train.lr0".into(), self.lr0.to_string()),
            ("train.momentum".into(), self.momentum.to_string()),
            ("train.weight_decay".into(), self.weight_decay.to_string()),
            ("train.patch".into(), format!("{},{},{}", p[0], p[1], p[2])),
            ("train.fg_prob".into(), self.fg_prob.to_string()),
            ("train.mixup".into(), self.mixup.to_string()),
            ("train.mixup_alpha".into(), self.mixup_alpha.to_string()),
            ("train.bezier_prob".into(), self.bezier_prob.to_string()),
            ("train.seed".into(), self.seed.to_string()),
            ("train.fold".into(), self.fold.to_string()),
            ("train.num_folds".into(), self.num_folds.to_string()),
            ("train.split_seed".into(), self.split_seed.to_string()),
            ("train.val_every".into(), self.val_every.to_string()),
        ]
    }

    /// Start from `self` and override with any `train.*` keys present.
    /// Unknown `train.*` keys are rejected.
    pub fn with_pairs(&self, pairs: &BTreeMap<String, String>) -> Result<Self> {
        let known: Vec<String> = self.to_pairs().into_iter().map(|(k, _)| k).collect();
        if let Some(k) = pairs.keys().find(|k| k.starts_with("train.") && !known.contains(k)) {
            return Err(Error::Config(format!("unknown key {k}")));
        }
        let mut c = self.clone();
        parse(pairs, "train.epochs", &mut c.epochs)?;
        parse(pairs, "train.steps_per_epoch", &mut c.steps_per_epoch)?;
        parse(pairs, "train.batch_size", &mut c.batch_size)?;
        parse(pairs, "train.lr0", &mut c.lr0)?;
        parse(pairs, "train.momentum", &mut c.momentum)?;
        parse(pairs, "train.weight_decay", &mut c.weight_decay)?;
        if let Some(v) = pairs.get("train.patch") {
            let dims: Vec<usize> = v
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Config(format!("train.patch: cannot parse {v:?}")))?;
            c.patch = dims
                .try_into()
                .map_err(|_| Error::Config("train.patch needs three values".into()))?;
        }
        parse(pairs, "train.fg_prob", &mut c.fg_prob)?;
        parse(pairs, "train.mixup", &mut c.mixup)?;
        parse(pairs, "train.mixup_alpha", &mut c.mixup_alpha)?;
        parse(pairs, "train.bezier_prob", &mut c.bezier_prob)?;
        parse(pairs, "train.seed", &mut c.seed)?;
        parse(pairs, "train.fold", &mut c.fold)?;
        parse(pairs, "train.num_folds", &mut c.num_folds)?;
        parse(pairs, "train.split_seed", &mut c.split_seed)?;
        parse(pairs, "train.val_every", &mut c.val_every)?;
        c.validate()?;
        Ok(c)
    }
}

/// SHA-256 over the model and training settings, in key order.
pub fn config_digest(model: &ModelConfig, train: &TrainConfig) -> String {
    let pairs: BTreeMap<String, String> = model.to_pairs().into_iter().chain(train.to_pairs()).collect();
    let text = crate::io::format_key_values(&pairs);
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// `lr0 · (1 - epoch/epochs)^0.9`.
pub fn lr_schedule(epoch: usize, epochs: usize, lr0: f64) -> f64 {
    lr0 * (1.0 - epoch as f64 / epochs as f64).powf(LR_DECAY_POWER)
}

/// `v ← μ·v + (g + wd·w)`, `w ← w − lr·v`, both rounded to storage precision.
pub fn sgd_update(w: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) {
    for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = momentum * *v + (g + weight_decay * *w);
        *v = *v as f32 as f64;
        *w -= lr * *v;
    }
    round_to_storage(w);
}

/// Apply one SGD step to every parameter. Non-finite gradients abort the
/// step before anything is modified.
pub fn sgd_step(
    params: &mut ParamStore,
    grads: &[Vec<f64>],
    velocity: &mut [Vec<f64>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() || velocity.len() != params.len() {
        return Err(Error::shape("sgd_step: gradient or velocity count differs from parameters"));
    }
    for (k, (id, g)) in params.ids().zip(grads).enumerate() {
        if g.len() != params.get(id).numel() || velocity[k].len() != g.len() {
            return Err(Error::shape(format!("sgd_step: size mismatch for {}", params.name(id))));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", params.name(id))));
        }
    }
    let ids: Vec<_> = params.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        sgd_update(params.get_mut(id).data_mut(), &grads[k], &mut velocity[k], lr, momentum, weight_decay);
    }
    if !params.all_finite() {
        return Err(Error::NonFinite("parameters after SGD step".into()));
    }
    Ok(())
}

/// One training case: image channels `[C, D, H, W]` and labels.
#[derive(Clone, Debug)]
pub struct TrainCase {
    pub id: String,
    pub image: Tensor,
    pub labels: LabelMap,
}

impl TrainCase {
    pub fn new(id: impl Into<String>, image: Tensor, labels: LabelMap) -> Result<Self> {
        let s = image.shape();
        if s.len() != 4 || s[1..] != labels.dims() {
            return Err(Error::shape(format!(
                "training case: image {s:?} and labels {:?} differ",
                labels.dims()
            )));
        }
        Ok(TrainCase {
            id: id.into(),
            image,
            labels,
        })
    }
}

/// A batch of raw patches with one-hot labels and optional mixed patches with soft labels.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    pub y: Tensor,
    pub mixed: Option<(Tensor, Tensor)>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub raw: f64,
    pub mixup: f64,
    pub total: f64,
}

/// Loss of a batch on graph `g`, returning the total variable and its parts.
pub fn batch_loss(model: &Model, g: &mut Graph, binding: &crate::params::Binding, batch: &Batch) -> Result<(crate::tensor::Var, StepLosses)> {
    let x = g.constant(batch.x.clone());
    let logits = model.forward(g, binding, x)?;
    let pyramid = LabelPyramid::for_logits(g, &batch.y, &logits)?;
    let raw = deep_supervised_loss(g, &logits, &pyramid)?;
    let mut losses = StepLosses {
        raw: g.value(raw).item(),
        ..Default::default()
    };
    let total = match &batch.mixed {
        Some((mx, my)) => {
            let xm = g.constant(mx.clone());
            let lm = model.forward(g, binding, xm)?;
            let mix = mixup_loss(g, lm[0], my)?;
            losses.mixup = g.value(mix).item();
            g.add(raw, mix)?
        }
        None => raw,
    };
    losses.total = g.value(total).item();
    Ok((total, losses))
}

struct Draw {
    x: Tensor,
    y: Tensor,
}

fn draw_patch(cases: &[TrainCase], cfg: &TrainConfig, seed: u64) -> Result<Draw> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let case = &cases[rng.random_range(0..cases.len())];
    let (x, l) = sample_patch(&case.image, &case.labels, cfg.patch, cfg.fg_prob, &mut rng)?;
    let (mut x, l, _) = random_flip(&x, &l, [true; 3], &mut rng)?;
    if rng.random::<f64>() < cfg.bezier_prob {
        let curve = BezierCurve::random(&mut rng);
        let vox = cfg.patch.iter().product::<usize>();
        curve.apply(&mut x.data_mut()[..vox]);
    }
    let y = one_hot(l.data(), 1, NUM_CLASSES, cfg.patch)?;
    Ok(Draw {
        x,
        y: y.reshape(&[NUM_CLASSES, cfg.patch[0], cfg.patch[1], cfg.patch[2]])?,
    })
}

/// Sample a batch. Each patch uses its own generator seeded from `rng`, so
/// the result does not depend on how the work is scheduled.
pub fn sample_batch(cases: &[TrainCase], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Batch> {
    if cases.is_empty() {
        return Err(Error::invalid("no training cases"));
    }
    let n = cfg.batch_size;
    let draws = if cfg.mixup { 2 * n } else { n };
    let seeds: Vec<u64> = (0..draws).map(|_| rng.next_u64()).collect();
    let lambdas = if cfg.mixup {
        (0..n)
            .map(|_| sample_lambda(cfg.mixup_alpha, rng))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let patches = seeds
        .par_iter()
        .map(|&s| draw_patch(cases, cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let stack = |items: &[&Tensor]| -> Result<Tensor> {
        let owned: Vec<Tensor> = items.iter().map(|t| (*t).clone()).collect();
        Tensor::stack(&owned)
    };
    let raw = &patches[..n];
    let x = stack(&raw.iter().map(|d| &d.x).collect::<Vec<_>>())?;
    let y = stack(&raw.iter().map(|d| &d.y).collect::<Vec<_>>())?;
    let mixed = if cfg.mixup {
        let mut mx = Vec::with_capacity(n);
        let mut my = Vec::with_capacity(n);
        for k in 0..n {
            let (a, b) = (&patches[k], &patches[n + k]);
            let m = mixup_with_lambda(&a.x, &a.y, &b.x, &b.y, lambdas[k])?;
            mx.push(m.x);
            my.push(m.y);
        }
        Some((Tensor::stack(&mx)?, Tensor::stack(&my)?))
    } else {
        None
    };
    Ok(Batch { x, y, mixed })
}

/// Everything needed to resume training.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub params: ParamStore,
    pub velocity: Vec<Vec<f64>>,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub digest: String,
    /// Validation score that made this checkpoint the best, if any.
    pub val_score: Option<f64>,
}

impl Checkpoint {
    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::default();
        for (k, v) in self.model_config.to_pairs().into_iter().chain(self.train_config.to_pairs()) {
            a.metadata.insert(k, v);
        }
        a.metadata.insert("checkpoint.epoch".into(), self.epoch.to_string());
        a.metadata.insert(
            "checkpoint.rng".into(),
            serde_json::to_string(&self.rng).expect("serializable"),
        );
        a.metadata.insert("checkpoint.digest".into(), self.digest.clone());
        if let Some(s) = self.val_score {
            a.metadata.insert("checkpoint.val_score".into(), format!("{s:?}"));
        }
        for (name, t) in self.params.iter() {
            a.tensors.push((format!("param/{name}"), t.clone()));
        }
        for ((name, t), v) in self.params.iter().zip(&self.velocity) {
            let vt = Tensor::new(t.shape(), v.clone()).expect("velocity matches parameter");
            a.tensors.push((format!("velocity/{name}"), vt));
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let model_config = ModelConfig::from_pairs(&a.metadata)?;
        let train_config = TrainConfig::default().with_pairs(&a.metadata)?;
        let digest = a.meta("checkpoint.digest")?.to_string();
        if digest != config_digest(&model_config, &train_config) {
            return Err(Error::Config("checkpoint digest does not match its configuration".into()));
        }
        let mut model = Model::new(model_config.clone())?;
        let store = model.params_mut();
        let mut velocity = Vec::with_capacity(store.len());
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let p = a
                .tensor(&format!("param/{name}"))
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))?;
            store.set(id, p.clone())?;
            let v = a
                .tensor(&format!("velocity/{name}"))
                .ok_or_else(|| Error::Config(format!("checkpoint lacks velocity of {name}")))?;
            if v.shape() != p.shape() {
                return Err(Error::shape(format!("velocity of {name} has the wrong shape")));
            }
            velocity.push(v.data().to_vec());
        }
        let epoch = a
            .meta("checkpoint.epoch")?
            .parse()
            .map_err(|_| Error::Config("checkpoint.epoch is not an integer".into()))?;
        let rng = serde_json::from_str(a.meta("checkpoint.rng")?)
            .map_err(|e| Error::Config(format!("checkpoint.rng: {e}")))?;
        let val_score = match a.metadata.get("checkpoint.val_score") {
            Some(s) => Some(
                s.parse()
                    .map_err(|_| Error::Config("checkpoint.val_score is not a number".into()))?,
            ),
            None => None,
        };
        Ok(Checkpoint {
            model_config,
            train_config,
            params: model.params().clone(),
            velocity,
            epoch,
            rng,
            digest,
            val_score,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }

    /// The model described by this checkpoint.
    pub fn model(&self) -> Result<Model> {
        let mut m = Model::new(self.model_config.clone())?;
        for id in m.params().ids().collect::<Vec<_>>() {
            let name = m.params().name(id).to_string();
            let src = self.params.lookup(&name).expect("same architecture");
            let t = self.params.get(src).clone();
            m.params_mut().set(id, t)?;
        }
        Ok(m)
    }
}

/// Mean losses of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub raw_loss: f64,
    pub mixup_loss: f64,
}

/// Mutable training state: model, optimizer velocity, epoch and generator.
pub struct Trainer {
    model: Model,
    config: TrainConfig,
    velocity: Vec<Vec<f64>>,
    epoch: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let div = model.config().divisor();
        if (0..3).any(|a| config.patch[a] % div[a] != 0) {
            return Err(Error::Config(format!(
                "patch {:?} must be a multiple of {div:?}",
                config.patch
            )));
        }
        let velocity = model.params().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Trainer {
            model,
            config,
            velocity,
            epoch: 0,
            rng,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(ck.model()?, ck.train_config.clone())?;
        t.velocity = ck.velocity.clone();
        t.epoch = ck.epoch;
        t.rng = ck.rng.clone();
        Ok(t)
    }

    pub fn checkpoint(&self, val_score: Option<f64>) -> Checkpoint {
        Checkpoint {
            model_config: self.model.config().clone(),
            train_config: self.config.clone(),
            params: self.model.params().clone(),
            velocity: self.velocity.clone(),
            epoch: self.epoch,
            rng: self.rng.clone(),
            digest: config_digest(self.model.config(), &self.config),
            val_score,
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn current_lr(&self) -> f64 {
        lr_schedule(self.epoch.min(self.config.epochs - 1), self.config.epochs, self.config.lr0)
    }

    /// Forward, backward and one SGD step on a given batch.
    pub fn step_on_batch(&mut self, batch: &Batch, lr: f64) -> Result<StepLosses> {
        let mut g = Graph::new();
        let binding = self.model.params().bind(&mut g, true);
        let (total, losses) = batch_loss(&self.model, &mut g, &binding, batch)?;
        if !losses.total.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        g.backward(total)?;
        let grads = binding.grads(&g);
        let cfg = &self.config;
        sgd_step(
            self.model.params_mut(),
            &grads,
            &mut self.velocity,
            lr,
            cfg.momentum,
            cfg.weight_decay,
        )?;
        Ok(losses)
    }

    /// Sample a batch and take one step.
    pub fn step(&mut self, cases: &[TrainCase]) -> Result<StepLosses> {
        let batch = sample_batch(cases, &self.config, &mut self.rng)?;
        let lr = self.current_lr();
        self.step_on_batch(&batch, lr)
    }

    /// `steps_per_epoch` steps at this epoch's learning rate.
    pub fn train_epoch(&mut self, cases: &[TrainCase]) -> Result<EpochMetrics> {
        let lr = self.current_lr();
        let (mut raw, mut mix) = (0.0, 0.0);
        for _ in 0..self.config.steps_per_epoch {
            let l = self.step(cases)?;
            raw += l.raw;
            mix += l.mixup;
        }
        let n = self.config.steps_per_epoch as f64;
        let m = EpochMetrics {
            epoch: self.epoch,
            lr,
            raw_loss: raw / n,
            mixup_loss: mix / n,
        };
        self.epoch += 1;
        Ok(m)
    }
}

/// Fold of each case: a seeded shuffle, then position `i` goes to fold `i % folds`.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds == 0 || n < folds {
        return Err(Error::invalid(format!("{n} cases cannot fill {folds} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (pos, &case) in order.iter().enumerate() {
        fold[case] = pos % folds;
    }
    Ok(fold)
}

/// Indices of training and validation cases for `fold`.
pub fn split_fold(n: usize, folds: usize, fold: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if fold >= folds {
        return Err(Error::invalid(format!("fold {fold} outside 0..{folds}")));
    }
    let assign = fold_assignment(n, folds, seed)?;
    let (val, train): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| assign[i] == fold);
    if val.is_empty() || train.is_empty() {
        return Err(Error::invalid(format!("fold {fold} is empty")));
    }
    Ok((train, val))
}

/// Aggregated Dice of sliding-window predictions on the given cases.
pub fn validate(model: &Model, cases: &[TrainCase], patch: [usize; 3]) -> Result<crate::inference::EvalReport> {
    let preds = cases
        .iter()
        .map(|c| {
            let p = sliding_window(model, &c.image, patch, DEFAULT_OVERLAP)?;
            c.labels.with_data(p.argmax())
        })
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<_> = preds.iter().zip(cases).map(|(p, c)| (p, &c.labels)).collect();
    aggregated_dsc(&pairs)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub raw_loss: f64,
    pub mixup_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_dsc: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_mean: Option<f64>,
}

pub struct FoldOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Train on every fold but `config.fold`, validating on that fold, and keep
/// the checkpoint with the highest mean aggregated Dice (earliest on ties).
/// With `out_dir`, writes `fold{K}_best.dfck`, `fold{K}_last.dfck` and
/// `fold{K}_log.jsonl`.
pub fn run_fold(dataset: &[TrainCase], model: Model, config: &TrainConfig, out_dir: Option<&Path>) -> Result<FoldOutcome> {
    let (train_idx, val_idx) = split_fold(dataset.len(), config.num_folds, config.fold, config.split_seed)?;
    let train: Vec<TrainCase> = train_idx.iter().map(|&i| dataset[i].clone()).collect();
    let val: Vec<TrainCase> = val_idx.iter().map(|&i| dataset[i].clone()).collect();
    let mut trainer = Trainer::new(model, config.clone())?;
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(format!("fold{}_log.jsonl", config.fold));
            Some((std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Checkpoint)> = None;
    while trainer.epoch() < config.epochs {
        let m = trainer.train_epoch(&train)?;
        let done = trainer.epoch();
        let mut rec = EpochRecord {
            epoch: m.epoch,
            lr: m.lr,
            raw_loss: m.raw_loss,
            mixup_loss: m.mixup_loss,
            val_dsc: None,
            val_mean: None,
        };
        if done % config.val_every == 0 || done == config.epochs {
            let report = validate(trainer.model(), &val, config.patch)?;
            rec.val_dsc = Some(report.aggregate);
            rec.val_mean = Some(report.mean);
            if best.as_ref().is_none_or(|(s, _, _)| report.mean > *s) {
                best = Some((report.mean, m.epoch, trainer.checkpoint(Some(report.mean))));
            }
        }
        if let Some((f, path)) = &mut log {
            let line = serde_json::to_string(&rec).expect("serializable");
            writeln!(f, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        history.push(rec);
    }
    let (_, best_epoch, best_ck) = best.expect("validated at the last epoch");
    let last = trainer.checkpoint(None);
    if let Some(dir) = out_dir {
        best_ck.save(&dir.join(format!("fold{}_best.dfck", config.fold)))?;
        last.save(&dir.join(format!("fold{}_last.dfck", config.fold)))?;
    }
    Ok(FoldOutcome {
        best: best_ck,
        last,
        best_epoch,
        history,
    })
}
