//! Supervised fine-tuning for nodule classification (NC), nodule
//! segmentation (NS) and multi-view nodule classification (MNC).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::{auc, binarize, dice_score};
use crate::augment::{augment_finetune, normalize, AugmentSpec};
use crate::backend::{cosine_lr, sgd_step, OptimState, ParamStore, Tape, Var};
use crate::data::{batch_sampler, Patient, Splits, View, ViewData};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::models::{
    build_segmentation_net, eval_pass, Backbone, Checkpoint, ClassifierNet, Ctx, DecoderConfig, EncoderConfig,
    MncLogits, Mode, SegmentationNet,
};
use crate::rng;

pub const DICE_EPS: f32 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Nc,
    Ns,
    Mnc,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Nc => "nc",
            Task::Ns => "ns",
            Task::Mnc => "mnc",
        }
    }

    pub fn metric(self) -> &'static str {
        match self {
            Task::Ns => "dice",
            Task::Nc | Task::Mnc => "auc",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nc" => Ok(Task::Nc),
            "ns" => Ok(Task::Ns),
            "mnc" => Ok(Task::Mnc),
            other => Err(Error::Config(format!("unknown task {other:?}; expected nc, ns or mnc"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub task: Task,
    /// Percentage of the training split used.
    pub proportion: u32,
    /// Initial learning rates tried; the best on validation is kept.
    pub lr0_grid: Vec<f32>,
    pub epochs: usize,
    pub weight_decay: f32,
    pub sgd_momentum: f32,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    pub augment: bool,
    pub allow_fingerprint_mismatch: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            task: Task::Nc,
            proportion: 10,
            lr0_grid: vec![0.01],
            epochs: 50,
            weight_decay: 1e-5,
            sgd_momentum: 0.9,
            batch_size: 32,
            patience: 15,
            seed: 0,
            augment: true,
            allow_fingerprint_mismatch: false,
        }
    }
}

impl FinetuneConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.proportion == 0 || self.proportion > 100 {
            p.push(format!("proportion {} outside (0, 100]", self.proportion));
        }
        if self.lr0_grid.is_empty() || self.lr0_grid.iter().any(|&l| !(l > 0.0)) {
            p.push("lr0_grid must hold positive learning rates".into());
        }
        if self.batch_size == 0 {
            p.push("batch_size must be positive".into());
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.sgd_momentum) {
            p.push("weight_decay must be >= 0 and sgd_momentum in [0, 1)".into());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }
}

/// Mean `-log softmax(logits)[label]` over rows of `[n, 2]` logits.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.softmax_cross_entropy(logits, labels)
}

/// Mean over images of `1 - (2 sum(p g) + eps) / (sum p + sum g + eps)`.
pub fn soft_dice_loss(tape: &mut Tape, probs: Var, mask: Var) -> Result<Var> {
    let pg = tape.mul(probs, mask)?;
    let inter = tape.sum_per_sample(pg);
    let sp = tape.sum_per_sample(probs);
    let sg = tape.sum_per_sample(mask);
    let num = tape.scale(inter, 2.0);
    let num = tape.add_scalar(num, DICE_EPS);
    let den = tape.add(sp, sg)?;
    let den = tape.add_scalar(den, DICE_EPS);
    let ratio = tape.div(num, den)?;
    let m = tape.mean(ratio);
    let neg = tape.scale(m, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Sum of the cross-entropies of both branches and their average.
pub fn mnc_loss(tape: &mut Tape, logits: &MncLogits, labels: &[usize]) -> Result<Var> {
    let t = cross_entropy(tape, logits.transverse, labels)?;
    let l = cross_entropy(tape, logits.longitudinal, labels)?;
    let a = cross_entropy(tape, logits.average, labels)?;
    let s = tape.add(t, l)?;
    tape.add(s, a)
}

#[derive(Clone, Debug)]
pub enum TaskNet {
    Classifier(ClassifierNet),
    Segmentation(SegmentationNet),
}

/// A task network with its weights.
#[derive(Clone, Debug)]
pub struct TaskModel {
    pub task: Task,
    pub encoder: EncoderConfig,
    pub net: TaskNet,
    pub store: ParamStore,
}

impl TaskModel {
    /// Randomly initialized network for `task`.
    pub fn new(task: Task, encoder: &EncoderConfig, seed: u64) -> Result<Self> {
        let (net, store) = match task {
            Task::Nc | Task::Mnc => {
                let (n, s) = ClassifierNet::build(encoder, seed)?;
                (TaskNet::Classifier(n), s)
            }
            Task::Ns => {
                let (n, s) = build_segmentation_net(encoder, &DecoderConfig::for_encoder(encoder), seed)?;
                (TaskNet::Segmentation(n), s)
            }
        };
        Ok(TaskModel {
            task,
            encoder: encoder.clone(),
            net,
            store,
        })
    }

    pub fn backbone(&self) -> &Backbone {
        match &self.net {
            TaskNet::Classifier(n) => &n.backbone,
            TaskNet::Segmentation(n) => &n.backbone,
        }
    }

    /// Copies the `backbone.*` tensors of `ckpt`; everything else in it
    /// (projection head, momentum encoders, bank) is ignored.
    pub fn load_backbone(&mut self, ckpt: &Checkpoint, allow_mismatch: bool) -> Result<usize> {
        ckpt.verify(self.encoder.fingerprint(), allow_mismatch)?;
        ckpt.load_into(&mut self.store, "", "backbone.")
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(self.encoder.fingerprint(), &self.store)
    }

    /// Restores a task checkpoint, rejecting one written for another task
    /// family.
    pub fn from_checkpoint(task: Task, encoder: &EncoderConfig, ckpt: &Checkpoint, allow_mismatch: bool) -> Result<Self> {
        ckpt.verify(encoder.fingerprint(), allow_mismatch)?;
        let (needed, found) = match task {
            Task::Ns => ("decoder.", ckpt.has_prefix("decoder.")),
            Task::Nc | Task::Mnc => ("classifier.", ckpt.has_prefix("classifier.")),
        };
        if !found {
            return Err(Error::Checkpoint(format!(
                "checkpoint has no {needed}* tensors; it was not trained for task {task}"
            )));
        }
        let mut m = Self::new(task, encoder, 0)?;
        ckpt.load_into(&mut m.store, "", "")?;
        Ok(m)
    }
}

/// One training or evaluation item: a patient and, except for MNC, a view.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sample {
    pub patient: usize,
    pub view: Option<View>,
}

fn view_of(p: &Patient, v: View) -> Option<&ViewData> {
    match v {
        View::Transverse => p.transverse.as_ref(),
        View::Longitudinal => p.longitudinal.as_ref(),
    }
}

/// Items of `task` drawn from `indices`. NC and NS treat every view as an
/// independent sample; MNC keeps paired patients only.
pub fn task_samples(task: Task, patients: &[Patient], indices: &[usize]) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for &i in indices {
        let p = patients
            .get(i)
            .ok_or_else(|| Error::Data(format!("patient index {i} out of range")))?;
        match task {
            Task::Mnc => {
                if p.is_paired() {
                    out.push(Sample { patient: i, view: None });
                } else {
                    log::warn!("multi-view classification skips unpaired patient {}", p.id);
                }
            }
            Task::Nc | Task::Ns => {
                for v in [View::Transverse, View::Longitudinal] {
                    if let Some(d) = view_of(p, v) {
                        if task == Task::Ns && d.mask.is_none() {
                            return Err(Error::Data(format!(
                                "segmentation needs masks; patient {} has none for its {v:?} view",
                                p.id
                            )));
                        }
                        out.push(Sample { patient: i, view: Some(v) });
                    }
                }
            }
        }
    }
    Ok(out)
}

fn prepared(img: &GrayImage) -> GrayImage {
    normalize(img).0
}

/// Input images (and masks) of a batch, augmented when `augment` is given.
struct BatchInputs {
    images: Vec<GrayImage>,
    /// MNC: the longitudinal images, row-aligned with `images`.
    second: Vec<GrayImage>,
    masks: Vec<GrayImage>,
    labels: Vec<usize>,
}

fn batch_inputs(
    task: Task,
    patients: &[Patient],
    samples: &[Sample],
    augment: Option<(&AugmentSpec, u64, usize)>,
) -> BatchInputs {
    let mut b = BatchInputs {
        images: Vec::new(),
        second: Vec::new(),
        masks: Vec::new(),
        labels: Vec::new(),
    };
    let load = |s: &Sample, v: View| -> (GrayImage, Option<GrayImage>) {
        let d = view_of(&patients[s.patient], v).expect("sample views exist");
        match augment {
            Some((spec, seed, epoch)) => {
                let mut r = rng::stream(seed, "finetune-augment", &[epoch as u64, s.patient as u64, v.index() as u64]);
                let (img, mask) = augment_finetune(&d.image, d.mask.as_ref(), spec, &mut r);
                (prepared(&img), mask)
            }
            None => (prepared(&d.image), d.mask.clone()),
        }
    };
    for s in samples {
        b.labels.push(patients[s.patient].label.index());
        match s.view {
            Some(v) => {
                let (img, mask) = load(s, v);
                b.images.push(img);
                if task == Task::Ns {
                    b.masks.push(mask.expect("segmentation samples have masks"));
                }
            }
            None => {
                b.images.push(load(s, View::Transverse).0);
                b.second.push(load(s, View::Longitudinal).0);
            }
        }
    }
    b
}

/// Forward pass and task loss on one batch.
fn task_loss(model: &TaskModel, ctx: &mut Ctx, inputs: &BatchInputs) -> Result<Var> {
    let x = ctx.tape.constant(GrayImage::batch(&inputs.images)?);
    match (&model.net, model.task) {
        (TaskNet::Classifier(net), Task::Nc) => {
            let logits = net.forward(ctx, x)?;
            cross_entropy(ctx.tape, logits, &inputs.labels)
        }
        (TaskNet::Classifier(net), Task::Mnc) => {
            let xl = ctx.tape.constant(GrayImage::batch(&inputs.second)?);
            let logits = net.mnc_forward(ctx, x, xl)?;
            mnc_loss(ctx.tape, &logits, &inputs.labels)
        }
        (TaskNet::Segmentation(net), Task::Ns) => {
            let logits = net.forward(ctx, x)?;
            let probs = ctx.tape.sigmoid(logits);
            let mask = ctx.tape.constant(GrayImage::batch(&inputs.masks)?);
            soft_dice_loss(ctx.tape, probs, mask)
        }
        _ => Err(Error::InvalidArgument(format!("network does not match task {}", model.task))),
    }
}

/// Eval-mode outputs: malignancy scores for classification, binary masks
/// for segmentation.
pub enum Predictions {
    Scores(Vec<f32>),
    Masks(Vec<GrayImage>),
}

const EVAL_CHUNK: usize = 64;

pub fn predict(model: &TaskModel, patients: &[Patient], samples: &[Sample]) -> Result<Predictions> {
    let mut scores = Vec::new();
    let mut masks = Vec::new();
    for chunk in samples.chunks(EVAL_CHUNK) {
        let inputs = batch_inputs(model.task, patients, chunk, None);
        let (tape, out) = eval_pass(&model.store, |ctx| {
            let x = ctx.tape.constant(GrayImage::batch(&inputs.images)?);
            match &model.net {
                TaskNet::Classifier(net) if model.task == Task::Mnc => {
                    let xl = ctx.tape.constant(GrayImage::batch(&inputs.second)?);
                    Ok(net.mnc_forward(ctx, x, xl)?.average)
                }
                TaskNet::Classifier(net) => net.forward(ctx, x),
                TaskNet::Segmentation(net) => net.forward(ctx, x),
            }
        })?;
        let v = tape.value(out);
        match &model.net {
            TaskNet::Classifier(_) => {
                scores.extend(v.data().chunks(2).map(|l| l[1] - l[0]));
            }
            TaskNet::Segmentation(_) => {
                let (n, _, h, w) = v.dims4()?;
                for i in 0..n {
                    // sigmoid(z) >= 0.5 exactly when z >= 0.
                    let m = binarize(&v.data()[i * h * w..(i + 1) * h * w], 0.0);
                    masks.push(GrayImage::new(w, h, m)?);
                }
            }
        }
    }
    Ok(match model.net {
        TaskNet::Classifier(_) => Predictions::Scores(scores),
        TaskNet::Segmentation(_) => Predictions::Masks(masks),
    })
}

/// AUC (NC per view, MNC per patient) or mean Dice (NS) on `indices`.
pub fn evaluate(model: &TaskModel, patients: &[Patient], indices: &[usize]) -> Result<f64> {
    let samples = task_samples(model.task, patients, indices)?;
    if samples.is_empty() {
        return Err(Error::Data(format!("no {} samples to evaluate", model.task)));
    }
    match predict(model, patients, &samples)? {
        Predictions::Scores(s) => {
            let labels: Vec<u8> = samples.iter().map(|x| patients[x.patient].label.index() as u8).collect();
            auc(&s, &labels)
        }
        Predictions::Masks(m) => {
            let mut total = 0.0;
            for (pred, s) in m.iter().zip(&samples) {
                let gt = view_of(&patients[s.patient], s.view.expect("views"))
                    .and_then(|d| d.mask.as_ref())
                    .expect("masks checked");
                total += dice_score(pred.data(), gt.data())?;
            }
            Ok(total / m.len() as f64)
        }
    }
}

/// One line of the validation history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub lr0: f32,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub lr: f32,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    /// Weights from the best validation epoch.
    pub model: TaskModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub lr0: f32,
}

fn train_one(
    cfg: &FinetuneConfig,
    encoder: &EncoderConfig,
    augment: &AugmentSpec,
    patients: &[Patient],
    train: &[Sample],
    val: &[usize],
    init: Option<&Checkpoint>,
    lr0: f32,
) -> Result<FinetuneOutcome> {
    let mut model = TaskModel::new(cfg.task, encoder, cfg.seed)?;
    if let Some(c) = init {
        let n = model.load_backbone(c, cfg.allow_fingerprint_mismatch)?;
        log::debug!("loaded {n} backbone tensors");
    }
    let mut optim = OptimState::new(lr0, cfg.weight_decay, cfg.sgd_momentum);
    let order: Vec<usize> = (0..train.len()).collect();
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let shuffle_seed = rng::derive_seed(cfg.seed, "finetune-shuffle", &[]);
    let mut step = 0;
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs {
        let first_lr = cosine_lr(step, total, lr0);
        let mut loss_sum = 0.0f64;
        let batches = batch_sampler(&order, cfg.batch_size, shuffle_seed, epoch);
        for batch in &batches {
            let items: Vec<Sample> = batch.iter().map(|&k| train[k]).collect();
            let aug = cfg.augment.then_some((augment, cfg.seed, epoch));
            let inputs = batch_inputs(cfg.task, patients, &items, aug);
            let mut tape = Tape::new();
            let bound = model.store.bind(&mut tape, true);
            let (loss, updates) = {
                let mut ctx = Ctx::new(&mut tape, &model.store, &bound, Mode::Train);
                let loss = task_loss(&model, &mut ctx, &inputs)?;
                (loss, ctx.into_updates())
            };
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("fine-tuning loss at epoch {epoch}, step {step}")));
            }
            let mut grads = tape.backward(loss)?;
            let g = bound.grads(&mut grads);
            drop(tape);
            let lr = cosine_lr(step, total, lr0);
            sgd_step(&mut model.store, &g, &mut optim, lr)?;
            updates.apply(&mut model.store);
            loss_sum += value as f64;
            step += 1;
        }
        let metric = evaluate(&model, patients, val)?;
        history.push(EpochRecord {
            lr0,
            epoch,
            train_loss: loss_sum / batches.len().max(1) as f64,
            val_metric: metric,
            lr: first_lr,
        });
        log::debug!("{} lr0 {lr0} epoch {epoch} val {} {metric:.4}", cfg.task, cfg.task.metric());
        if best.as_ref().map_or(true, |(b, _, _)| metric > *b) {
            best = Some((metric, epoch, model.store.clone()));
        } else if epoch - best.as_ref().expect("set").1 >= cfg.patience {
            break;
        }
    }
    let (best_metric, best_epoch) = match best {
        Some((m, e, store)) => {
            model.store = store;
            (m, e)
        }
        None => (evaluate(&model, patients, val)?, 0),
    };
    Ok(FinetuneOutcome {
        model,
        history,
        best_epoch,
        best_metric,
        lr0,
    })
}

/// Fine-tunes on the `cfg.proportion` training subset, early-stopping on
/// the validation metric, for each learning rate of the grid; returns the
/// run with the best validation score.
pub fn run_finetune(
    cfg: &FinetuneConfig,
    encoder: &EncoderConfig,
    augment: &AugmentSpec,
    patients: &[Patient],
    splits: &Splits,
    init: Option<&Checkpoint>,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    encoder.validate()?;
    augment.validate()?;
    let subset = splits.train_subset(cfg.proportion)?;
    if let Some(t) = subset.iter().find(|i| splits.test.contains(i)) {
        return Err(Error::Data(format!("test patient {t} found in the training subset")));
    }
    let train = task_samples(cfg.task, patients, subset)?;
    if train.is_empty() {
        return Err(Error::Data(format!("no {} training samples at r={}%", cfg.task, cfg.proportion)));
    }
    let mut best: Option<FinetuneOutcome> = None;
    let mut history = Vec::new();
    for &lr0 in &cfg.lr0_grid {
        let out = train_one(cfg, encoder, augment, patients, &train, &splits.val, init, lr0)?;
        history.extend(out.history.iter().cloned());
        if best.as_ref().map_or(true, |b| out.best_metric > b.best_metric) {
            best = Some(out);
        }
    }
    let mut best = best.expect("grid is nonempty");
    best.history = history;
    Ok(best)
}
