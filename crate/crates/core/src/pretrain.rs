//! Multi-view momentum-contrast pre-training.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{augment_pretrain, normalize, sample_stream, AugmentSpec};
use crate::backend::{cosine_lr, sgd_step, OptimState, ParamStore, Tape, Tensor, Var};
use crate::contrastive::{batch_loss, ContrastiveConfig, Negatives, ViewLatents};
use crate::data::{batch_sampler, Patient};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::memory_bank::MemoryBank;
use crate::models::{Checkpoint, Ctx, EncoderArch, EncoderConfig, EncoderSet, Mode, StatUpdates};

/// Bank size and learning rate used when continuing from an init checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoStageOverrides {
    #[serde(alias = "K")]
    pub bank_size: usize,
    pub lr0: f32,
}

impl Default for TwoStageOverrides {
    fn default() -> Self {
        TwoStageOverrides { bank_size: 1024, lr0: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub tau: f32,
    #[serde(alias = "K")]
    pub bank_size: usize,
    pub alpha: f32,
    pub lambda: f32,
    pub lr0: f32,
    pub weight_decay: f32,
    pub sgd_momentum: f32,
    pub patients_per_batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub share_query: bool,
    pub share_momentum: bool,
    /// Fraction of unpaired patients added to the pre-training pool.
    pub unpaired_fraction: f64,
    pub init_checkpoint: Option<PathBuf>,
    pub two_stage: TwoStageOverrides,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            tau: 0.1,
            bank_size: 256,
            alpha: 0.99,
            lambda: 0.5,
            lr0: 0.03,
            weight_decay: 1e-4,
            sgd_momentum: 0.9,
            patients_per_batch: 16,
            epochs: 30,
            seed: 0,
            share_query: true,
            share_momentum: true,
            unpaired_fraction: 1.0,
            init_checkpoint: None,
            two_stage: TwoStageOverrides::default(),
        }
    }
}

impl PretrainConfig {
    /// Full-size schedule.
    pub fn full_scale() -> Self {
        PretrainConfig {
            bank_size: 512,
            patients_per_batch: 64,
            epochs: 200,
            ..Self::default()
        }
    }

    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            tau: self.tau,
            lambda: self.lambda,
        }
    }

    /// Every violated constraint, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if !(0.0..=1.0).contains(&self.alpha) {
            p.push(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(self.tau > 0.0) {
            p.push(format!("tau {} must be positive", self.tau));
        }
        if !(self.lambda >= 0.0) {
            p.push(format!("lambda {} must be non-negative", self.lambda));
        }
        if !(self.lr0 > 0.0) || !(self.two_stage.lr0 > 0.0) {
            p.push("learning rates must be positive".into());
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.sgd_momentum) {
            p.push("weight_decay must be >= 0 and sgd_momentum in [0, 1)".into());
        }
        if self.patients_per_batch == 0 {
            p.push("patients_per_batch must be positive".into());
        }
        for k in [self.bank_size, self.two_stage.bank_size] {
            if k < 2 * self.patients_per_batch {
                p.push(format!(
                    "bank size {k} cannot hold one batch of {} patients",
                    self.patients_per_batch
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.unpaired_fraction) {
            p.push(format!("unpaired_fraction {} outside [0, 1]", self.unpaired_fraction));
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

    /// The configuration actually trained with: two-stage overrides apply
    /// when an init checkpoint is given.
    pub fn effective(&self) -> Self {
        let mut c = self.clone();
        if c.init_checkpoint.is_some() {
            c.bank_size = c.two_stage.bank_size;
            c.lr0 = c.two_stage.lr0;
        }
        c
    }
}

/// `theta_m <- alpha * theta_m + (1 - alpha) * theta_q` for every entry,
/// normalization buffers included.
pub fn ema_update(momentum: &mut ParamStore, query: &ParamStore, alpha: f32) -> Result<()> {
    if momentum.len() != query.len() {
        return Err(Error::shape("ema_update", &[momentum.len()], &[query.len()]));
    }
    for (m, q) in momentum.entries().iter().zip(query.entries()) {
        if m.value.shape() != q.value.shape() || m.name != q.name {
            return Err(Error::shape("ema_update", m.value.shape(), q.value.shape()));
        }
    }
    let beta = 1.0 - alpha;
    for (m, q) in momentum.entries_mut().iter_mut().zip(query.entries()) {
        for (a, &b) in m.value.data_mut().iter_mut().zip(q.value.data()) {
            *a = alpha * *a + beta * b;
        }
    }
    Ok(())
}

/// Everything that evolves during pre-training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub encoders: EncoderSet,
    pub bank: MemoryBank,
    pub optim_f: OptimState,
    /// Present only when the query encoders are not shared.
    pub optim_g: Option<OptimState>,
    pub step: usize,
    pub epoch: usize,
}

const STATE_STEP: &str = "state.step";
const STATE_EPOCH: &str = "state.epoch";
const BANK: &str = "bank.latents";

impl TrainState {
    pub fn new(encoder: &EncoderConfig, cfg: &PretrainConfig) -> Result<Self> {
        let encoders = EncoderSet::new(encoder, cfg.seed, cfg.share_query, cfg.share_momentum)?;
        let optim = OptimState::new(cfg.lr0, cfg.weight_decay, cfg.sgd_momentum);
        Ok(TrainState {
            bank: MemoryBank::new(cfg.bank_size, encoder.proj_out)?,
            optim_g: (!cfg.share_query).then(|| optim.clone()),
            optim_f: optim,
            encoders,
            step: 0,
            epoch: 0,
        })
    }

    /// Query weights under their own names (what fine-tuning loads), plus
    /// the momentum encoders, optimizer velocities, bank and counters needed
    /// to resume.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let enc = &self.encoders;
        let mut c = Checkpoint::from_store(enc.config().fingerprint(), enc.f_q());
        if !enc.share_query() {
            c.extend_from_store("g_query.", enc.g_q());
        }
        c.extend_from_store("momentum.", enc.f_m());
        if !enc.share_momentum() {
            c.extend_from_store("g_momentum.", enc.g_m());
        }
        let velocities = [("optim.f.", Some((&self.optim_f, enc.f_q()))), ("optim.g.", self.optim_g.as_ref().map(|o| (o, enc.g_q())))];
        for (prefix, entry) in velocities {
            let Some((optim, store)) = entry else { continue };
            for (i, e) in store.entries().iter().enumerate() {
                if let Some(v) = optim.velocity(i) {
                    c.push(format!("{prefix}{}", e.name), v.clone());
                }
            }
        }
        c.push(BANK, self.bank.negatives());
        c.push(STATE_STEP, Tensor::from_vec(vec![self.step as f32]));
        c.push(STATE_EPOCH, Tensor::from_vec(vec![self.epoch as f32]));
        c
    }

    /// Restores a state written by [`TrainState::to_checkpoint`].
    pub fn from_checkpoint(ckpt: &Checkpoint, encoder: &EncoderConfig, cfg: &PretrainConfig) -> Result<Self> {
        ckpt.verify(encoder.fingerprint(), false)?;
        let mut s = Self::new(encoder, cfg)?;
        {
            let enc = &mut s.encoders;
            ckpt.load_into(enc.f_q_mut(), "", "")?;
            if !enc.share_query() {
                ckpt.load_into(enc.g_q_mut(), "g_query.", "")?;
            }
            ckpt.load_into(enc.f_m_mut(), "momentum.", "")?;
            if !enc.share_momentum() {
                ckpt.load_into(enc.g_m_mut(), "g_momentum.", "")?;
            }
        }
        let restore = |prefix: &str, store: &ParamStore, optim: &mut OptimState| {
            let v = store
                .entries()
                .iter()
                .map(|e| ckpt.get(&format!("{prefix}{}", e.name)).cloned())
                .collect();
            optim.set_velocities(v);
        };
        restore("optim.f.", s.encoders.f_q(), &mut s.optim_f);
        if let Some(o) = s.optim_g.as_mut() {
            restore("optim.g.", s.encoders.g_q(), o);
        }
        let bank = ckpt
            .get(BANK)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {BANK}")))?;
        s.bank = MemoryBank::from_snapshot(cfg.bank_size, bank)?;
        let counter = |name: &str| -> Result<usize> {
            ckpt.get(name)
                .map(|t| t.data()[0] as usize)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        s.step = counter(STATE_STEP)?;
        s.epoch = counter(STATE_EPOCH)?;
        Ok(s)
    }
}

/// Two augmented draws of each present view of one patient.
#[derive(Clone, Debug, Default)]
pub struct PatientViews {
    pub transverse: Option<(GrayImage, GrayImage)>,
    pub longitudinal: Option<(GrayImage, GrayImage)>,
}

/// Draws the two augmentations of every present view, keyed by
/// `(seed, epoch, patient index, view, draw)`, and standardizes them.
pub fn prepare_views(patient: &Patient, index: usize, augment: &AugmentSpec, seed: u64, epoch: usize) -> PatientViews {
    let draw = |img: &GrayImage, view: u64| {
        let one = |version: u64| {
            let mut rng = sample_stream(seed, epoch as u64, index as u64, view, version);
            normalize(&augment_pretrain(img, augment, &mut rng)).0
        };
        (one(0), one(1))
    };
    PatientViews {
        transverse: patient.transverse.as_ref().map(|v| draw(&v.image, 0)),
        longitudinal: patient.longitudinal.as_ref().map(|v| draw(&v.image, 1)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f32,
    pub bank_occupancy: usize,
}

/// Forward pass of a stack of images through one weight store; latents
/// `[n, d]` plus pending statistic updates.
fn encode_query(arch: &EncoderArch, tape: &mut Tape, store: &ParamStore, images: &[GrayImage]) -> Result<(Var, StatUpdates, crate::backend::Bound)> {
    let bound = store.bind(tape, true);
    let x = tape.constant(GrayImage::batch(images)?);
    let mut ctx = Ctx::new(tape, store, &bound, Mode::Train);
    let z = arch.forward(&mut ctx, x)?;
    let updates = ctx.into_updates();
    Ok((z, updates, bound))
}

fn encode_momentum(arch: &EncoderArch, store: &ParamStore, images: &[GrayImage]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let x = tape.constant(GrayImage::batch(images)?);
    let mut ctx = Ctx::new(&mut tape, store, &bound, Mode::TrainFrozenStats);
    let z = arch.forward(&mut ctx, x)?;
    Ok(tape.value(z).clone())
}

/// One optimization step on already augmented views.
///
/// Query latents carry gradient; momentum latents enter as constants. The
/// loss is taken against a snapshot of the bank, then the query encoders
/// step, the momentum encoders follow by EMA, and the momentum latents are
/// enqueued (per patient, transverse before longitudinal).
pub fn pretrain_step_on_views(state: &mut TrainState, cfg: &PretrainConfig, views: &[PatientViews], lr: f32) -> Result<StepReport> {
    if views.is_empty() {
        return Err(Error::InvalidArgument("empty pre-training batch".into()));
    }
    let arch = state.encoders.arch().clone();
    let shared_q = state.encoders.share_query();

    let mut q_f = Vec::new();
    let mut q_g = Vec::new();
    let mut k_f = Vec::new();
    let mut k_g = Vec::new();
    // Row of each patient's transverse and longitudinal draw.
    let mut rows = Vec::with_capacity(views.len());
    for (i, v) in views.iter().enumerate() {
        if v.transverse.is_none() && v.longitudinal.is_none() {
            return Err(Error::InvalidArgument(format!("patient {i} has no views")));
        }
        let rf = v.transverse.as_ref().map(|(a, b)| {
            q_f.push(a.clone());
            k_f.push(b.clone());
            q_f.len() - 1
        });
        let rg = v.longitudinal.as_ref().map(|(a, b)| {
            q_g.push(a.clone());
            k_g.push(b.clone());
            q_g.len() - 1
        });
        rows.push((rf, rg));
    }
    let nf = q_f.len();

    let mut tape = Tape::new();
    let (zq_f, zq_g, upd_f, upd_g, bound_f, bound_g) = if shared_q {
        let all: Vec<GrayImage> = q_f.iter().chain(&q_g).cloned().collect();
        let (z, u, b) = encode_query(&arch, &mut tape, state.encoders.f_q(), &all)?;
        (Some(z), Some(z), u, None, b, None)
    } else {
        let f = (!q_f.is_empty())
            .then(|| encode_query(&arch, &mut tape, state.encoders.f_q(), &q_f))
            .transpose()?;
        let g = (!q_g.is_empty())
            .then(|| encode_query(&arch, &mut tape, state.encoders.g_q(), &q_g))
            .transpose()?;
        let (zf, uf, bf) = match f {
            Some((z, u, b)) => (Some(z), u, b),
            None => (None, StatUpdates::default(), state.encoders.f_q().bind(&mut tape, true)),
        };
        let (zg, ug, bg) = match g {
            Some((z, u, b)) => (Some(z), Some(u), Some(b)),
            None => (None, None, None),
        };
        (zf, zg, uf, ug, bf, bg)
    };
    let g_offset = if shared_q { nf } else { 0 };

    let (zk_f, zk_g) = if state.encoders.share_momentum() {
        let all: Vec<GrayImage> = k_f.iter().chain(&k_g).cloned().collect();
        let z = encode_momentum(&arch, state.encoders.f_m(), &all)?;
        (z.clone(), z)
    } else {
        let zf = if k_f.is_empty() { Tensor::zeros(vec![0, 0]) } else { encode_momentum(&arch, state.encoders.f_m(), &k_f)? };
        let zg = if k_g.is_empty() { Tensor::zeros(vec![0, 0]) } else { encode_momentum(&arch, state.encoders.g_m(), &k_g)? };
        (zf, zg)
    };
    let k_g_offset = if state.encoders.share_momentum() { nf } else { 0 };

    let mut latents = Vec::with_capacity(views.len());
    let mut enqueue = Vec::new();
    for &(rf, rg) in &rows {
        let mut pair = |z_q: Option<Var>, r: Option<usize>, zk: &Tensor, q_off: usize, k_off: usize| -> Result<Option<(Var, Var)>> {
            let Some(r) = r else { return Ok(None) };
            let q = tape.select_rows(z_q.expect("query latents"), &[q_off + r])?;
            let key = zk.row(k_off + r).to_vec();
            enqueue.push(key.clone());
            let k = tape.constant(Tensor::new(vec![1, key.len()], key)?);
            Ok(Some((q, k)))
        };
        let f = pair(zq_f, rf, &zk_f, 0, 0)?;
        let g = pair(zq_g, rg, &zk_g, g_offset, k_g_offset)?;
        latents.push(ViewLatents::new(f, g));
    }

    let negatives = Negatives::new(&mut tape, &state.bank.negatives())?;
    let loss = batch_loss(&mut tape, &latents, &negatives, &cfg.contrastive()).map_err(|e| match e {
        Error::NonFinite(m) => Error::NonFinite(format!("step {}: {m}", state.step)),
        other => other,
    })?;
    let loss_value = tape.value(loss).item();
    if !loss_value.is_finite() {
        return Err(Error::NonFinite(format!(
            "step {}: batch loss {loss_value} over {} patients, bank occupancy {}",
            state.step,
            views.len(),
            state.bank.len()
        )));
    }

    let mut grads = tape.backward(loss)?;
    let grads_f = bound_f.grads(&mut grads);
    let grads_g = bound_g.as_ref().map(|b| b.grads(&mut grads));
    drop(tape);

    {
        let (fq, gq) = state.encoders.query_stores_mut();
        sgd_step(fq, &grads_f, &mut state.optim_f, lr)?;
        upd_f.apply(fq);
        if let (Some(gq), Some(g)) = (gq, grads_g) {
            let optim = state.optim_g.as_mut().expect("unshared query has its own optimizer");
            sgd_step(gq, &g, optim, lr)?;
            if let Some(u) = upd_g {
                u.apply(gq);
            }
        }
    }
    for (q, m) in state.encoders.ema_pairs_mut() {
        ema_update(m, q, cfg.alpha)?;
    }
    state.bank.enqueue_batch(&enqueue)?;
    state.step += 1;
    Ok(StepReport {
        loss: loss_value,
        bank_occupancy: state.bank.len(),
    })
}

/// Augments `batch` (pairs of patient index and patient) and takes one step.
pub fn pretrain_step(
    state: &mut TrainState,
    cfg: &PretrainConfig,
    augment: &AugmentSpec,
    batch: &[(usize, &Patient)],
    lr: f32,
) -> Result<StepReport> {
    let epoch = state.epoch;
    let views: Vec<PatientViews> = batch
        .iter()
        .map(|&(i, p)| prepare_views(p, i, augment, cfg.seed, epoch))
        .collect();
    pretrain_step_on_views(state, cfg, &views, lr)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Learning rate at the first step of the epoch.
    pub lr: f32,
    pub bank_occupancy: usize,
}

/// Where a run writes its checkpoint and log. The checkpoint is rewritten
/// after every epoch; with `resume` an existing one is continued.
#[derive(Clone, Debug, Default)]
pub struct RunOutputs {
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub resume: bool,
    /// Discard the checkpointed bank when resuming.
    pub fresh_bank: bool,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub state: TrainState,
    pub history: Vec<EpochLog>,
    pub config: PretrainConfig,
}

impl PretrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        self.state.to_checkpoint()
    }
}

fn save_atomic(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    ckpt.save(&tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Initial state from an init checkpoint: its backbone (and projection head
/// when present) is loaded into the query encoders and copied into the
/// momentum encoders.
fn state_from_init(path: &Path, encoder: &EncoderConfig, cfg: &PretrainConfig) -> Result<TrainState> {
    let init = Checkpoint::load(path)?;
    init.verify(encoder.fingerprint(), false)?;
    let mut state = TrainState::new(encoder, cfg)?;
    let mut weights = state.encoders.f_q().clone();
    init.load_into(&mut weights, "", "backbone.")?;
    if init.has_prefix("head.") {
        init.load_into(&mut weights, "", "head.")?;
    }
    state.encoders.load_all(&weights)?;
    Ok(state)
}

/// Full pre-training schedule over `pool` (indices into `patients`).
pub fn run_pretraining(
    cfg: &PretrainConfig,
    encoder: &EncoderConfig,
    augment: &AugmentSpec,
    patients: &[Patient],
    pool: &[usize],
    outputs: &RunOutputs,
) -> Result<PretrainOutcome> {
    let cfg = cfg.effective();
    cfg.validate()?;
    encoder.validate()?;
    augment.validate()?;
    if augment.output_size != encoder.input_size {
        return Err(Error::Config(format!(
            "augment output size {} differs from encoder input size {}",
            augment.output_size, encoder.input_size
        )));
    }
    if pool.is_empty() {
        return Err(Error::Data("pre-training pool is empty".into()));
    }
    if let Some(&i) = pool.iter().find(|&&i| i >= patients.len()) {
        return Err(Error::Data(format!("pool index {i} out of range")));
    }

    let resume_from = outputs
        .checkpoint
        .as_ref()
        .filter(|p| outputs.resume && p.exists());
    let mut state = match (resume_from, &cfg.init_checkpoint) {
        (Some(p), _) => {
            log::info!("resuming from {}", p.display());
            let mut state = TrainState::from_checkpoint(&Checkpoint::load(p)?, encoder, &cfg)?;
            if outputs.fresh_bank {
                state.bank = MemoryBank::new(cfg.bank_size, encoder.proj_out)?;
            }
            state
        }
        (None, Some(init)) => state_from_init(init, encoder, &cfg)?,
        (None, None) => TrainState::new(encoder, &cfg)?,
    };

    let mut log_file = match &outputs.log {
        Some(p) => {
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(resume_from.is_some())
                .write(true)
                .truncate(resume_from.is_none())
                .open(p)
                .map_err(|e| Error::io(p, e))?;
            Some((p.clone(), f))
        }
        None => None,
    };

    let per_epoch = pool.len().div_ceil(cfg.patients_per_batch);
    let total = per_epoch * cfg.epochs;
    let mut history = Vec::new();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let batches = batch_sampler(pool, cfg.patients_per_batch, cfg.seed, epoch);
        let first_lr = cosine_lr(state.step, total, cfg.lr0);
        let mut sum = 0.0f64;
        for batch in &batches {
            let lr = cosine_lr(state.step, total, cfg.lr0);
            let members: Vec<(usize, &Patient)> = batch.iter().map(|&i| (i, &patients[i])).collect();
            let report = pretrain_step(&mut state, &cfg, augment, &members, lr)?;
            sum += report.loss as f64;
        }
        let entry = EpochLog {
            epoch,
            mean_loss: sum / batches.len() as f64,
            lr: first_lr,
            bank_occupancy: state.bank.len(),
        };
        log::info!(
            "epoch {} mean loss {:.5} lr {:.5} bank {}",
            entry.epoch,
            entry.mean_loss,
            entry.lr,
            entry.bank_occupancy
        );
        if let Some((p, f)) = log_file.as_mut() {
            let mut line = serde_json::to_vec(&entry)?;
            line.push(b'\n');
            f.write_all(&line).map_err(|e| Error::io(&*p, e))?;
        }
        history.push(entry);
        state.epoch += 1;
        if let Some(p) = &outputs.checkpoint {
            save_atomic(&state.to_checkpoint(), p)?;
        }
    }
    if let Some(p) = &outputs.checkpoint {
        save_atomic(&state.to_checkpoint(), p)?;
    }
    Ok(PretrainOutcome {
        state,
        history,
        config: cfg,
    })
}
