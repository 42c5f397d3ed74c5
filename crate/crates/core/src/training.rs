//! Optimizer, learning-rate schedule and the training loop.

use std::path::PathBuf;
use std::time::Instant;

use crate::autodiff::{Tape, Var};
use crate::checkpoint::load_checkpoint;
use crate::data::{batches, Dataset};
use crate::error::{LvitError, Result};
use crate::kv::KvMap;
use crate::model::{predict, Lvit};
use crate::param::ParamStore;
use crate::rng::RngState;
use crate::tensor::Tensor;

/// XOR-ed into the run seed to get the dropout stream, keeping it apart from shuffling.
const DROPOUT_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Multiplicative decay applied every `decay_every` epochs.
    pub decay_gamma: f64,
    /// 1 gives per-epoch exponential decay; larger values give step decay.
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warm_start: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-3,
            decay_gamma: 0.97,
            decay_every: 1,
            epochs: 80,
            batch_size: 64,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            warm_start: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.decay_gamma > 0.0 && self.decay_gamma <= 1.0) {
            return Err(LvitError::Config(format!("decay_gamma must be in (0, 1], got {}", self.decay_gamma)));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.decay_every == 0 {
            return Err(LvitError::Config("batch_size, epochs and decay_every must be >= 1".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(LvitError::Config(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return Err(LvitError::Config("Adam betas must be in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }

    pub fn write_kv(&self, m: &mut KvMap) {
        m.set("lr", self.lr0);
        m.set("decay_gamma", self.decay_gamma);
        m.set("decay_every", self.decay_every);
        m.set("epochs", self.epochs);
        m.set("batch_size", self.batch_size);
        m.set("seed", self.seed);
        m.set("beta1", self.beta1);
        m.set("beta2", self.beta2);
        m.set("adam_eps", self.adam_eps);
        if let Some(p) = &self.warm_start {
            m.set("warm_start", p.display());
        }
    }

    pub fn keys() -> &'static [&'static str] {
        &[
            "lr", "decay_gamma", "decay_every", "epochs", "batch_size", "seed", "beta1", "beta2", "adam_eps",
            "warm_start",
        ]
    }

    pub fn from_kv(m: &KvMap) -> Result<Self> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            lr0: m.get_parsed("lr")?.unwrap_or(d.lr0),
            decay_gamma: m.get_parsed("decay_gamma")?.unwrap_or(d.decay_gamma),
            decay_every: m.get_parsed("decay_every")?.unwrap_or(d.decay_every),
            epochs: m.get_parsed("epochs")?.unwrap_or(d.epochs),
            batch_size: m.get_parsed("batch_size")?.unwrap_or(d.batch_size),
            seed: m.get_parsed("seed")?.unwrap_or(d.seed),
            beta1: m.get_parsed("beta1")?.unwrap_or(d.beta1),
            beta2: m.get_parsed("beta2")?.unwrap_or(d.beta2),
            adam_eps: m.get_parsed("adam_eps")?.unwrap_or(d.adam_eps),
            warm_start: m.get("warm_start").filter(|s| !s.is_empty()).map(PathBuf::from),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Mean multi-class cross-entropy of `[B, K]` logits, recorded on `tape`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// `lr0 · gamma^(epoch / decay_every)`
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.decay_gamma.powi((epoch / cfg.decay_every) as i32)
}

/// First and second moment estimates for every parameter, plus the step count.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value().len()]).collect();
        AdamState { m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, index: usize) -> &[f64] {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &[f64] {
        &self.v[index]
    }
}

/// One bias-corrected Adam update. Gradients are read, not cleared.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64, cfg: &TrainConfig) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(LvitError::Contract(format!(
            "Adam state tracks {} tensors, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    for (i, p) in store.iter().enumerate() {
        if state.m[i].len() != p.grad().len() {
            return Err(LvitError::Contract(format!(
                "Adam state for `{}` has {} entries, gradient has {}",
                p.name(),
                state.m[i].len(),
                p.grad().len()
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in store.iter_mut().enumerate() {
        let (values, grads) = p.value_and_grad_mut();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..values.len() {
            let g = grads[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            values[j] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    pub lr: f64,
    pub seconds: f64,
}

/// Header of the per-epoch training log.
pub const TRAIN_LOG_HEADER: [&str; 4] = ["epoch", "loss", "accuracy", "lr"];

/// CSV training log, one row per epoch. Wall-clock time is left out so identical
/// runs produce identical bytes; numbers use shortest round-trip formatting.
pub fn train_log_csv(reports: &[EpochReport]) -> Result<String> {
    let csv_err = |e: csv::Error| LvitError::Format(format!("csv: {e}"));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TRAIN_LOG_HEADER).map_err(csv_err)?;
    for r in reports {
        w.write_record([
            r.epoch.to_string(),
            r.mean_loss.to_string(),
            r.train_accuracy.to_string(),
            r.lr.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| LvitError::Format(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| LvitError::Format(e.to_string()))
}

/// Mean cross-entropy and accuracy of `model` on `data` with dropout off.
pub fn evaluate_loss(model: &Lvit, data: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    let mut rng = RngState::new(0);
    let mut total = 0.0;
    let mut correct = 0;
    let images = data.images();
    let labels = data.labels();
    for (imgs, labs) in images.chunks(batch_size.max(1)).zip(labels.chunks(batch_size.max(1))) {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let logits = model.forward_batch(&mut tape, &bound, imgs, &mut rng, false)?;
        let loss = tape.cross_entropy(logits, labs)?;
        total += tape.value(loss).data()[0] * labs.len() as f64;
        correct += count_correct(tape.value(logits), labs)?;
    }
    Ok((total / data.len() as f64, correct as f64 / data.len() as f64))
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> Result<usize> {
    let k = logits.last_dim();
    let mut correct = 0;
    for (row, &l) in logits.data().chunks(k).zip(labels) {
        if predict(&Tensor::new(vec![k], row.to_vec())?)? == l {
            correct += 1;
        }
    }
    Ok(correct)
}

/// Train `model` on `data`.
///
/// Each epoch shuffles with seed `seed ^ epoch`, trains on every batch (the last
/// one may be short) with dropout on, and steps Adam at `lr_at(epoch)`. If
/// `cfg.warm_start` is set, the checkpoint's tensors replace the model's before
/// epoch 0. `on_epoch` sees each report as soon as it is ready.
pub fn fit(
    model: &mut Lvit,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<Vec<EpochReport>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(LvitError::Contract("training dataset is empty".into()));
    }
    let k = model.config().num_classes;
    if let Some(s) = data.samples.iter().find(|s| s.label >= k) {
        return Err(LvitError::Contract(format!(
            "sample `{}` has label {} but the model has {k} classes",
            s.source_id, s.label
        )));
    }
    if let Some(path) = &cfg.warm_start {
        warm_start(model, path)?;
    }

    let mut adam = AdamState::new(model.store());
    let mut dropout_rng = RngState::new(cfg.seed ^ DROPOUT_STREAM);
    let mut reports = Vec::with_capacity(cfg.epochs);
    model.store_mut().zero_grads();

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = lr_at(epoch, cfg);
        let mut shuffle_rng = RngState::new(cfg.seed ^ epoch as u64);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for (bi, idx) in batches(data.len(), cfg.batch_size, &mut shuffle_rng)?.iter().enumerate() {
            let images: Vec<&Tensor> = idx.iter().map(|&i| &data.samples[i].image).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| data.samples[i].label).collect();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let logits = model.forward_batch(&mut tape, &bound, &images, &mut dropout_rng, true)?;
            let loss = tape.cross_entropy(logits, &labels)?;
            let loss_value = tape.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(LvitError::NonFinite(format!("loss {loss_value} at epoch {epoch}, batch {bi}")));
            }
            loss_sum += loss_value * labels.len() as f64;
            correct += count_correct(tape.value(logits), &labels)?;
            tape.backward(loss, model.store_mut())?;
            drop(tape);
            adam_step(model.store_mut(), &mut adam, lr, cfg)?;
            model.store_mut().zero_grads();
        }
        let report = EpochReport {
            epoch,
            mean_loss: loss_sum / data.len() as f64,
            train_accuracy: correct as f64 / data.len() as f64,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&report);
        reports.push(report);
    }
    Ok(reports)
}

/// Replace the model's tensors with a checkpoint's. The architecture must match exactly.
pub fn warm_start(model: &mut Lvit, path: &std::path::Path) -> Result<()> {
    let (donor, _) = load_checkpoint(path)?;
    let (mine, theirs) = (model.config(), donor.config());
    let same_arch = {
        let mut a = mine.clone();
        a.dropout_p = theirs.dropout_p;
        a == *theirs
    };
    if !same_arch {
        return Err(LvitError::Compat(vec![format!(
            "warm-start checkpoint {} has config {theirs:?}, model is {mine:?}",
            path.display()
        )]));
    }
    let dropout = mine.dropout_p;
    let mut replaced = Lvit::from_store(theirs.clone(), donor.store().clone())?;
    replaced.set_dropout(dropout)?;
    *model = replaced;
    Ok(())
}
