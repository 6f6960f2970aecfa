//! Training loop: Adam on the velocity-matching objective with a single
//! seeded RNG stream driving batch selection and per-instance draws.
//! Checkpoints capture parameters, optimizer moments, the RNG state, and
//! the step counter, so a resumed run continues bit-exactly where the
//! original left off.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::Snapshot;
use crate::config::{Config, LrSchedule, TrainConfig, TrainMode};
use crate::dataset::LoadedDataset;
use crate::editor::{training_step, EditInstance};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::AdamW;
use crate::rng::{derive_seed, tag, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Whether a parameter is updated under the given regime. Full training
/// touches everything except LoRA factors; LoRA training freezes the
/// backbone and updates the factors, adapter projections, prompt encoder,
/// and instruction table.
fn copy_into<F: Scalar>(name: &str, shape: &[usize], data: &[f32], param: &Tensor<F>) -> Result<()> {
    if shape != param.shape() {
        return Err(Error::Shape(format!(
            "checkpoint tensor '{name}' has shape {:?}, model expects {:?}",
            shape,
            param.shape()
        )));
    }
    let mut dst = param.data_mut();
    for (d, &s) in dst.iter_mut().zip(data) {
        *d = F::of(s as f64);
    }
    Ok(())
}

pub fn is_trainable(mode: TrainMode, name: &str) -> bool {
    match mode {
        TrainMode::Full => !name.contains(".lora."),
        TrainMode::Lora => {
            name.contains(".lora.")
                || name.starts_with("adapter.")
                || name.starts_with("prompt.")
                || name == "text.table"
        }
    }
}

/// One in-progress training run: model, optimizer, RNG stream, and step
/// counter.
pub struct Session<F: Scalar> {
    pub cfg: Config,
    pub model: Model<F>,
    pub step: u64,
    rng: Rng,
    optimizer: AdamW<F>,
}

impl<F: Scalar> Session<F> {
    pub fn fresh(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model.clone(), cfg.variant, cfg.train.seed)?;
        let rng = Rng::seed(derive_seed(cfg.train.seed, &[tag::TRAIN]));
        Ok(Session::assemble(cfg.clone(), model, rng, 0, None))
    }

    pub fn resume(snap: &Snapshot) -> Result<Self> {
        let cfg = snap.config.clone();
        cfg.validate()?;
        let model = Model::new(cfg.model.clone(), cfg.variant, cfg.train.seed)?;
        for (name, param) in model.params() {
            let (_, shape, data) = snap.tensor(&name)?;
            copy_into(&name, shape, data, &param)?;
        }
        let rng = Rng::from_state(snap.rng_state);
        Ok(Session::assemble(cfg, model, rng, snap.step, Some(snap)))
    }

    /// Start a new run whose initial weights come from a saved model, for
    /// staged training such as LoRA fine-tuning on a trained backbone.
    /// Parameters the checkpoint lacks (a LoRA rank enabled only now, or
    /// adapter projections absent from a plain backbone) keep their fresh
    /// initialization; optimizer moments, the step counter, and the RNG
    /// stream all start over under the new configuration.
    pub fn fine_tune(cfg: &Config, snap: &Snapshot) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model.clone(), cfg.variant, cfg.train.seed)?;
        for (name, param) in model.params() {
            if let Ok((_, shape, data)) = snap.tensor(&name) {
                copy_into(&name, shape, data, &param)?;
            }
        }
        let rng = Rng::seed(derive_seed(cfg.train.seed, &[tag::TRAIN]));
        Ok(Session::assemble(cfg.clone(), model, rng, 0, None))
    }

    fn assemble(cfg: Config, mut model: Model<F>, rng: Rng, step: u64, snap: Option<&Snapshot>) -> Self {
        model.alpha = cfg.alpha;
        let mode = cfg.train.mode;
        let trainable: Vec<(String, Tensor<F>)> = model
            .params()
            .into_iter()
            .filter(|(name, _)| is_trainable(mode, name))
            .collect();
        let mut optimizer = AdamW::new(trainable, cfg.train.lr);
        optimizer.set_step_count(step);
        if let Some(snap) = snap {
            let names: Vec<String> = optimizer.param_names().iter().map(|s| s.to_string()).collect();
            for name in names {
                if let (Ok((_, _, m)), Ok((_, _, v))) = (
                    snap.tensor(&format!("opt.m.{name}")),
                    snap.tensor(&format!("opt.v.{name}")),
                ) {
                    let m: Vec<F> = m.iter().map(|&x| F::of(x as f64)).collect();
                    let v: Vec<F> = v.iter().map(|&x| F::of(x as f64)).collect();
                    optimizer.restore(&name, &m, &v);
                }
            }
        }
        Session { cfg, model, step, rng, optimizer }
    }

    /// Capture the complete run state. Parameter tensors come first in
    /// model order, then first and second optimizer moments per trainable
    /// parameter.
    pub fn snapshot(&self) -> Snapshot {
        let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = self
            .model
            .params()
            .into_iter()
            .map(|(name, t)| {
                let data: Vec<f32> = t.data().iter().map(|&x| x.f64() as f32).collect();
                (name, t.shape().to_vec(), data)
            })
            .collect();
        for (name, m, v) in self.optimizer.moments() {
            let shape = self
                .model
                .param(name)
                .map(|t| t.shape().to_vec())
                .unwrap_or_else(|| vec![m.len()]);
            let m: Vec<f32> = m.iter().map(|&x| x.f64() as f32).collect();
            let v: Vec<f32> = v.iter().map(|&x| x.f64() as f32).collect();
            tensors.push((format!("opt.m.{name}"), shape.clone(), m));
            tensors.push((format!("opt.v.{name}"), shape, v));
        }
        Snapshot {
            config: self.cfg.clone(),
            step: self.step,
            rng_state: self.rng.state(),
            tensors,
        }
    }

    /// Run one optimization step: draw a batch with replacement from the
    /// training instances, build the loss, backpropagate, and apply Adam.
    /// Returns the batch loss.
    pub fn step_once(&mut self, data: &LoadedDataset) -> Result<f64> {
        let instances = &data.manifest.train_instances;
        if instances.is_empty() {
            return Err(Error::Config("dataset has no training instances".into()));
        }
        let picks: Vec<usize> =
            (0..self.cfg.train.batch).map(|_| self.rng.below(instances.len())).collect();
        let batch: Vec<EditInstance<'_>> = picks
            .iter()
            .map(|&i| {
                let rec = &instances[i];
                let (p_src, p_tar) = data.prompt_pair(rec);
                let (q_src, q_tar) = data.query_pair(rec);
                EditInstance {
                    prompt_src: p_src,
                    prompt_tar: p_tar,
                    src: q_src,
                    tar: q_tar,
                    instruction_id: rec.instruction_id,
                }
            })
            .collect();

        let (loss, ts) = training_step(&self.model, &batch, self.cfg.train.p_drop, &mut self.rng)?;
        let loss_value = loss.item().f64();
        if !loss_value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {loss_value} at step {} (timesteps {:?}, seed {})",
                self.step + 1,
                ts,
                self.cfg.train.seed
            )));
        }

        for (_, p) in self.model.params() {
            p.zero_grad();
        }
        loss.backward();
        self.optimizer.lr = scheduled_lr(&self.cfg.train, self.step + 1);
        self.optimizer.step();
        self.step += 1;
        Ok(loss_value)
    }
}

#[derive(Debug)]
pub struct TrainReport {
    /// (step, loss) for every step this run executed.
    pub losses: Vec<(u64, f64)>,
    pub final_checkpoint: PathBuf,
}

fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("ckpt_{step:06}.bin"))
}

/// Drive a session to `cfg.train.steps`, appending `step,loss` rows to
/// `loss.csv` and writing a checkpoint every `checkpoint_every` steps and
/// at the end. `resume` continues a saved run; a finished run is a no-op.
/// Learning rate for the update numbered `step` (1-based): a linear ramp
/// over the warmup steps, then either the initial rate held flat or a
/// cosine decay to zero at the configured step budget. Pure in `step`, so
/// resumed runs recompute the same rates they would have seen.
pub fn scheduled_lr(tc: &TrainConfig, step: u64) -> f64 {
    let s = step as f64;
    let warmup = tc.warmup.min(tc.steps) as f64;
    if s <= warmup && warmup > 0.0 {
        return tc.lr * s / warmup;
    }
    match tc.schedule {
        LrSchedule::Constant => tc.lr,
        LrSchedule::Cosine => {
            let total = tc.steps as f64;
            if total <= warmup {
                return tc.lr;
            }
            let progress = ((s - warmup) / (total - warmup)).clamp(0.0, 1.0);
            tc.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

pub fn train<F: Scalar>(
    cfg: &Config,
    data: &LoadedDataset,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<(Session<F>, TrainReport)> {
    let session: Session<F> = match resume {
        Some(path) => Session::resume(&Snapshot::load(path)?)?,
        None => Session::fresh(cfg)?,
    };
    run(session, data, out_dir)
}

/// Drive an already-constructed session (fresh, resumed, or fine-tuning)
/// to its configured step budget.
pub fn run<F: Scalar>(
    mut session: Session<F>,
    data: &LoadedDataset,
    out_dir: &Path,
) -> Result<(Session<F>, TrainReport)> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv_path = out_dir.join("loss.csv");
    let fresh_log = session.step == 0 || !csv_path.exists();
    let mut csv = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&csv_path)
        .map_err(|e| Error::io(&csv_path, e))?;
    if fresh_log {
        writeln!(csv, "step,loss").map_err(|e| Error::io(&csv_path, e))?;
    }

    let mut losses = Vec::new();
    while session.step < session.cfg.train.steps as u64 {
        let loss = session.step_once(data)?;
        losses.push((session.step, loss));
        writeln!(csv, "{},{}", session.step, loss).map_err(|e| Error::io(&csv_path, e))?;
        if session.step % session.cfg.train.checkpoint_every as u64 == 0 {
            session.snapshot().save(&checkpoint_path(out_dir, session.step))?;
        }
    }
    let final_path = checkpoint_path(out_dir, session.step);
    session.snapshot().save(&final_path)?;
    Ok((session, TrainReport { losses, final_checkpoint: final_path }))
}
