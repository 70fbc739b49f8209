use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{poly_lr, total_loss, Checkpoint, Sgd};
use crate::data::{Loader, IGNORE_INDEX};
use crate::error::{param_err, Error, Result};
use crate::eval::{evaluate, Metrics};
use crate::model::SegModel;
use crate::tensor::{Element, Graph};

pub const METRICS_HEADER: &str = "iter,lr,loss,miou";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub max_iter: u64,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub aux_weight: f64,
    pub ignore_index: u8,
    /// Evaluate and checkpoint every this many iterations; 0 means only at the end.
    pub eval_interval: u64,
    pub log_interval: u64,
    pub seed: u64,
    /// Where checkpoints and `metrics.csv` go; `None` keeps everything in memory.
    pub output_dir: Option<PathBuf>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            max_iter: 500,
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 4e-5,
            power: 0.9,
            aux_weight: 0.4,
            ignore_index: IGNORE_INDEX,
            eval_interval: 0,
            log_interval: 10,
            seed: 0,
            output_dir: None,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return param_err(format!("base_lr must be finite and non-negative, got {}", self.base_lr));
        }
        if !(self.power > 0.0) {
            return param_err(format!("power must be positive, got {}", self.power));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return param_err(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) || !(self.aux_weight >= 0.0) {
            return param_err("weight_decay and aux_weight must be non-negative");
        }
        if self.log_interval == 0 {
            return param_err("log_interval must be >= 1");
        }
        Ok(())
    }
}

/// Everything needed to continue a run bit-for-bit.
pub struct TrainState<T: Element> {
    pub iter: u64,
    pub model: SegModel<T>,
    pub optim: Sgd<T>,
    pub seed: u64,
    pub best_metric: f64,
}

impl<T: Element> TrainState<T> {
    pub fn new(model: SegModel<T>, settings: &TrainSettings) -> Result<Self> {
        let optim = Sgd::new(&model.params, settings.momentum, settings.weight_decay)?;
        Ok(Self {
            iter: 0,
            model,
            optim,
            seed: settings.seed,
            best_metric: f64::NEG_INFINITY,
        })
    }

    pub fn to_checkpoint(&self, config_text: Option<&str>) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.put_params(&self.model.params);
        c.put_optimizer(&self.model.params, &self.optim);
        c.insert_u64("state/iter", self.iter);
        c.insert_u64("state/seed", self.seed);
        c.insert_f64("state/best_metric", self.best_metric);
        if let Some(text) = config_text {
            c.insert_bytes("bundle/config", text.as_bytes());
        }
        c
    }

    /// Restore parameters, optimizer, iteration and seed into a freshly built model.
    pub fn resume(model: SegModel<T>, ckpt: &Checkpoint, settings: &TrainSettings) -> Result<Self> {
        let mut state = Self::new(model, settings)?;
        ckpt.restore_params(&mut state.model.params)?;
        ckpt.restore_optimizer(&state.model.params, &mut state.optim)?;
        state.iter = ckpt.u64("state/iter")?;
        state.seed = ckpt.u64("state/seed")?;
        state.best_metric = ckpt.f64("state/best_metric")?;
        if state.iter > settings.max_iter {
            return param_err(format!(
                "checkpoint is at iteration {} but max_iter is {}",
                state.iter, settings.max_iter
            ));
        }
        Ok(state)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterRecord {
    /// Iterations completed after this step.
    pub iter: u64,
    pub lr: f64,
    pub loss: f64,
    pub miou: Option<f64>,
}

/// Iteration-based SGD loop over a seeded loader.
pub struct Trainer<'a, T: Element> {
    pub settings: TrainSettings,
    pub state: TrainState<T>,
    train: &'a Loader,
    val: Option<&'a Loader>,
    config_text: Option<String>,
}

impl<'a, T: Element> Trainer<'a, T> {
    pub fn new(settings: TrainSettings, state: TrainState<T>, train: &'a Loader, val: Option<&'a Loader>) -> Result<Self> {
        settings.validate()?;
        if train.batches_per_epoch() == 0 {
            return Err(Error::Data("training loader yields no batches".into()));
        }
        Ok(Self {
            settings,
            state,
            train,
            val,
            config_text: None,
        })
    }

    /// Embed the run configuration in every checkpoint written.
    pub fn with_config_text(mut self, text: impl Into<String>) -> Self {
        self.config_text = Some(text.into());
        self
    }

    pub fn is_done(&self) -> bool {
        self.state.iter >= self.settings.max_iter
    }

    /// One forward/backward/update on the next batch.
    pub fn step(&mut self) -> Result<IterRecord> {
        let s = &self.settings;
        let i = self.state.iter;
        if i >= s.max_iter {
            return param_err(format!("training already reached max_iter {}", s.max_iter));
        }
        let lr = poly_lr(i, s.max_iter, s.base_lr, s.power)?;
        let bpe = self.train.batches_per_epoch() as u64;
        let batch = self.train.batch(i / bpe, (i % bpe) as usize)?;

        let model = &mut self.state.model;
        let mut g = Graph::<T>::training();
        let x = g.constant(batch.images.cast());
        let out = model.forward(&mut g, x, true)?;
        let loss = total_loss(&mut g, &out, &batch.labels, s.ignore_index, s.aux_weight)?;
        let loss_value = g.value(loss).item().to_f64().unwrap_or(f64::NAN);
        if !loss_value.is_finite() {
            return Err(Error::NonFiniteLoss {
                iter: i,
                lr,
                loss: loss_value,
            });
        }
        g.backward(loss)?;
        model.params.accumulate_grads(&g);
        self.state.optim.step(&mut model.params, lr)?;
        self.state.iter = i + 1;
        Ok(IterRecord {
            iter: i + 1,
            lr,
            loss: loss_value,
            miou: None,
        })
    }

    pub fn evaluate(&mut self) -> Result<Option<Metrics>> {
        match self.val {
            Some(val) => evaluate(&mut self.state.model, val, self.settings.ignore_index).map(Some),
            None => Ok(None),
        }
    }

    /// Run to `max_iter`, calling `on_record` for every logged row.
    pub fn run(&mut self, mut on_record: impl FnMut(&IterRecord)) -> Result<Vec<IterRecord>> {
        let mut log = match &self.settings.output_dir {
            Some(dir) => Some(MetricsLog::open(dir, self.state.iter)?),
            None => None,
        };
        if self.is_done() {
            self.checkpoint(None)?;
            return Ok(Vec::new());
        }
        let mut records = Vec::new();
        while !self.is_done() {
            let mut rec = self.step()?;
            let eval_now = self.is_done()
                || (self.settings.eval_interval > 0 && rec.iter % self.settings.eval_interval == 0);
            if eval_now {
                let metrics = self.evaluate()?;
                rec.miou = metrics.as_ref().map(|m| m.miou);
                self.checkpoint(rec.miou)?;
            }
            if eval_now || rec.iter % self.settings.log_interval == 0 {
                if let Some(log) = &mut log {
                    log.append(&rec)?;
                }
                on_record(&rec);
            }
            records.push(rec);
        }
        Ok(records)
    }

    /// Write `latest.ckpt`, and `best.ckpt` when `miou` improves on the best so far.
    pub fn checkpoint(&mut self, miou: Option<f64>) -> Result<()> {
        let improved = miou.is_some_and(|m| m > self.state.best_metric);
        if let Some(m) = miou.filter(|_| improved) {
            self.state.best_metric = m;
        }
        let Some(dir) = &self.settings.output_dir else {
            return Ok(());
        };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ckpt = self.state.to_checkpoint(self.config_text.as_deref());
        ckpt.save(&dir.join(LATEST_CHECKPOINT))?;
        if improved {
            ckpt.save(&dir.join(BEST_CHECKPOINT))?;
        }
        Ok(())
    }
}

struct MetricsLog {
    path: PathBuf,
    file: fs::File,
}

impl MetricsLog {
    /// A fresh run truncates the log; a resumed one appends after the existing rows.
    fn open(dir: &Path, start_iter: u64) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(METRICS_FILE);
        let append = start_iter > 0 && path.exists();
        let mut file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        if !append {
            writeln!(file, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(Self { path, file })
    }

    fn append(&mut self, r: &IterRecord) -> Result<()> {
        let miou = r.miou.map(|m| format!("{m:.6}")).unwrap_or_default();
        writeln!(self.file, "{},{:.9e},{:.6},{}", r.iter, r.lr, r.loss, miou).map_err(|e| Error::io(&self.path, e))
    }
}
