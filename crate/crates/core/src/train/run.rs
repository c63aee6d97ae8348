//! The training loop, corpus sampling and the step log.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{init_embedding_baseline, init_model, InitSpec};
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::train::backward::backward;
use crate::train::config::{EmbeddingInit, TrainConfig};
use crate::train::optim::{adam_step, clip_grad_norm, lr_at, AdamState};
use crate::weights::{load_weights, save_weights};

/// Raw bytes used as tokens.
#[derive(Clone, Debug)]
pub struct Corpus {
    bytes: Vec<u8>,
}

impl Corpus {
    pub fn new(bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() < 2 {
            return Err(Error::InvalidConfig("corpus needs at least two bytes".into()));
        }
        Ok(Self { bytes })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 2 {
            return Err(Error::EmptyCorpus { path: path.into() });
        }
        Ok(Self { bytes })
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    /// A window of up to `ctx + 1` tokens starting at a uniformly random offset.
    pub fn sample_row<R: Rng>(&self, ctx: usize, rng: &mut R) -> Vec<u32> {
        let width = (ctx + 1).min(self.bytes.len());
        let start = rng.random_range(0..=self.bytes.len() - width);
        self.bytes[start..start + width].iter().map(|&b| b as u32).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    /// Mean cross-entropy of the batch, in nats, before the update.
    pub loss: f64,
    pub bpc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<f64>,
}

/// Trailing moving average over at most `window` values.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i];
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

pub struct Trainer<T> {
    pub model: Model<T>,
    pub config: TrainConfig,
    adam: AdamState<T>,
    step: usize,
    rng: ChaCha8Rng,
    corpus: Corpus,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh parameters; the model's context length is set to `tc.ctx`.
    pub fn new(model_cfg: &ModelConfig, tc: TrainConfig, corpus: Corpus) -> Result<Self> {
        tc.validate()?;
        let cfg = ModelConfig {
            ctx_len: tc.ctx,
            ..*model_cfg
        };
        let mut model = init_model::<T>(&cfg, &InitSpec::with_seed(tc.seed))?;
        if tc.embedding_init == EmbeddingInit::BaselineNormal {
            model.params.emb = init_embedding_baseline(&cfg, tc.seed);
        }
        Self::from_model(model, tc, corpus)
    }

    /// Continues from existing parameters with fresh optimizer moments. The
    /// context length grows to `tc.ctx` if that is larger.
    pub fn from_model(mut model: Model<T>, tc: TrainConfig, corpus: Corpus) -> Result<Self> {
        tc.validate()?;
        if corpus.len() < 2 {
            return Err(Error::InvalidConfig("corpus needs at least two bytes".into()));
        }
        model.config.ctx_len = model.config.ctx_len.max(tc.ctx);
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
        rng.set_stream(1);
        Ok(Self {
            adam: AdamState::new(&model.params),
            model,
            config: tc,
            step: 0,
            rng,
            corpus,
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.total_steps
    }

    pub fn sample_batch(&mut self) -> Vec<Vec<u32>> {
        (0..self.config.batch)
            .map(|_| self.corpus.sample_row(self.config.ctx, &mut self.rng))
            .collect()
    }

    /// One optimizer step on a freshly sampled batch.
    pub fn step(&mut self) -> Result<LogRecord> {
        if self.is_done() {
            return Err(Error::InvalidConfig("training already finished".into()));
        }
        let batch = self.sample_batch();
        let (loss, mut grads) = backward(&self.model, &batch, self.config.z_coeff)?;
        if !grads.is_finite() {
            return Err(Error::NonFinite { op: "backward" });
        }
        if let Some(c) = self.config.grad_clip {
            clip_grad_norm(&mut grads, c);
        }
        let lr = lr_at(self.step, &self.config);
        adam_step(&mut self.model.params, &grads, &mut self.adam, lr, &self.config.adam());
        let rec = LogRecord {
            step: self.step,
            lr,
            loss: loss.ce,
            bpc: loss.bpc(),
            wall_ms: None,
        };
        self.step += 1;
        Ok(rec)
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// JSON-lines log, one record per step.
    pub log_path: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Record elapsed wall time in the log. Turn off for byte-identical logs.
    pub wall_time: bool,
    /// Start from this weight file instead of a fresh init.
    pub resume: Option<PathBuf>,
}

pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub log: Vec<LogRecord>,
}

impl<T> TrainOutcome<T> {
    pub fn bpc(&self) -> Vec<f64> {
        self.log.iter().map(|r| r.bpc).collect()
    }
}

pub fn checkpoint_path(dir: &Path, step: Option<usize>) -> PathBuf {
    match step {
        Some(s) => dir.join(format!("step_{s:06}.rwkv")),
        None => dir.join("final.rwkv"),
    }
}

/// Trains for `tc.total_steps`, streaming each record to `on_record`.
pub fn train_run<T: Scalar>(
    model_cfg: &ModelConfig,
    tc: &TrainConfig,
    corpus_path: &Path,
    opts: &RunOptions,
    mut on_record: impl FnMut(&LogRecord),
) -> Result<TrainOutcome<T>> {
    let corpus = Corpus::load(corpus_path)?;
    let mut trainer = match &opts.resume {
        Some(p) => Trainer::from_model(load_weights::<T>(p)?, tc.clone(), corpus)?,
        None => Trainer::new(model_cfg, tc.clone(), corpus)?,
    };
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut log_file = match &opts.log_path {
        Some(p) => Some((BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?), p)),
        None => None,
    };
    let start = Instant::now();
    let mut log = Vec::with_capacity(tc.total_steps);
    while !trainer.is_done() {
        let mut rec = trainer.step()?;
        if opts.wall_time {
            rec.wall_ms = Some(start.elapsed().as_secs_f64() * 1e3);
        }
        if let Some((w, p)) = log_file.as_mut() {
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(*p, e))?;
        }
        on_record(&rec);
        log.push(rec);
        let done = trainer.step_index();
        if let Some(dir) = &opts.checkpoint_dir {
            if tc.checkpoint_every > 0 && done % tc.checkpoint_every == 0 && done < tc.total_steps {
                save_weights(&trainer.model, &checkpoint_path(dir, Some(done)))?;
            }
        }
    }
    if let Some((mut w, p)) = log_file {
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    if let Some(dir) = &opts.checkpoint_dir {
        save_weights(&trainer.model, &checkpoint_path(dir, None))?;
    }
    Ok(TrainOutcome {
        model: trainer.model,
        log,
    })
}
