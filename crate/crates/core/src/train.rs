//! Training loop: seeded epoch shuffling, gradient averaging over a batch,
//! Adam steps, an NDJSON loss log and per-epoch checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::{self, RngState};
use crate::config::TrainConfig;
use crate::data::{resize_sequence, sample_clip, Sequence, VideoClip};
use crate::error::{Error, Result};
use crate::losses::LossTerms;
use crate::model::Model;
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One line of the loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: u64,
    pub total: f64,
    pub reg: f64,
    pub cls: f64,
    pub obj: f64,
    pub mc: f64,
}

impl LogRecord {
    pub fn new(iter: u64, t: &LossTerms) -> Self {
        Self {
            iter,
            total: t.total,
            reg: t.reg,
            cls: t.cls,
            obj: t.obj,
            mc: t.mc,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub iterations: u64,
    pub epochs: usize,
    pub last_terms: Option<LossTerms>,
    pub last_checkpoint: Option<PathBuf>,
}

pub struct Trainer<T> {
    pub config: TrainConfig,
    pub model: Model<T>,
    pub optimizer: Adam<T>,
    pub rng: ChaCha8Rng,
    pub iteration: u64,
    pub epoch: usize,
    pub last_checkpoint: Option<PathBuf>,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh model; one seeded generator drives initialisation and shuffling.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::new(config.frames, &config.model, config.ablation, &mut rng)?;
        let optimizer = Adam::new(&model.store, config.lr, config.adam);
        Ok(Self {
            config,
            model,
            optimizer,
            rng,
            iteration: 0,
            epoch: 0,
            last_checkpoint: None,
        })
    }

    /// One optimiser step on the mean objective of `batch` (clips at network resolution).
    pub fn step(&mut self, batch: &[VideoClip]) -> Result<LossTerms> {
        if batch.is_empty() {
            return Err(Error::InvalidConfig("empty batch".into()));
        }
        let weights = self.config.effective_weights();
        let mut acc: Vec<Option<Tensor<T>>> = vec![None; self.model.store.len()];
        let mut mean = LossTerms::default();
        for clip in batch {
            let mut g = Graph::with_params(&self.model.store);
            let (loss, terms) = self.model.loss(&mut g, clip, &weights)?;
            let grads = g.backward(loss)?;
            for (id, gr) in grads.params() {
                match &mut acc[id.index()] {
                    Some(a) => a.add_assign(gr),
                    slot => *slot = Some(gr.clone()),
                }
            }
            mean.total += terms.total;
            mean.reg += terms.reg;
            mean.cls += terms.cls;
            mean.obj += terms.obj;
            mean.mc += terms.mc;
        }
        let n = batch.len() as f64;
        let inv = T::lit(1.0 / n);
        let grads: Vec<_> = self
            .model
            .store
            .ids()
            .filter_map(|id| acc[id.index()].take().map(|g| (id, g.scale(inv))))
            .collect();
        if let Some((id, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            log::error!("non-finite gradient in {}", self.model.store.name(*id));
            return Err(Error::NonFinite {
                term: "gradient",
                value: f64::NAN,
            });
        }
        self.optimizer.apply(&mut self.model.store, grads.iter().map(|(id, g)| (*id, g)));
        self.iteration += 1;
        Ok(LossTerms {
            total: mean.total / n,
            reg: mean.reg / n,
            cls: mean.cls / n,
            obj: mean.obj / n,
            mc: mean.mc / n,
        })
    }

    /// Every `(sequence, target frame)` pair once, shuffled by the trainer's generator.
    pub fn epoch_order(&mut self, sequences: &[Sequence]) -> Vec<(usize, usize)> {
        let mut pairs: Vec<_> = sequences
            .iter()
            .enumerate()
            .flat_map(|(s, seq)| (0..seq.len()).map(move |t| (s, t)))
            .collect();
        pairs.shuffle(&mut self.rng);
        pairs
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.config, &self.model, self.iteration, self.epoch, &RngState::capture(&self.rng))
    }

    fn done(&self) -> bool {
        self.config.max_iterations.is_some_and(|m| self.iteration >= m as u64)
    }

    /// Full run. Sequences are resized to the network input once up front.
    ///
    /// A non-finite loss aborts with [`Error::Diverged`] naming the last checkpoint written.
    pub fn train(&mut self, sequences: &[Sequence], out_dir: &Path, log: &mut dyn Write) -> Result<TrainSummary> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let size = self.config.input_size;
        let data = sequences
            .iter()
            .map(|s| resize_sequence(s, size))
            .collect::<Result<Vec<_>>>()?;
        if data.iter().all(|s| s.is_empty()) {
            return Err(Error::InvalidConfig("no training frames".into()));
        }
        let radius = self.config.radius();
        let mut last_terms = None;
        while self.epoch < self.config.epochs && !self.done() {
            let order = self.epoch_order(&data);
            let chunks: Vec<_> = order.chunks(self.config.batch_size).collect();
            let mut completed = true;
            for (i, chunk) in chunks.iter().enumerate() {
                let batch = chunk
                    .iter()
                    .map(|&(s, t)| sample_clip(&data[s], t, radius))
                    .collect::<Result<Vec<_>>>()?;
                let terms = match self.step(&batch) {
                    Ok(t) => t,
                    Err(Error::NonFinite { term, .. }) => {
                        return Err(Error::Diverged {
                            iteration: self.iteration + 1,
                            term,
                            checkpoint: self.last_checkpoint.clone(),
                        })
                    }
                    Err(e) => return Err(e),
                };
                let rec = LogRecord::new(self.iteration, &terms);
                writeln!(log, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io("loss log", e))?;
                log::info!(
                    "epoch {} iter {} total {:.4} reg {:.4} cls {:.4} obj {:.4} mc {:.4}",
                    self.epoch + 1,
                    rec.iter,
                    rec.total,
                    rec.reg,
                    rec.cls,
                    rec.obj,
                    rec.mc
                );
                last_terms = Some(terms);
                if self.done() && i + 1 < chunks.len() {
                    completed = false;
                    break;
                }
            }
            let name = if !completed {
                format!("iter_{:06}.ckpt", self.iteration)
            } else {
                self.epoch += 1;
                format!("epoch_{:03}.ckpt", self.epoch)
            };
            let path = out_dir.join(name);
            self.save(&path)?;
            log::info!("wrote {}", path.display());
            self.last_checkpoint = Some(path);
        }
        log.flush().map_err(|e| Error::io("loss log", e))?;
        Ok(TrainSummary {
            iterations: self.iteration,
            epochs: self.epoch,
            last_terms,
            last_checkpoint: self.last_checkpoint.clone(),
        })
    }
}
