//! The training loop and dataset evaluation.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::optim::{adam_step, poly_lr, AdamState};
use crate::data::{augment, perturb, Batch, BiTemporalSample, Perturbation};
use crate::error::{Error, Result};
use crate::metrics::{confusion, ConfusionCounts, EvalReport};
use crate::model::{predict_mask, Checkpoint, MMChange};
use crate::nn::{Ctx, Mode, BN_MOMENTUM};
use crate::params::ParamStore;

/// Salts that keep the shuffle, augmentation and perturbation streams apart.
const SHUFFLE_SALT: u64 = 0x5348_5546;
const AUGMENT_SALT: u64 = 0x4155_474d;
const PERTURB_SALT: u64 = 0x5045_5254;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train.log";

/// Samples evaluated per forward pass.
pub const EVAL_BATCH: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// Updates completed, counting this one.
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

impl StepRecord {
    pub fn log_line(&self) -> String {
        format!("{}\t{:.8e}\t{:.10}", self.step, self.lr, self.loss)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub step: u64,
    pub report: EvalReport,
}

impl EvalRecord {
    pub fn log_line(&self) -> String {
        let r = &self.report;
        format!(
            "EVAL\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.step, r.iou, r.f1, r.precision, r.recall
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainSummary {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl TrainSummary {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }
}

/// Permutation of `0..n` used for one pass over the training set.
pub fn epoch_permutation(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_SALT);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Sample indices for the update at 0-based `step`. Batches run through
/// consecutive positions of the epoch permutations, so a resumed run sees
/// exactly the batches the uninterrupted run would have seen.
pub fn batch_indices(seed: u64, step: u64, batch: usize, n: usize) -> Vec<(u64, usize)> {
    let start = step * batch as u64;
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..batch as u64)
        .map(|j| {
            let p = start + j;
            let epoch = p / n as u64;
            let pos = (p % n as u64) as usize;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                cached = Some((epoch, epoch_permutation(seed, epoch, n)));
            }
            (epoch, cached.as_ref().unwrap().1[pos])
        })
        .collect()
}

fn augment_rng(seed: u64, epoch: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ AUGMENT_SALT);
    rng.set_stream((epoch << 32) | index as u64);
    rng
}

/// Per-sample perturbation stream.
pub fn perturb_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ PERTURB_SALT);
    rng.set_stream(index as u64);
    rng
}

/// Confusion counts of `model` over `samples`, each optionally perturbed
/// with a stream derived from `seed` and the sample position.
pub fn evaluate(
    model: &MMChange,
    store: &ParamStore,
    samples: &[BiTemporalSample],
    perturbation: &Perturbation,
    seed: u64,
) -> Result<ConfusionCounts> {
    let mut total = ConfusionCounts::default();
    for (c, chunk) in samples.chunks(EVAL_BATCH).enumerate() {
        let prepared: Vec<BiTemporalSample> = if perturbation.is_identity() {
            chunk.to_vec()
        } else {
            chunk
                .iter()
                .enumerate()
                .map(|(j, s)| perturb(s, perturbation, &mut perturb_rng(seed, c * EVAL_BATCH + j)))
                .collect()
        };
        let batch = Batch::from_samples(&prepared)?;
        let logits = model.logits(store, &batch.input())?;
        for (pred, gt) in predict_mask(&logits).iter().zip(&batch.masks) {
            total += confusion(pred, gt)?;
        }
    }
    Ok(total)
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: MMChange,
    pub params: ParamStore,
    pub optimizer: AdamState,
    /// Updates completed so far.
    pub step: u64,
}

impl Trainer {
    /// Fresh model initialised from `config.seed`.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (model, params) = MMChange::new(config.model.clone(), config.seed)?;
        Ok(Self {
            config,
            model,
            params,
            optimizer: AdamState::default(),
            step: 0,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(config: TrainConfig, ckpt: Checkpoint) -> Result<Self> {
        config.validate()?;
        if ckpt.config != config.model {
            return Err(Error::Config(
                "checkpoint model configuration differs from the training configuration".into(),
            ));
        }
        if ckpt.step > config.total_steps() {
            return Err(Error::Config(format!(
                "checkpoint is at step {} beyond the {}-step budget",
                ckpt.step,
                config.total_steps()
            )));
        }
        let model = ckpt.model()?;
        Ok(Self {
            config,
            model,
            params: ckpt.params,
            optimizer: ckpt.optimizer.unwrap_or_default(),
            step: ckpt.step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.model.clone(),
            train_config: serde_json::to_value(&self.config).expect("config serialises"),
            params: self.params.clone(),
            optimizer: Some(self.optimizer.clone()),
            step: self.step,
        }
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.config.total_steps()
    }

    /// Runs one update on the next batch of `samples`.
    pub fn train_step(&mut self, samples: &[BiTemporalSample]) -> Result<StepRecord> {
        if samples.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let cfg = &self.config;
        let picks = batch_indices(cfg.seed, self.step, cfg.batch_size, samples.len());
        let augmented = picks
            .iter()
            .map(|&(epoch, i)| augment(&samples[i], &cfg.augment, &mut augment_rng(cfg.seed, epoch, i)))
            .collect::<Result<Vec<_>>>()?;
        let batch = Batch::from_samples(&augmented)?;

        let (loss, grads, stats) = {
            let mut ctx = Ctx::new(&self.params, Mode::Train);
            let out = self.model.forward(&mut ctx, &batch.input())?;
            let loss = ctx.tape.cross_entropy(out.logits, batch.targets());
            let mut g = ctx.tape.backward(loss);
            let grads = ctx.param_grads(&mut g);
            (ctx.value(loss).item(), grads, ctx.take_stat_updates())
        };
        if !loss.is_finite() {
            return Err(Error::Config(format!("loss became non-finite at step {}", self.step + 1)));
        }
        let lr = poly_lr(self.step, cfg.max_iteration, cfg.lr0, cfg.power);
        adam_step(&mut self.params, &grads, &mut self.optimizer, lr, &cfg.adam)?;
        self.params.apply_batch_stats(&stats, BN_MOMENTUM);
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            lr,
            loss,
        })
    }

    pub fn evaluate(&self, samples: &[BiTemporalSample], perturbation: &Perturbation, seed: u64) -> Result<EvalReport> {
        Ok(EvalReport::new(evaluate(&self.model, &self.params, samples, perturbation, seed)?))
    }

    /// Trains to [`TrainConfig::total_steps`]. With `out_dir`, appends to `train.log`
    /// and writes `checkpoint.bin` periodically and at the end. `on_line`
    /// receives every log line as it is produced.
    pub fn run(
        &mut self,
        train: &[BiTemporalSample],
        eval: Option<&[BiTemporalSample]>,
        out_dir: Option<&Path>,
        mut on_line: impl FnMut(&str),
    ) -> Result<TrainSummary> {
        let mut log = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join(LOG_FILE);
                let file = if self.step == 0 {
                    File::create(&path)
                } else {
                    OpenOptions::new().append(true).create(true).open(&path)
                };
                Some((BufWriter::new(file.map_err(|e| Error::io(&path, e))?), path))
            }
            None => None,
        };
        let mut emit = |line: String, log: &mut Option<(BufWriter<File>, std::path::PathBuf)>| -> Result<()> {
            on_line(&line);
            if let Some((w, path)) = log {
                writeln!(w, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
            }
            Ok(())
        };
        let mut summary = TrainSummary::default();
        while !self.is_finished() {
            let rec = self.train_step(train)?;
            emit(rec.log_line(), &mut log)?;
            summary.steps.push(rec);
            let every = |k: u64| k > 0 && self.step % k == 0 && !self.is_finished();
            if let Some(eval) = eval.filter(|_| every(self.config.eval_interval)) {
                let r = EvalRecord {
                    step: self.step,
                    report: self.evaluate(eval, &Perturbation::IDENTITY, self.config.seed)?,
                };
                emit(r.log_line(), &mut log)?;
                summary.evals.push(r);
            }
            if let Some(dir) = out_dir.filter(|_| every(self.config.checkpoint_interval)) {
                flush(&mut log)?;
                self.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
            }
        }
        if let Some(eval) = eval {
            let r = EvalRecord {
                step: self.step,
                report: self.evaluate(eval, &Perturbation::IDENTITY, self.config.seed)?,
            };
            emit(r.log_line(), &mut log)?;
            summary.evals.push(r);
        }
        flush(&mut log)?;
        if let Some(dir) = out_dir {
            self.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
        }
        Ok(summary)
    }
}

fn flush(log: &mut Option<(BufWriter<File>, std::path::PathBuf)>) -> Result<()> {
    if let Some((w, path)) = log {
        w.flush().map_err(|e| Error::io(path.as_path(), e))?;
    }
    Ok(())
}

/// Trains a fresh model on `train` and returns the trainer with its summary.
pub fn train(
    config: TrainConfig,
    train: &[BiTemporalSample],
    eval: Option<&[BiTemporalSample]>,
    out_dir: Option<&Path>,
) -> Result<(Trainer, TrainSummary)> {
    let mut trainer = Trainer::new(config)?;
    let summary = trainer.run(train, eval, out_dir, |_| {})?;
    Ok((trainer, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_samples, AugmentConfig};

    fn tiny() -> TrainConfig {
        let mut c = TrainConfig {
            batch_size: 2,
            max_iteration: 4,
            stop_at: None,
            lr0: 1e-3,
            ..TrainConfig::default()
        };
        c.model.widths = [4, 8, 8, 8];
        c.model.vocab = 64;
        c.model.text_dim = 8;
        c
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let n = 10;
        let mut seen: Vec<usize> = (0..5).flat_map(|s| batch_indices(3, s, 2, n)).map(|(_, i)| i).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..n).collect::<Vec<_>>());
        // Batches that straddle an epoch boundary draw from both permutations.
        let b = batch_indices(3, 1, 7, n);
        assert_eq!(b.iter().map(|p| p.0).collect::<Vec<_>>(), vec![0, 0, 0, 1, 1, 1, 1]);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = generate_samples(1, 0, 4, 32).unwrap();
        let mut cfg = tiny();
        cfg.augment = AugmentConfig::default();
        let mut full = Trainer::new(cfg.clone()).unwrap();
        let all = full.run(&data, None, None, |_| {}).unwrap();

        let mut first = Trainer::new(cfg.clone()).unwrap();
        for _ in 0..2 {
            first.train_step(&data).unwrap();
        }
        let bytes = {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("c.bin");
            first.checkpoint().save(&p).unwrap();
            std::fs::read(p).unwrap()
        };
        let ckpt = Checkpoint::from_bytes(&bytes, &Default::default()).unwrap();
        let mut second = Trainer::resume(cfg, ckpt).unwrap();
        let rest = second.run(&data, None, None, |_| {}).unwrap();
        assert_eq!(rest.steps[..], all.steps[2..]);
        for id in full.params.ids() {
            assert_eq!(full.params.get(id), second.params.get(id), "{}", full.params.name(id));
        }
    }

    #[test]
    fn run_writes_log_and_checkpoint() {
        let data = generate_samples(2, 0, 3, 32).unwrap();
        let mut cfg = tiny();
        cfg.eval_interval = 2;
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(cfg).unwrap();
        let s = t.run(&data, Some(&data[..2]), Some(dir.path()), |_| {}).unwrap();
        assert_eq!(s.steps.len(), 4);
        assert_eq!(s.evals.iter().map(|e| e.step).collect::<Vec<_>>(), vec![2, 4]);
        let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        assert_eq!(log.lines().filter(|l| l.starts_with("EVAL\t")).count(), 2);
        assert_eq!(log.lines().count(), 6);
        assert!(dir.path().join(CHECKPOINT_FILE).exists());
        assert_eq!(s.steps[0].lr, 1e-3);
    }
}
