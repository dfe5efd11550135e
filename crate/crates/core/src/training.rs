//! Mini-batch Adam training loop.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, model_backward, save_checkpoint, Batch, ModelParams};
use crate::numeric::{adam_step, AdamConfig, ParamSet};
use crate::preprocess::Example;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub shuffle: bool,
    /// Epoch number of the first epoch run; later than 1 when resuming.
    pub first_epoch: usize,
    /// When set, `epoch_<n>.ckpt` is written here after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            epochs: 6,
            batch_size: 256,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            seed: 0,
            shuffle: true,
            first_epoch: 1,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.first_epoch == 0 {
            return Err(Error::Config("first_epoch must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub seconds: f64,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }

    /// `epoch,mean_loss,seconds`
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,mean_loss,seconds")?;
        for e in &self.epochs {
            writeln!(w, "{},{},{:.3}", e.epoch, e.mean_loss, e.seconds)?;
        }
        Ok(())
    }
}

/// SplitMix64 finalizer over `base ^ golden·(index + 1)`; used to derive
/// independent job and epoch seeds from one base seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Example visiting order for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64));
        order.shuffle(&mut rng);
    }
    order
}

/// Shuffles deterministically by `(seed, epoch)` and packs left-padded
/// batches. The final batch may be short.
pub fn make_batches(
    examples: &[Example],
    batch_size: usize,
    seed: u64,
    epoch: usize,
    max_len: usize,
) -> Result<Vec<Batch>> {
    batches_in_order(
        examples,
        &epoch_order(examples.len(), seed, epoch, true),
        batch_size,
        max_len,
    )
}

pub fn batches_in_order(
    examples: &[Example],
    order: &[usize],
    batch_size: usize,
    max_len: usize,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    order
        .chunks(batch_size)
        .map(|chunk| Batch::from_examples(chunk.iter().map(|&i| &examples[i]), max_len))
        .collect()
}

fn param_diagnostics(params: &ModelParams) -> String {
    params
        .params()
        .iter()
        .map(|p| {
            let max_abs = p.value.data().iter().fold(0.0f64, |a, x| a.max(x.abs()));
            format!(
                "{}: max|w|={:.3e} |g|={:.3e}",
                p.name,
                max_abs,
                p.grad.frobenius_sq().sqrt()
            )
        })
        .collect::<Vec<_>>()
        .join("; ")
}

/// Runs `cfg.epochs` epochs of forward, backward and Adam over `examples`.
///
/// `on_epoch(epoch, params)` is called after each epoch, once the
/// checkpoint (if any) is written.
pub fn train<F>(
    params: &mut ModelParams,
    examples: &[Example],
    cfg: &TrainConfig,
    vocab_digest: &str,
    mut on_epoch: F,
) -> Result<TrainLog>
where
    F: FnMut(usize, &ModelParams) -> Result<()>,
{
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Empty("training examples"));
    }
    let adam = cfg.adam();
    let max_len = params.config.base().max_len;
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut log = TrainLog::default();
    for epoch in cfg.first_epoch..cfg.first_epoch + cfg.epochs {
        let started = Instant::now();
        let order = epoch_order(examples.len(), cfg.seed, epoch, cfg.shuffle);
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = Batch::from_examples(chunk.iter().map(|&i| &examples[i]), max_len)?;
            let (_, trace) = forward(params, &batch)?;
            let loss = model_backward(params, &trace, &batch.targets)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    diagnostics: param_diagnostics(params),
                });
            }
            loss_sum += loss * batch.size() as f64;
            for p in params.params_mut() {
                adam_step(p, &adam);
            }
        }
        let checkpoint = match &cfg.checkpoint_dir {
            Some(dir) => {
                let path = dir.join(format!("epoch_{epoch}.ckpt"));
                save_checkpoint(&path, params, vocab_digest)?;
                Some(path)
            }
            None => None,
        };
        log.epochs.push(EpochLog {
            epoch,
            mean_loss: loss_sum / examples.len() as f64,
            seconds: started.elapsed().as_secs_f64(),
            checkpoint,
        });
        on_epoch(epoch, params)?;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn examples(n: usize) -> Vec<Example> {
        (0..n)
            .map(|i| Example {
                session_id: i as u64,
                input_items: vec![i % 3],
                input_dwell: vec![0],
                target_item: (i + 1) % 3,
            })
            .collect()
    }

    #[test]
    fn batch_sizes() {
        let b = make_batches(&examples(10), 4, 1, 1, 3).unwrap();
        assert_eq!(b.iter().map(Batch::size).collect::<Vec<_>>(), vec![4, 4, 2]);
    }

    #[test]
    fn order_is_keyed_by_seed_and_epoch() {
        let a = epoch_order(50, 7, 2, true);
        assert_eq!(a, epoch_order(50, 7, 2, true));
        assert_ne!(a, epoch_order(50, 7, 3, true));
        assert_ne!(a, epoch_order(50, 8, 2, true));
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_eq!(epoch_order(5, 7, 2, false), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn every_example_once_per_epoch() {
        let ex = examples(23);
        let batches = make_batches(&ex, 5, 3, 4, 2).unwrap();
        let mut ids: Vec<u64> = batches.iter().flat_map(|b| b.session_ids.clone()).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..23).collect::<Vec<u64>>());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
        assert_eq!(derive_seed(5, 5), derive_seed(5, 5));
    }

    #[test]
    fn config_validation() {
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
