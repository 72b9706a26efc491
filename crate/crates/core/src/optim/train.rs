use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use super::{adam_step, AdamState, CyclicLr};
use crate::checkpoint::Checkpoint;
use crate::net::{batch_targets, Mode, NetConfig, NetInput, Network, BN_MOMENTUM};
use crate::sampler::{augment, extract_sample, CenterSampler, TrainingSample};
use crate::seed::{stream, tag};
use crate::tensor::softmax_ce;
use crate::volume::{check_dims, LabelMap, Mask, Volume};
use crate::{Error, Result};

/// Allowed pretraining subset fractions.
pub const SYNTHETIC_FRACTIONS: [f64; 3] = [1.0, 0.5, 0.25];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    /// For a fresh or fine-tuning run, the number of iterations to perform;
    /// when resuming, the iteration count to reach.
    pub iterations: u64,
    pub net: NetConfig,
    pub schedule: CyclicLr,
    /// Write a checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: u64,
    pub p_flip: f64,
    pub p_rot: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch_size: 10,
            iterations: 3000,
            net: NetConfig::default(),
            schedule: CyclicLr::default(),
            checkpoint_every: 0,
            p_flip: 0.5,
            p_rot: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        for (name, p) in [("p_flip", self.p_flip), ("p_rot", self.p_rot)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        self.schedule.validate()?;
        self.net.validate()
    }
}

/// A standardized volume with its reference labels and information mask.
#[derive(Clone, Debug)]
pub struct TrainingCase {
    pub volume: Volume,
    pub labels: LabelMap,
    pub mask: Mask,
    sampler: CenterSampler,
}

impl TrainingCase {
    pub fn new(volume: Volume, labels: LabelMap, mask: Mask) -> Result<Self> {
        check_dims("training case", volume.dims(), labels.dims())?;
        let sampler = CenterSampler::new(&labels, &mask)?;
        Ok(TrainingCase {
            volume,
            labels,
            mask,
            sampler,
        })
    }

    fn draw(&self, rng: &mut impl Rng, cfg: &TrainConfig, geom: &crate::sampler::PatchGeometry) -> Result<TrainingSample> {
        let center = self.sampler.sample(rng);
        let s = extract_sample(&self.volume, &self.labels, center, geom)?;
        Ok(augment(&s, rng, cfg.p_flip, cfg.p_rot))
    }
}

/// Where the weights of a run come from.
pub enum Initial {
    /// Seeded He initialization.
    Fresh,
    /// Start from pretrained weights with a fresh optimizer and the schedule at 0.
    FineTune(Network<f32>),
    /// Continue a checkpointed run, keeping its optimizer state and iteration.
    Resume(Checkpoint),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iter: u64,
    pub lr: f32,
    pub loss: f64,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

/// Indices of the volumes kept for a pretraining run: a seeded shuffle, then a prefix.
pub fn select_subset(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !SYNTHETIC_FRACTIONS.contains(&fraction) {
        return Err(Error::Config(format!(
            "synthetic_fraction must be one of {SYNTHETIC_FRACTIONS:?}, got {fraction}"
        )));
    }
    if n == 0 {
        return Err(Error::Config("no volumes to select from".into()));
    }
    let keep = ((n as f64 * fraction).round() as usize).max(1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, &[tag::SUBSET]));
    idx.truncate(keep);
    Ok(idx)
}

fn check_initial_config(found: &NetConfig, wanted: &NetConfig) -> Result<()> {
    if found.activation != wanted.activation {
        return Err(Error::Config(format!(
            "checkpoint uses {} activations but the run is configured for {}",
            found.activation, wanted.activation
        )));
    }
    if found != wanted {
        return Err(Error::Config(format!(
            "checkpoint network {found:?} differs from configured network {wanted:?}"
        )));
    }
    Ok(())
}

/// Runs mini-batch training. `progress` sees each log row as it is produced.
pub fn train(
    cfg: &TrainConfig,
    data: &[TrainingCase],
    initial: Initial,
    checkpoint_dir: Option<&Path>,
    mut progress: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let (mut net, adam, start) = match initial {
        Initial::Fresh => {
            let net = Network::<f32>::init(cfg.net.clone(), &mut stream(cfg.seed, &[tag::INIT]))?;
            (net, None, 0)
        }
        Initial::FineTune(net) => {
            check_initial_config(&net.config, &cfg.net)?;
            (net, None, 0)
        }
        Initial::Resume(ck) => {
            check_initial_config(&ck.net.config, &cfg.net)?;
            (ck.net, ck.adam, ck.iteration)
        }
    };
    let end = cfg.iterations.max(start);
    let mut adam = adam.unwrap_or_else(|| {
        let lens = net.tensors().into_iter().filter(|t| t.1 == crate::net::Role::Trainable).map(|t| t.3.len());
        AdamState::new(lens)
    });
    if let Some(dir) = checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let geom = net.geometry();
    let mut log = Vec::with_capacity((end - start) as usize);

    for it in start..end {
        let samples = (0..cfg.batch_size)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream(cfg.seed, &[tag::BATCH, it, i as u64]);
                let case = &data[rng.random_range(0..data.len())];
                case.draw(&mut rng, cfg, &geom)
            })
            .collect::<Result<Vec<_>>>()?;
        let input = NetInput::<f32>::from_samples(&samples)?;
        let targets = batch_targets(&samples);
        let (logits, cache) = net.forward(&input, Mode::Train)?;
        let cache = cache.expect("train mode keeps a cache");
        let (loss, dlogits) = softmax_ce(&logits, &targets)?;
        if !loss.is_finite() {
            return Err(Error::Validation(format!("loss became non-finite at iteration {it}")));
        }
        let grads = net.backward(&cache, &dlogits)?;
        net.update_running_stats(&cache, BN_MOMENTUM);
        let lr = cfg.schedule.at(it);
        {
            let entries = grads.entries();
            let mut params: Vec<&mut Vec<f32>> = net.params_mut().into_iter().map(|(_, p)| p).collect();
            adam_step(&mut params, &entries, &mut adam, lr as f64)?;
        }
        let row = LogRow { iter: it, lr, loss };
        progress(&row);
        log.push(row);

        let done = it + 1;
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                Checkpoint::borrowed(&net, Some(&adam), done).save(dir.join(format!("iter_{done:06}")))?;
            }
        }
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            net,
            adam: Some(adam),
            iteration: end,
        },
        log,
    })
}

/// CSV with header `iter,lr,loss`.
pub fn write_loss_log(path: impl AsRef<Path>, rows: &[LogRow]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("iter,lr,loss\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.iter, r.lr, r.loss));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
