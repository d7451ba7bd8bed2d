//! Episodic training and evaluation.

use std::thread;

use crate::episodes::{
    episode_seeds, generate_episode, ClassSplit, Episode, EpisodeSpec, MiouAccumulator, Phase,
};
use crate::error::{Error, Result};
use crate::geometry::{BinaryMask, PointCloud};
use crate::model::bank::BasePrototypeBank;
use crate::model::network::{episode_loss, predict, CosegParams, ModelConfig};
use crate::rng::substream;
use crate::tensorops::layers::Module;
use crate::tensorops::optim::{AdamW, AdamWConfig};
use crate::tensorops::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub episode: EpisodeSpec,
    pub episodes: usize,
    pub optimizer: AdamWConfig,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            episode: EpisodeSpec::default(),
            episodes: 2000,
            optimizer: AdamWConfig::default(),
            momentum: 0.995,
            seed: 0,
        }
    }
}

/// Masks of every bank class over `labels`, in bank row order.
pub fn base_masks(labels: &[i32], bank: &BasePrototypeBank) -> Vec<BinaryMask> {
    bank.class_ids()
        .iter()
        .map(|&c| BinaryMask::new(labels.iter().map(|&l| l == c).collect()))
        .collect()
}

/// Mutable training state: parameters, bank and optimizer moments.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub params: CosegParams,
    pub bank: BasePrototypeBank,
    optimizer: AdamW,
    momentum: f64,
}

impl Trainer {
    pub fn new(
        params: CosegParams,
        bank: BasePrototypeBank,
        optimizer: AdamWConfig,
        momentum: f64,
    ) -> Self {
        Self {
            params,
            bank,
            optimizer: AdamW::new(optimizer),
            momentum,
        }
    }

    /// One optimizer step on `episode` followed by a bank update from the
    /// support and query features of that step. Returns the loss.
    pub fn step(&mut self, episode: &Episode) -> Result<f64> {
        let (out, cache) = episode_loss(&self.params, episode, &self.bank, Phase::Train)?;
        if !out.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss {} (seg {}, base {}) on episode seed {} after {} steps",
                out.total,
                out.seg,
                out.base,
                episode.seed,
                self.optimizer.step_count()
            )));
        }
        self.params.zero_grad();
        self.params.backward(&cache, &out.dseg, &out.dbase);
        if let Some(p) = self
            .params
            .params()
            .into_iter()
            .find(|p| !p.grad.is_finite())
        {
            return Err(Error::NonFinite(format!(
                "gradient of {} on episode seed {}",
                p.name(),
                episode.seed
            )));
        }
        self.optimizer.step(&mut self.params.params_mut())?;

        let support_clouds = episode.support.iter().flatten().map(|s| &s.cloud);
        let mut masks: Vec<Vec<BinaryMask>> = Vec::new();
        let mut feats: Vec<&Tensor> = Vec::new();
        for (cloud, f) in support_clouds.zip(cache.support_features()) {
            masks.push(base_masks(cloud.labels(), &self.bank));
            feats.push(f);
        }
        masks.push(base_masks(episode.query.labels(), &self.bank));
        feats.push(cache.query_features());
        let observations: Vec<(&Tensor, &[BinaryMask])> = feats
            .into_iter()
            .zip(masks.iter().map(Vec::as_slice))
            .collect();
        self.bank.update_from_many(&observations, self.momentum)?;
        Ok(out.total)
    }
}

/// Result of [`train_toy`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: CosegParams,
    pub bank: BasePrototypeBank,
    pub losses: Vec<f64>,
}

/// Initial parameters and empty bank for a run with this config.
pub fn initial_state(
    split: &ClassSplit,
    config: &TrainConfig,
) -> Result<(CosegParams, BasePrototypeBank)> {
    let base: Vec<i32> = split.train_classes().iter().copied().collect();
    let model = ModelConfig {
        n_base: base.len(),
        ..config.model
    };
    let params = CosegParams::from_seed(model, substream(config.seed, "init"))?;
    let bank = BasePrototypeBank::new(base, model.dim, config.momentum)?;
    Ok((params, bank))
}

/// Meta-trains from scratch on train-phase episodes drawn from `pool`.
pub fn train_toy(
    pool: &[PointCloud],
    split: &ClassSplit,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let (params, bank) = initial_state(split, config)?;
    let mut trainer = Trainer::new(params, bank, config.optimizer, config.momentum);
    let mut losses = Vec::with_capacity(config.episodes);
    for seed in episode_seeds(substream(config.seed, "train"), config.episodes) {
        let episode = generate_episode(pool, split, Phase::Train, &config.episode, seed)?;
        losses.push(trainer.step(&episode)?);
    }
    Ok(TrainOutcome {
        params: trainer.params,
        bank: trainer.bank,
        losses,
    })
}

/// Test-phase predictions for each episode, computed on worker threads.
pub fn predict_episodes(
    params: &CosegParams,
    bank: &BasePrototypeBank,
    episodes: &[Episode],
) -> Result<Vec<Vec<usize>>> {
    let workers = thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(episodes.len().max(1));
    let chunk = episodes.len().div_ceil(workers).max(1);
    let parts: Vec<Result<Vec<Vec<usize>>>> = thread::scope(|s| {
        let handles: Vec<_> = episodes
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|e| {
                            params
                                .forward(e, bank, Phase::Test)
                                .map(|(o, _)| predict(&o.seg_logits))
                        })
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(episodes.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// mIoU over `episodes`, aggregated per real class id.
pub fn evaluate(
    params: &CosegParams,
    bank: &BasePrototypeBank,
    episodes: &[Episode],
) -> Result<MiouAccumulator> {
    let preds = predict_episodes(params, bank, episodes)?;
    let mut acc = MiouAccumulator::new();
    for (e, p) in episodes.iter().zip(&preds) {
        acc.add_episode(p, &e.query_gt, &e.target_classes)?;
    }
    Ok(acc)
}

/// Draws `count` test-phase episodes with seeds derived from `seed`.
pub fn test_episodes(
    pool: &[PointCloud],
    split: &ClassSplit,
    spec: &EpisodeSpec,
    seed: u64,
    count: usize,
) -> Result<Vec<Episode>> {
    episode_seeds(substream(seed, "test"), count)
        .into_iter()
        .map(|s| generate_episode(pool, split, Phase::Test, spec, s))
        .collect()
}
