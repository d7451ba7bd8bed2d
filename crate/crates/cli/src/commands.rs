//! Subcommand implementations.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use coseg_core::episodes::{
    assemble_episode, episode_seeds, make_split, plan_episode, ClassSplit, Episode,
    EpisodeDescriptor, EpisodeManifest, MiouAccumulator, Phase,
};
use coseg_core::geometry::{grid_subsample, split_blocks, PointCloud, UNLABELED};
use coseg_core::model::check::gradient_suite;
use coseg_core::model::train::{initial_state, predict_episodes, test_episodes};
use coseg_core::model::{synth_pool, synth_scene, train_toy, SceneLayout};
use coseg_core::rng::{rng_from_seed, substream};
use coseg_core::sampling::{leakage_audit, Sampler};
use rand::seq::SliceRandom;

use crate::artifact::ModelArtifact;
use crate::config::RunConfig;
use crate::error::CliError;
use crate::files::{
    self, ensure_dir, load_pool, read_point_cloud, read_text, write_atomic, POINT_CLOUD_EXT,
};

#[derive(Debug, Parser)]
#[command(
    name = "coseg",
    version,
    about = "Few-shot point-cloud segmentation lab"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags every command accepts.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// `key=value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root seed; overrides the config's `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file or directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic scenes: one file for `--layout`, else a pool directory.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Single scene as `class:points,...`.
        #[arg(long)]
        layout: Option<String>,
        #[arg(long, default_value_t = 40)]
        scenes: usize,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 4)]
        per_scene: usize,
        #[arg(long, default_value_t = 120)]
        points: usize,
    },
    /// Voxel-subsample clouds and cut them into blocks.
    Prep {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Foreground-density audit of both samplers.
    Audit {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        fg_class: i32,
        /// Points per draw; defaults to `max_points`.
        #[arg(long)]
        sample_size: Option<usize>,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Write an episode manifest for a pool directory.
    Episodes {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value = "test")]
        phase: Phase,
    },
    /// Finite-difference gradient suite.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        /// Scale every analytic gradient by 1.1 to exercise the detector.
        #[arg(long)]
        corrupt: bool,
    },
    /// Meta-train on a pool directory and write a model artifact.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pool: PathBuf,
    },
    /// Evaluate one model per fold and write mIoU metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        /// Replay a manifest instead of drawing episodes.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Evaluate with every bank row zeroed.
        #[arg(long)]
        zero_bank: bool,
        /// Score the ground truth itself.
        #[arg(long)]
        oracle: bool,
        /// Accumulate episodes in a seed-shuffled order.
        #[arg(long)]
        shuffle: bool,
    },
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_text(&read_text(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth {
            common,
            layout,
            scenes,
            classes,
            per_scene,
            points,
        } => synth(
            &common,
            layout.as_deref(),
            scenes,
            classes,
            per_scene,
            points,
        ),
        Command::Prep { common, inputs } => prep(&common, &inputs),
        Command::Audit {
            common,
            fg_class,
            sample_size,
            trials,
            inputs,
        } => audit(&common, fg_class, sample_size, trials, &inputs),
        Command::Episodes {
            common,
            pool,
            count,
            phase,
        } => episodes(&common, &pool, count, phase),
        Command::Gradcheck {
            common,
            trials,
            corrupt,
        } => gradcheck(&common, trials, corrupt),
        Command::Train { common, pool } => train(&common, &pool),
        Command::Eval {
            common,
            models,
            pool,
            episodes,
            manifest,
            zero_bank,
            oracle,
            shuffle,
        } => eval(
            &common,
            &models,
            &pool,
            &EvalOptions {
                episodes,
                manifest,
                zero_bank,
                oracle,
                shuffle,
            },
        ),
    }
}

fn parse_layout(text: &str) -> Result<Vec<(i32, usize)>, CliError> {
    text.split(',')
        .map(|part| {
            let (c, n) = part.split_once(':').ok_or_else(|| {
                CliError::Usage(format!("layout entry `{part}` is not class:points"))
            })?;
            let c = c
                .trim()
                .parse()
                .map_err(|e| CliError::Usage(format!("layout class `{c}`: {e}")))?;
            let n = n
                .trim()
                .parse()
                .map_err(|e| CliError::Usage(format!("layout count `{n}`: {e}")))?;
            Ok((c, n))
        })
        .collect()
}

fn synth(
    common: &Common,
    layout: Option<&str>,
    scenes: usize,
    classes: usize,
    per_scene: usize,
    points: usize,
) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    if let Some(layout) = layout {
        let layout = SceneLayout::new(parse_layout(layout)?);
        let cloud = synth_scene(substream(cfg.seed, "synth"), &layout)?;
        return write_atomic(&common.out, &files::point_cloud_to_text(&cloud));
    }
    let ids: Vec<i32> = (0..classes as i32).collect();
    let pool = synth_pool(
        substream(cfg.seed, "synth"),
        scenes,
        &ids,
        per_scene,
        points,
    )?;
    ensure_dir(&common.out)?;
    for (i, cloud) in pool.iter().enumerate() {
        let path = common.out.join(format!("scene_{i:04}.{POINT_CLOUD_EXT}"));
        write_atomic(&path, &files::point_cloud_to_text(cloud))?;
    }
    Ok(())
}

fn prep(common: &Common, inputs: &[PathBuf]) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    ensure_dir(&common.out)?;
    for input in inputs {
        let cloud = read_point_cloud(input)?;
        let stem = input
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("cloud");
        let voxels = grid_subsample(&cloud, cfg.grid_size)?;
        for (b, block) in split_blocks(&voxels, cfg.block_size)?.iter().enumerate() {
            let path = common
                .out
                .join(format!("{stem}_block{b:03}.{POINT_CLOUD_EXT}"));
            write_atomic(&path, &files::point_cloud_to_text(block))?;
        }
    }
    Ok(())
}

fn audit(
    common: &Common,
    fg_class: i32,
    sample_size: Option<usize>,
    trials: usize,
    inputs: &[PathBuf],
) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let m = sample_size.unwrap_or(cfg.max_points);
    let mut out = String::new();
    for input in inputs {
        let cloud = read_point_cloud(input)?;
        for sampler in [Sampler::Biased, Sampler::Uniform] {
            let seed = substream(cfg.seed, &format!("audit.{sampler}"));
            let report = leakage_audit(&cloud, fg_class, m, sampler, trials, seed)?;
            let _ = writeln!(
                out,
                "# file={} sampler={sampler} fg_class={fg_class} sample_size={m}",
                input.display()
            );
            out.push_str(&report.to_text());
            out.push('\n');
        }
    }
    write_atomic(&common.out, &out)
}

/// Every labeled class in the pool.
fn pool_classes(pool: &[PointCloud]) -> BTreeSet<i32> {
    pool.iter()
        .flat_map(|c| c.labels().iter().copied())
        .filter(|&l| l != UNLABELED)
        .collect()
}

fn pool_split(pool: &[PointCloud], fold: u8) -> Result<ClassSplit, CliError> {
    Ok(make_split(&pool_classes(pool), fold)?)
}

fn episodes(common: &Common, pool_dir: &Path, count: usize, phase: Phase) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let (names, pool) = load_pool(pool_dir)?;
    let split = pool_split(&pool, cfg.fold)?;
    let spec = cfg.episode_spec();
    let entries = episode_seeds(substream(cfg.seed, "manifest"), count)
        .into_iter()
        .map(|seed| {
            let plan = plan_episode(&pool, &split, phase, &spec, seed)?;
            Ok(EpisodeDescriptor {
                seed,
                target_classes: plan.target_classes.clone(),
                support_paths: plan
                    .support
                    .iter()
                    .flatten()
                    .map(|&i| names[i].clone())
                    .collect(),
                query_path: names[plan.query].clone(),
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    write_atomic(&common.out, &EpisodeManifest::new(entries)?.to_text()?)
}

/// Rebuilds the episodes of a manifest from files under `pool_dir`.
pub fn replay_manifest(
    manifest: &EpisodeManifest,
    pool_dir: &Path,
    cfg: &RunConfig,
) -> Result<Vec<Episode>, CliError> {
    manifest
        .entries
        .iter()
        .map(|d| {
            let k = d.k_shot();
            let support_clouds = d
                .support_paths
                .iter()
                .map(|p| read_point_cloud(&pool_dir.join(p)))
                .collect::<Result<Vec<_>, _>>()?;
            let support: Vec<Vec<&PointCloud>> = support_clouds
                .chunks(k)
                .map(|w| w.iter().collect())
                .collect();
            let query = read_point_cloud(&pool_dir.join(&d.query_path))?;
            let spec = coseg_core::episodes::EpisodeSpec {
                n_way: d.target_classes.len(),
                k_shot: k,
                ..cfg.episode_spec()
            };
            Ok(assemble_episode(
                &d.target_classes,
                &support,
                &query,
                &spec,
                d.seed,
            )?)
        })
        .collect()
}

fn gradcheck(common: &Common, trials: usize, corrupt: bool) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let scale = if corrupt { 1.1 } else { 1.0 };
    let report = gradient_suite(trials, substream(cfg.seed, "gradcheck"), scale)?;
    let mut out = String::new();
    for op in &report {
        let _ = writeln!(
            out,
            "op={} trials={} max_rel_error={:e} status={}",
            op.name,
            op.trials,
            op.max_error,
            if op.passed() { "pass" } else { "fail" }
        );
    }
    write_atomic(&common.out, &out)?;
    let failed: Vec<&str> = report
        .iter()
        .filter(|o| !o.passed())
        .map(|o| o.name)
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed(format!(
            "gradient mismatch in {}",
            failed.join(", ")
        )))
    }
}

fn train(common: &Common, pool_dir: &Path) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let (_, pool) = load_pool(pool_dir)?;
    let split = pool_split(&pool, cfg.fold)?;
    let tc = cfg.train_config();
    let (params, bank) = if tc.episodes == 0 {
        initial_state(&split, &tc)?
    } else {
        let out = train_toy(&pool, &split, &tc)?;
        (out.params, out.bank)
    };
    let artifact = ModelArtifact {
        config: cfg,
        params,
        bank,
    };
    write_atomic(&common.out, &artifact.to_text()?)
}

pub struct EvalOptions {
    pub episodes: usize,
    pub manifest: Option<PathBuf>,
    pub zero_bank: bool,
    pub oracle: bool,
    pub shuffle: bool,
}

fn eval(
    common: &Common,
    models: &[PathBuf],
    pool_dir: &Path,
    opts: &EvalOptions,
) -> Result<(), CliError> {
    let (_, pool) = load_pool(pool_dir)?;
    let mut out = String::new();
    let mut fold_means = Vec::new();
    for model_path in models {
        let artifact = ModelArtifact::from_text(&read_text(model_path)?)
            .map_err(|m| CliError::format(model_path, m))?;
        let mut cfg = artifact.config.clone();
        if let Some(s) = common.seed {
            cfg.seed = s;
        }
        let mut episodes = match &opts.manifest {
            Some(p) => {
                let manifest = EpisodeManifest::from_text(&read_text(p)?)?;
                replay_manifest(&manifest, pool_dir, &cfg)?
            }
            None => {
                let split = pool_split(&pool, cfg.fold)?;
                test_episodes(&pool, &split, &cfg.episode_spec(), cfg.seed, opts.episodes)?
            }
        };
        if opts.shuffle {
            episodes.shuffle(&mut rng_from_seed(substream(cfg.seed, "eval.shuffle")));
        }
        let preds = if opts.oracle {
            episodes.iter().map(|e| e.query_gt.clone()).collect()
        } else {
            let bank = if opts.zero_bank {
                artifact.bank.zeroed()
            } else {
                artifact.bank.clone()
            };
            predict_episodes(&artifact.params, &bank, &episodes)?
        };
        let mut acc = MiouAccumulator::new();
        for (e, p) in episodes.iter().zip(&preds) {
            acc.add_episode(p, &e.query_gt, &e.target_classes)?;
        }
        let fold = cfg.fold;
        for (class, iou) in acc.per_class() {
            let _ = writeln!(out, "fold{fold}.class{class}.iou={iou}");
        }
        let mean = acc.mean_iou().unwrap_or(0.0);
        let _ = writeln!(out, "fold{fold}.episodes={}", episodes.len());
        let _ = writeln!(out, "fold{fold}.mean_iou={mean}");
        fold_means.push(mean);
    }
    let mean = fold_means.iter().sum::<f64>() / fold_means.len() as f64;
    let _ = writeln!(out, "mean_iou={mean}");
    write_atomic(&common.out, &out)
}
