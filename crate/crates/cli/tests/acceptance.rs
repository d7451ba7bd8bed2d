//! Acceptance criteria, one pass/fail line each. Exits nonzero on any failure.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use coseg_core::attention::{linear_attention, standard_attention};
use coseg_core::episodes::{generate_episode, make_split, Episode, EpisodeSpec, Phase};
use coseg_core::geometry::{
    cluster_to_seeds, farthest_point_sample, grid_subsample, BinaryMask, PointCloud,
};
use coseg_core::model::check::{check_episode, gradient_suite};
use coseg_core::model::train::{base_masks, test_episodes};
use coseg_core::model::{
    backbone_stub, calibrate_background, compute_cmc, evaluate, extract_prototypes, hca_layer,
    synth_pool, synth_scene, train_toy, BasePrototypeBank, CosegParams, HcaLayer, ModelConfig,
    PrototypeSet, SceneLayout, TrainConfig,
};
use coseg_core::rng::rng_from_seed;
use coseg_core::sampling::{leakage_audit, Sampler};
use coseg_core::tensorops::layers::{Linear, Mlp};
use coseg_core::tensorops::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;

type Check = Result<String, String>;

/// Name, time budget in seconds, and the check itself.
type Criterion = (&'static str, u64, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random(shape: &[usize], rng: &mut impl Rng, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

fn leakage_law() -> Check {
    let layout = SceneLayout::new(vec![(0, 8000), (1, 2000)]);
    let cloud = synth_scene(17, &layout).map_err(|e| e.to_string())?;
    ensure(cloud.len() == 10_000, || "scene size".into())?;
    let biased =
        leakage_audit(&cloud, 1, 2048, Sampler::Biased, 1000, 1).map_err(|e| e.to_string())?;
    let uniform =
        leakage_audit(&cloud, 1, 2048, Sampler::Uniform, 1000, 2).map_err(|e| e.to_string())?;
    let detail = format!(
        "biased={:.4} uniform={:.4} ratio={:.3}",
        biased.mean_output_fg_fraction, uniform.mean_output_fg_fraction, biased.density_ratio
    );
    ensure(
        (biased.mean_output_fg_fraction - 0.36).abs() <= 0.01,
        || detail.clone(),
    )?;
    ensure(
        (uniform.mean_output_fg_fraction - 0.20).abs() <= 0.01,
        || detail.clone(),
    )?;
    ensure(biased.density_ratio >= 1.7, || detail.clone())?;
    Ok(detail)
}

fn attention_oracle() -> Check {
    let phi = |x: f64| if x > 0.0 { x + 1.0 } else { x.exp() };
    let mut rng = rng_from_seed(31);
    let (mut worst_lin, mut worst_soft) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let n = rng.random_range(1..=64);
        let d = rng.random_range(1..=32);
        let q = random(&[n, d], &mut rng, 2.0);
        let k = random(&[n, d], &mut rng, 2.0);
        let v = random(&[n, d], &mut rng, 2.0);
        let mut lin = vec![0.0; n * d];
        let mut soft = vec![0.0; n * d];
        for i in 0..n {
            let kernel: Vec<f64> = (0..n)
                .map(|j| {
                    q.row(i)
                        .iter()
                        .zip(k.row(j))
                        .map(|(&a, &b)| phi(a) * phi(b))
                        .sum()
                })
                .collect();
            let scores: Vec<f64> = (0..n)
                .map(|j| {
                    q.row(i)
                        .iter()
                        .zip(k.row(j))
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / (d as f64).sqrt()
                })
                .collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let (zk, ze): (f64, f64) = (kernel.iter().sum(), e.iter().sum());
            for j in 0..n {
                for c in 0..d {
                    lin[i * d + c] += kernel[j] / zk * v.at(j, c);
                    soft[i * d + c] += e[j] / ze * v.at(j, c);
                }
            }
        }
        let lin = Tensor::new(vec![n, d], lin).unwrap();
        let soft = Tensor::new(vec![n, d], soft).unwrap();
        worst_lin = worst_lin.max(
            linear_attention(&q, &k, &v)
                .unwrap()
                .max_abs_diff(&lin)
                .unwrap(),
        );
        worst_soft = worst_soft.max(
            standard_attention(&q, &k, &v)
                .unwrap()
                .max_abs_diff(&soft)
                .unwrap(),
        );
    }
    let detail =
        format!("linear max_abs_diff={worst_lin:.2e} softmax max_abs_diff={worst_soft:.2e}");
    ensure(worst_lin < 1e-6 && worst_soft < 1e-12, || detail.clone())?;
    Ok(detail)
}

fn gradient_suite_check() -> Check {
    let (_, episode, _) = check_episode(5).map_err(|e| e.to_string())?;
    ensure(episode.n_way() == 1 && episode.query.len() <= 64, || {
        format!(
            "end-to-end episode is {}-way with {} query points",
            episode.n_way(),
            episode.query.len()
        )
    })?;
    let report = gradient_suite(10, 5, 1.0).map_err(|e| e.to_string())?;
    let worst = report.iter().map(|o| o.max_error).fold(0.0, f64::max);
    let failed: Vec<&str> = report
        .iter()
        .filter(|o| !o.passed())
        .map(|o| o.name)
        .collect();
    let detail = format!(
        "{} checks, >= {} trials each, worst rel error {worst:.2e}",
        report.len(),
        report.iter().map(|o| o.trials).min().unwrap_or(0)
    );
    ensure(
        failed.is_empty() && report.iter().all(|o| o.trials >= 10),
        || format!("{detail}; failed: {}", failed.join(",")),
    )?;
    Ok(detail)
}

fn d2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

fn geometry_oracles() -> Check {
    let mut rng = rng_from_seed(41);
    for trial in 0..50 {
        let n = rng.random_range(1..=64);
        let pos: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        let mut bits: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
        bits[rng.random_range(0..n)] = true;
        let mask = BinaryMask::new(bits.clone());
        let count = rng.random_range(1..=n);

        // brute-force greedy max-min
        let cand: Vec<usize> = (0..n).filter(|&i| bits[i]).collect();
        let mut expected = vec![cand[0]];
        while expected.len() < count.min(cand.len()) {
            let mut best = (-1.0, 0);
            for &i in cand.iter().filter(|i| !expected.contains(i)) {
                let d = expected
                    .iter()
                    .map(|&s| d2(&pos[i], &pos[s]))
                    .fold(f64::INFINITY, f64::min);
                if d > best.0 {
                    best = (d, i);
                }
            }
            expected.push(best.1);
        }
        let seeds = farthest_point_sample(&pos, &mask, count).map_err(|e| e.to_string())?;
        ensure(seeds.indices() == expected.as_slice(), || {
            format!("fps mismatch on instance {trial}")
        })?;

        // exhaustive nearest-seed scan
        let groups = cluster_to_seeds(&pos, &mask, &seeds).map_err(|e| e.to_string())?;
        let mut scan = vec![Vec::new(); seeds.len()];
        for &i in &cand {
            let mut best = (f64::INFINITY, 0);
            for (g, &s) in seeds.indices().iter().enumerate() {
                let d = d2(&pos[i], &pos[s]);
                if d < best.0 {
                    best = (d, g);
                }
            }
            scan[best.1].push(i);
        }
        ensure(groups == scan, || {
            format!("clustering mismatch on instance {trial}")
        })?;

        // bucket dedup
        let grid = rng.random_range(0.05..0.6);
        let labels: Vec<i32> = (0..n as i32).collect();
        let cloud = PointCloud::new(pos.clone(), vec![[0.0; 3]; n], labels).unwrap();
        let mut first: HashMap<[i64; 3], usize> = HashMap::new();
        for (i, p) in pos.iter().enumerate() {
            first
                .entry([0, 1, 2].map(|k| (p[k] / grid).floor() as i64))
                .or_insert(i);
        }
        let mut buckets: Vec<([i64; 3], usize)> = first.into_iter().collect();
        buckets.sort();
        let want: Vec<i32> = buckets.iter().map(|&(_, i)| i as i32).collect();
        let got = grid_subsample(&cloud, grid).map_err(|e| e.to_string())?;
        ensure(got.labels() == want.as_slice(), || {
            format!("grid mismatch on instance {trial}")
        })?;
    }
    Ok("50 instances: fps, clustering and grid match their oracles".into())
}

fn small_world() -> (Vec<PointCloud>, coseg_core::episodes::ClassSplit) {
    let classes: Vec<i32> = (0..6).collect();
    let pool = synth_pool(11, 10, &classes, 3, 24).unwrap();
    let split = make_split(&classes.iter().copied().collect(), 0).unwrap();
    (pool, split)
}

fn warm_bank(params: &CosegParams, pool: &[PointCloud], ids: Vec<i32>) -> BasePrototypeBank {
    let mut bank = BasePrototypeBank::new(ids, params.config().dim, 0.9).unwrap();
    for cloud in pool.iter().take(4) {
        let f = backbone_stub(cloud, &params.backbone).unwrap();
        bank.update_base_prototypes(&f, &base_masks(cloud.labels(), &bank), 0.9)
            .unwrap();
    }
    bank
}

fn permuted(e: &Episode, perm: &[usize]) -> Episode {
    Episode {
        query: e.query.select(perm).unwrap(),
        query_gt: perm.iter().map(|&i| e.query_gt[i]).collect(),
        ..e.clone()
    }
}

fn shape_and_equivariance() -> Check {
    let mut rng = rng_from_seed(51);
    let (d, n_o, nq) = (8, 4, 13);
    let coords: Vec<[f64; 3]> = (0..20)
        .map(|_| [rng.random(), rng.random(), rng.random()])
        .collect();
    for n_way in [1, 2] {
        let classes = (0..=n_way)
            .map(|_| {
                let f = random(&[20, d], &mut rng, 1.0);
                extract_prototypes(&[&f], &[&BinaryMask::full(20)], &[&coords], n_o, n_o).unwrap()
            })
            .collect();
        let protos = PrototypeSet::new(classes).unwrap();
        let q = random(&[nq, d], &mut rng, 1.0);
        let proj = Mlp::new("p", n_o, d, d, &mut rng);
        let (c, _) = compute_cmc(&q, &protos, &proj).map_err(|e| e.to_string())?;
        ensure(c.values().shape() == [nq, n_way + 1, d], || {
            format!("cmc shape {:?}", c.values().shape())
        })?;

        let guide = random(&[nq], &mut rng, 1.0);
        let fc = Linear::new("fc", 2 * d, d, &mut rng);
        let (cal, _) = calibrate_background(&c, &guide, &fc).map_err(|e| e.to_string())?;
        let fg = n_way * d;
        for i in 0..nq {
            let row = (n_way + 1) * d;
            ensure(
                cal.values().data()[i * row..i * row + fg]
                    == c.values().data()[i * row..i * row + fg],
                || "calibration touched a foreground slice".into(),
            )?;
        }
        for layers in 1..=3 {
            let mut x = c.clone();
            for l in 0..layers {
                let layer = HcaLayer::new(&format!("h{l}"), d, 2, 2 * d, &mut rng).unwrap();
                x = hca_layer(&x, &guide, &layer, &fc).map_err(|e| e.to_string())?;
            }
            ensure(x.values().shape() == [nq, n_way + 1, d], || {
                format!("hca L={layers} changed shape")
            })?;
        }
    }

    let (pool, split) = small_world();
    let config = ModelConfig {
        dim: 8,
        n_prototypes: 4,
        layers: 2,
        heads: 2,
        n_base: 3,
        share_calibration: false,
    };
    let params = CosegParams::from_seed(config, 2).unwrap();
    let bank = warm_bank(
        &params,
        &pool,
        split.train_classes().iter().copied().collect(),
    );
    let spec = |n_way| EpisodeSpec {
        n_way,
        k_shot: 1,
        min_fg_points: 10,
        m_cap: 1000,
    };
    let mut worst = 0.0f64;
    for (n_way, seed) in [(1, 3), (2, 4)] {
        let e = generate_episode(&pool, &split, Phase::Test, &spec(n_way), seed)
            .map_err(|e| e.to_string())?;
        let (out, _) = params
            .forward(&e, &bank, Phase::Test)
            .map_err(|e| e.to_string())?;
        let mut perm: Vec<usize> = (0..e.query.len()).collect();
        perm.shuffle(&mut rng);
        let (pout, _) = params
            .forward(&permuted(&e, &perm), &bank, Phase::Test)
            .map_err(|e| e.to_string())?;
        for (new, &old) in perm.iter().enumerate() {
            for (a, b) in pout.seg_logits.row(new).iter().zip(out.seg_logits.row(old)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    ensure(worst < 1e-10, || {
        format!("permutation changed logits by {worst:.2e}")
    })?;

    let e =
        generate_episode(&pool, &split, Phase::Train, &spec(1), 17).map_err(|e| e.to_string())?;
    let hidden: BTreeSet<i32> = e.target_classes.iter().copied().collect();
    let (a, _) = params
        .forward(&e, &bank, Phase::Train)
        .map_err(|e| e.to_string())?;
    let (b, _) = params
        .forward(&e, &bank.without(&hidden), Phase::Test)
        .map_err(|e| e.to_string())?;
    ensure(a.seg_logits == b.seg_logits, || {
        "train exclusion differs from row deletion".into()
    })?;
    Ok(format!(
        "shapes hold for n_way 1..2 and L 1..3; permutation drift {worst:.1e}"
    ))
}

fn momentum_law() -> Check {
    let dim = 6;
    let mut rng = rng_from_seed(61);
    let mut worst = 0.0f64;
    for &mu in &[0.5, 0.9, 0.995] {
        let mut bank = BasePrototypeBank::new(vec![0, 1, 2], dim, mu).unwrap();
        let first = random(&[1, dim], &mut rng, 1.0);
        let target = random(&[1, dim], &mut rng, 1.0);
        let masks = [
            BinaryMask::new(vec![false]),
            BinaryMask::full(1),
            BinaryMask::new(vec![false]),
        ];
        bank.update_base_prototypes(&first, &masks, mu).unwrap();
        let dist = |p: &[f64]| {
            p.iter()
                .zip(target.data())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let d0 = dist(first.data());
        for u in 2..=100 {
            bank.update_base_prototypes(&target, &masks, mu).unwrap();
            let predicted = mu.powi(u - 1) * d0;
            worst = worst.max((dist(bank.prototypes().row(1)) - predicted).abs());
        }
        for r in [0, 2] {
            ensure(bank.prototypes().row(r).iter().all(|&v| v == 0.0), || {
                "unseen row moved".into()
            })?;
        }
    }
    ensure(worst < 1e-12, || format!("law violated by {worst:.2e}"))?;
    Ok(format!(
        "max deviation {worst:.1e}; unseen rows exactly zero"
    ))
}

fn learning() -> Check {
    let classes: Vec<i32> = (0..8).collect();
    let train_pool = synth_pool(0, 40, &classes, 4, 120).map_err(|e| e.to_string())?;
    let test_pool = synth_pool(1000, 40, &classes, 4, 120).map_err(|e| e.to_string())?;
    let split = make_split(&classes.iter().copied().collect(), 0).map_err(|e| e.to_string())?;
    let config = TrainConfig::default();
    let out = train_toy(&train_pool, &split, &config).map_err(|e| e.to_string())?;
    let episodes = test_episodes(&test_pool, &split, &config.episode, config.seed, 100)
        .map_err(|e| e.to_string())?;
    ensure(
        episodes.iter().all(|e| e.n_way() == 1 && e.k_shot() == 1),
        || "episode shape".into(),
    )?;
    ensure(
        episodes.iter().all(|e| {
            e.target_classes
                .iter()
                .all(|c| split.test_classes().contains(c))
        }),
        || "test episode used a base class".into(),
    )?;
    let with_bank = evaluate(&out.params, &out.bank, &episodes).map_err(|e| e.to_string())?;
    let zeroed = evaluate(&out.params, &out.bank.zeroed(), &episodes).map_err(|e| e.to_string())?;
    let (m, z) = (
        with_bank.mean_iou().unwrap_or(0.0),
        zeroed.mean_iou().unwrap_or(0.0),
    );
    let detail = format!(
        "mIoU={m:.4} zeroed-bank mIoU={z:.4} over {} episodes",
        episodes.len()
    );
    ensure(m >= 0.90 && m >= z, || detail.clone())?;
    Ok(detail)
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_coseg"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim())
    })
}

fn snapshot(path: &Path) -> Vec<u8> {
    if path.is_dir() {
        let mut names: Vec<_> = fs::read_dir(path)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        names.sort();
        names
            .iter()
            .flat_map(|p| {
                [
                    p.file_name().unwrap().as_encoded_bytes().to_vec(),
                    snapshot(p),
                ]
                .concat()
            })
            .collect()
    } else {
        fs::read(path).unwrap()
    }
}

fn cli_determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let base = dir.path();
    let p = |name: &str| base.join(name).to_str().unwrap().to_string();
    let cfg = p("run.cfg");
    fs::write(
        &cfg,
        "dim=8\nn_prototypes=3\nhca_layers=1\nmin_fg_points=10\nepisodes=5\n",
    )
    .unwrap();
    run_cli(&[
        "synth",
        "--seed",
        "1",
        "--scenes",
        "12",
        "--classes",
        "6",
        "--per-scene",
        "3",
        "--points",
        "40",
        "--out",
        &p("pool"),
    ])?;
    run_cli(&[
        "train",
        "--config",
        &cfg,
        "--seed",
        "1",
        "--pool",
        &p("pool"),
        "--out",
        &p("model"),
    ])?;
    let scene = base
        .join("pool/scene_0000.pcseg")
        .to_str()
        .unwrap()
        .to_string();

    let commands: Vec<(&str, Vec<String>)> = vec![
        (
            "synth",
            ["synth", "--seed", "9", "--scenes", "3"]
                .map(String::from)
                .to_vec(),
        ),
        (
            "synth-layout",
            ["synth", "--seed", "9", "--layout", "0:50,3:20"]
                .map(String::from)
                .to_vec(),
        ),
        (
            "prep",
            vec!["prep".into(), "--seed".into(), "9".into(), scene.clone()],
        ),
        (
            "audit",
            vec![
                "audit".into(),
                "--seed".into(),
                "9".into(),
                "--sample-size".into(),
                "40".into(),
                "--trials".into(),
                "50".into(),
                scene,
            ],
        ),
        (
            "episodes",
            vec![
                "episodes".into(),
                "--config".into(),
                cfg.clone(),
                "--seed".into(),
                "9".into(),
                "--pool".into(),
                p("pool"),
                "--count".into(),
                "6".into(),
            ],
        ),
        (
            "gradcheck",
            ["gradcheck", "--seed", "9", "--trials", "1"]
                .map(String::from)
                .to_vec(),
        ),
        (
            "train",
            vec![
                "train".into(),
                "--config".into(),
                cfg.clone(),
                "--seed".into(),
                "9".into(),
                "--pool".into(),
                p("pool"),
            ],
        ),
        (
            "eval",
            vec![
                "eval".into(),
                "--seed".into(),
                "9".into(),
                "--model".into(),
                p("model"),
                "--pool".into(),
                p("pool"),
                "--episodes".into(),
                "6".into(),
            ],
        ),
    ];
    for (name, args) in &commands {
        let mut runs = Vec::new();
        for tag in ["a", "b"] {
            let out = p(&format!("{name}_{tag}"));
            let mut argv: Vec<&str> = args.iter().map(String::as_str).collect();
            argv.extend(["--out", &out]);
            run_cli(&argv)?;
            runs.push(snapshot(Path::new(&out)));
        }
        ensure(runs[0] == runs[1], || {
            format!("{name} output differs between runs")
        })?;
        ensure(!runs[0].is_empty(), || format!("{name} wrote nothing"))?;
    }
    Ok(format!(
        "{} commands byte-identical across two runs",
        commands.len()
    ))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("leakage_law", 10, leakage_law),
        ("attention_oracle", 5, attention_oracle),
        ("gradient_suite", 60, gradient_suite_check),
        ("geometry_oracles", 5, geometry_oracles),
        ("shape_equivariance", 30, shape_and_equivariance),
        ("momentum_law", 1, momentum_law),
        ("desk_scale_learning", 600, learning),
        ("cli_determinism", 120, cli_determinism),
    ];
    let mut failures = 0;
    for (name, budget, check) in criteria {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let over = elapsed > Duration::from_secs(budget);
        let (status, detail) = match (&result, over) {
            (Ok(d), false) => ("PASS", d.clone()),
            (Ok(d), true) => ("FAIL", format!("{d}; over the {budget}s budget")),
            (Err(e), _) => ("FAIL", e.clone()),
        };
        if status == "FAIL" {
            failures += 1;
        }
        println!(
            "{status} {name} ({:.2}s / {budget}s): {detail}",
            elapsed.as_secs_f64()
        );
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
