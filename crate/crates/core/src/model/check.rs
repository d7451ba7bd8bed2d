//! Finite-difference checks of every differentiable op and of the full
//! episode loss.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::Rng as _;

use crate::attention::{
    linear_attention, linear_attention_backward, linear_attention_forward, standard_attention,
    standard_attention_backward, standard_attention_forward, AttentionParams,
};
use crate::episodes::{generate_episode, make_split, Episode, EpisodeSpec, Phase};
use crate::error::{invalid, Result};
use crate::geometry::BinaryMask;
use crate::model::bank::{base_guidance, base_guidance_backward, BasePrototypeBank};
use crate::model::correlation::{
    calibrate_background, calibrate_background_backward, compute_cmc, compute_cmc_backward,
    CorrelationTensor,
};
use crate::model::hca::{hca_layer, HcaLayer};
use crate::model::network::{backbone_stub, episode_loss, CosegParams, ModelConfig};
use crate::model::prototypes::{
    extract_prototypes, extract_prototypes_backward, ClassPrototypes, PrototypeSet,
};
use crate::model::synth::{synth_scene, SceneLayout};
use crate::model::train::base_masks;
use crate::rng::{indexed, rng_from_seed, substream, Rng};
use crate::tensorops::gradcheck::{check_op, finite_difference_check_at, FD_STEP, REL_TOLERANCE};
use crate::tensorops::layers::{Linear, Mlp, Module};
use crate::tensorops::{ops, Tensor};

/// Analytic parameter gradients of the train-phase loss on `episode`, in
/// [`Module::params`] order.
pub fn loss_gradients(
    params: &CosegParams,
    episode: &Episode,
    bank: &BasePrototypeBank,
) -> Result<(f64, Vec<Tensor>)> {
    let (out, cache) = episode_loss(params, episode, bank, Phase::Train)?;
    let mut work = params.clone();
    work.zero_grad();
    work.backward(&cache, &out.dseg, &out.dbase);
    Ok((
        out.total,
        work.params().iter().map(|p| p.grad.clone()).collect(),
    ))
}

/// Worst relative error over `samples` parameter coordinates drawn with
/// `seed`. `grad_scale` multiplies the analytic gradient; anything other
/// than 1 deliberately corrupts it.
pub fn loss_gradient_check(
    params: &CosegParams,
    episode: &Episode,
    bank: &BasePrototypeBank,
    samples: usize,
    seed: u64,
    grad_scale: f64,
) -> Result<f64> {
    let (_, grads) = loss_gradients(params, episode, bank)?;
    let analytic: Vec<Tensor> = grads.iter().map(|g| g.scale(grad_scale)).collect();
    let inputs: Vec<Tensor> = params.params().iter().map(|p| p.value.clone()).collect();
    let all: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |k| (i, k)))
        .collect();
    if samples == 0 {
        return Err(invalid("gradient check needs at least one coordinate"));
    }
    let picked = index::sample(&mut rng_from_seed(seed), all.len(), samples.min(all.len()));
    let mut coords: Vec<(usize, usize)> = picked.into_iter().map(|i| all[i]).collect();
    coords.sort_unstable();
    finite_difference_check_at(
        |xs| {
            let mut p = params.clone();
            for (param, x) in p.params_mut().into_iter().zip(xs) {
                param.value = x.clone();
            }
            episode_loss(&p, episode, bank, Phase::Train).map_or(f64::NAN, |(o, _)| o.total)
        },
        &inputs,
        &analytic,
        FD_STEP,
        &coords,
    )
}

/// Worst relative error of one op over several random instances.
#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub name: &'static str,
    pub trials: usize,
    pub max_error: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_error < REL_TOLERANCE
    }
}

fn rand_t(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

fn scaled(grads: Vec<Tensor>, k: f64) -> Vec<Tensor> {
    grads.into_iter().map(|g| g.scale(k)).collect()
}

type Fw = Box<dyn Fn(&[Tensor]) -> Result<Tensor>>;
type Bw = Box<dyn Fn(&[Tensor], &Tensor) -> Result<Vec<Tensor>>>;

/// One random instance of an op: inputs plus forward and backward closures.
fn instance(name: &str, rng: &mut Rng) -> Result<(Vec<Tensor>, Fw, Bw)> {
    let n = rng.random_range(2..7);
    let m = rng.random_range(2..6);
    let d = rng.random_range(2..6);
    let out: (Vec<Tensor>, Fw, Bw) = match name {
        "matmul" => (
            vec![rand_t(&[n, d], rng), rand_t(&[d, m], rng)],
            Box::new(|x| ops::matmul(&x[0], &x[1])),
            Box::new(|x, dy| {
                let (a, b) = ops::matmul_backward(&x[0], &x[1], dy);
                Ok(vec![a, b])
            }),
        ),
        "linear" => (
            vec![
                rand_t(&[2, n, d], rng),
                rand_t(&[d, m], rng),
                rand_t(&[m], rng),
            ],
            Box::new(|x| ops::linear(&x[0], &x[1], &x[2])),
            Box::new(|x, dy| {
                let (a, b, c) = ops::linear_backward(&x[0], &x[1], dy);
                Ok(vec![a, b, c])
            }),
        ),
        "concat" => (
            vec![rand_t(&[n, d], rng), rand_t(&[n, m], rng)],
            Box::new(|x| ops::concat(&x[0], &x[1], 1)),
            Box::new(|x, dy| {
                let (a, b) = ops::concat_backward(dy, x[0].shape(), 1);
                Ok(vec![a, b])
            }),
        ),
        "transpose" => (
            vec![rand_t(&[n, m, d], rng)],
            Box::new(|x| ops::transpose_first_two(&x[0])),
            Box::new(|_, dy| Ok(vec![ops::transpose_first_two(dy)?])),
        ),
        "elu_plus_one" => (
            vec![rand_t(&[n, d], rng)],
            Box::new(|x| Ok(ops::elu_plus_one(&x[0]))),
            Box::new(|x, dy| Ok(vec![ops::elu_plus_one_backward(&x[0], dy)])),
        ),
        "gelu" => (
            vec![rand_t(&[n, d], rng).scale(3.0)],
            Box::new(|x| Ok(ops::gelu(&x[0]))),
            Box::new(|x, dy| Ok(vec![ops::gelu_backward(&x[0], dy)])),
        ),
        "layer_norm" => (
            vec![
                rand_t(&[n, d + 1], rng),
                rand_t(&[d + 1], rng),
                rand_t(&[d + 1], rng),
            ],
            Box::new(|x| ops::layer_norm(&x[0], &x[1], &x[2]).map(|(y, _)| y)),
            Box::new(|x, dy| {
                let (_, cache) = ops::layer_norm(&x[0], &x[1], &x[2])?;
                let (a, b, c) = ops::layer_norm_backward(&cache, &x[1], dy);
                Ok(vec![a, b, c])
            }),
        ),
        "cosine_rows" => (
            vec![rand_t(&[n, d], rng), rand_t(&[m, d], rng)],
            Box::new(|x| ops::cosine_rows(&x[0], &x[1])),
            Box::new(|x, dy| {
                let (a, b) = ops::cosine_rows_backward(&x[0], &x[1], dy);
                Ok(vec![a, b])
            }),
        ),
        "max_pool_rows" => (
            vec![rand_t(&[n, m], rng)],
            Box::new(|x| ops::max_pool_rows(&x[0]).map(|(y, _)| y)),
            Box::new(|x, dy| {
                let (_, arg) = ops::max_pool_rows(&x[0])?;
                Ok(vec![ops::max_pool_rows_backward(&arg, x[0].cols(), dy)])
            }),
        ),
        "masked_mean_rows" => {
            let mut bits: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            bits[0] = true;
            let mask = BinaryMask::new(bits);
            let mask2 = mask.clone();
            (
                vec![rand_t(&[n, d], rng)],
                Box::new(move |x| ops::masked_mean_rows(&x[0], &mask)),
                Box::new(move |_, dy| Ok(vec![ops::masked_mean_rows_backward(&mask2, dy)])),
            )
        }
        "cross_entropy" => {
            let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..m)).collect();
            let t2 = targets.clone();
            (
                vec![rand_t(&[n, m], rng).scale(3.0)],
                Box::new(move |x| {
                    ops::cross_entropy(&x[0], &targets).map(|(l, _)| Tensor::scalar(l))
                }),
                Box::new(move |x, dy| {
                    let (_, probs) = ops::cross_entropy(&x[0], &t2)?;
                    Ok(vec![
                        ops::cross_entropy_backward(&probs, &t2).scale(dy.data()[0])
                    ])
                }),
            )
        }
        "linear_attention" => (
            vec![
                rand_t(&[n, d], rng),
                rand_t(&[n, d], rng),
                rand_t(&[n, m], rng),
            ],
            Box::new(|x| linear_attention(&x[0], &x[1], &x[2])),
            Box::new(|x, dy| {
                let (_, c) = linear_attention_forward(&x[0], &x[1], &x[2])?;
                let (a, b, v) = linear_attention_backward(&x[0], &x[1], &x[2], &c, dy);
                Ok(vec![a, b, v])
            }),
        ),
        "standard_attention" => (
            vec![
                rand_t(&[n, d], rng),
                rand_t(&[n, d], rng),
                rand_t(&[n, m], rng),
            ],
            Box::new(|x| standard_attention(&x[0], &x[1], &x[2])),
            Box::new(|x, dy| {
                let (_, c) = standard_attention_forward(&x[0], &x[1], &x[2])?;
                let (a, b, v) = standard_attention_backward(&x[0], &x[1], &x[2], &c, dy);
                Ok(vec![a, b, v])
            }),
        ),
        "multi_head_attention" => {
            let dim = 2 * d;
            let mut inputs = vec![rand_t(&[2, n, dim], rng)];
            inputs.extend((0..4).map(|_| rand_t(&[dim, dim], rng)));
            let build = |x: &[Tensor]| {
                AttentionParams::from_weights(
                    "a",
                    x[1].clone(),
                    x[2].clone(),
                    x[3].clone(),
                    x[4].clone(),
                    2,
                )
            };
            (
                inputs,
                Box::new(move |x| build(x)?.forward(&x[0]).map(|(y, _)| y)),
                Box::new(move |x, dy| {
                    let mut p = build(x)?;
                    let (_, cache) = p.forward(&x[0])?;
                    let dx = p.backward(&cache, dy);
                    let mut g = vec![dx];
                    g.extend(p.params().iter().map(|q| q.grad.clone()));
                    Ok(g)
                }),
            )
        }
        "mlp" => {
            let h = rng.random_range(2..6);
            let inputs = vec![
                rand_t(&[n, d], rng),
                rand_t(&[d, h], rng),
                rand_t(&[h], rng),
                rand_t(&[h, m], rng),
                rand_t(&[m], rng),
            ];
            let build = |x: &[Tensor]| -> Result<Mlp> {
                Ok(Mlp {
                    fc1: Linear::from_tensors("fc1", x[1].clone(), x[2].clone())?,
                    fc2: Linear::from_tensors("fc2", x[3].clone(), x[4].clone())?,
                })
            };
            (
                inputs,
                Box::new(move |x| build(x)?.forward(&x[0]).map(|(y, _)| y)),
                Box::new(move |x, dy| {
                    let mut p = build(x)?;
                    let (_, cache) = p.forward(&x[0])?;
                    let dx = p.backward(&cache, dy);
                    let mut g = vec![dx];
                    g.extend(p.params().iter().map(|q| q.grad.clone()));
                    Ok(g)
                }),
            )
        }
        "prototypes" => {
            let npts = n + 4;
            let coords: Vec<[f64; 3]> = (0..npts)
                .map(|_| {
                    [
                        rng.random::<f64>(),
                        rng.random::<f64>(),
                        rng.random::<f64>(),
                    ]
                })
                .collect();
            let mut bits: Vec<bool> = (0..npts).map(|_| rng.random_bool(0.6)).collect();
            bits[0] = true;
            let mask = BinaryMask::new(bits);
            let (c2, m2) = (coords.clone(), mask.clone());
            (
                vec![rand_t(&[npts, d], rng)],
                Box::new(move |x| {
                    extract_prototypes(&[&x[0]], &[&mask], &[&coords], 4, 3).map(|p| p.values)
                }),
                Box::new(move |x, dy| {
                    let p = extract_prototypes(&[&x[0]], &[&m2], &[&c2], 4, 3)?;
                    let mut g = vec![Tensor::zeros(x[0].shape())];
                    extract_prototypes_backward(&p, dy, &mut g);
                    Ok(g)
                }),
            )
        }
        "compute_cmc" => {
            let no = m;
            let inputs = vec![
                rand_t(&[n, d], rng),
                rand_t(&[no, d], rng),
                rand_t(&[no, d], rng),
                rand_t(&[no, d], rng),
                rand_t(&[d], rng),
                rand_t(&[d, d], rng),
                rand_t(&[d], rng),
            ];
            let build = |x: &[Tensor]| -> Result<(PrototypeSet, Mlp)> {
                let set = PrototypeSet::new(
                    x[1..3]
                        .iter()
                        .map(|v| ClassPrototypes {
                            values: v.clone(),
                            groups: Vec::new(),
                        })
                        .collect(),
                )?;
                let mlp = Mlp {
                    fc1: Linear::from_tensors("fc1", x[3].clone(), x[4].clone())?,
                    fc2: Linear::from_tensors("fc2", x[5].clone(), x[6].clone())?,
                };
                Ok((set, mlp))
            };
            (
                inputs,
                Box::new(move |x| {
                    let (set, mlp) = build(x)?;
                    compute_cmc(&x[0], &set, &mlp).map(|(c, _)| c.into_values())
                }),
                Box::new(move |x, dy| {
                    let (set, mut mlp) = build(x)?;
                    let (_, cache) = compute_cmc(&x[0], &set, &mlp)?;
                    let (dq, dp) = compute_cmc_backward(&x[0], &set, &mut mlp, &cache, dy);
                    let mut g = vec![dq];
                    g.extend(dp);
                    g.extend(mlp.params().iter().map(|q| q.grad.clone()));
                    Ok(g)
                }),
            )
        }
        "calibrate_background" => {
            let nc = rng.random_range(2..4);
            let inputs = vec![
                rand_t(&[n, nc, d], rng),
                rand_t(&[n], rng),
                rand_t(&[2 * d, d], rng),
                rand_t(&[d], rng),
            ];
            (
                inputs,
                Box::new(|x| {
                    let fc = Linear::from_tensors("fc", x[2].clone(), x[3].clone())?;
                    calibrate_background(&CorrelationTensor::new(x[0].clone())?, &x[1], &fc)
                        .map(|(c, _)| c.into_values())
                }),
                Box::new(|x, dy| {
                    let mut fc = Linear::from_tensors("fc", x[2].clone(), x[3].clone())?;
                    let (_, cache) =
                        calibrate_background(&CorrelationTensor::new(x[0].clone())?, &x[1], &fc)?;
                    let (dc, dg) = calibrate_background_backward(&mut fc, &cache, dy);
                    Ok(vec![dc, dg, fc.weight.grad.clone(), fc.bias.grad.clone()])
                }),
            )
        }
        "base_guidance" => {
            let bank_rows = rand_t(&[m, d], rng);
            let bank =
                BasePrototypeBank::from_parts((0..m as i32).collect(), bank_rows, vec![1; m], 0.9)?;
            let bank2 = bank.clone();
            (
                vec![rand_t(&[n, d], rng)],
                Box::new(move |x| base_guidance(&x[0], &bank, &BTreeSet::new()).map(|(g, _)| g)),
                Box::new(move |x, dy| {
                    let (_, cache) = base_guidance(&x[0], &bank2, &BTreeSet::new())?;
                    Ok(vec![base_guidance_backward(&x[0], &cache, dy)])
                }),
            )
        }
        "hca_layer" => {
            let nc = rng.random_range(2..4);
            let dim = 2 * d;
            let layer = HcaLayer::new("hca", dim, 2, dim, rng)?;
            let fc = Linear::new("fc", 2 * dim, dim, rng);
            let (l2, f2) = (layer.clone(), fc.clone());
            (
                vec![rand_t(&[n, nc, dim], rng), rand_t(&[n], rng)],
                Box::new(move |x| {
                    hca_layer(&CorrelationTensor::new(x[0].clone())?, &x[1], &layer, &fc)
                        .map(|c| c.into_values())
                }),
                Box::new(move |x, dy| {
                    let (mut l, mut f) = (l2.clone(), f2.clone());
                    let (_, cache) =
                        l.forward(&CorrelationTensor::new(x[0].clone())?, &x[1], &f)?;
                    let (dc, dg) = l.backward(&mut f, &cache, dy);
                    Ok(vec![dc, dg])
                }),
            )
        }
        other => return Err(invalid(format!("no gradient check for `{other}`"))),
    };
    Ok(out)
}

/// Names of the ops covered by [`gradient_suite`], in report order.
pub const SUITE_OPS: [&str; 20] = [
    "matmul",
    "linear",
    "concat",
    "transpose",
    "elu_plus_one",
    "gelu",
    "layer_norm",
    "cosine_rows",
    "max_pool_rows",
    "masked_mean_rows",
    "cross_entropy",
    "linear_attention",
    "standard_attention",
    "multi_head_attention",
    "mlp",
    "prototypes",
    "compute_cmc",
    "calibrate_background",
    "base_guidance",
    "hca_layer",
];

/// Name of the end-to-end entry in [`gradient_suite`] reports.
pub const END_TO_END: &str = "episode_loss";

/// Small 1-way episodes (at most 60 query points) with a warmed-up bank for
/// end-to-end checks.
pub fn check_episode(seed: u64) -> Result<(CosegParams, Episode, BasePrototypeBank)> {
    let classes: Vec<i32> = (0..6).collect();
    // rotating layouts put every class in six scenes whatever the seed
    let pool = (0..12)
        .map(|i| {
            let layout = SceneLayout::new((0..3).map(|j| ((i + j) % 6, 20)).collect());
            synth_scene(indexed(substream(seed, "pool"), i as u64), &layout)
        })
        .collect::<Result<Vec<_>>>()?;
    let split = make_split(&classes.iter().copied().collect(), 0)?;
    let config = ModelConfig {
        dim: 8,
        n_prototypes: 4,
        layers: 2,
        heads: 2,
        n_base: split.train_classes().len(),
        share_calibration: false,
    };
    let params = CosegParams::from_seed(config, substream(seed, "init"))?;
    let spec = EpisodeSpec {
        n_way: 1,
        k_shot: 1,
        min_fg_points: 10,
        m_cap: 64,
    };
    let episode = generate_episode(
        &pool,
        &split,
        Phase::Train,
        &spec,
        substream(seed, "episode"),
    )?;
    let mut bank = BasePrototypeBank::new(
        split.train_classes().iter().copied().collect(),
        config.dim,
        0.9,
    )?;
    for cloud in &pool {
        let f = backbone_stub(cloud, &params.backbone)?;
        bank.update_base_prototypes(&f, &base_masks(cloud.labels(), &bank), 0.9)?;
    }
    Ok((params, episode, bank))
}

/// Runs every op check and the end-to-end loss check for `trials` random
/// instances each. `grad_scale` as in [`loss_gradient_check`].
pub fn gradient_suite(trials: usize, seed: u64, grad_scale: f64) -> Result<Vec<OpCheck>> {
    if trials == 0 {
        return Err(invalid("gradient suite needs at least one trial"));
    }
    let mut report = Vec::with_capacity(SUITE_OPS.len() + 1);
    for (o, &name) in SUITE_OPS.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for t in 0..trials {
            let trial_seed = indexed(indexed(seed, o as u64), t as u64);
            let (inputs, fw, bw) = instance(name, &mut rng_from_seed(trial_seed))?;
            let err = check_op(
                &fw,
                |x, dy| bw(x, dy).map(|g| scaled(g, grad_scale)),
                &inputs,
                trial_seed,
            )?;
            worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
        }
        report.push(OpCheck {
            name,
            trials,
            max_error: worst,
        });
    }
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let trial_seed = indexed(substream(seed, END_TO_END), t as u64);
        let (params, episode, bank) = check_episode(trial_seed)?;
        let err = loss_gradient_check(&params, &episode, &bank, 40, trial_seed, grad_scale)?;
        worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
    }
    report.push(OpCheck {
        name: END_TO_END,
        trials,
        max_error: worst,
    });
    Ok(report)
}
