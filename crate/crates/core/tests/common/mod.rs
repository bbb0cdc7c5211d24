//! Gradient-check cases shared by the integration test targets.

#![allow(dead_code)]

use cellthresh::features::{Sample, N_FEATURES};
use cellthresh::itransformer::{ITransformer, ITransformerConfig};
use cellthresh::labels::ThresholdLabels;
use cellthresh::nn::gradcheck::{check_inputs, check_params, GradCheckReport, DEFAULT_EPS, DEFAULT_TOL};
use cellthresh::nn::layers::attention;
use cellthresh::nn::{Graph, Tensor, Var};
use cellthresh::pctn::{PctnConfig, PctnModel, TargetScale};
use cellthresh::Result;
use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub f: OpFn,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Reduce any output to a scalar with fixed, non-uniform weights so every
/// output coordinate contributes its own slice of the Jacobian.
pub fn project(g: &mut Graph, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| (1.3 * i as f64 + 0.7).sin() + 0.2).collect())?;
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn case(name: &'static str, inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase {
        name,
        inputs,
        f: Box::new(f),
    }
}

/// Targets at a fixed offset from the predictions, away from any kink.
fn offset_targets(pred: &Tensor, rng: &mut ChaCha8Rng) -> Vec<f64> {
    pred.data()
        .iter()
        .map(|p| {
            let off = rng.random_range(0.2..1.5);
            if rng.random_bool(0.5) {
                p + off
            } else {
                p - off
            }
        })
        .collect()
}

pub fn op_cases() -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let r = &mut rng;
    let mut cases = vec![
        case("add", vec![rand_tensor(r, &[3, 4], -2.0, 2.0), rand_tensor(r, &[3, 4], -2.0, 2.0)], |g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y)
        }),
        case("sub", vec![rand_tensor(r, &[3, 4], -2.0, 2.0), rand_tensor(r, &[3, 4], -2.0, 2.0)], |g, v| {
            let y = g.sub(v[0], v[1])?;
            project(g, y)
        }),
        case("mul", vec![rand_tensor(r, &[3, 4], -2.0, 2.0), rand_tensor(r, &[3, 4], -2.0, 2.0)], |g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y)
        }),
        case("add_tiled", vec![rand_tensor(r, &[2, 3, 4], -2.0, 2.0), rand_tensor(r, &[4], -2.0, 2.0)], |g, v| {
            let y = g.add_tiled(v[0], v[1])?;
            project(g, y)
        }),
        case("mul_tiled", vec![rand_tensor(r, &[2, 3, 4], -2.0, 2.0), rand_tensor(r, &[3, 4], -2.0, 2.0)], |g, v| {
            let y = g.mul_tiled(v[0], v[1])?;
            project(g, y)
        }),
        case("scale", vec![rand_tensor(r, &[5], -2.0, 2.0)], |g, v| {
            let y = g.scale(v[0], -1.7);
            project(g, y)
        }),
        case("add_scalar", vec![rand_tensor(r, &[5], -2.0, 2.0)], |g, v| {
            let y = g.add_scalar(v[0], 0.3);
            project(g, y)
        }),
        case("gelu", vec![rand_tensor(r, &[12], -3.0, 3.0)], |g, v| {
            let y = g.gelu(v[0]);
            project(g, y)
        }),
        case("softplus", vec![rand_tensor(r, &[12], -4.0, 4.0)], |g, v| {
            let y = g.softplus(v[0]);
            project(g, y)
        }),
        case("sigmoid", vec![rand_tensor(r, &[12], -4.0, 4.0)], |g, v| {
            let y = g.sigmoid(v[0]);
            project(g, y)
        }),
        case("softmax", vec![rand_tensor(r, &[3, 5], -2.0, 2.0)], |g, v| {
            let y = g.softmax(v[0])?;
            project(g, y)
        }),
        case("layer_norm", vec![rand_tensor(r, &[3, 6], -2.0, 2.0)], |g, v| {
            let y = g.layer_norm(v[0])?;
            project(g, y)
        }),
        case("matmul", vec![rand_tensor(r, &[2, 3, 4], -1.0, 1.0), rand_tensor(r, &[4, 5], -1.0, 1.0)], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y)
        }),
        case(
            "batch_matmul",
            vec![rand_tensor(r, &[2, 2, 3, 4], -1.0, 1.0), rand_tensor(r, &[2, 2, 4, 5], -1.0, 1.0)],
            |g, v| {
                let y = g.batch_matmul(v[0], v[1], false)?;
                project(g, y)
            },
        ),
        case(
            "batch_matmul_transposed",
            vec![rand_tensor(r, &[2, 3, 4], -1.0, 1.0), rand_tensor(r, &[2, 5, 4], -1.0, 1.0)],
            |g, v| {
                let y = g.batch_matmul(v[0], v[1], true)?;
                project(g, y)
            },
        ),
        case(
            "feature_embed",
            vec![
                rand_tensor(r, &[3, 5], -2.0, 2.0),
                rand_tensor(r, &[5, 4], -1.0, 1.0),
                rand_tensor(r, &[5, 4], -1.0, 1.0),
            ],
            |g, v| {
                let y = g.feature_embed(v[0], v[1], v[2])?;
                project(g, y)
            },
        ),
        case("reshape", vec![rand_tensor(r, &[2, 6], -2.0, 2.0)], |g, v| {
            let y = g.reshape(v[0], &[3, 4])?;
            project(g, y)
        }),
        case("permute", vec![rand_tensor(r, &[2, 3, 4], -2.0, 2.0)], |g, v| {
            let y = g.permute(v[0], &[2, 0, 1])?;
            project(g, y)
        }),
        case("gather_rows", vec![rand_tensor(r, &[4, 3], -2.0, 2.0)], |g, v| {
            let y = g.gather_rows(v[0], &[3, 0, 3, 1])?;
            project(g, y)
        }),
        case("concat", vec![rand_tensor(r, &[3, 2], -2.0, 2.0), rand_tensor(r, &[3, 4], -2.0, 2.0)], |g, v| {
            let y = g.concat(&[v[0], v[1]])?;
            project(g, y)
        }),
        case("slice_cols", vec![rand_tensor(r, &[3, 6], -2.0, 2.0)], |g, v| {
            let y = g.slice_cols(v[0], 1, 4)?;
            project(g, y)
        }),
        case("sum", vec![rand_tensor(r, &[3, 4], -2.0, 2.0)], |g, v| {
            let y = g.sum(v[0]);
            Ok(g.scale(y, 0.7))
        }),
        case("mean", vec![rand_tensor(r, &[3, 4], -2.0, 2.0)], |g, v| {
            let y = g.mean(v[0]);
            Ok(g.scale(y, 0.7))
        }),
        case("mean_tokens", vec![rand_tensor(r, &[2, 5, 3], -2.0, 2.0)], |g, v| {
            let y = g.mean_tokens(v[0])?;
            project(g, y)
        }),
        case(
            "attention",
            vec![
                rand_tensor(r, &[2, 3, 4], -1.0, 1.0),
                rand_tensor(r, &[2, 5, 4], -1.0, 1.0),
                rand_tensor(r, &[2, 5, 4], -1.0, 1.0),
            ],
            |g, v| {
                let (y, _) = attention(g, v[0], v[1], v[2], 2)?;
                project(g, y)
            },
        ),
    ];

    let pred = rand_tensor(r, &[8], -2.0, 2.0);
    let target = offset_targets(&pred, r);
    for (name, tau) in [("pinball_0.75", 0.75), ("pinball_0.90", 0.90)] {
        let t = target.clone();
        cases.push(case(name, vec![pred.clone()], move |g, v| g.pinball(v[0], &t, tau)));
    }
    let t = target.clone();
    cases.push(case("pseudo_huber", vec![pred.clone()], move |g, v| g.pseudo_huber(v[0], &t, 0.8)));
    // Residuals sit between 0.2 and 1.5; keep clear of the delta kink.
    let t = target.clone();
    cases.push(case("huber", vec![pred.clone()], move |g, v| g.huber(v[0], &t, 2.0)));
    let t: Vec<f64> = (0..8).map(|i| f64::from(u8::from(i % 3 == 0))).collect();
    cases.push(case("bce", vec![rand_tensor(r, &[8], 0.1, 0.9)], move |g, v| g.bce(v[0], &t)));
    cases.push(case("cross_entropy", vec![rand_tensor(r, &[4, 7], -2.0, 2.0)], |g, v| {
        g.cross_entropy(v[0], &[0, 6, 3, 3])
    }));
    cases
}

pub fn check_op(c: &OpCase) -> GradCheckReport {
    check_inputs(&c.inputs, DEFAULT_EPS, DEFAULT_TOL, |g, v| (c.f)(g, v)).unwrap()
}

pub fn random_samples(n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let t3 = if rng.random_bool(0.3) { rng.random_range(1.5..4.0) } else { 1.0 };
            Sample {
                cell_id: format!("C{}", i / 3),
                date: NaiveDate::from_ymd_opt(2024, 1, 1 + (i % 2) as u32).unwrap(),
                start_hour: rng.random_range(1..=24),
                x: (0..N_FEATURES).map(|_| rng.random_range(-2.0..2.0)).collect(),
                labels: Some(ThresholdLabels {
                    t1: rng.random_range(2..=8),
                    t2: rng.random_range(5.0..40.0),
                    t3,
                    t4: t3.min(2.0),
                }),
            }
        })
        .collect()
}

pub fn tiny_pctn(use_gate: bool) -> PctnModel {
    let cfg = PctnConfig {
        ctx_hidden: 8,
        ctx_out: 8,
        token_dim: 4,
        encoder_layers: 1,
        n_heads: 2,
        ff_dim: 8,
        fusion_dim: 8,
        alpha_hidden: 4,
        use_gate,
        ..Default::default()
    };
    let scale = TargetScale {
        loc: [4.0, 12.0, 0.5, 0.3],
        scale: [1.5, 6.0, 0.8, 0.6],
    };
    PctnModel::new(cfg, scale).unwrap()
}

pub fn tiny_itransformer() -> ITransformer {
    let cfg = ITransformerConfig {
        d_model: 8,
        layers: 1,
        n_heads: 2,
        ff_dim: 8,
        ..Default::default()
    };
    ITransformer::new(cfg, [4.0, 12.0, 1.2, 1.1], [1.5, 6.0, 0.5, 0.3]).unwrap()
}

/// Every parameter coordinate of the small models.
pub fn model_checks() -> Vec<(&'static str, GradCheckReport)> {
    use cellthresh::train::Trainable;
    let samples = random_samples(4, 7);
    let refs: Vec<&Sample> = samples.iter().collect();
    let mut out = Vec::new();
    for (name, gate) in [("pctn_gated", true), ("pctn_no_gate", false)] {
        let m = tiny_pctn(gate);
        let rep = check_params(&m.store, DEFAULT_EPS, DEFAULT_TOL, None, |g, s| m.batch_loss(g, s, &refs)).unwrap();
        out.push((name, rep));
    }
    let m = tiny_itransformer();
    let rep = check_params(&m.store, DEFAULT_EPS, DEFAULT_TOL, None, |g, s| m.batch_loss(g, s, &refs)).unwrap();
    out.push(("itransformer", rep));
    out
}
