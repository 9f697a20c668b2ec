//! Finite-difference verification of every graph op and of the full training objective.

use std::cell::RefCell;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diffcore::{grad_check, DiffError, GradCheckReport, Graph, Tensor, Var};
use crate::fields::{ConvrtModel, ModelOptions};
use crate::losses::{frame_loss_graph, gaussian_kernel, mse_graph, ssim_graph, temporal_graph, FrameTarget, LossWeights};
use crate::oracle::{LossOracle, OracleSlot, PromptPair};

/// Pass threshold on the maximum relative error in 64-bit mode.
pub const GRADCHECK_TOL: f64 = 1e-4;
/// Step of the central stencil.
pub const GRADCHECK_STEP: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub passed: bool,
    pub error: Option<String>,
    pub seconds: f64,
}

impl CheckOutcome {
    fn from_result(name: &str, r: Result<GradCheckReport, String>, seconds: f64) -> Self {
        match r {
            Ok(rep) => Self {
                name: name.into(),
                max_rel_err: rep.max_rel_err,
                checked: rep.checked,
                passed: rep.passed(GRADCHECK_TOL),
                error: None,
                seconds,
            },
            Err(e) => Self {
                name: name.into(),
                max_rel_err: f64::INFINITY,
                checked: 0,
                passed: false,
                error: Some(e),
                seconds,
            },
        }
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

/// Values bounded away from zero, either sign.
fn signed_away(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.random_range(0.2..1.2);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_f64(shape, &v).unwrap()
}

/// `Σ y ⊙ R` for a fixed pseudo-random `R`, so upstream gradients are not uniform.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var, DiffError> {
    let shape = g.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = g.input(rand_tensor(&mut rng, &shape, -1.0, 1.0));
    let p = g.hadamard(y, r)?;
    Ok(g.reduce_sum(p))
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, DiffError>>;

fn op_cases() -> Vec<(&'static str, Vec<Tensor<f64>>, Build)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let mut cases: Vec<(&'static str, Vec<Tensor<f64>>, Build)> = Vec::new();
    let r = &mut rng;
    cases.push((
        "linear",
        vec![rand_tensor(r, &[4, 3], -1.0, 1.0), rand_tensor(r, &[3, 2], -1.0, 1.0), rand_tensor(r, &[2], -1.0, 1.0)],
        Box::new(|g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            project(g, y, 1)
        }),
    ));
    cases.push((
        "leaky_relu",
        vec![signed_away(r, &[3, 4])],
        Box::new(|g, v| {
            let y = g.leaky_relu(v[0], 0.01);
            project(g, y, 2)
        }),
    ));
    cases.push((
        "layer_norm",
        vec![rand_tensor(r, &[3, 4], -1.0, 1.0), rand_tensor(r, &[4], 0.5, 1.5), rand_tensor(r, &[4], -0.5, 0.5)],
        Box::new(|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(g, y, 3)
        }),
    ));
    cases.push((
        "hadamard",
        vec![rand_tensor(r, &[3, 4], -1.0, 1.0), rand_tensor(r, &[3, 4], -1.0, 1.0)],
        Box::new(|g, v| {
            let y = g.hadamard(v[0], v[1])?;
            project(g, y, 4)
        }),
    ));
    cases.push((
        "hadamard_broadcast",
        vec![rand_tensor(r, &[3, 4], -1.0, 1.0), rand_tensor(r, &[1, 4], -1.0, 1.0)],
        Box::new(|g, v| {
            let y = g.hadamard(v[0], v[1])?;
            project(g, y, 5)
        }),
    ));
    cases.push((
        "add_sub",
        vec![rand_tensor(r, &[2, 3], -1.0, 1.0), rand_tensor(r, &[2, 3], -1.0, 1.0), rand_tensor(r, &[1, 3], -1.0, 1.0)],
        Box::new(|g, v| {
            let a = g.add(v[0], v[2])?;
            let s = g.sub(a, v[1])?;
            project(g, s, 6)
        }),
    ));
    cases.push((
        "div",
        vec![rand_tensor(r, &[2, 3], -1.0, 1.0), signed_away(r, &[2, 3])],
        Box::new(|g, v| {
            let y = g.div(v[0], v[1])?;
            project(g, y, 7)
        }),
    ));
    cases.push((
        "elementwise",
        vec![signed_away(r, &[2, 5])],
        Box::new(|g, v| {
            let a = g.abs(v[0]);
            let t = g.tanh(v[0]);
            let s = g.sigmoid(v[0]);
            let q = g.square(v[0]);
            let f = g.affine(v[0], 1.7, -0.3);
            let mut acc = g.add(a, t)?;
            acc = g.add(acc, s)?;
            acc = g.add(acc, q)?;
            acc = g.hadamard(acc, f)?;
            project(g, acc, 8)
        }),
    ));
    cases.push((
        "reductions",
        vec![rand_tensor(r, &[3, 3], -1.0, 1.0)],
        Box::new(|g, v| {
            let sq = g.square(v[0]);
            let s = g.reduce_sum(sq);
            let m = g.reduce_mean(v[0]);
            g.weighted_sum(&[(s, 0.7), (m, -1.3)])
        }),
    ));
    cases.push((
        "concat_slice_reshape",
        vec![rand_tensor(r, &[3, 2], -1.0, 1.0), rand_tensor(r, &[3, 3], -1.0, 1.0)],
        Box::new(|g, v| {
            let c = g.concat(v[0], v[1])?;
            let s = g.slice_last(c, 1, 3)?;
            let sq = g.square(s);
            let re = g.reshape(sq, &[9])?;
            project(g, re, 9)
        }),
    ));
    // coordinates kept off integer lattice lines, where bilinear interpolation has kinks
    let coords: Vec<f64> = (0..10)
        .flat_map(|_| {
            let x = r.random_range(0..4) as f64 + r.random_range(0.1..0.9);
            let y = r.random_range(0..3) as f64 + r.random_range(0.1..0.9);
            [x, y]
        })
        .collect();
    cases.push((
        "bilinear_sample",
        vec![rand_tensor(r, &[2, 4, 5], -1.0, 1.0), Tensor::from_f64(&[10, 2], &coords).unwrap()],
        Box::new(|g, v| {
            let y = g.bilinear_sample(v[0], v[1])?;
            project(g, y, 10)
        }),
    ));
    cases.push((
        "filter_valid",
        vec![rand_tensor(r, &[6, 7, 2], 0.0, 1.0)],
        Box::new(|g, v| {
            let k = gaussian_kernel(3, 0.8);
            let y = g.filter_valid(v[0], &k)?;
            project(g, y, 11)
        }),
    ));
    cases.push((
        "external",
        vec![rand_tensor(r, &[2, 3], -1.0, 1.0)],
        Box::new(|g, v| {
            // value Σt³ with gradient 3t², computed outside the graph
            let t = g.tanh(v[0]);
            let x = g.value(t).data().to_vec();
            let val: f64 = x.iter().map(|a| a * a * a).sum();
            let grad: Vec<f64> = x.iter().map(|a| 3.0 * a * a).collect();
            let e = g.external(t, val, grad)?;
            let m = g.reduce_mean(t);
            g.weighted_sum(&[(e, 1.0), (m, 0.5)])
        }),
    ));
    let sup = rand_tensor(r, &[12 * 12, 3], 0.0, 1.0);
    cases.push((
        "mse_ssim",
        vec![rand_tensor(r, &[12 * 12, 3], 0.05, 0.95)],
        Box::new(move |g, v| {
            let s = g.input(sup.clone());
            let m = mse_graph(g, v[0], s).map_err(|e| DiffError::InvalidArgument(e.to_string()))?;
            let q = ssim_graph(g, v[0], s, [12, 12, 3]).map_err(|e| DiffError::InvalidArgument(e.to_string()))?;
            g.weighted_sum(&[(m, 1.0), (q, 0.5)])
        }),
    ));
    let far: Vec<f64> = (0..6).map(|_| r.random_range(0.0..1.0)).collect();
    cases.push((
        "temporal",
        vec![signed_away(r, &[6, 2])],
        Box::new(move |g, v| temporal_graph(g, v[0], &far).map_err(|e| DiffError::InvalidArgument(e.to_string()))),
    ));
    cases
}

/// Runs every single-op case.
pub fn op_checks() -> Vec<CheckOutcome> {
    op_cases()
        .into_iter()
        .map(|(name, inputs, build)| {
            let t0 = Instant::now();
            let r = grad_check(&inputs, GRADCHECK_STEP, build).map_err(|e| e.to_string());
            CheckOutcome::from_result(name, r, t0.elapsed().as_secs_f64())
        })
        .collect()
}

/// Small 64-bit model with a randomised warp head so warps are non-zero and off the pixel lattice.
pub fn pipeline_model(height: usize, width: usize, frames: usize, q: usize, k: usize, seed: u64) -> ConvrtModel<f64> {
    let opts = ModelOptions {
        deform_channels: q,
        content_channels: q,
        hidden_channels: k,
        deform_width: 8,
        content_width: 8,
        max_disp: 1.5,
        ..Default::default()
    };
    let cfg = opts.resolve(frames, height, width, 3, seed);
    let mut m = ConvrtModel::<f64>::init(&cfg).expect("valid test config");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let head = m.dfield.mlp.layers.last_mut().unwrap();
    let out = 2 + k;
    for row in head.weight.data_mut().chunks_exact_mut(out) {
        row[0] = rng.random_range(-0.6..0.6);
        row[1] = rng.random_range(-0.6..0.6);
    }
    head.bias.data_mut()[0] = 0.13;
    head.bias.data_mut()[1] = -0.21;
    for v in m.dfield.u_vec.data_mut() {
        *v = rng.random_range(0.5..1.5);
    }
    m
}

/// Checks the summed per-frame objective over every frame against finite differences
/// of all model parameters.
pub fn pipeline_check(model: &ConvrtModel<f64>, weights: &LossWeights, oracle: Option<Box<dyn LossOracle>>, seed: u64) -> Result<GradCheckReport, String> {
    let c = &model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = c.pixels();
    let sups: Vec<Vec<f64>> = (0..c.frames)
        .map(|_| (0..n * c.channels).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect();
    let fars: Vec<Vec<f64>> = (0..c.frames).map(|_| (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
    let slot = RefCell::new(match oracle {
        Some(o) => OracleSlot::new(o, PromptPair::default()),
        None => OracleSlot::none(),
    });
    let inputs: Vec<Tensor<f64>> = model.tensors().into_iter().cloned().collect();
    let report = grad_check(&inputs, GRADCHECK_STEP, |g, vars| {
        let bound = model.bind_vars(g, vars);
        let mut terms = Vec::with_capacity(c.frames);
        for t in 0..c.frames {
            let target = FrameTarget {
                frame: t,
                supervision: &sups[t],
                far_weight: &fars[t],
            };
            let (v, _, _) = frame_loss_graph(g, model, &bound, &target, weights, &mut slot.borrow_mut())
                .map_err(|e| DiffError::InvalidArgument(e.to_string()))?;
            terms.push((v, 1.0 / c.frames as f64));
        }
        g.weighted_sum(&terms)
    })
    .map_err(|e| e.to_string())?;
    if let Some(reason) = slot.borrow().disabled_reason() {
        return Err(format!("oracle disabled during check: {reason}"));
    }
    Ok(report)
}

/// Weights used by the 8×8 objective check; the SSIM window does not fit an 8×8 frame.
pub fn small_frame_weights() -> LossWeights {
    LossWeights {
        lambda_ssim: 0.0,
        ..LossWeights::default()
    }
}

/// Every op case plus the full render + objective at 8×8×2 (`Q = K = 4`) and a 12×12×2 run with SSIM.
pub fn run_suite() -> Vec<CheckOutcome> {
    let mut out = op_checks();
    let t0 = Instant::now();
    let m = pipeline_model(8, 8, 2, 4, 4, 11);
    let r = pipeline_check(&m, &small_frame_weights(), None, 12);
    out.push(CheckOutcome::from_result("objective_8x8x2", r, t0.elapsed().as_secs_f64()));
    let t0 = Instant::now();
    let m = pipeline_model(12, 12, 2, 4, 4, 13);
    let r = pipeline_check(&m, &LossWeights::default(), None, 14);
    out.push(CheckOutcome::from_result("objective_12x12x2_ssim", r, t0.elapsed().as_secs_f64()));
    out
}
