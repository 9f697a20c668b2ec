//! Test-time fitting of the model to one video.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Tensor, Var};
use crate::fields::{save_checkpoint, ConvrtModel, FieldError, ModelConfig};
use crate::io::{read_fvid, write_raw_fvid, IoError, VideoVolume};
use crate::losses::{frame_loss_graph, DisparityMap, FrameTarget, LossBreakdown, LossError, LossWeights};
use crate::oracle::OracleSlot;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite {term} at iteration {iter}")]
    NonFinite { iter: usize, term: String },
    #[error("adam: {0}")]
    Shape(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("enhancement hook failed: {0}")]
    Enhance(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub frames_per_step: usize,
    /// Offsets the round-robin frame schedule.
    pub seed: u64,
    pub log_every: usize,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 6000,
            learning_rate: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            frames_per_step: 4,
            seed: 0,
            log_every: 10,
            checkpoint_every: 0,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::InvalidConfig(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(TrainError::InvalidConfig("betas must be in [0, 1) and eps > 0".into()));
        }
        if self.frames_per_step == 0 {
            return Err(TrainError::InvalidConfig("frames_per_step must be ≥ 1".into()));
        }
        self.weights.validate()?;
        Ok(())
    }
}

/// First and second moment buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn for_params(sizes: &[usize]) -> Self {
        Self {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [&mut Tensor<f32>], grads: &[Vec<f32>], state: &mut AdamState, cfg: &TrainConfig) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(TrainError::Shape(format!(
            "{} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.numel() != g.len() || state.m[i].len() != g.len() || state.v[i].len() != g.len() {
            return Err(TrainError::Shape(format!(
                "parameter {i} has {} values, gradient {}, moments {}",
                p.numel(),
                g.len(),
                state.m[i].len()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = cfg.learning_rate;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j] as f64;
            let mj = b1 * m[j] as f64 + (1.0 - b1) * gj;
            let vj = b2 * v[j] as f64 + (1.0 - b2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let update = lr * (mj / c1) / ((vj / c2).sqrt() + cfg.eps);
            *w = (*w as f64 - update) as f32;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRecord {
    pub iter: usize,
    pub loss: LossBreakdown,
    pub ms_elapsed: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    /// Set when the oracle was detached during the run.
    pub oracle_disabled: Option<String>,
}

impl TrainLog {
    pub fn totals(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss.total).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["iter", "total", "mse", "ssim", "lpips", "temp", "text", "ms_elapsed"])
            .expect("in-memory write");
        for r in &self.records {
            let l = &r.loss;
            let row = [r.iter as f64, l.total, l.mse, l.ssim, l.lpips, l.temp, l.text, r.ms_elapsed];
            let mut fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            fields[0] = r.iter.to_string();
            w.write_record(&fields).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), IoError> {
        std::fs::write(path, self.to_csv()).map_err(|e| IoError::io(path, e))
    }
}

/// Frame indices visited at step `iter`.
pub fn frames_for_step(iter: usize, frames: usize, per_step: usize, offset: u64) -> Vec<usize> {
    let k = per_step.min(frames);
    let base = iter * k + (offset % frames as u64) as usize;
    (0..k).map(|j| (base + j) % frames).collect()
}

fn first_nonfinite(b: &LossBreakdown) -> Option<&'static str> {
    let terms = b.terms();
    terms.iter().skip(1).chain(terms.iter().take(1)).find(|(_, v)| !v.is_finite()).map(|(n, _)| *n)
}

/// Evaluates one optimisation step's averaged objective; returns gradients in declared order.
pub fn step_gradients(
    model: &ConvrtModel<f32>,
    supervision: &VideoVolume,
    disparity: &DisparityMap,
    frames: &[usize],
    weights: &LossWeights,
    oracles: &mut OracleSlot,
) -> Result<(LossBreakdown, Vec<Vec<f32>>), TrainError> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let mut totals: Vec<(Var, f32)> = Vec::with_capacity(frames.len());
    let mut parts = Vec::with_capacity(frames.len());
    let share = 1.0 / frames.len() as f32;
    for &t in frames {
        let far = disparity.far_weight(t);
        let target = FrameTarget {
            frame: t,
            supervision: supervision.frame(t),
            far_weight: &far,
        };
        let (v, b, _) = frame_loss_graph(&mut g, model, &bound, &target, weights, oracles)?;
        totals.push((v, share));
        parts.push(b);
    }
    let loss = g.weighted_sum(&totals).map_err(LossError::from)?;
    g.backward(loss).map_err(LossError::from)?;
    let grads = bound
        .params
        .iter()
        .zip(model.tensors())
        .map(|(&v, t)| g.take_grad(v).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    Ok((LossBreakdown::mean(&parts), grads))
}

fn check_inputs(model: &ConvrtModel<f32>, supervision: &VideoVolume, disparity: &DisparityMap) -> Result<(), TrainError> {
    let c = &model.config;
    if supervision.dims() != [c.frames, c.height, c.width, c.channels] {
        return Err(TrainError::InvalidConfig(format!(
            "supervision is {:?}, model expects {:?}",
            supervision.dims(),
            [c.frames, c.height, c.width, c.channels]
        )));
    }
    if (disparity.frames, disparity.height, disparity.width) != (c.frames, c.height, c.width) {
        return Err(TrainError::InvalidConfig(format!(
            "disparity is {}×{}×{}, video is {}×{}×{}",
            disparity.frames, disparity.height, disparity.width, c.frames, c.height, c.width
        )));
    }
    Ok(())
}

/// Optimises `model` in place against `supervision`.
pub fn fit(
    model: &mut ConvrtModel<f32>,
    supervision: &VideoVolume,
    disparity: &DisparityMap,
    cfg: &TrainConfig,
    oracles: &mut OracleSlot,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainLog, TrainError> {
    cfg.validate()?;
    check_inputs(model, supervision, disparity)?;
    let sizes: Vec<usize> = model.tensors().iter().map(|t| t.numel()).collect();
    let mut adam = AdamState::for_params(&sizes);
    let mut log = TrainLog::default();
    let start = Instant::now();
    let every = cfg.log_every.max(1);
    let frames = model.config.frames;
    for iter in 0..cfg.iterations {
        let batch = frames_for_step(iter, frames, cfg.frames_per_step, cfg.seed);
        let (b, grads) = step_gradients(model, supervision, disparity, &batch, &cfg.weights, oracles)?;
        if let Some(term) = first_nonfinite(&b) {
            return Err(TrainError::NonFinite {
                iter,
                term: format!("{term} loss"),
            });
        }
        if let Some((i, _)) = grads.iter().enumerate().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(TrainError::NonFinite {
                iter,
                term: format!("gradient of {}", model.tensor_names()[i]),
            });
        }
        adam_step(&mut model.tensors_mut(), &grads, &mut adam, cfg)?;
        let last = iter + 1 == cfg.iterations;
        if iter % every == 0 || last {
            if !model.is_finite() {
                return Err(TrainError::NonFinite {
                    iter,
                    term: "parameters".into(),
                });
            }
            log.records.push(LogRecord {
                iter,
                loss: b,
                ms_elapsed: start.elapsed().as_secs_f64() * 1e3,
            });
            log::debug!("iter {iter}: total {:.6} mse {:.6} temp {:.6}", b.total, b.mse, b.temp);
        }
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 {
                save_checkpoint(model, &dir.join(format!("checkpoint_{:06}.cvrt", iter + 1)))?;
            }
        }
    }
    log.oracle_disabled = oracles.disabled_reason().map(str::to_string);
    Ok(log)
}

/// Initialises a model for `observed` and fits it to `supervision`.
pub fn train(
    observed: &VideoVolume,
    supervision: &VideoVolume,
    disparity: &DisparityMap,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    oracles: &mut OracleSlot,
) -> Result<(ConvrtModel<f32>, TrainLog), TrainError> {
    let [t, h, w, c] = observed.dims();
    if (model_cfg.frames, model_cfg.height, model_cfg.width, model_cfg.channels) != (t, h, w, c) {
        return Err(TrainError::InvalidConfig(format!(
            "model configured for {}×{}×{}×{}, video is {t}×{h}×{w}×{c}",
            model_cfg.frames, model_cfg.height, model_cfg.width, model_cfg.channels
        )));
    }
    if !observed.same_dims(supervision) {
        return Err(TrainError::InvalidConfig(format!(
            "supervision is {:?}, observed is {:?}",
            supervision.dims(),
            observed.dims()
        )));
    }
    let mut model = ConvrtModel::init(model_cfg)?;
    let log = fit(&mut model, supervision, disparity, cfg, oracles, None)?;
    Ok((model, log))
}

/// Post-render enhancement.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Enhancer {
    #[default]
    Identity,
    /// Runs `command <input.fvid> <output.fvid>`; the output must keep the dims.
    /// Gradients do not flow through the hook.
    Command(String),
}

impl Enhancer {
    pub fn apply(&self, video: VideoVolume, work_dir: &Path) -> Result<VideoVolume, TrainError> {
        let Enhancer::Command(cmd) = self else {
            return Ok(video);
        };
        let argv = shlex::split(cmd)
            .filter(|a| !a.is_empty())
            .ok_or_else(|| TrainError::Enhance(format!("cannot parse command `{cmd}`")))?;
        let input: PathBuf = work_dir.join("enhance_in.fvid");
        let output: PathBuf = work_dir.join("enhance_out.fvid");
        write_raw_fvid(video.dims(), video.data(), &input)?;
        let status = Command::new(&argv[0])
            .args(&argv[1..])
            .arg(&input)
            .arg(&output)
            .status()
            .map_err(|e| TrainError::Enhance(format!("{cmd}: {e}")))?;
        if !status.success() {
            return Err(TrainError::Enhance(format!("{cmd} exited with {status}")));
        }
        let mut out = read_fvid(&output)?;
        if !out.same_dims(&video) {
            return Err(TrainError::Enhance(format!("output is {:?}, input was {:?}", out.dims(), video.dims())));
        }
        out.clamp_unit();
        Ok(out)
    }
}

/// Trains, renders every frame and applies the enhancement hook.
pub fn restore(
    observed: &VideoVolume,
    supervision: &VideoVolume,
    disparity: &DisparityMap,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    oracles: &mut OracleSlot,
) -> Result<(VideoVolume, ConvrtModel<f32>, TrainLog), TrainError> {
    let (model, log) = train(observed, supervision, disparity, model_cfg, cfg, oracles)?;
    let video = model.render_video()?;
    Ok((video, model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::ModelOptions;

    fn cfg() -> TrainConfig {
        TrainConfig {
            learning_rate: 0.01,
            ..Default::default()
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::full(&[3], 0.5f32);
        let mut st = AdamState::for_params(&[3]);
        adam_step(&mut [&mut p], &[vec![1.0; 3]], &mut st, &cfg()).unwrap();
        for &v in p.data() {
            assert!(((0.5 - v) as f64 - 0.01).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn zero_gradient_is_noop() {
        let mut p = Tensor::new(vec![2], vec![0.25f32, -3.0]).unwrap();
        let before = p.clone();
        let mut st = AdamState::for_params(&[2]);
        for _ in 0..3 {
            adam_step(&mut [&mut p], &[vec![0.0; 2]], &mut st, &cfg()).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::full(&[3], 0.5f32);
        let mut st = AdamState::for_params(&[3]);
        assert!(matches!(adam_step(&mut [&mut p], &[vec![1.0; 2]], &mut st, &cfg()), Err(TrainError::Shape(_))));
    }

    #[test]
    fn round_robin_schedule() {
        assert_eq!(frames_for_step(0, 6, 4, 0), vec![0, 1, 2, 3]);
        assert_eq!(frames_for_step(1, 6, 4, 0), vec![4, 5, 0, 1]);
        assert_eq!(frames_for_step(0, 2, 4, 0), vec![0, 1]);
        assert_eq!(frames_for_step(0, 6, 2, 7), vec![1, 2]);
    }

    fn tiny() -> (VideoVolume, DisparityMap, ModelConfig) {
        let v = crate::turbsim::static_scene(2, 12, 12, 3);
        let d = DisparityMap::uniform(2, 12, 12, 0.5);
        let opts = ModelOptions {
            deform_channels: 4,
            content_channels: 4,
            hidden_channels: 4,
            deform_width: 8,
            content_width: 8,
            ..Default::default()
        };
        (v.clone(), d, opts.resolve_for(&v, 1))
    }

    #[test]
    fn zero_iterations_returns_initial_model() {
        let (v, d, mc) = tiny();
        let c = TrainConfig {
            iterations: 0,
            ..Default::default()
        };
        let (m, log) = train(&v, &v, &d, &mc, &c, &mut OracleSlot::none()).unwrap();
        assert_eq!(m, ConvrtModel::init(&mc).unwrap());
        assert!(log.records.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_logs_csv() {
        let (v, d, mc) = tiny();
        let c = TrainConfig {
            iterations: 5,
            log_every: 2,
            ..Default::default()
        };
        let (a, la) = train(&v, &v, &d, &mc, &c, &mut OracleSlot::none()).unwrap();
        let (b, _) = train(&v, &v, &d, &mc, &c, &mut OracleSlot::none()).unwrap();
        assert_eq!(a, b);
        assert_eq!(la.records.iter().map(|r| r.iter).collect::<Vec<_>>(), vec![0, 2, 4]);
        let csv = la.to_csv();
        assert!(csv.starts_with("iter,total,mse,ssim,lpips,temp,text,ms_elapsed\n"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn mismatched_supervision_rejected() {
        let (v, d, mc) = tiny();
        let other = crate::turbsim::static_scene(3, 12, 12, 3);
        let c = TrainConfig {
            iterations: 1,
            ..Default::default()
        };
        assert!(matches!(
            train(&v, &other, &d, &mc, &c, &mut OracleSlot::none()),
            Err(TrainError::InvalidConfig(_))
        ));
    }

    #[test]
    fn identity_enhancer_passes_through() {
        let (v, _, _) = tiny();
        let dir = std::env::temp_dir();
        assert_eq!(Enhancer::Identity.apply(v.clone(), &dir).unwrap(), v);
    }
}
