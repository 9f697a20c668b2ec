//! `convrt` command line.
//!
//! Exit status: 0 on success, 1 on usage errors, 2 on runtime errors.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::eval::evaluate;
use crate::fields::save_checkpoint;
use crate::flowlab::{flow_to_rgb, forward_flows, histogram_chart, tv_histogram, xt_slice};
use crate::io::{load_video, save_png16, save_png8_rgb, save_video, write_raw_fvid, RunConfig, VideoFormat, VideoVolume};
use crate::losses::{load_disparity, DisparityMap};
use crate::optimizer::{restore, Enhancer};
use crate::oracle::{spawn_oracle, OracleSlot};
use crate::quality::{select_prompt, PROMPT_TABLE};
use crate::selfcheck::{run_suite, GRADCHECK_TOL};
use crate::turbsim::default_synthetic;

/// Environment variable that overrides `oracle.command`.
pub const ORACLE_ENV: &str = "CONVRT_ORACLE";

#[derive(Parser, Debug)]
#[command(name = "convrt", version, about = "Turbulence mitigation by test-time optimisation of a neural video representation")]
pub struct Cli {
    /// Print the report of the subcommand as JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// More diagnostics on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration; every key is optional.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Top-level seed (overrides the config).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    /// Zero the temporal-consistency weight.
    Temp,
    /// Zero the semantic (text) weight.
    Text,
    /// Skip the enhancement hook.
    Enhance,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic static scene and its turbulence-degraded version.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
    },
    /// Fit the representation to an observed clip and render the restored video.
    Restore {
        #[command(flatten)]
        common: Common,
        /// Observed video (PNG directory or .fvid).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Supervision video; defaults to the observed clip.
        #[arg(long)]
        supervision: Option<PathBuf>,
        /// Disparity frames; a constant map when absent.
        #[arg(long)]
        disparity: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        lambda_mse: Option<f64>,
        #[arg(long)]
        lambda_ssim: Option<f64>,
        #[arg(long)]
        lambda_lpips: Option<f64>,
        #[arg(long)]
        lambda_temp: Option<f64>,
        #[arg(long)]
        lambda_text: Option<f64>,
        /// Disable a component (repeatable).
        #[arg(long, value_enum)]
        ablate: Vec<Ablation>,
    },
    /// Compute the metric report of a video.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<PathBuf>,
        /// Clean reference for PSNR, SSIM and PSNR_xt.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Rank prompt pairs by the correlation of their loss curves with a perceptual curve.
    Prompts {
        #[command(flatten)]
        common: Common,
        /// CSV with columns `iter, lpips, loss_text1 … loss_textN`.
        #[arg(long)]
        input: PathBuf,
    },
    /// Write the x–t slice of one row as a PNG plus CSV.
    Slice {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<PathBuf>,
        /// Row index; the middle row by default.
        #[arg(long)]
        row: Option<usize>,
    },
    /// Write flow colour maps, the TV histogram chart and CSV of the raw values.
    Flow {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Finite-difference check of every graph op and of the full objective.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn rt<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Run directory with a resolved-config echo and an append-only log.
struct RunDir {
    path: PathBuf,
    log: File,
    start: Instant,
}

impl RunDir {
    fn create(path: &Path, cfg: &RunConfig, argv: &[String]) -> Result<Self, CliError> {
        fs::create_dir_all(path).map_err(|e| rt(format!("{}: {e}", path.display())))?;
        fs::write(path.join("config.toml"), cfg.to_toml()).map_err(rt)?;
        let log = File::create(path.join("log.txt")).map_err(rt)?;
        let mut d = Self {
            path: path.to_path_buf(),
            log,
            start: Instant::now(),
        };
        d.note(&format!("argv: {}", argv.join(" ")));
        Ok(d)
    }

    fn note(&mut self, msg: &str) {
        log::info!("{msg}");
        let _ = writeln!(self.log, "[{:9.3}s] {msg}", self.start.elapsed().as_secs_f64());
    }

    fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).map_err(|e| CliError::Usage(e.to_string()))?,
        None => RunConfig::resolved_default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.derive_seeds();
    }
    if let Some(o) = &common.out {
        cfg.io.out = Some(o.clone());
    }
    if let Ok(cmd) = std::env::var(ORACLE_ENV) {
        cfg.oracle.command = (!cmd.trim().is_empty()).then_some(cmd);
    }
    Ok(cfg)
}

fn finish_config(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))
}

fn run_dir(cfg: &RunConfig, default: &str, argv: &[String]) -> Result<RunDir, CliError> {
    let p = cfg.io.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(default));
    RunDir::create(&p, cfg, argv)
}

fn required_input(p: &Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    p.clone().ok_or_else(|| CliError::Usage(format!("{what} is required (flag or [io] section)")))
}

fn load(path: &Path) -> Result<VideoVolume, CliError> {
    load_video(path).map_err(rt)
}

fn emit<T: Serialize>(json: bool, value: &T, human: impl FnOnce() -> String) -> Result<(), CliError> {
    if json {
        println!("{}", serde_json::to_string_pretty(value).map_err(rt)?);
    } else {
        println!("{}", human());
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    fs::write(path, serde_json::to_string_pretty(value).map_err(rt)?).map_err(rt)
}

#[derive(Serialize)]
struct SimulateReport {
    clean: PathBuf,
    degraded: PathBuf,
    tilts: PathBuf,
    dims: [usize; 4],
    tilt_rms: f64,
    blur_sigma: f32,
}

#[derive(Serialize)]
struct RestoreReport {
    restored: PathBuf,
    checkpoint: PathBuf,
    train_log: PathBuf,
    iterations: usize,
    final_loss: Option<f64>,
    seconds: f64,
    oracle_disabled: Option<String>,
}

fn make_oracles(cfg: &RunConfig, rd: &mut RunDir) -> OracleSlot {
    let Some(cmd) = cfg.oracle.command.as_deref() else {
        return OracleSlot::none();
    };
    let env: Vec<(String, String)> = cfg.oracle.env.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    let spawned = spawn_oracle(cmd, &env, &cfg.oracle.prompts, Duration::from_secs_f64(cfg.oracle.timeout_secs));
    if let Err(e) = &spawned {
        rd.note(&format!("oracle unavailable, continuing without it: {e}"));
    } else {
        rd.note(&format!("oracle attached: {cmd}"));
    }
    OracleSlot::from_spawn(spawned, cfg.oracle.prompts.clone())
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn cli_main(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_env("RUST_LOG")
        .target(env_logger::Target::Stderr)
        .try_init();
    match run(cli, argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli, argv: &[String]) -> Result<(), CliError> {
    let json = cli.json;
    match cli.command {
        Command::Simulate {
            common,
            frames,
            height,
            width,
        } => {
            let mut cfg = load_config(&common)?;
            cfg.scene.frames = frames.unwrap_or(cfg.scene.frames);
            cfg.scene.height = height.unwrap_or(cfg.scene.height);
            cfg.scene.width = width.unwrap_or(cfg.scene.width);
            if cfg.scene.frames == 0 || cfg.scene.height == 0 || cfg.scene.width == 0 {
                return Err(CliError::Usage("scene dimensions must be positive".into()));
            }
            finish_config(&cfg)?;
            let mut rd = run_dir(&cfg, "simulate", argv)?;
            let s = &cfg.scene;
            let pack = default_synthetic(s.frames, s.height, s.width, cfg.scene_seed(), &cfg.turbulence);
            let (clean, degraded, tilts) = (rd.file("clean"), rd.file("degraded"), rd.file("tilts.fvid"));
            save_video(&pack.clean, &clean, VideoFormat::Png16).map_err(rt)?;
            save_video(&pack.degraded, &degraded, VideoFormat::Png16).map_err(rt)?;
            save_video(&pack.degraded, &rd.file("degraded.fvid"), VideoFormat::Fvid).map_err(rt)?;
            save_video(&pack.clean, &rd.file("clean.fvid"), VideoFormat::Fvid).map_err(rt)?;
            // tilt planes interleaved as a 2-channel volume
            let t = &pack.tilts;
            let mut inter = Vec::with_capacity(t.data.len());
            for f in 0..t.frames {
                let (dx, dy) = (t.plane(f, 0), t.plane(f, 1));
                for i in 0..t.height * t.width {
                    inter.push(dx[i]);
                    inter.push(dy[i]);
                }
            }
            write_raw_fvid([t.frames, t.height, t.width, 2], &inter, &tilts).map_err(rt)?;
            let report = SimulateReport {
                clean,
                degraded,
                tilts,
                dims: pack.clean.dims(),
                tilt_rms: pack.tilts.rms(),
                blur_sigma: pack.blur_sigma,
            };
            write_json(&rd.file("simulate.json"), &report)?;
            rd.note("simulation written");
            emit(json, &report, || {
                format!(
                    "simulated {:?} clip, tilt rms {:.3} px, outputs in {}",
                    report.dims,
                    report.tilt_rms,
                    rd.path.display()
                )
            })
        }
        Command::Restore {
            common,
            input,
            supervision,
            disparity,
            iterations,
            learning_rate,
            lambda_mse,
            lambda_ssim,
            lambda_lpips,
            lambda_temp,
            lambda_text,
            ablate,
        } => {
            let mut cfg = load_config(&common)?;
            cfg.io.input = input.or(cfg.io.input);
            cfg.io.supervision = supervision.or(cfg.io.supervision);
            cfg.io.disparity = disparity.or(cfg.io.disparity);
            let t = &mut cfg.train;
            t.iterations = iterations.unwrap_or(t.iterations);
            t.learning_rate = learning_rate.unwrap_or(t.learning_rate);
            let w = &mut t.weights;
            w.lambda_mse = lambda_mse.unwrap_or(w.lambda_mse);
            w.lambda_ssim = lambda_ssim.unwrap_or(w.lambda_ssim);
            w.lambda_lpips = lambda_lpips.unwrap_or(w.lambda_lpips);
            w.lambda_temp = lambda_temp.unwrap_or(w.lambda_temp);
            w.lambda_text = lambda_text.unwrap_or(w.lambda_text);
            for a in &ablate {
                match a {
                    Ablation::Temp => cfg.train.weights.lambda_temp = 0.0,
                    Ablation::Text => cfg.train.weights.lambda_text = 0.0,
                    Ablation::Enhance => cfg.restore.enhance = Enhancer::Identity,
                }
            }
            finish_config(&cfg)?;
            let input = required_input(&cfg.io.input, "--input")?;
            let mut rd = run_dir(&cfg, "restore", argv)?;
            let observed = load(&input)?;
            let sup = match &cfg.io.supervision {
                Some(p) => load(p)?,
                None => observed.clone(),
            };
            if !sup.same_dims(&observed) {
                return Err(rt(format!("supervision is {:?}, observed is {:?}", sup.dims(), observed.dims())));
            }
            let [tn, h, wd, _] = observed.dims();
            let disp = match &cfg.io.disparity {
                Some(p) => load_disparity(p, [tn, h, wd]).map_err(rt)?,
                None => DisparityMap::uniform(tn, h, wd, 0.5),
            };
            let model_cfg = cfg.model.resolve_for(&observed, cfg.model_seed());
            rd.note(&format!(
                "restoring {:?} for {} iterations, weights {:?}",
                observed.dims(),
                cfg.train.iterations,
                cfg.train.weights
            ));
            let mut oracles = make_oracles(&cfg, &mut rd);
            let t0 = Instant::now();
            let (video, model, log) = restore(&observed, &sup, &disp, &model_cfg, &cfg.train, &mut oracles).map_err(rt)?;
            let video = cfg.restore.enhance.apply(video, &rd.path).map_err(rt)?;
            let seconds = t0.elapsed().as_secs_f64();
            if let Some(r) = &log.oracle_disabled {
                rd.note(&format!("oracle disabled during training: {r}"));
            }
            let restored = rd.file("restored");
            save_video(&video, &restored, VideoFormat::Png16).map_err(rt)?;
            save_video(&video, &rd.file("restored.fvid"), VideoFormat::Fvid).map_err(rt)?;
            let checkpoint = rd.file("model.cvrt");
            save_checkpoint(&model, &checkpoint).map_err(rt)?;
            let train_log = rd.file("train_log.csv");
            log.write_csv(&train_log).map_err(rt)?;
            let report = RestoreReport {
                restored,
                checkpoint,
                train_log,
                iterations: cfg.train.iterations,
                final_loss: log.records.last().map(|r| r.loss.total),
                seconds,
                oracle_disabled: log.oracle_disabled.clone(),
            };
            write_json(&rd.file("restore.json"), &report)?;
            rd.note(&format!("done in {seconds:.1}s"));
            emit(json, &report, || {
                format!(
                    "restored video in {} ({} iterations, final loss {:.6}, {:.1}s)",
                    report.restored.display(),
                    report.iterations,
                    report.final_loss.unwrap_or(f64::NAN),
                    seconds
                )
            })
        }
        Command::Evaluate { common, input, reference } => {
            let mut cfg = load_config(&common)?;
            cfg.io.input = input.or(cfg.io.input);
            cfg.io.reference = reference.or(cfg.io.reference);
            finish_config(&cfg)?;
            let input = required_input(&cfg.io.input, "--input")?;
            let mut rd = run_dir(&cfg, "evaluate", argv)?;
            let video = load(&input)?;
            let reference = cfg.io.reference.as_deref().map(load).transpose()?;
            let report = evaluate(&video, reference.as_ref(), &cfg.eval).map_err(rt)?;
            write_json(&rd.file("report.json"), &report)?;
            let mut w = csv::Writer::from_path(rd.file("report.csv")).map_err(rt)?;
            w.serialize(&report).map_err(rt)?;
            w.flush().map_err(rt)?;
            rd.note("report written");
            emit(json, &report, || {
                let f = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
                format!(
                    "psnr {}  ssim {}  e_warp {:.6}  psnr_xt {}  mean_tv {:.4}  track_smoothness {}  tracks {}",
                    f(report.psnr),
                    f(report.ssim),
                    report.e_warp,
                    f(report.psnr_xt),
                    report.mean_tv,
                    f(report.track_smoothness),
                    report.track_count
                )
            })
        }
        Command::Prompts { common, input } => {
            let cfg = load_config(&common)?;
            finish_config(&cfg)?;
            let mut rd = run_dir(&cfg, "prompts", argv)?;
            let (reference, candidates) = read_prompt_csv(&input)?;
            let report = select_prompt(&reference, &candidates).map_err(rt)?;
            #[derive(Serialize)]
            struct Ranked<'a> {
                best: &'a str,
                best_prompts: Option<(&'a str, &'a str)>,
                report: &'a crate::quality::CorrelationReport,
            }
            let best = report.best();
            let out = Ranked {
                best: &best.name,
                best_prompts: prompt_for_column(&best.name),
                report: &report,
            };
            write_json(&rd.file("prompts.json"), &out)?;
            rd.note(&format!("best candidate {}", best.name));
            emit(json, &out, || {
                report
                    .ranking
                    .iter()
                    .map(|&i| {
                        let s = &report.scores[i];
                        format!("{:>2}. {:<14} krcc {:+.4} srcc {:+.4} combined {:+.4}", s.rank, s.name, s.krcc, s.srcc, s.combined)
                    })
                    .collect::<Vec<_>>()
                    .join("\n")
            })
        }
        Command::Slice { common, input, row } => {
            let mut cfg = load_config(&common)?;
            cfg.io.input = input.or(cfg.io.input);
            cfg.eval.xt_row = row.or(cfg.eval.xt_row);
            finish_config(&cfg)?;
            let input = required_input(&cfg.io.input, "--input")?;
            let mut rd = run_dir(&cfg, "slice", argv)?;
            let video = load(&input)?;
            let row = cfg.eval.xt_row.unwrap_or(video.height() / 2);
            let s = xt_slice(&video, row).map_err(rt)?;
            let png = rd.file(&format!("xt_row{row:04}.png"));
            save_png16(&s.data, s.width, s.frames, s.channels, &png).map_err(rt)?;
            let mut w = csv::Writer::from_path(rd.file(&format!("xt_row{row:04}.csv"))).map_err(rt)?;
            w.write_record(["t", "x", "c", "value"]).map_err(rt)?;
            for t in 0..s.frames {
                for x in 0..s.width {
                    for c in 0..s.channels {
                        let v = s.data[(t * s.width + x) * s.channels + c];
                        w.write_record([t.to_string(), x.to_string(), c.to_string(), v.to_string()]).map_err(rt)?;
                    }
                }
            }
            w.flush().map_err(rt)?;
            rd.note(&format!("x–t slice of row {row} written"));
            #[derive(Serialize)]
            struct SliceReport {
                row: usize,
                png: PathBuf,
                frames: usize,
                width: usize,
            }
            let rep = SliceReport {
                row,
                png,
                frames: s.frames,
                width: s.width,
            };
            emit(json, &rep, || format!("x–t slice of row {row} in {}", rep.png.display()))
        }
        Command::Flow { common, input } => {
            let mut cfg = load_config(&common)?;
            cfg.io.input = input.or(cfg.io.input);
            finish_config(&cfg)?;
            let input = required_input(&cfg.io.input, "--input")?;
            let mut rd = run_dir(&cfg, "flow", argv)?;
            let video = load(&input)?;
            let hist = tv_histogram(&video, cfg.eval.tv_bins, cfg.eval.tv_max, &cfg.eval.flow).map_err(rt)?;
            let flows = forward_flows(&video, &cfg.eval.flow);
            let max_mag = flows
                .iter()
                .flat_map(|f| f.data.chunks_exact(2).map(|p| p[0].hypot(p[1])))
                .fold(0.0f32, f32::max);
            let dir = rd.file("flow");
            fs::create_dir_all(&dir).map_err(rt)?;
            let mut w = csv::Writer::from_path(rd.file("flow.csv")).map_err(rt)?;
            w.write_record(["pair", "x", "y", "u", "v"]).map_err(rt)?;
            for (t, f) in flows.iter().enumerate() {
                let rgb = flow_to_rgb(f, Some(max_mag));
                save_png8_rgb(&rgb, f.width, f.height, &dir.join(format!("flow_{t:05}.png"))).map_err(rt)?;
                for y in 0..f.height {
                    for x in 0..f.width {
                        let (u, v) = f.at(x, y);
                        w.write_record([t.to_string(), x.to_string(), y.to_string(), u.to_string(), v.to_string()]).map_err(rt)?;
                    }
                }
            }
            w.flush().map_err(rt)?;
            let chart = histogram_chart(&hist.counts, 400, 200);
            save_png8_rgb(&chart, 400, 200, &rd.file("tv_histogram.png")).map_err(rt)?;
            let mut w = csv::Writer::from_path(rd.file("tv_values.csv")).map_err(rt)?;
            w.write_record(["pair", "tv"]).map_err(rt)?;
            for (t, v) in hist.values.iter().enumerate() {
                w.write_record([t.to_string(), v.to_string()]).map_err(rt)?;
            }
            w.flush().map_err(rt)?;
            let mut w = csv::Writer::from_path(rd.file("tv_histogram.csv")).map_err(rt)?;
            w.write_record(["lower", "upper", "count"]).map_err(rt)?;
            for (b, c) in hist.counts.iter().enumerate() {
                w.write_record([hist.edges[b].to_string(), hist.edges[b + 1].to_string(), c.to_string()]).map_err(rt)?;
            }
            w.flush().map_err(rt)?;
            write_json(&rd.file("tv_histogram.json"), &hist)?;
            rd.note(&format!("{} flow fields written, mean TV {:.4}", flows.len(), hist.mean));
            emit(json, &hist, || {
                format!("mean TV {:.4} over {} pairs; outputs in {}", hist.mean, hist.values.len(), rd.path.display())
            })
        }
        Command::Gradcheck { common } => {
            let cfg = load_config(&common)?;
            let mut rd = cfg.io.out.as_deref().map(|p| RunDir::create(p, &cfg, argv)).transpose()?;
            let t0 = Instant::now();
            let results = run_suite();
            let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
            #[derive(Serialize)]
            struct GradReport<'a> {
                tolerance: f64,
                seconds: f64,
                passed: bool,
                checks: &'a [crate::selfcheck::CheckOutcome],
            }
            let rep = GradReport {
                tolerance: GRADCHECK_TOL,
                seconds: t0.elapsed().as_secs_f64(),
                passed: failed.is_empty(),
                checks: &results,
            };
            if let Some(rd) = rd.as_mut() {
                write_json(&rd.file("gradcheck.json"), &rep)?;
                rd.note(&format!("gradcheck finished, {} failures", failed.len()));
            }
            emit(json, &rep, || {
                let mut lines: Vec<String> = results
                    .iter()
                    .map(|r| {
                        format!(
                            "{:<26} {:>6} entries  max rel err {:.3e}  {}",
                            r.name,
                            r.checked,
                            r.max_rel_err,
                            if r.passed { "ok" } else { "FAIL" }
                        )
                    })
                    .collect();
                lines.push(format!("tolerance {GRADCHECK_TOL:e}, {:.2}s", rep.seconds));
                lines.join("\n")
            })?;
            if failed.is_empty() {
                Ok(())
            } else {
                Err(CliError::Runtime(format!("gradient check failed: {}", failed.join(", "))))
            }
        }
    }
}

/// Maps `loss_textN` to row `N` of the prompt table.
fn prompt_for_column(name: &str) -> Option<(&'static str, &'static str)> {
    let n: usize = name.strip_prefix("loss_text")?.parse().ok()?;
    PROMPT_TABLE.get(n.checked_sub(1)?).copied()
}

type PromptColumns = (Vec<f64>, Vec<(String, Vec<f64>)>);

/// Reads the `lpips` column as the reference and every `loss_text*` column as a candidate.
pub fn read_prompt_csv(path: &Path) -> Result<PromptColumns, CliError> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| rt(format!("{}: {e}", path.display())))?;
    let headers: Vec<String> = r.headers().map_err(rt)?.iter().map(str::to_string).collect();
    let lp = headers
        .iter()
        .position(|h| h == "lpips")
        .ok_or_else(|| CliError::Usage(format!("{}: no `lpips` column", path.display())))?;
    let cand: Vec<usize> = (0..headers.len()).filter(|&i| headers[i].starts_with("loss_text")).collect();
    if cand.is_empty() {
        return Err(CliError::Usage(format!("{}: no `loss_text*` columns", path.display())));
    }
    let mut reference = Vec::new();
    let mut seqs = vec![Vec::new(); cand.len()];
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(rt)?;
        let num = |i: usize| -> Result<f64, CliError> {
            rec.get(i)
                .unwrap_or("")
                .parse::<f64>()
                .map_err(|e| rt(format!("{}: row {}, column {}: {e}", path.display(), line + 2, headers[i])))
        };
        reference.push(num(lp)?);
        for (k, &i) in cand.iter().enumerate() {
            seqs[k].push(num(i)?);
        }
    }
    Ok((reference, cand.iter().map(|&i| headers[i].clone()).zip(seqs).collect()))
}
