use convrt_core::fields::{feature_param_count, load_checkpoint, save_checkpoint, ConvrtModel, ModelOptions};
use convrt_core::io::{load_video, save_video, RunConfig, VideoFormat, VideoVolume};
use convrt_core::losses::{total_loss, DisparityMap, LossWeights};
use convrt_core::optimizer::{train, TrainConfig};
use convrt_core::oracle::OracleSlot;
use convrt_core::turbsim::{default_synthetic, static_scene, TurbulenceParams};

fn tiny() -> ModelOptions {
    ModelOptions {
        deform_channels: 4,
        content_channels: 4,
        hidden_channels: 3,
        deform_width: 8,
        content_width: 8,
        ..Default::default()
    }
}

#[test]
fn checkpoint_round_trip_on_disk() {
    let cfg = tiny().resolve(3, 10, 9, 3, 4);
    let m = ConvrtModel::<f32>::init(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.cvrt");
    save_checkpoint(&m, &p).unwrap();
    let back = load_checkpoint(&p).unwrap();
    assert_eq!(back.config, m.config);
    assert_eq!(back.tensors(), m.tensors());
    assert_eq!(back.render_video().unwrap(), m.render_video().unwrap());
    std::fs::write(&p, b"CVRT\x01").unwrap();
    assert!(load_checkpoint(&p).is_err());
}

#[test]
fn shipped_configs_are_low_rank() {
    let d = RunConfig::resolved_default();
    let s = &d.scene;
    let cfg = d.model.resolve(s.frames, s.height, s.width, 3, 0);
    let m = ConvrtModel::<f32>::init(&cfg).unwrap();
    let (lo, full) = m.param_count();
    assert!(lo < full);
    assert_eq!(feature_param_count(16, 64, 64, 16), (65_792, 1_048_576));
}

#[test]
fn video_formats_round_trip() {
    let v = static_scene(2, 7, 5, 1);
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("v.fvid");
    save_video(&v, &f, VideoFormat::Fvid).unwrap();
    assert_eq!(load_video(&f).unwrap(), v);
    let d = dir.path().join("frames");
    save_video(&v, &d, VideoFormat::Png16).unwrap();
    let back = load_video(&d).unwrap();
    assert_eq!(back.dims(), v.dims());
    for (a, b) in back.data().iter().zip(v.data()) {
        assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-7);
    }
    assert!(load_video(&dir.path().join("missing")).is_err());
}

#[test]
fn training_reduces_the_objective() {
    let pack = default_synthetic(2, 12, 12, 7, &TurbulenceParams::default());
    let disp = DisparityMap::uniform(2, 12, 12, 0.5);
    let mc = tiny().resolve_for(&pack.degraded, 8);
    let cfg = TrainConfig {
        iterations: 200,
        learning_rate: 5e-3,
        ..Default::default()
    };
    let w = LossWeights::default();
    let m0 = ConvrtModel::<f32>::init(&mc).unwrap();
    let before = total_loss(&m0, 0, pack.degraded.frame(0), disp.frame(0), &w, &mut OracleSlot::none()).unwrap();
    let (m, log) = train(&pack.degraded, &pack.degraded, &disp, &mc, &cfg, &mut OracleSlot::none()).unwrap();
    let after = total_loss(&m, 0, pack.degraded.frame(0), disp.frame(0), &w, &mut OracleSlot::none()).unwrap();
    assert!(after.total < 0.5 * before.total, "{} -> {}", before.total, after.total);
    assert!(log.records.iter().all(|r| r.loss.total.is_finite()));
}

#[test]
fn training_is_deterministic() {
    let v: VideoVolume = static_scene(2, 12, 12, 2);
    let disp = DisparityMap::uniform(2, 12, 12, 0.5);
    let mc = tiny().resolve_for(&v, 1);
    let cfg = TrainConfig {
        iterations: 5,
        ..Default::default()
    };
    let (a, _) = train(&v, &v, &disp, &mc, &cfg, &mut OracleSlot::none()).unwrap();
    let (b, _) = train(&v, &v, &disp, &mc, &cfg, &mut OracleSlot::none()).unwrap();
    assert_eq!(a.tensors(), b.tensors());
}
