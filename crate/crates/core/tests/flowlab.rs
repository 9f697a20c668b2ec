use convrt_core::flowlab::{
    flow_tv, klt_track, lk_flow, occlusion_mask, psnr_xt, tv_histogram, warp_error_pair, warp_error_report, warp_error_video,
    FlowParams, FlowField, KltParams, OcclusionMask,
};
use convrt_core::io::VideoVolume;
use convrt_core::quality::volume_psnr;
use convrt_core::turbsim::{default_synthetic, static_scene, translating_scene, TurbulenceParams};

fn interior_mean(f: &FlowField, margin: usize) -> (f64, f64) {
    let (mut su, mut sv, mut n) = (0.0, 0.0, 0.0);
    for y in margin..f.height - margin {
        for x in margin..f.width - margin {
            let (u, v) = f.at(x, y);
            su += u as f64;
            sv += v as f64;
            n += 1.0;
        }
    }
    (su / n, sv / n)
}

#[test]
fn lk_recovers_integer_translations() {
    for (vx, vy) in [(1.0f32, 0.0f32), (3.0, 2.0), (-2.0, 1.0)] {
        let v = translating_scene(2, 64, 64, vx, vy, 8);
        let f = lk_flow(&v.gray_frame(0), &v.gray_frame(1), &FlowParams::default());
        let (u, w) = interior_mean(&f, 12);
        assert!((u - vx as f64).abs() < 0.1 && (w - vy as f64).abs() < 0.1, "({vx},{vy}) -> ({u},{w})");
    }
}

#[test]
fn lk_static_pair_is_zero() {
    let v = static_scene(2, 48, 48, 4);
    let f = lk_flow(&v.gray_frame(0), &v.gray_frame(1), &FlowParams::default());
    assert!(f.data.iter().all(|x| x.abs() < 1e-4));
}

#[test]
fn warp_error_of_static_video_is_zero() {
    let v = static_scene(5, 40, 40, 6);
    assert!(warp_error_video(&v, &FlowParams::default()).unwrap() < 1e-4);
}

#[test]
fn warp_error_needs_two_frames() {
    let v = static_scene(1, 16, 16, 1);
    assert!(warp_error_video(&v, &FlowParams::default()).is_err());
}

#[test]
fn compensated_translation_has_small_warp_error() {
    let v = translating_scene(4, 48, 48, 1.0, 0.0, 3);
    let rep = warp_error_report(&v, &FlowParams::default()).unwrap();
    assert_eq!(rep.pairs.len(), 3);
    // raw frame difference for comparison
    let full = OcclusionMask::full(48, 48);
    let raw = warp_error_pair(v.frame(0), v.frame(1), [48, 48, 3], &FlowField::zeros(48, 48), &full).unwrap().unwrap();
    assert!(rep.mean < 0.1 * raw, "{} vs raw {raw}", rep.mean);
}

#[test]
fn occlusion_is_symmetric_for_opposite_flows() {
    let f = FlowField::constant(10, 10, 0.7, -0.2);
    let b = FlowField::constant(10, 10, -0.7, 0.2);
    assert_eq!(occlusion_mask(&f, &b).unwrap().valid_count(), 100);
    let bad = FlowField::constant(10, 10, 0.7, 0.8);
    assert_eq!(occlusion_mask(&f, &bad).unwrap().valid_count(), 0);
}

#[test]
fn psnr_xt_equals_volume_psnr() {
    let p = TurbulenceParams::default();
    let pack = default_synthetic(6, 24, 20, 9, &p);
    let a = psnr_xt(&pack.degraded, &pack.clean).unwrap();
    let b = volume_psnr(&pack.degraded, &pack.clean).unwrap();
    assert!((a - b).abs() < 1e-9, "{a} vs {b}");
}

#[test]
fn tv_of_translation_is_near_zero_and_histogram_is_complete() {
    let v = translating_scene(4, 48, 48, 1.0, 1.0, 5);
    let h = tv_histogram(&v, 10, 2.0, &FlowParams::default()).unwrap();
    assert_eq!(h.values.len(), 3);
    assert_eq!(h.counts.iter().sum::<usize>(), 3);
    assert_eq!(h.edges.len(), 11);
    assert!(h.mean < 0.2, "{}", h.mean);
    assert_eq!(flow_tv(&FlowField::constant(8, 8, 2.0, 2.0)), 0.0);
}

#[test]
fn klt_follows_a_translating_scene() {
    let v = translating_scene(6, 64, 64, 1.0, 0.0, 11);
    let tracks = klt_track(&v, &KltParams::default());
    let alive: Vec<_> = tracks.surviving().collect();
    assert!(alive.len() >= 10, "{} survivors", alive.len());
    for t in alive {
        let (x0, y0) = t.positions[0];
        let (x5, y5) = *t.positions.last().unwrap();
        assert!(((x5 - x0) - 5.0).abs() < 0.3 && (y5 - y0).abs() < 0.3, "{:?}", t.positions);
    }
}

#[test]
fn klt_on_static_scene_is_stationary() {
    let v = static_scene(6, 64, 64, 12);
    let tracks = klt_track(&v, &KltParams::default());
    assert!(tracks.surviving().count() > 5);
    assert_eq!(tracks.stationary_fraction(0.5), Some(1.0));
}

#[test]
fn flow_of_mismatched_frames_panics_cleanly() {
    let a = VideoVolume::zeros(1, 8, 8, 1).gray_frame(0);
    let b = VideoVolume::zeros(1, 9, 8, 1).gray_frame(0);
    assert!(std::panic::catch_unwind(|| lk_flow(&a, &b, &FlowParams::default())).is_err());
}
