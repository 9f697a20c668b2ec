//! Full metric report of a video, used by `convrt evaluate` and the acceptance suite.

use serde::Serialize;

use crate::flowlab::{klt_track, psnr_xt, track_smoothness, tv_histogram, warp_error_video, FlowError};
use crate::io::{EvalConfig, VideoVolume};
use crate::quality::{mean_frame_ssim, volume_psnr, QualityError};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Quality(#[from] QualityError),
}

/// Reference metrics are `None` without a reference; `track_smoothness` is `None`
/// when no track spans three frames.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub e_warp: f64,
    pub psnr_xt: Option<f64>,
    pub mean_tv: f64,
    pub track_smoothness: Option<f64>,
    pub track_count: usize,
}

pub fn evaluate(video: &VideoVolume, reference: Option<&VideoVolume>, cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    let (psnr, ssim, pxt) = match reference {
        Some(r) => (
            Some(volume_psnr(video, r)?),
            Some(mean_frame_ssim(video, r)?),
            Some(psnr_xt(video, r)?),
        ),
        None => (None, None, None),
    };
    let tracks = klt_track(video, &cfg.klt);
    Ok(EvalReport {
        psnr,
        ssim,
        e_warp: warp_error_video(video, &cfg.flow)?,
        psnr_xt: pxt,
        mean_tv: tv_histogram(video, cfg.tv_bins, cfg.tv_max, &cfg.flow)?.mean,
        track_smoothness: track_smoothness(&tracks),
        track_count: tracks.surviving().count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::turbsim::static_scene;

    #[test]
    fn static_video_against_itself() {
        let v = static_scene(4, 32, 32, 1);
        let r = evaluate(&v, Some(&v), &EvalConfig::default()).unwrap();
        assert_eq!(r.psnr, Some(crate::quality::PSNR_CAP_DB));
        assert!(r.e_warp < 1e-4 && r.mean_tv < 1e-3);
        assert!(r.track_smoothness.unwrap() < 1e-4);
        let r = evaluate(&v, None, &EvalConfig::default()).unwrap();
        assert!(r.psnr.is_none() && r.psnr_xt.is_none());
    }
}
