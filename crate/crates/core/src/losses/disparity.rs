use std::path::Path;

use crate::io::{load_video, IoError, VideoVolume};

/// Per-frame disparity in `[0, 1]` (1 = near).
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityMap {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    data: Vec<f32>,
}

impl DisparityMap {
    /// Constant map, the fallback when no disparity is supplied.
    pub fn uniform(frames: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            frames,
            height,
            width,
            data: vec![value.clamp(0.0, 1.0); frames * height * width],
        }
    }

    /// Takes ownership of `T·H·W` values and clamps them.
    pub fn new(frames: usize, height: usize, width: usize, mut data: Vec<f32>) -> Result<Self, IoError> {
        if data.len() != frames * height * width {
            return Err(IoError::Format(format!(
                "disparity has {} values, expected {frames}×{height}×{width}",
                data.len()
            )));
        }
        data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Ok(Self {
            frames,
            height,
            width,
            data,
        })
    }

    /// Luma of each frame of a video; one-frame videos are repeated `frames` times.
    pub fn from_video(video: &VideoVolume, frames: usize) -> Result<Self, IoError> {
        let src = video.frames();
        if src != frames && src != 1 {
            return Err(IoError::Format(format!("disparity has {src} frames, video has {frames}")));
        }
        let mut data = Vec::with_capacity(frames * video.height() * video.width());
        for t in 0..frames {
            data.extend_from_slice(&video.gray_frame(if src == 1 { 0 } else { t }).data);
        }
        Self::new(frames, video.height(), video.width(), data)
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[t * n..(t + 1) * n]
    }

    /// `1 − d` for frame `t`.
    pub fn far_weight(&self, t: usize) -> Vec<f32> {
        self.frame(t).iter().map(|d| 1.0 - d).collect()
    }
}

/// Loads disparity from a PNG directory or `.fvid` file and checks it against `[T, H, W]`.
pub fn load_disparity(path: &Path, dims: [usize; 3]) -> Result<DisparityMap, IoError> {
    let v = load_video(path)?;
    if v.height() != dims[1] || v.width() != dims[2] {
        return Err(IoError::Format(format!(
            "{}: disparity frames are {}×{}, video frames are {}×{}",
            path.display(),
            v.height(),
            v.width(),
            dims[1],
            dims[2]
        )));
    }
    DisparityMap::from_video(&v, dims[0])
}
