use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use super::IoError;

pub const FVID_MAGIC: &[u8; 4] = b"FVID";
pub const FVID_VERSION: u32 = 1;
pub const FVID_HEADER_BYTES: usize = 24;

/// `T×H×W×C` float frames, row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoVolume {
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

/// Single-channel image used by the flow and tracking code.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height);
        Self { width, height, data }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::new(width, height, vec![0.0; width * height])
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Bilinear lookup with border clamping.
    #[inline]
    pub fn sample(&self, x: f32, y: f32) -> f32 {
        sample_plane(&self.data, self.width, self.height, 1, 0, x, y)
    }
}

/// Bilinear sample of channel `ch` of an interleaved `H×W×C` plane, clamping to the border.
#[inline]
pub fn sample_plane(data: &[f32], width: usize, height: usize, channels: usize, ch: usize, x: f32, y: f32) -> f32 {
    let xm = (width - 1) as f32;
    let ym = (height - 1) as f32;
    let x = if x.is_nan() { 0.0 } else { x.clamp(0.0, xm) };
    let y = if y.is_nan() { 0.0 } else { y.clamp(0.0, ym) };
    let x0 = (x.floor() as usize).min(width.saturating_sub(2));
    let y0 = (y.floor() as usize).min(height.saturating_sub(2));
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = x - x0 as f32;
    let fy = y - y0 as f32;
    let at = |xx: usize, yy: usize| data[(yy * width + xx) * channels + ch];
    (1.0 - fy) * ((1.0 - fx) * at(x0, y0) + fx * at(x1, y0)) + fy * ((1.0 - fx) * at(x0, y1) + fx * at(x1, y1))
}

impl VideoVolume {
    pub fn new(frames: usize, height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self, IoError> {
        if data.len() != frames * height * width * channels {
            return Err(IoError::Format(format!(
                "video {frames}×{height}×{width}×{channels} needs {} values, got {}",
                frames * height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            frames,
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize, channels: usize) -> Self {
        Self {
            frames,
            height,
            width,
            channels,
            data: vec![0.0; frames * height * width * channels],
        }
    }

    pub fn from_frames(height: usize, width: usize, channels: usize, frames: &[Vec<f32>]) -> Result<Self, IoError> {
        let mut data = Vec::with_capacity(frames.len() * height * width * channels);
        for f in frames {
            if f.len() != height * width * channels {
                return Err(IoError::Format(format!(
                    "frame has {} values, expected {}",
                    f.len(),
                    height * width * channels
                )));
            }
            data.extend_from_slice(f);
        }
        Self::new(frames.len(), height, width, channels, data)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn dims(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }
    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f32] {
        let n = self.frame_len();
        &mut self.data[t * n..(t + 1) * n]
    }

    #[inline]
    pub fn at(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[((t * self.height + y) * self.width + x) * self.channels + c]
    }

    /// Luma of frame `t` (`0.299R + 0.587G + 0.114B` for colour input).
    pub fn gray_frame(&self, t: usize) -> GrayImage {
        let f = self.frame(t);
        let data = if self.channels == 3 {
            f.chunks_exact(3)
                .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
                .collect()
        } else {
            f.iter().step_by(self.channels).copied().collect()
        };
        GrayImage::new(self.width, self.height, data)
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
    }

    pub fn same_dims(&self, other: &VideoVolume) -> bool {
        self.dims() == other.dims()
    }
}

/// On-disk layout chosen by [`save_video`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VideoFormat {
    /// Directory of 16-bit PNG frames.
    Png16,
    /// Single `.fvid` float file.
    Fvid,
}

impl VideoFormat {
    pub fn for_path(path: &Path) -> Self {
        if path.extension().is_some_and(|e| e == "fvid") {
            VideoFormat::Fvid
        } else {
            VideoFormat::Png16
        }
    }
}

fn trailing_index(path: &Path) -> Option<u64> {
    let stem = path.file_stem()?.to_str()?;
    let digits: String = stem
        .chars()
        .rev()
        .take_while(|c| c.is_ascii_digit())
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    digits.parse().ok()
}

/// Loads a directory of numbered PNG frames or a `.fvid` file.
pub fn load_video(path: &Path) -> Result<VideoVolume, IoError> {
    if path.is_file() {
        let mut v = read_fvid(path)?;
        if v.channels != 1 && v.channels != 3 {
            return Err(IoError::Format(format!(
                "{}: videos need 1 or 3 channels, found {}",
                path.display(),
                v.channels
            )));
        }
        v.clamp_unit();
        return Ok(v);
    }
    if !path.is_dir() {
        return Err(IoError::NotFound(path.to_path_buf()));
    }
    let mut entries: Vec<(u64, PathBuf)> = Vec::new();
    let mut unnumbered = Vec::new();
    for entry in fs::read_dir(path).map_err(|e| IoError::io(path, e))? {
        let p = entry.map_err(|e| IoError::io(path, e))?.path();
        if !p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            continue;
        }
        match trailing_index(&p) {
            Some(i) => entries.push((i, p)),
            None => unnumbered.push(p.display().to_string()),
        }
    }
    if !unnumbered.is_empty() {
        return Err(IoError::Format(format!("frames without an index: {}", unnumbered.join(", "))));
    }
    if entries.is_empty() {
        return Err(IoError::Format(format!("no frames in {}", path.display())));
    }
    entries.sort();
    let first = entries[0].0;
    let missing: Vec<String> = (0..entries.len() as u64)
        .map(|k| first + k)
        .filter(|k| entries.binary_search_by_key(k, |e| e.0).is_err())
        .map(|k| k.to_string())
        .collect();
    if !missing.is_empty() || entries.windows(2).any(|w| w[0].0 == w[1].0) {
        let dup: Vec<String> = entries
            .windows(2)
            .filter(|w| w[0].0 == w[1].0)
            .map(|w| w[1].1.display().to_string())
            .collect();
        return Err(IoError::Format(format!(
            "frame indices not contiguous; missing [{}] duplicated [{}]",
            missing.join(", "),
            dup.join(", ")
        )));
    }

    let mut frames = Vec::with_capacity(entries.len());
    let mut unreadable = Vec::new();
    for (_, p) in &entries {
        match image::open(p) {
            Ok(img) => frames.push((p.clone(), decode_frame(img))),
            Err(e) => unreadable.push(format!("{} ({e})", p.display())),
        }
    }
    if !unreadable.is_empty() {
        return Err(IoError::Format(format!("unreadable frames: {}", unreadable.join(", "))));
    }
    let (h, w, c) = (frames[0].1 .0, frames[0].1 .1, frames[0].1 .2);
    let odd: Vec<String> = frames
        .iter()
        .filter(|(_, f)| (f.0, f.1, f.2) != (h, w, c))
        .map(|(p, f)| format!("{} ({}×{}×{})", p.display(), f.0, f.1, f.2))
        .collect();
    if !odd.is_empty() {
        return Err(IoError::Format(format!(
            "frames differ from the first ({h}×{w}×{c}): {}",
            odd.join(", ")
        )));
    }
    let data: Vec<Vec<f32>> = frames.into_iter().map(|(_, f)| f.3).collect();
    VideoVolume::from_frames(h, w, c, &data)
}

fn decode_frame(img: DynamicImage) -> (usize, usize, usize, Vec<f32>) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let gray = !img.color().has_color();
    let sixteen = img.color().bytes_per_pixel() / img.color().channel_count() >= 2;
    let data: Vec<f32> = match (gray, sixteen) {
        (true, false) => img.to_luma8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        (true, true) => img.to_luma16().into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
        (false, false) => img.to_rgb8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        (false, true) => img.to_rgb16().into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
    };
    (h, w, if gray { 1 } else { 3 }, data)
}

pub fn save_video(video: &VideoVolume, path: &Path, format: VideoFormat) -> Result<(), IoError> {
    match format {
        VideoFormat::Fvid => write_fvid(video, path),
        VideoFormat::Png16 => {
            fs::create_dir_all(path).map_err(|e| IoError::io(path, e))?;
            for t in 0..video.frames {
                let p = path.join(format!("frame_{t:05}.png"));
                save_png16(video.frame(t), video.width, video.height, video.channels, &p)?;
            }
            Ok(())
        }
    }
}

fn quantize16(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Writes one `H×W×C` frame (C = 1 or 3) as a 16-bit PNG.
pub fn save_png16(frame: &[f32], width: usize, height: usize, channels: usize, path: &Path) -> Result<(), IoError> {
    let q: Vec<u16> = frame.iter().map(|&v| quantize16(v)).collect();
    let (w, h) = (width as u32, height as u32);
    let res = match channels {
        1 => ImageBuffer::<Luma<u16>, _>::from_raw(w, h, q).map(|b| b.save(path)),
        3 => ImageBuffer::<Rgb<u16>, _>::from_raw(w, h, q).map(|b| b.save(path)),
        c => return Err(IoError::Format(format!("cannot write {c}-channel PNG"))),
    };
    match res {
        Some(Ok(())) => Ok(()),
        Some(Err(e)) => Err(IoError::Image(path.to_path_buf(), e.to_string())),
        None => Err(IoError::Format("frame buffer size mismatch".into())),
    }
}

/// Writes an 8-bit RGB image, used for visualisations.
pub fn save_png8_rgb(rgb: &[u8], width: usize, height: usize, path: &Path) -> Result<(), IoError> {
    let buf = ImageBuffer::<Rgb<u8>, _>::from_raw(width as u32, height as u32, rgb.to_vec())
        .ok_or_else(|| IoError::Format("image buffer size mismatch".into()))?;
    buf.save(path).map_err(|e| IoError::Image(path.to_path_buf(), e.to_string()))
}

fn write_fvid(video: &VideoVolume, path: &Path) -> Result<(), IoError> {
    write_raw_fvid(video.dims(), &video.data, path)
}

/// Writes an arbitrary `T×H×W×C` float array in the `.fvid` layout.
pub fn write_raw_fvid(dims: [usize; 4], data: &[f32], path: &Path) -> Result<(), IoError> {
    let mut bytes = Vec::with_capacity(FVID_HEADER_BYTES + 4 * data.len());
    bytes.extend_from_slice(FVID_MAGIC);
    bytes.extend_from_slice(&FVID_VERSION.to_le_bytes());
    for d in dims {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| IoError::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| IoError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| IoError::io(path, e))
}

/// Reads a `.fvid` file without value clamping or channel checks.
pub fn read_fvid(path: &Path) -> Result<VideoVolume, IoError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| IoError::io(path, e))?;
    parse_fvid(&bytes).map_err(|m| IoError::Format(format!("{}: {m}", path.display())))
}

pub fn parse_fvid(bytes: &[u8]) -> Result<VideoVolume, String> {
    if bytes.len() < FVID_HEADER_BYTES || &bytes[..4] != FVID_MAGIC {
        return Err("not an FVID file".into());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    let version = word(1);
    if version != FVID_VERSION {
        return Err(format!("unsupported FVID version {version}"));
    }
    let dims = [word(2) as usize, word(3) as usize, word(4) as usize, word(5) as usize];
    let n: usize = dims.iter().product();
    let expected = FVID_HEADER_BYTES + 4 * n;
    if bytes.len() != expected {
        return Err(format!("expected {expected} bytes, found {}", bytes.len()));
    }
    let data = bytes[FVID_HEADER_BYTES..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    VideoVolume::new(dims[0], dims[1], dims[2], dims[3], data).map_err(|e| e.to_string())
}
