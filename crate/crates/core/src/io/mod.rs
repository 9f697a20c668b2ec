//! Frame and configuration I/O.

mod config;
mod video;

use std::path::{Path, PathBuf};

pub use config::{stream_seed, ConfigError, EvalConfig, IoPaths, OracleConfig, RestoreConfig, RunConfig, SceneConfig};
pub use video::{
    load_video, parse_fvid, read_fvid, sample_plane, save_png16, save_png8_rgb, save_video, write_raw_fvid,
    GrayImage, VideoFormat, VideoVolume, FVID_HEADER_BYTES, FVID_MAGIC, FVID_VERSION,
};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}: no such file or directory")]
    NotFound(PathBuf),
    #[error("{0}")]
    Format(String),
    #[error("{0}: {1}")]
    Image(PathBuf, String),
}

impl IoError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
