//! Pre-extracted frame directories.
//!
//! A video directory holds its image files plus `index.txt`, one frame per
//! line: `<filename> <frame_index> <timestamp_s>` (whitespace or comma
//! separated, `#` starts a comment). The directory name is the video id.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::model::FrameRef;

pub const INDEX_FILE: &str = "index.txt";

#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Index {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: frame_index must strictly increase (line {line})")]
    Order { path: String, line: usize },
    #[error("{0}: video has no frames")]
    Empty(String),
    #[error("no image registered for frame {0}")]
    MissingImage(String),
}

/// Source of raw image bytes for a frame.
pub trait ImageStore: Send + Sync {
    fn image_bytes(&self, frame: &FrameRef) -> Result<Vec<u8>, FrameError>;
}

/// Stand-in store for pipelines whose clients key on frame ids only.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoImages;

impl ImageStore for NoImages {
    fn image_bytes(&self, _frame: &FrameRef) -> Result<Vec<u8>, FrameError> {
        Ok(Vec::new())
    }
}

#[derive(Debug, Clone)]
pub struct VideoDir {
    pub video_id: String,
    pub root: PathBuf,
    pub frames: Vec<FrameRef>,
    files: HashMap<u32, PathBuf>,
}

impl VideoDir {
    pub fn load(root: &Path) -> Result<Self, FrameError> {
        let video_id = root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "video".to_string());
        let index_path = root.join(INDEX_FILE);
        let shown = index_path.display().to_string();
        let text = std::fs::read_to_string(&index_path).map_err(|source| FrameError::Io {
            path: shown.clone(),
            source,
        })?;
        let mut frames = Vec::new();
        let mut files = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let fields: Vec<&str> = content
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|f| !f.is_empty())
                .collect();
            let bad = |message: &str| FrameError::Index {
                path: shown.clone(),
                line,
                message: message.to_string(),
            };
            let [file, index, ts] = fields[..] else {
                return Err(bad("expected <filename> <frame_index> <timestamp_s>"));
            };
            let frame_index: u32 = index.parse().map_err(|_| bad("bad frame_index"))?;
            let timestamp_s: f64 = ts.parse().map_err(|_| bad("bad timestamp_s"))?;
            if !timestamp_s.is_finite() || timestamp_s < 0.0 {
                return Err(bad("timestamp_s must be a non-negative number"));
            }
            if frames
                .last()
                .is_some_and(|f: &FrameRef| f.frame_index >= frame_index)
            {
                return Err(FrameError::Order {
                    path: shown.clone(),
                    line,
                });
            }
            frames.push(FrameRef::new(video_id.clone(), frame_index, timestamp_s));
            files.insert(frame_index, root.join(file));
        }
        if frames.is_empty() {
            return Err(FrameError::Empty(shown));
        }
        Ok(Self {
            video_id,
            root: root.to_path_buf(),
            frames,
            files,
        })
    }

    pub fn image_path(&self, frame: &FrameRef) -> Option<&Path> {
        self.files.get(&frame.frame_index).map(PathBuf::as_path)
    }
}

/// Loads either a single video directory (one containing `index.txt`) or
/// every immediate subdirectory that is one, sorted by name.
pub fn load_videos(root: &Path) -> Result<Vec<VideoDir>, FrameError> {
    if root.join(INDEX_FILE).is_file() {
        return Ok(vec![VideoDir::load(root)?]);
    }
    let entries = std::fs::read_dir(root).map_err(|source| FrameError::Io {
        path: root.display().to_string(),
        source,
    })?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.join(INDEX_FILE).is_file())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| VideoDir::load(d)).collect()
}

/// Image store over loaded video directories.
#[derive(Debug, Default, Clone)]
pub struct DirImageStore {
    videos: HashMap<String, VideoDir>,
}

impl DirImageStore {
    pub fn new(videos: &[VideoDir]) -> Self {
        Self {
            videos: videos.iter().map(|v| (v.video_id.clone(), v.clone())).collect(),
        }
    }

    pub fn path(&self, frame: &FrameRef) -> Option<&Path> {
        self.videos.get(&frame.video_id)?.image_path(frame)
    }
}

impl ImageStore for DirImageStore {
    fn image_bytes(&self, frame: &FrameRef) -> Result<Vec<u8>, FrameError> {
        let path = self
            .path(frame)
            .ok_or_else(|| FrameError::MissingImage(frame.key()))?;
        std::fs::read(path).map_err(|source| FrameError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}
