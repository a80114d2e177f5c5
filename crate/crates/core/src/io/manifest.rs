//! Scene manifests: a TOML file listing frames, prompts and parameters.
//! Bulk data lives in tensor files referenced by path, relative to the
//! manifest's directory.
//!
//! ```toml
//! [params]
//! preset = "small"
//! k = 4
//!
//! [prompts.positive]
//! road = "text/road.otf"
//!
//! [prompts.negative]
//! sky = "text/sky.otf"
//!
//! [[frames]]
//! image = "rgb/000.png"
//! vision_tokens = "tokens/000_v.otf"
//! vl_tokens = "tokens/000_vl.otf"
//! depth = "depth/000.otf"
//! pose = [1, 0, 0, 0,  0, 1, 0, 0,  0, 0, 1, 0,  0, 0, 0, 1]
//! intrinsics = { fx = 500.0, fy = 500.0, cx = 320.0, cy = 240.0 }
//! gt_mask = "gt/000.png"
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::Overrides;
use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose};

/// The manifest as written on disk.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFile {
    #[serde(default)]
    pub params: Overrides,
    #[serde(default)]
    pub prompts: PromptTable,
    pub frames: Vec<FrameSpec>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTable {
    #[serde(default)]
    pub positive: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub negative: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
    pub vision_tokens: PathBuf,
    pub vl_tokens: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<PathBuf>,
    /// Row-major 4x4 camera-to-world transform.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intrinsics: Option<IntrinsicsSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_mask: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntrinsicsSpec {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl ManifestFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let offset = e.span().map_or(0, |s| s.start as u64);
            Error::format(offset, format!("manifest: {}", e.message()))
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}

/// A frame with paths resolved and geometry validated.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub image: Option<PathBuf>,
    pub vision_tokens: PathBuf,
    pub vl_tokens: PathBuf,
    pub depth: Option<PathBuf>,
    pub pose: Pose,
    pub intrinsics: Option<Intrinsics>,
    pub gt_mask: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub path: PathBuf,
    pub params: Overrides,
    pub positives: Vec<(String, PathBuf)>,
    pub negatives: Vec<(String, PathBuf)>,
    pub frames: Vec<Frame>,
}

fn existing(base: &Path, p: &Path) -> Result<PathBuf> {
    let full = base.join(p);
    match std::fs::metadata(&full) {
        Ok(m) if m.is_file() => Ok(full),
        Ok(_) => Err(Error::io(
            &full,
            std::io::Error::new(std::io::ErrorKind::InvalidInput, "not a regular file"),
        )),
        Err(e) => Err(Error::io(&full, e)),
    }
}

impl Manifest {
    /// Parse and resolve a manifest. Every referenced file must exist.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file = ManifestFile::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::resolve(path, base, file)
    }

    pub fn resolve(path: &Path, base: &Path, file: ManifestFile) -> Result<Self> {
        let opt = |p: &Option<PathBuf>| p.as_deref().map(|p| existing(base, p)).transpose();
        let mut frames = Vec::with_capacity(file.frames.len());
        for (i, f) in file.frames.iter().enumerate() {
            let pose = match &f.pose {
                None => Pose::identity(),
                Some(v) => {
                    let m: &[f64; 16] = v.as_slice().try_into().map_err(|_| {
                        Error::validation(format!("frame {i}: pose has {} values, expected 16", v.len()))
                    })?;
                    Pose::from_row_major(m)
                        .map_err(|e| Error::validation(format!("frame {i}: {e}")))?
                }
            };
            let intrinsics = f
                .intrinsics
                .map(|k| Intrinsics::new(k.fx, k.fy, k.cx, k.cy))
                .transpose()
                .map_err(|e| Error::validation(format!("frame {i}: {e}")))?;
            frames.push(Frame {
                image: opt(&f.image)?,
                vision_tokens: existing(base, &f.vision_tokens)?,
                vl_tokens: existing(base, &f.vl_tokens)?,
                depth: opt(&f.depth)?,
                pose,
                intrinsics,
                gt_mask: opt(&f.gt_mask)?,
            });
        }
        let resolve_prompts = |t: &BTreeMap<String, PathBuf>| -> Result<Vec<(String, PathBuf)>> {
            t.iter()
                .map(|(n, p)| Ok((n.clone(), existing(base, p)?)))
                .collect()
        };
        Ok(Self {
            path: path.to_path_buf(),
            params: file.params,
            positives: resolve_prompts(&file.prompts.positive)?,
            negatives: resolve_prompts(&file.prompts.negative)?,
            frames,
        })
    }

    /// Path of a named prompt from either list.
    pub fn prompt_path(&self, name: &str) -> Option<&Path> {
        self.positives
            .iter()
            .chain(&self.negatives)
            .find(|(n, _)| n == name)
            .map(|(_, p)| p.as_path())
    }
}
