//! JSON-lines dataset manifests.
//!
//! One object per line:
//! `{"id": str, "feature_path": str, "label": "normal"|"abnormal", "num_frames": int, "frame_labels_path": str?}`.
//! Relative paths resolve against the manifest's directory. Labels are
//! matched case-insensitively. Blank lines are ignored.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::Label;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub feature_path: PathBuf,
    pub label: Label,
    pub num_frames: usize,
    pub frame_labels_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub path: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

/// Serialized form of one manifest line.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestLine {
    pub id: String,
    pub feature_path: String,
    pub label: String,
    pub num_frames: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_labels_path: Option<String>,
}

pub fn parse_label(s: &str) -> Option<Label> {
    match s.to_ascii_lowercase().as_str() {
        "normal" => Some(Label::Normal),
        "abnormal" => Some(Label::Abnormal),
        _ => None,
    }
}

impl Manifest {
    /// Parses and validates a manifest. Referenced feature and frame-label
    /// files must exist.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |detail: String| Error::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                detail,
            };
            let raw: ManifestLine = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
            let label = parse_label(&raw.label).ok_or_else(|| malformed(format!("unknown label `{}`", raw.label)))?;
            if raw.num_frames == 0 {
                return Err(malformed("num_frames must be positive".into()));
            }
            if !seen.insert(raw.id.clone()) {
                return Err(Error::DuplicateId(raw.id));
            }
            let entry = ManifestEntry {
                feature_path: base.join(&raw.feature_path),
                frame_labels_path: raw.frame_labels_path.as_ref().map(|p| base.join(p)),
                id: raw.id,
                label,
                num_frames: raw.num_frames,
            };
            if !entry.feature_path.is_file() {
                return Err(Error::Entry {
                    id: entry.id,
                    detail: format!("feature file {} not found", entry.feature_path.display()),
                });
            }
            if let Some(p) = &entry.frame_labels_path {
                if !p.is_file() {
                    return Err(Error::Entry {
                        id: entry.id,
                        detail: format!("frame-label file {} not found", p.display()),
                    });
                }
            }
            entries.push(entry);
        }
        Ok(Self {
            path: path.to_path_buf(),
            entries,
        })
    }
}

/// Writes manifest lines, one JSON object per line.
pub fn write_manifest(path: impl AsRef<Path>, lines: &[ManifestLine]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for l in lines {
        out.push_str(&serde_json::to_string(l)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parses a frame-label file: one ASCII `0`/`1` per frame, newline-terminated.
pub fn read_frame_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let body = text.strip_suffix('\n').unwrap_or(&text);
    let body = body.strip_suffix('\r').unwrap_or(body);
    body.bytes()
        .enumerate()
        .map(|(i, b)| match b {
            b'0' => Ok(0),
            b'1' => Ok(1),
            other => Err(Error::Manifest {
                path: path.to_path_buf(),
                line: 1,
                detail: format!("frame {i}: expected '0' or '1', found {:?}", other as char),
            }),
        })
        .collect()
}

pub fn write_frame_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut text: String = labels.iter().map(|&l| if l == 0 { '0' } else { '1' }).collect();
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
