//! Feature files, manifests, crop reduction and the synthetic generator.

pub mod codec;
pub mod manifest;
pub mod synth;

use std::path::Path;

use crate::error::{Error, Result};
use crate::objective::Label;
use crate::tensor::Tensor;

pub use codec::{read_feature_file, write_feature_file, FeatureFile};
pub use manifest::{Manifest, ManifestEntry};
pub use synth::{synth_generate, SynthConfig, SynthOutput};

pub const DEFAULT_SNIPPETS: usize = 32;
pub const DEFAULT_FRAMES_PER_SNIPPET: usize = 16;

/// How the crop axis of a feature file is collapsed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CropMode {
    #[default]
    Mean,
    Select(usize),
}

/// Collapses a `crops x T x D` tensor to `T x D`.
pub fn crop_reduce(features: &Tensor, mode: CropMode) -> Result<Tensor> {
    let &[crops, t, d] = features.shape() else {
        return Err(Error::shape("crop_reduce", format!("expected crops x T x D, got {:?}", features.shape())));
    };
    let plane = t * d;
    let data = features.data();
    let out = match mode {
        CropMode::Select(i) if i >= crops => {
            return Err(Error::invalid("crop_reduce", format!("crop {i} out of range for {crops} crops")));
        }
        CropMode::Select(i) => data[i * plane..(i + 1) * plane].to_vec(),
        CropMode::Mean => {
            let mut acc = vec![0.0; plane];
            for crop in data.chunks_exact(plane) {
                for (a, &v) in acc.iter_mut().zip(crop) {
                    *a += v;
                }
            }
            let n = crops as f64;
            acc.iter_mut().for_each(|a| *a /= n);
            acc
        }
    };
    Tensor::new(vec![t, d], out)
}

/// One video: snippet features plus label and frame metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    /// `crops x T x D`.
    pub features: Tensor,
    pub label: Label,
    pub num_frames: usize,
    pub frames_per_snippet: usize,
    pub frame_labels: Option<Vec<u8>>,
}

impl FeatureRecord {
    pub fn snippets(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        let entry = |detail: String| Error::Entry {
            id: self.id.clone(),
            detail,
        };
        let t = self.snippets();
        let by_duration = self.num_frames.div_ceil(self.frames_per_snippet.max(1));
        if t != DEFAULT_SNIPPETS && t != by_duration {
            return Err(entry(format!(
                "{t} snippets matches neither fixed {DEFAULT_SNIPPETS}-segment mode nor {} frames / {} per snippet",
                self.num_frames, self.frames_per_snippet
            )));
        }
        if self.num_frames < t {
            return Err(entry(format!("{} frames cannot cover {t} snippets", self.num_frames)));
        }
        if let Some(labels) = &self.frame_labels {
            if labels.len() != self.num_frames {
                return Err(entry(format!(
                    "{} frame labels for {} frames",
                    labels.len(),
                    self.num_frames
                )));
            }
            if self.label == Label::Normal && labels.iter().any(|&l| l != 0) {
                return Err(entry("normal video has positive frame labels".into()));
            }
        }
        Ok(())
    }

    /// Reads the feature file (and frame labels, if listed) of an entry.
    pub fn load(entry: &ManifestEntry) -> Result<Self> {
        let file = read_feature_file(&entry.feature_path)?;
        let frame_labels = entry
            .frame_labels_path
            .as_ref()
            .map(manifest::read_frame_labels)
            .transpose()?;
        let record = Self {
            id: entry.id.clone(),
            features: file.to_tensor(),
            label: entry.label,
            num_frames: entry.num_frames,
            frames_per_snippet: DEFAULT_FRAMES_PER_SNIPPET,
            frame_labels,
        };
        record.validate()?;
        Ok(record)
    }
}

/// A crop-reduced video held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub id: String,
    pub label: Label,
    /// `T x D`.
    pub features: Tensor,
    pub num_frames: usize,
    pub frame_labels: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub videos: Vec<Video>,
}

impl Dataset {
    pub fn from_manifest(manifest: &Manifest, mode: CropMode) -> Result<Self> {
        let mut videos = Vec::with_capacity(manifest.entries.len());
        for entry in &manifest.entries {
            let record = FeatureRecord::load(entry)?;
            let features = crop_reduce(&record.features, mode).map_err(|e| Error::Entry {
                id: entry.id.clone(),
                detail: e.to_string(),
            })?;
            videos.push(Video {
                id: record.id,
                label: record.label,
                features,
                num_frames: record.num_frames,
                frame_labels: record.frame_labels,
            });
        }
        let ds = Self { videos };
        ds.check_uniform()?;
        Ok(ds)
    }

    pub fn load(path: impl AsRef<Path>, mode: CropMode) -> Result<Self> {
        Self::from_manifest(&Manifest::load(path)?, mode)
    }

    fn check_uniform(&self) -> Result<()> {
        let Some(first) = self.videos.first() else {
            return Ok(());
        };
        let dim = first.features.shape()[1];
        for v in &self.videos {
            if v.features.shape()[1] != dim {
                return Err(Error::Entry {
                    id: v.id.clone(),
                    detail: format!("feature dim {} differs from {dim}", v.features.shape()[1]),
                });
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.videos.first().map(|v| v.features.shape()[1])
    }

    pub fn snippets(&self) -> Option<usize> {
        self.videos.first().map(|v| v.features.shape()[0])
    }

    pub fn indices_of(&self, label: Label) -> Vec<usize> {
        self.videos
            .iter()
            .enumerate()
            .filter(|(_, v)| v.label == label)
            .map(|(i, _)| i)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
    }

    #[test]
    fn single_crop_is_identity() {
        let x = random(&[1, 4, 3], 1);
        let r = crop_reduce(&x, CropMode::Mean).unwrap();
        assert_eq!(r.data(), x.data());
        assert_eq!(r.shape(), &[4, 3]);
    }

    #[test]
    fn opposite_crops_cancel() {
        let x = random(&[1, 4, 3], 2);
        let neg: Vec<f64> = x.data().iter().map(|v| -v).collect();
        let both = Tensor::new(vec![2, 4, 3], [x.data(), &neg].concat()).unwrap();
        let r = crop_reduce(&both, CropMode::Mean).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ten_crop_mean_matches_elementwise_average() {
        let x = random(&[10, 5, 6], 3);
        let r = crop_reduce(&x, CropMode::Mean).unwrap();
        for t in 0..5 {
            for d in 0..6 {
                let want: f64 = (0..10).map(|c| x.data()[(c * 5 + t) * 6 + d]).sum::<f64>() / 10.0;
                assert!((r.data()[t * 6 + d] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn select_mode() {
        let x = random(&[3, 2, 2], 4);
        assert_eq!(crop_reduce(&x, CropMode::Select(2)).unwrap().data(), &x.data()[8..12]);
        assert!(crop_reduce(&x, CropMode::Select(3)).is_err());
    }

    #[test]
    fn record_validation() {
        let mut r = FeatureRecord {
            id: "v".into(),
            features: Tensor::zeros(&[1, 32, 4]),
            label: Label::Normal,
            num_frames: 100,
            frames_per_snippet: 16,
            frame_labels: Some(vec![0; 100]),
        };
        assert!(r.validate().is_ok());
        r.frame_labels = Some(vec![0; 99]);
        assert!(r.validate().is_err());
        r.frame_labels = Some([vec![1], vec![0; 99]].concat());
        assert!(r.validate().is_err());
        r.frame_labels = None;
        r.features = Tensor::zeros(&[1, 7, 4]);
        assert!(r.validate().is_ok());
        r.features = Tensor::zeros(&[1, 9, 4]);
        assert!(r.validate().is_err());
    }

    proptest! {
        #[test]
        fn mean_commutes_with_snippet_permutation(seed in any::<u64>(), crops in 1usize..5) {
            let (t, d) = (6, 3);
            let x = random(&[crops, t, d], seed);
            let mut perm: Vec<usize> = (0..t).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
            for i in (1..t).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let mut permuted = Vec::new();
            for c in 0..crops {
                for &p in &perm {
                    permuted.extend_from_slice(&x.data()[(c * t + p) * d..][..d]);
                }
            }
            let xp = Tensor::new(vec![crops, t, d], permuted).unwrap();
            let a = crop_reduce(&x, CropMode::Mean).unwrap();
            let b = crop_reduce(&xp, CropMode::Mean).unwrap();
            for (i, &p) in perm.iter().enumerate() {
                prop_assert_eq!(b.row(i), a.row(p));
            }
        }
    }
}
