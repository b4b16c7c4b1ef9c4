//! Synthetic snippet-feature datasets with a known anomaly layout.
//!
//! Each snippet is an isotropic Gaussian direction scaled to a target norm.
//! Normal snippets have norms near `normal_mag_mean`; every abnormal video
//! carries one contiguous run of `anomaly_snippets_per_video` snippets with
//! norms near `abnormal_mag_mean`. Test videos get frame-label files.
//!
//! Directions are drawn with a shared per-coordinate mean so that, as with
//! features from a pretrained extractor, snippets cluster in one region of
//! feature space rather than spreading over the whole sphere.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::codec::{write_feature_file, FeatureFile};
use super::manifest::{write_frame_labels, write_manifest, ManifestLine};
use super::DEFAULT_FRAMES_PER_SNIPPET;
use crate::error::{Error, Result};
use crate::objective::Label;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_normal: usize,
    pub n_abnormal: usize,
    pub n_test_normal: usize,
    pub n_test_abnormal: usize,
    pub snippets: usize,
    pub dim: usize,
    pub crops: usize,
    pub normal_mag_mean: f64,
    pub abnormal_mag_mean: f64,
    pub anomaly_snippets_per_video: usize,
    /// Standard deviation of snippet norms around their class mean.
    pub noise_std: f64,
    /// Mean of every direction coordinate before normalization, in units
    /// of its standard deviation. Zero gives isotropic directions.
    pub direction_mean: f64,
    pub frames_per_snippet: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_normal: 20,
            n_abnormal: 20,
            n_test_normal: 10,
            n_test_abnormal: 10,
            snippets: 32,
            dim: 64,
            crops: 1,
            normal_mag_mean: 1.0,
            abnormal_mag_mean: 3.0,
            anomaly_snippets_per_video: 3,
            noise_std: 0.1,
            direction_mean: 1.0,
            frames_per_snippet: DEFAULT_FRAMES_PER_SNIPPET,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_normal + self.n_test_normal == 0 && self.n_abnormal + self.n_test_abnormal == 0 {
            return bad("no videos requested".into());
        }
        if self.snippets == 0 || self.dim == 0 || self.crops == 0 || self.frames_per_snippet == 0 {
            return bad("snippets, dim, crops and frames per snippet must be positive".into());
        }
        if self.anomaly_snippets_per_video == 0 || self.anomaly_snippets_per_video > self.snippets {
            return bad(format!(
                "anomaly snippets per video {} outside 1..={}",
                self.anomaly_snippets_per_video, self.snippets
            ));
        }
        if !(self.normal_mag_mean > 0.0) || !(self.abnormal_mag_mean > self.normal_mag_mean) {
            return bad(format!(
                "need 0 < normal_mag_mean ({}) < abnormal_mag_mean ({})",
                self.normal_mag_mean, self.abnormal_mag_mean
            ));
        }
        if !self.direction_mean.is_finite() {
            return bad(format!("direction_mean {} must be finite", self.direction_mean));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return bad(format!("noise_std {} must be finite and non-negative", self.noise_std));
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        self.snippets * self.frames_per_snippet
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub files_written: usize,
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn snippet(&mut self, norm_mean: f64, out: &mut Vec<f32>, crops: &mut [Vec<f32>]) {
        let d = self.cfg.dim;
        let dir: Vec<f64> = (0..d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                self.cfg.direction_mean + z
            })
            .collect();
        let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        let z: f64 = StandardNormal.sample(&mut self.rng);
        let norm = (norm_mean + self.cfg.noise_std * z).abs();
        let base: Vec<f64> = dir.iter().map(|v| v / len * norm).collect();
        out.clear();
        out.extend(base.iter().map(|&v| v as f32));
        // Extra crops are jittered copies of the first.
        let jitter = self.cfg.noise_std / (d as f64).sqrt();
        for crop in crops.iter_mut() {
            crop.extend(base.iter().map(|&v| {
                let e: f64 = StandardNormal.sample(&mut self.rng);
                (v + jitter * e) as f32
            }));
        }
    }

    /// Returns the feature file and the per-snippet anomaly mask.
    fn video(&mut self, label: Label) -> Result<(FeatureFile, Vec<bool>)> {
        let cfg = self.cfg;
        let mut mask = vec![false; cfg.snippets];
        if label == Label::Abnormal {
            let run = cfg.anomaly_snippets_per_video;
            let start = self.rng.random_range(0..=cfg.snippets - run);
            mask[start..start + run].iter_mut().for_each(|m| *m = true);
        }
        let mut first = Vec::with_capacity(cfg.snippets * cfg.dim);
        let mut others = vec![Vec::with_capacity(cfg.snippets * cfg.dim); cfg.crops - 1];
        let mut row = Vec::with_capacity(cfg.dim);
        for &anomalous in &mask {
            let mean = if anomalous {
                cfg.abnormal_mag_mean
            } else {
                cfg.normal_mag_mean
            };
            self.snippet(mean, &mut row, &mut others);
            first.extend_from_slice(&row);
        }
        let data = std::iter::once(first).chain(others).flatten().collect();
        Ok((FeatureFile::new(cfg.crops, cfg.snippets, cfg.dim, data)?, mask))
    }
}

/// Writes `train.jsonl`, `test.jsonl`, `features/*.vswf` and
/// `labels/*.txt` under `out_dir`.
pub fn synth_generate(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<SynthOutput> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    for sub in ["features", "labels"] {
        let p = out_dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut gen = Generator {
        cfg,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };
    let mut files_written = 0;
    let mut emit = |split: &str, counts: [(Label, usize); 2]| -> Result<PathBuf> {
        let mut lines = Vec::new();
        for (label, n) in counts {
            for i in 0..n {
                let id = format!("{split}_{}_{i:04}", label.as_str());
                let (file, mask) = gen.video(label)?;
                let feature_rel = format!("features/{id}.vswf");
                write_feature_file(out_dir.join(&feature_rel), &file)?;
                files_written += 1;
                let frame_labels_path = if split == "test" {
                    let rel = format!("labels/{id}.txt");
                    let frames: Vec<u8> = mask
                        .iter()
                        .flat_map(|&m| std::iter::repeat_n(u8::from(m), cfg.frames_per_snippet))
                        .collect();
                    write_frame_labels(out_dir.join(&rel), &frames)?;
                    files_written += 1;
                    Some(rel)
                } else {
                    None
                };
                lines.push(ManifestLine {
                    id,
                    feature_path: feature_rel,
                    label: label.as_str().to_string(),
                    num_frames: cfg.num_frames(),
                    frame_labels_path,
                });
            }
        }
        let path = out_dir.join(format!("{split}.jsonl"));
        write_manifest(&path, &lines)?;
        Ok(path)
    };
    let train_manifest = emit("train", [(Label::Normal, cfg.n_normal), (Label::Abnormal, cfg.n_abnormal)])?;
    let test_manifest = emit(
        "test",
        [(Label::Normal, cfg.n_test_normal), (Label::Abnormal, cfg.n_test_abnormal)],
    )?;
    Ok(SynthOutput {
        train_manifest,
        test_manifest,
        files_written,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CropMode, Dataset, Manifest};

    fn small() -> SynthConfig {
        SynthConfig {
            n_normal: 4,
            n_abnormal: 4,
            n_test_normal: 2,
            n_test_abnormal: 2,
            snippets: 32,
            dim: 64,
            crops: 1,
            seed: 1,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn counts() {
        let dir = tempfile::tempdir().unwrap();
        let out = synth_generate(&small(), dir.path()).unwrap();
        let train = Manifest::load(&out.train_manifest).unwrap();
        assert_eq!(train.entries.len(), 8);
        assert_eq!(fs::read_dir(dir.path().join("features")).unwrap().count(), 12);
        assert!(train.entries.iter().all(|e| e.frame_labels_path.is_none()));
    }

    #[test]
    fn abnormal_frame_labels_have_exact_positive_count() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let out = synth_generate(&cfg, dir.path()).unwrap();
        let test = Dataset::load(&out.test_manifest, CropMode::Mean).unwrap();
        for v in &test.videos {
            let ones = v.frame_labels.as_ref().unwrap().iter().filter(|&&l| l == 1).count();
            match v.label {
                Label::Abnormal => assert_eq!(ones, cfg.anomaly_snippets_per_video * cfg.frames_per_snippet),
                Label::Normal => assert_eq!(ones, 0),
            }
            assert_eq!(v.frame_labels.as_ref().unwrap().len(), v.num_frames);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let mut cfg = small();
        cfg.crops = 3;
        synth_generate(&cfg, a.path()).unwrap();
        synth_generate(&cfg, b.path()).unwrap();
        for rel in ["train.jsonl", "test.jsonl", "features/train_abnormal_0002.vswf", "labels/test_abnormal_0001.txt"] {
            assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap());
        }
    }

    #[test]
    fn abnormal_top_magnitude_exceeds_normal() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            normal_mag_mean: 5.0,
            abnormal_mag_mean: 15.0,
            ..small()
        };
        let out = synth_generate(&cfg, dir.path()).unwrap();
        let ds = Dataset::load(&out.train_manifest, CropMode::Mean).unwrap();
        let top1 = |label| {
            let tops: Vec<f64> = ds
                .videos
                .iter()
                .filter(|v| v.label == label)
                .map(|v| v.features.rows().map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).fold(0.0, f64::max))
                .collect();
            tops.iter().sum::<f64>() / tops.len() as f64
        };
        assert!(top1(Label::Abnormal) > top1(Label::Normal));
        assert!(top1(Label::Abnormal) > 12.0);
    }

    #[test]
    fn invalid_configs() {
        let mut c = small();
        c.anomaly_snippets_per_video = 33;
        assert!(c.validate().is_err());
        let mut c = small();
        c.abnormal_mag_mean = c.normal_mag_mean;
        assert!(c.validate().is_err());
        let mut c = small();
        c.dim = 0;
        assert!(c.validate().is_err());
    }
}
