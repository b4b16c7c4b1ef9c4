//! Deterministic inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vad_core::{Dataset, FeatureFile, Label, Tensor, Video};

/// Uniform entries in `[-1, 1]`.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect()).expect("shape")
}

/// A multi-crop feature file with uniform entries in `[-1, 1]`.
pub fn random_feature_file(crops: usize, snippets: usize, dim: usize, seed: u64) -> FeatureFile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..crops * snippets * dim).map(|_| rng.random_range(-1.0f32..=1.0)).collect();
    FeatureFile::new(crops, snippets, dim, data).expect("shape")
}

/// `n` scores with roughly balanced binary labels; positives score higher on
/// average.
pub fn scored_labels(n: usize, seed: u64) -> (Vec<f64>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let label = rng.random_bool(0.5) as u8;
            (rng.random::<f64>() + 0.5 * f64::from(label), label)
        })
        .unzip()
}

/// `per_class` normal and `per_class` abnormal videos of `T x D` features,
/// each covering `16 * T` frames. Abnormal videos mark their first half as
/// anomalous.
pub fn balanced_dataset(per_class: usize, snippets: usize, dim: usize, seed: u64) -> Dataset {
    let num_frames = 16 * snippets;
    let videos = (0..2 * per_class)
        .map(|i| {
            let label = if i < per_class { Label::Normal } else { Label::Abnormal };
            let mut features = random_tensor(&[snippets, dim], seed.wrapping_add(i as u64));
            if label == Label::Abnormal {
                features.data_mut().iter_mut().for_each(|x| *x *= 3.0);
            }
            let frame_labels = (0..num_frames)
                .map(|f| u8::from(label == Label::Abnormal && f < num_frames / 2))
                .collect();
            Video {
                id: format!("v{i:04}"),
                label,
                features,
                num_frames,
                frame_labels: Some(frame_labels),
            }
        })
        .collect();
    Dataset { videos }
}
