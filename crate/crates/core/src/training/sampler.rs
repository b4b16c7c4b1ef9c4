//! Balanced abnormal/normal mini-batch sampling.

use rand::seq::index::sample;
use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::objective::Label;

/// Indices into the dataset for one batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub abnormal: Vec<usize>,
    pub normal: Vec<usize>,
}

fn draw<R: Rng + ?Sized>(pool: &[usize], n: usize, rng: &mut R) -> Vec<usize> {
    if pool.len() >= n {
        sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect()
    } else {
        (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    }
}

/// Draws `batch_size` videos of each class: without replacement when the
/// class pool is large enough, with replacement otherwise.
pub fn sample_batch<R: Rng + ?Sized>(dataset: &Dataset, batch_size: usize, rng: &mut R) -> Result<Batch> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let abnormal = dataset.indices_of(Label::Abnormal);
    let normal = dataset.indices_of(Label::Normal);
    for (pool, label) in [(&abnormal, Label::Abnormal), (&normal, Label::Normal)] {
        if pool.is_empty() {
            return Err(Error::Dataset(format!("training split has no {} videos", label.as_str())));
        }
    }
    Ok(Batch {
        abnormal: draw(&abnormal, batch_size, rng),
        normal: draw(&normal, batch_size, rng),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Video;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dataset(n_abnormal: usize, n_normal: usize) -> Dataset {
        let video = |i: usize, label| Video {
            id: format!("v{i}"),
            label,
            features: Tensor::zeros(&[2, 4]),
            num_frames: 2,
            frame_labels: None,
        };
        Dataset {
            videos: (0..n_abnormal)
                .map(|i| video(i, Label::Abnormal))
                .chain((0..n_normal).map(|i| video(100 + i, Label::Normal)))
                .collect(),
        }
    }

    #[test]
    fn without_replacement_when_pool_suffices() {
        let ds = dataset(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let b = sample_batch(&ds, 2, &mut rng).unwrap();
            assert_eq!(b.abnormal.len(), 2);
            assert_ne!(b.abnormal[0], b.abnormal[1]);
            assert_ne!(b.normal[0], b.normal[1]);
            assert!(b.abnormal.iter().all(|&i| ds.videos[i].label == Label::Abnormal));
            assert!(b.normal.iter().all(|&i| ds.videos[i].label == Label::Normal));
        }
    }

    #[test]
    fn with_replacement_when_pool_is_small() {
        let ds = dataset(1, 4);
        let b = sample_batch(&ds, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b.abnormal, vec![0, 0]);
    }

    #[test]
    fn deterministic_sequence() {
        let ds = dataset(5, 7);
        let seq = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..5).map(|_| sample_batch(&ds, 3, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(seq(4), seq(4));
    }

    #[test]
    fn missing_class_errors() {
        let ds = dataset(0, 3);
        assert!(matches!(
            sample_batch(&ds, 2, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::Dataset(_))
        ));
    }
}
