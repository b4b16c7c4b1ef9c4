//! Central finite-difference verification of analytic gradients.

pub mod suite;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    pub eps: f64,
    /// Check at most this many coordinates per input, chosen at random.
    /// `None` checks every coordinate.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckReport {
    /// max over checked coordinates of
    /// `|analytic − numeric| / max(1, |analytic|, |numeric|)`
    pub max_rel_error: f64,
    /// Distance of the probe point from the nearest non-differentiable
    /// point, as observed by the graph.
    pub kink_margin: f64,
    pub coords_checked: usize,
}

fn evaluate<F>(f: &F, inputs: &[Tensor], with_grad: bool) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.requires_grad = with_grad;
            g.leaf(t)
        })
        .collect::<Result<Vec<_>>>()?;
    let root = f(&mut g, &vars)?;
    if !g.value(root).is_scalar() {
        return Err(Error::RootNotScalar(g.value(root).shape().to_vec()));
    }
    Ok((g, vars, root))
}

/// Compares the gradient of the scalar function `f` at `inputs` against
/// central differences with step `opts.eps`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: &CheckOptions) -> Result<CheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_with(f, inputs, opts, |_| {})
}

/// As [`grad_check`], with a hook applied to the analytic graph before its
/// forward pass runs.
pub fn grad_check_with<F, H>(f: F, inputs: &[Tensor], opts: &CheckOptions, prepare: H) -> Result<CheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    H: Fn(&mut Graph),
{
    let mut g = Graph::new();
    prepare(&mut g);
    let vars = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_grad()))
        .collect::<Result<Vec<_>>>()?;
    let root = f(&mut g, &vars)?;
    if !g.value(root).is_scalar() {
        return Err(Error::RootNotScalar(g.value(root).shape().to_vec()));
    }
    g.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = inputs.to_vec();
    let mut max_rel_error = 0.0f64;
    let mut coords_checked = 0;
    for (which, grads) in analytic.iter().enumerate() {
        let n = inputs[which].numel();
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(limit) if limit < n => {
                let mut c = sample(&mut rng, n, limit).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for j in coords {
            let base = inputs[which].data()[j];
            probe[which].data_mut()[j] = base + opts.eps;
            let (gp, _, rp) = evaluate(&f, &probe, false)?;
            probe[which].data_mut()[j] = base - opts.eps;
            let (gm, _, rm) = evaluate(&f, &probe, false)?;
            probe[which].data_mut()[j] = base;

            let numeric = (gp.value(rp).item() - gm.value(rm).item()) / (2.0 * opts.eps);
            let a = grads[j];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            max_rel_error = max_rel_error.max(rel);
            coords_checked += 1;
        }
    }
    Ok(CheckReport {
        max_rel_error,
        kink_margin: g.kink_margin(),
        coords_checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn sigmoid_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[3, 4], &mut rng);
        let r = grad_check(
            |g, v| {
                let s = g.sigmoid(v[0])?;
                g.sum(s)
            },
            &[x],
            &CheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.coords_checked, 12);
    }

    #[test]
    fn conv1d_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = [random(&[5, 3], &mut rng), random(&[2, 3, 3], &mut rng), random(&[2], &mut rng)];
        let r = grad_check(
            |g, v| {
                let y = g.conv1d(v[0], v[1], v[2], 2)?;
                let y2 = g.mul(y, y)?;
                g.sum(y2)
            },
            &inputs,
            &CheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn topk_mean_distinct() {
        let x = Tensor::vector(vec![0.3, -1.2, 1.7, 0.9, -0.4]);
        let r = grad_check(|g, v| g.topk_mean(v[0], 2), &[x], &CheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert!((r.kink_margin - 0.6).abs() < 1e-12);
    }

    #[test]
    fn non_scalar_is_rejected() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let r = grad_check(|g, v| g.sigmoid(v[0]), &[x], &CheckOptions::default());
        assert!(matches!(r, Err(Error::RootNotScalar(_))));
    }

    #[test]
    fn detects_wrong_gradient() {
        let x = Tensor::vector(vec![0.4, -0.3]);
        let r = grad_check_with(
            |g, v| {
                let s = g.sigmoid(v[0])?;
                let s = g.scale(s, 50.0)?;
                g.sum(s)
            },
            &[x],
            &CheckOptions::default(),
            Graph::inject_sigmoid_grad_fault,
        )
        .unwrap();
        assert!(r.max_rel_error > 1e-3, "{r:?}");
    }

    #[test]
    fn coordinate_subsampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[10, 10], &mut rng);
        let opts = CheckOptions {
            max_coords_per_input: Some(7),
            ..CheckOptions::default()
        };
        let r = grad_check(|g, v| g.sum(v[0]), &[x], &opts).unwrap();
        assert_eq!(r.coords_checked, 7);
    }
}
