//! Gradient checks over every graph operator, the model modules and every
//! loss term, each repeated over several random probe points.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check_with, CheckOptions};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{
    attention_forward, classifier_forward, long_range_module, model_forward, parameter_shapes, short_range_module,
    BoundModel, ModelParams,
};
use crate::objective::{
    classification_loss_node, magnitude_loss_node, smoothness_node, sparsity_node, total_loss_nodes, BagNodes, Label,
    LossWeights,
};
use crate::tensor::Tensor;

/// Probe points closer than this many step sizes to a relu kink, a top-k
/// tie or a zero norm are redrawn.
pub const KINK_CLEARANCE_STEPS: f64 = 10.0;
const MAX_REDRAWS: usize = 500;
const DROPOUT_SEED: u64 = 0x5eed;

#[derive(Debug, Clone, Copy)]
pub struct SuiteOptions {
    pub snippets: usize,
    pub feature_dim: usize,
    pub seeds: usize,
    pub seed: u64,
    pub eps: f64,
    pub tolerance: f64,
    /// Coordinates sampled per input tensor; large parameter matrices are
    /// only spot-checked.
    pub max_coords_per_input: usize,
    pub inject_fault: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            snippets: 4,
            feature_dim: 8,
            seeds: 10,
            seed: 0,
            eps: 1e-5,
            tolerance: 1e-4,
            max_coords_per_input: 24,
            inject_fault: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRow {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub seeds: usize,
    pub redraws: usize,
    pub coords_checked: usize,
    pub passed: bool,
}

impl fmt::Display for SuiteRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<22} {:>12.3e} {:>6} {:>8} {:>8}  {}",
            self.name,
            self.max_rel_error,
            self.seeds,
            self.coords_checked,
            self.redraws,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

pub const TABLE_HEADER: &str = "check                  max_rel_err  seeds   coords  redraws  result";

type CheckFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;
type InputFn = Box<dyn Fn(&mut ChaCha8Rng) -> Result<Vec<Tensor>>>;

/// One row of the suite: how to draw inputs and which scalar to check.
struct Case {
    name: &'static str,
    inputs: InputFn,
    f: CheckFn,
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect())
        .expect("suite shapes are non-empty")
}

/// Reduces any tensor to a scalar through a fixed random weighting, so
/// every output coordinate carries a distinct gradient.
fn project(g: &mut Graph, y: Var) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(shape.iter().product::<usize>() as u64);
    let w = g.constant(uniform(&shape, &mut rng))?;
    let prod = g.mul(y, w)?;
    g.sum(prod)
}

fn unary(name: &'static str, shape: Vec<usize>, op: fn(&mut Graph, Var) -> Result<Var>) -> Case {
    Case {
        name,
        inputs: Box::new(move |rng| Ok(vec![uniform(&shape, rng)])),
        f: Box::new(move |g, v| {
            let y = op(g, v[0])?;
            project(g, y)
        }),
    }
}

fn binary(name: &'static str, a: Vec<usize>, b: Vec<usize>, op: fn(&mut Graph, Var, Var) -> Result<Var>) -> Case {
    Case {
        name,
        inputs: Box::new(move |rng| Ok(vec![uniform(&a, rng), uniform(&b, rng)])),
        f: Box::new(move |g, v| {
            let y = op(g, v[0], v[1])?;
            project(g, y)
        }),
    }
}

fn conv(name: &'static str, t: usize, d: usize, dilation: usize) -> Case {
    let c_out = (d / 2).max(1);
    Case {
        name,
        inputs: Box::new(move |rng| Ok(vec![uniform(&[t, d], rng), uniform(&[c_out, d, 3], rng), uniform(&[c_out], rng)])),
        f: Box::new(move |g, v| {
            let y = g.conv1d(v[0], v[1], v[2], dilation)?;
            project(g, y)
        }),
    }
}

/// Parameter tensors drawn from the model initializer; features from the
/// uniform probe range.
fn model_inputs(t: usize, d: usize, bags: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Tensor>> {
    let params = ModelParams::init(d, t, rng.random())?;
    let mut out: Vec<Tensor> = (0..bags).map(|_| uniform(&[t, d], rng)).collect();
    out.extend(params.named_tensors().into_iter().map(|(_, t)| t));
    Ok(out)
}

fn bound(g: &Graph, v: &[Var], bags: usize, d: usize) -> Result<BoundModel> {
    BoundModel::from_vars(g, v[bags..].to_vec(), d, crate::model::DEFAULT_DROPOUT)
}

/// Training-mode forward with a dropout mask fixed across evaluations.
fn bag(g: &mut Graph, m: &BoundModel, f: Var, label: Label) -> Result<BagNodes> {
    let mut rng = ChaCha8Rng::seed_from_u64(DROPOUT_SEED + label.target() as u64);
    model_forward(g, m, f, label, true, &mut rng)
}

fn model_case(name: &'static str, t: usize, d: usize, bags: usize, f: CheckFn) -> Case {
    Case {
        name,
        inputs: Box::new(move |rng| model_inputs(t, d, bags, rng)),
        f,
    }
}

fn loss_case(
    name: &'static str,
    t: usize,
    d: usize,
    term: fn(&mut Graph, &BagNodes, &BagNodes, &LossWeights) -> Result<Var>,
) -> Case {
    model_case(
        name,
        t,
        d,
        2,
        Box::new(move |g, v| {
            let m = bound(g, v, 2, d)?;
            let a = bag(g, &m, v[0], Label::Abnormal)?;
            let n = bag(g, &m, v[1], Label::Normal)?;
            term(g, &a, &n, &LossWeights::default())
        }),
    )
}

fn cases(t: usize, d: usize) -> Vec<Case> {
    let k = LossWeights::default().k.min(t);
    let mut out = vec![
        conv("conv1d", t, d, 1),
        conv("conv1d_dilated_2", t, d, 2),
        conv("conv1d_dilated_4", t, d, 4),
        binary("matmul", vec![t, d], vec![d, 3], Graph::matmul),
        Case {
            name: "linear",
            inputs: Box::new(move |rng| Ok(vec![uniform(&[t, d], rng), uniform(&[d, 5], rng), uniform(&[5], rng)])),
            f: Box::new(|g, v| {
                let y = g.linear(v[0], v[1], v[2])?;
                project(g, y)
            }),
        },
        unary("transpose", vec![t, d], Graph::transpose),
        Case {
            name: "reshape",
            inputs: Box::new(move |rng| Ok(vec![uniform(&[t, d], rng)])),
            f: Box::new(move |g, v| {
                let y = g.reshape(v[0], &[t * d])?;
                project(g, y)
            }),
        },
        binary("add", vec![t, d], vec![t, d], Graph::add),
        binary("sub", vec![t, d], vec![t, d], Graph::sub),
        binary("mul", vec![t, d], vec![t, d], Graph::mul),
        unary("scale", vec![t, d], |g, x| g.scale(x, -1.7)),
        unary("add_scalar", vec![t, d], |g, x| g.add_scalar(x, 0.3)),
        binary("concat_cols", vec![t, d], vec![t, 2], |g, a, b| g.concat_cols(&[a, b, a])),
        unary("relu", vec![t, d], Graph::relu),
        unary("sigmoid", vec![t, d], Graph::sigmoid),
        unary("dropout", vec![t, d], |g, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(DROPOUT_SEED);
            g.dropout(x, 0.5, true, &mut rng)
        }),
        unary("l2_norm_rows", vec![t, d], Graph::l2_norm_rows),
        Case {
            name: "topk_mean",
            inputs: Box::new(move |rng| Ok(vec![uniform(&[t * 2], rng)])),
            f: Box::new(move |g, v| g.topk_mean(v[0], k)),
        },
        binary("select_mean", vec![t], vec![t], move |g, key, values| {
            let idx = g.select_topk(key, 2.min(g.value(key).numel()))?;
            g.select_mean(values, &idx)
        }),
        unary("sum", vec![t, d], Graph::sum),
        unary("sq_diff_sum", vec![t], Graph::sq_diff_sum),
        unary("bce_target_0", vec![1], |g, x| {
            let p = g.sigmoid(x)?;
            g.bce(p, 0.0)
        }),
        unary("bce_target_1", vec![1], |g, x| {
            let p = g.sigmoid(x)?;
            g.bce(p, 1.0)
        }),
    ];

    out.push(model_case(
        "long_range",
        t,
        d,
        1,
        Box::new(move |g, v| {
            let m = bound(g, v, 1, d)?;
            let y = long_range_module(g, &m, v[0])?.output;
            project(g, y)
        }),
    ));
    out.push(model_case(
        "short_range",
        t,
        d,
        1,
        Box::new(move |g, v| {
            let m = bound(g, v, 1, d)?;
            let y = short_range_module(g, &m, v[0])?;
            project(g, y)
        }),
    ));
    out.push(model_case(
        "attention_forward",
        t,
        d,
        1,
        Box::new(move |g, v| {
            let m = bound(g, v, 1, d)?;
            let y = attention_forward(g, &m, v[0])?.output;
            project(g, y)
        }),
    ));
    out.push(model_case(
        "classifier",
        t,
        d,
        1,
        Box::new(move |g, v| {
            let m = bound(g, v, 1, d)?;
            let mut rng = ChaCha8Rng::seed_from_u64(DROPOUT_SEED);
            let y = classifier_forward(g, &m, v[0], true, &mut rng)?;
            project(g, y)
        }),
    ));

    out.push(loss_case("loss_magnitude", t, d, |g, a, n, w| {
        Ok(magnitude_loss_node(g, a, n, w.margin, w.k)?.0)
    }));
    out.push(loss_case("loss_bce_abnormal", t, d, |g, a, _, w| classification_loss_node(g, a, w.k)));
    out.push(loss_case("loss_bce_normal", t, d, |g, _, n, w| classification_loss_node(g, n, w.k)));
    out.push(loss_case("loss_smoothness", t, d, |g, a, _, _| smoothness_node(g, a)));
    out.push(loss_case("loss_sparsity", t, d, |g, a, _, _| sparsity_node(g, a)));
    out.push(loss_case("loss_total", t, d, |g, a, n, w| Ok(total_loss_nodes(g, a, n, w)?.total)));
    out
}

fn kink_margin(f: &CheckFn, inputs: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_grad()))
        .collect::<Result<Vec<_>>>()?;
    f(&mut g, &vars)?;
    Ok(g.kink_margin())
}

fn run_case(case: &Case, opts: &SuiteOptions) -> Result<SuiteRow> {
    let mut row = SuiteRow {
        name: case.name,
        max_rel_error: 0.0,
        seeds: opts.seeds,
        redraws: 0,
        coords_checked: 0,
        passed: true,
    };
    for s in 0..opts.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(s as u64);
        let mut redraws = 0;
        let inputs = loop {
            let inputs = (case.inputs)(&mut rng)?;
            if kink_margin(&case.f, &inputs)? >= KINK_CLEARANCE_STEPS * opts.eps {
                break inputs;
            }
            redraws += 1;
            if redraws == MAX_REDRAWS {
                return Err(Error::invalid(
                    "gradcheck",
                    format!("{}: no probe point clear of kinks after {MAX_REDRAWS} draws", case.name),
                ));
            }
        };
        let check = CheckOptions {
            eps: opts.eps,
            max_coords_per_input: Some(opts.max_coords_per_input),
            seed: rng.random(),
        };
        let inject = opts.inject_fault;
        let report = grad_check_with(&case.f, &inputs, &check, |g| {
            if inject {
                g.inject_sigmoid_grad_fault();
            }
        })?;
        row.max_rel_error = row.max_rel_error.max(report.max_rel_error);
        row.coords_checked += report.coords_checked;
        row.redraws += redraws;
    }
    row.passed = row.max_rel_error < opts.tolerance;
    Ok(row)
}

/// Runs every check. A row fails when any seed exceeds the tolerance.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<SuiteRow>> {
    let (t, d) = (opts.snippets, opts.feature_dim);
    if t == 0 || opts.seeds == 0 || opts.max_coords_per_input == 0 {
        return Err(Error::Config("snippets, seeds and coordinates per input must be positive".into()));
    }
    if d < 4 || d % 4 != 0 {
        return Err(Error::Config(format!("feature dim {d} must be a positive multiple of 4")));
    }
    if !(opts.eps > 0.0) {
        return Err(Error::Config(format!("eps {} must be positive", opts.eps)));
    }
    debug_assert_eq!(parameter_shapes(d).len(), 22);
    cases(t, d).iter().map(|c| run_case(c, opts)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> SuiteOptions {
        SuiteOptions {
            seeds: 2,
            max_coords_per_input: 6,
            ..SuiteOptions::default()
        }
    }

    #[test]
    fn every_row_passes() {
        let rows = run_suite(&quick()).unwrap();
        assert!(rows.len() > 30);
        for r in &rows {
            assert!(r.passed, "{r}");
            assert!(r.coords_checked > 0);
        }
    }

    #[test]
    fn fault_is_caught() {
        let rows = run_suite(&SuiteOptions {
            inject_fault: true,
            ..quick()
        })
        .unwrap();
        let failed: Vec<_> = rows.iter().filter(|r| !r.passed).map(|r| r.name).collect();
        assert!(failed.contains(&"sigmoid"));
        assert!(failed.contains(&"loss_total"));
        assert!(!failed.contains(&"matmul"));
    }

    #[test]
    fn reproducible() {
        assert_eq!(run_suite(&quick()).unwrap(), run_suite(&quick()).unwrap());
    }

    #[test]
    fn bad_dims() {
        assert!(run_suite(&SuiteOptions {
            feature_dim: 6,
            ..quick()
        })
        .is_err());
    }
}
