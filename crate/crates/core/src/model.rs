//! Temporal attention layer and three-layer snippet classifier.
//!
//! The attention layer refines a `T x D` snippet feature map with two
//! parallel modules and a residual:
//!
//! * long range: `Fc = conv(F)` reduces to `D/4` channels; three width-1
//!   projections give query/key/value maps; `A = Q·Kᵀ` (raw, `T x T`);
//!   `M = conv(A·V) + Fc`.
//! * short range: three width-3 convolutions with dilations 1, 2 and 4, each
//!   producing `D/4` channels, concatenated into `K` (`T x 3D/4`).
//!
//! The refined map is `concat(M, K) + F`, which has the shape of `F`.
//!
//! The classifier maps each refined snippet to a probability through
//! `D → 512 → 128 → 1` fully connected layers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::objective::{BagNodes, BagScores, Label};
use crate::tensor::{Parameter, Tensor};

pub const FC1_WIDTH: usize = 512;
pub const FC2_WIDTH: usize = 128;
pub const DEFAULT_DROPOUT: f64 = 0.7;
pub const BRANCH_DILATIONS: [usize; 3] = [1, 2, 4];
const BRANCH_WIDTH: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Parameter,
    pub bias: Parameter,
    pub dilation: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Parameter,
    pub bias: Parameter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub reduce: ConvLayer,
    pub query: ConvLayer,
    pub key: ConvLayer,
    pub value: ConvLayer,
    pub out: ConvLayer,
    pub branches: [ConvLayer; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub fc1: DenseLayer,
    pub fc2: DenseLayer,
    pub fc3: DenseLayer,
    pub dropout_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub attention: AttentionParams,
    pub classifier: ClassifierParams,
    pub feature_dim: usize,
    pub snippet_count: usize,
}

/// Shape of every parameter, in canonical order.
pub fn parameter_shapes(feature_dim: usize) -> Vec<(String, Vec<usize>)> {
    let q = feature_dim / 4;
    let mut shapes = Vec::new();
    let mut conv = |name: &str, c_out, c_in, w| {
        shapes.push((format!("{name}.weight"), vec![c_out, c_in, w]));
        shapes.push((format!("{name}.bias"), vec![c_out]));
    };
    conv("attn.reduce", q, feature_dim, 1);
    conv("attn.query", q, q, 1);
    conv("attn.key", q, q, 1);
    conv("attn.value", q, q, 1);
    conv("attn.out", q, q, 1);
    for d in BRANCH_DILATIONS {
        conv(&format!("attn.branch_d{d}"), q, feature_dim, BRANCH_WIDTH);
    }
    for (name, i, o) in [
        ("cls.fc1", feature_dim, FC1_WIDTH),
        ("cls.fc2", FC1_WIDTH, FC2_WIDTH),
        ("cls.fc3", FC2_WIDTH, 1),
    ] {
        shapes.push((format!("{name}.weight"), vec![i, o]));
        shapes.push((format!("{name}.bias"), vec![o]));
    }
    shapes
}

fn validate_dims(feature_dim: usize, snippet_count: usize) -> Result<()> {
    if feature_dim == 0 || snippet_count == 0 {
        return Err(Error::Config("feature dim and snippet count must be positive".into()));
    }
    if !feature_dim.is_multiple_of(4) {
        return Err(Error::Config(format!("feature dim {feature_dim} is not divisible by 4")));
    }
    Ok(())
}

impl ModelParams {
    /// Builds a model whose parameters come from `tensors`, given in the
    /// order of [`parameter_shapes`].
    fn assemble(feature_dim: usize, snippet_count: usize, dropout_rate: f64, tensors: Vec<Tensor>) -> Self {
        let mut named = parameter_shapes(feature_dim)
            .into_iter()
            .zip(tensors)
            .map(|((name, _), t)| Parameter::new(name, t));
        let mut next = || named.next().expect("parameter count");
        let mut conv = |dilation| ConvLayer {
            weight: next(),
            bias: next(),
            dilation,
        };
        let attention = AttentionParams {
            reduce: conv(1),
            query: conv(1),
            key: conv(1),
            value: conv(1),
            out: conv(1),
            branches: BRANCH_DILATIONS.map(&mut conv),
        };
        let mut dense = || DenseLayer {
            weight: next(),
            bias: next(),
        };
        let classifier = ClassifierParams {
            fc1: dense(),
            fc2: dense(),
            fc3: dense(),
            dropout_rate,
        };
        Self {
            attention,
            classifier,
            feature_dim,
            snippet_count,
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(feature_dim: usize, snippet_count: usize, seed: u64) -> Result<Self> {
        validate_dims(feature_dim, snippet_count)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = parameter_shapes(feature_dim)
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with(".bias") {
                    return Tensor::zeros(&shape);
                }
                let (fan_in, fan_out) = match *shape.as_slice() {
                    [c_out, c_in, w] => (c_in * w, c_out * w),
                    [i, o] => (i, o),
                    _ => unreachable!("weights are 2-D or 3-D"),
                };
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                let n = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| dist.sample(&mut rng)).collect()).expect("shape")
            })
            .collect();
        Ok(Self::assemble(feature_dim, snippet_count, DEFAULT_DROPOUT, tensors))
    }

    /// All weights and biases zero.
    pub fn zeros(feature_dim: usize, snippet_count: usize) -> Result<Self> {
        validate_dims(feature_dim, snippet_count)?;
        let tensors = parameter_shapes(feature_dim)
            .into_iter()
            .map(|(_, s)| Tensor::zeros(&s))
            .collect();
        Ok(Self::assemble(feature_dim, snippet_count, DEFAULT_DROPOUT, tensors))
    }

    /// Rebuilds a model from named tensors, e.g. a checkpoint. Every expected
    /// name must be present with exactly the expected shape.
    pub fn from_named(
        feature_dim: usize,
        snippet_count: usize,
        dropout_rate: f64,
        named: &[(String, Tensor)],
    ) -> Result<Self> {
        validate_dims(feature_dim, snippet_count)?;
        let expected = parameter_shapes(feature_dim);
        if let Some((extra, _)) = named
            .iter()
            .find(|(n, _)| !expected.iter().any(|(e, _)| e == n))
        {
            return Err(Error::ParamName(extra.clone()));
        }
        let tensors = expected
            .iter()
            .map(|(name, shape)| {
                let (_, t) = named
                    .iter()
                    .find(|(n, _)| n == name)
                    .ok_or_else(|| Error::ParamName(name.clone()))?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::ParamShape {
                        name: name.clone(),
                        expected: shape.clone(),
                        found: t.shape().to_vec(),
                    });
                }
                Tensor::new(shape.clone(), t.data().to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::assemble(feature_dim, snippet_count, dropout_rate, tensors))
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        let a = &self.attention;
        let c = &self.classifier;
        let mut out = Vec::with_capacity(22);
        for l in [&a.reduce, &a.query, &a.key, &a.value, &a.out].into_iter().chain(&a.branches) {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        for l in [&c.fc1, &c.fc2, &c.fc3] {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let a = &mut self.attention;
        let c = &mut self.classifier;
        let mut out = Vec::with_capacity(22);
        for l in [&mut a.reduce, &mut a.query, &mut a.key, &mut a.value, &mut a.out]
            .into_iter()
            .chain(a.branches.iter_mut())
        {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        for l in [&mut c.fc1, &mut c.fc2, &mut c.fc3] {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.value.numel()).sum()
    }

    /// Parameter values without gradient state.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.parameters()
            .into_iter()
            .map(|p| {
                let mut value = p.value.clone();
                value.requires_grad = false;
                value.grad = None;
                (p.name.clone(), value)
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.parameters().iter().all(|p| p.value.is_finite())
    }

    /// Places every parameter in `g`. With `trainable` set the leaves take
    /// part in differentiation.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundModel> {
        let mut leaf = |p: &Parameter| {
            if trainable {
                g.leaf(p.value.clone())
            } else {
                g.constant(p.value.clone())
            }
        };
        let vars = self
            .parameters()
            .into_iter()
            .map(&mut leaf)
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundModel {
            vars,
            feature_dim: self.feature_dim,
            dropout_rate: self.classifier.dropout_rate,
        })
    }

    /// Copies gradients from `g` into each parameter's grad buffer.
    /// Parameters the root did not depend on receive zeros.
    pub fn collect_grads(&mut self, g: &Graph, bound: &BoundModel) {
        for (p, &v) in self.parameters_mut().into_iter().zip(&bound.vars) {
            let grad = g
                .grad(v)
                .map_or_else(|| vec![0.0; p.value.numel()], <[f64]>::to_vec);
            p.value.grad = Some(grad);
        }
    }

    /// Inference-mode scoring of a single `T x D` bag.
    pub fn score(&self, features: &Tensor, label: Label) -> Result<BagScores> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false)?;
        let f = g.constant(features.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bag = model_forward(&mut g, &bound, f, label, false, &mut rng)?;
        Ok(BagScores {
            magnitudes: g.value(bag.magnitudes).data().to_vec(),
            scores: g.value(bag.scores).data().to_vec(),
            label,
        })
    }
}

/// Parameter leaves of a [`ModelParams`] inside one graph, in canonical
/// order.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub vars: Vec<Var>,
    feature_dim: usize,
    dropout_rate: f64,
}

impl BoundModel {
    /// Wraps graph variables already holding the parameters in
    /// [`parameter_shapes`] order.
    pub fn from_vars(g: &Graph, vars: Vec<Var>, feature_dim: usize, dropout_rate: f64) -> Result<Self> {
        let shapes = parameter_shapes(feature_dim);
        if vars.len() != shapes.len() {
            return Err(Error::invalid(
                "bind",
                format!("expected {} parameter variables, got {}", shapes.len(), vars.len()),
            ));
        }
        for ((name, shape), &v) in shapes.iter().zip(&vars) {
            if g.value(v).shape() != shape.as_slice() {
                return Err(Error::ParamShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: g.value(v).shape().to_vec(),
                });
            }
        }
        Ok(Self {
            vars,
            feature_dim,
            dropout_rate,
        })
    }
}

// Canonical positions within `BoundModel::vars`.
const REDUCE: usize = 0;
const QUERY: usize = 2;
const KEY: usize = 4;
const VALUE: usize = 6;
const OUT: usize = 8;
const BRANCH0: usize = 10;
const FC1: usize = 16;
const FC2: usize = 18;
const FC3: usize = 20;

impl BoundModel {
    fn conv(&self, g: &mut Graph, layer: usize, x: Var, dilation: usize) -> Result<Var> {
        g.conv1d(x, self.vars[layer], self.vars[layer + 1], dilation)
    }

    fn dense(&self, g: &mut Graph, layer: usize, x: Var) -> Result<Var> {
        g.linear(x, self.vars[layer], self.vars[layer + 1])
    }

    fn check_input(&self, g: &Graph, f: Var) -> Result<usize> {
        let (t, d) = g.value(f).dims2("attention")?;
        if d != self.feature_dim {
            return Err(Error::shape(
                "attention",
                format!("input has {d} features, model expects {}", self.feature_dim),
            ));
        }
        Ok(t)
    }
}

/// Intermediate maps of the long-range module.
#[derive(Debug, Clone, Copy)]
pub struct LongRange {
    pub reduced: Var,
    pub query: Var,
    pub key: Var,
    pub value: Var,
    /// `T x T` pairwise products.
    pub affinity: Var,
    pub projected: Var,
    /// `projected + reduced`, `T x D/4`.
    pub output: Var,
}

/// Every intermediate of one attention-layer evaluation.
#[derive(Debug, Clone, Copy)]
pub struct AttentionActivations {
    pub input: Var,
    pub long_range: LongRange,
    /// `T x 3D/4` concatenation of the dilated branches.
    pub short_range: Var,
    /// `T x D` refined features.
    pub output: Var,
}

pub fn long_range_module(g: &mut Graph, m: &BoundModel, f: Var) -> Result<LongRange> {
    m.check_input(g, f)?;
    let reduced = m.conv(g, REDUCE, f, 1)?;
    let query = m.conv(g, QUERY, reduced, 1)?;
    let key = m.conv(g, KEY, reduced, 1)?;
    let value = m.conv(g, VALUE, reduced, 1)?;
    let key_t = g.transpose(key)?;
    let affinity = g.matmul(query, key_t)?;
    let mixed = g.matmul(affinity, value)?;
    let projected = m.conv(g, OUT, mixed, 1)?;
    let output = g.add(projected, reduced)?;
    Ok(LongRange {
        reduced,
        query,
        key,
        value,
        affinity,
        projected,
        output,
    })
}

pub fn short_range_module(g: &mut Graph, m: &BoundModel, f: Var) -> Result<Var> {
    m.check_input(g, f)?;
    let branches = BRANCH_DILATIONS
        .iter()
        .enumerate()
        .map(|(i, &d)| m.conv(g, BRANCH0 + 2 * i, f, d))
        .collect::<Result<Vec<_>>>()?;
    g.concat_cols(&branches)
}

pub fn attention_forward(g: &mut Graph, m: &BoundModel, f: Var) -> Result<AttentionActivations> {
    let long_range = long_range_module(g, m, f)?;
    let short_range = short_range_module(g, m, f)?;
    let joined = g.concat_cols(&[long_range.output, short_range])?;
    let output = g.add(joined, f)?;
    Ok(AttentionActivations {
        input: f,
        long_range,
        short_range,
        output,
    })
}

/// Per-snippet anomaly probabilities for a `T x D` map; returns a `T`
/// vector.
pub fn classifier_forward<R: Rng + ?Sized>(
    g: &mut Graph,
    m: &BoundModel,
    x: Var,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let (t, d) = g.value(x).dims2("classifier")?;
    if d != m.feature_dim {
        return Err(Error::shape(
            "classifier",
            format!("input has {d} features, model expects {}", m.feature_dim),
        ));
    }
    let h = m.dense(g, FC1, x)?;
    let h = g.relu(h)?;
    let h = g.dropout(h, m.dropout_rate, training, rng)?;
    let h = m.dense(g, FC2, h)?;
    let h = g.relu(h)?;
    let h = g.dropout(h, m.dropout_rate, training, rng)?;
    let logits = m.dense(g, FC3, h)?;
    let p = g.sigmoid(logits)?;
    g.reshape(p, &[t])
}

/// Attention refinement followed by magnitudes and classifier scores.
pub fn model_forward<R: Rng + ?Sized>(
    g: &mut Graph,
    m: &BoundModel,
    f: Var,
    label: Label,
    training: bool,
    rng: &mut R,
) -> Result<BagNodes> {
    let refined = attention_forward(g, m, f)?.output;
    let magnitudes = g.l2_norm_rows(refined)?;
    let scores = classifier_forward(g, m, refined, training, rng)?;
    Ok(BagNodes {
        magnitudes,
        scores,
        label,
    })
}
