//! Training objective over paired abnormal/normal bags.
//!
//! Every term is built as graph nodes so it can be differentiated. The
//! `f64` entry points ([`magnitude_loss`], [`total_loss`], ...) evaluate the
//! same node builders on constant inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Abnormal,
}

impl Label {
    pub fn target(self) -> f64 {
        match self {
            Label::Normal => 0.0,
            Label::Abnormal => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Abnormal => "abnormal",
        }
    }
}

/// Per-snippet magnitudes and classifier probabilities of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct BagScores {
    pub magnitudes: Vec<f64>,
    pub scores: Vec<f64>,
    pub label: Label,
}

impl BagScores {
    pub fn new(magnitudes: Vec<f64>, scores: Vec<f64>, label: Label) -> Result<Self> {
        let bag = Self {
            magnitudes,
            scores,
            label,
        };
        bag.validate()?;
        Ok(bag)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.magnitudes.len() != self.scores.len() || self.scores.is_empty() {
            return Err(Error::shape(
                "bag",
                format!("{} magnitudes vs {} scores", self.magnitudes.len(), self.scores.len()),
            ));
        }
        if self.magnitudes.iter().any(|&m| !(m >= 0.0) || !m.is_finite()) {
            return Err(Error::invalid("bag", "magnitudes must be finite and non-negative"));
        }
        if self.scores.iter().any(|&s| !(0.0..=1.0).contains(&s)) {
            return Err(Error::invalid("bag", "scores must lie in [0, 1]"));
        }
        Ok(())
    }

    fn place(&self, g: &mut Graph) -> Result<BagNodes> {
        self.validate()?;
        Ok(BagNodes {
            magnitudes: g.constant(Tensor::vector(self.magnitudes.clone()))?,
            scores: g.constant(Tensor::vector(self.scores.clone()))?,
            label: self.label,
        })
    }
}

/// A bag whose magnitudes and scores live in a [`Graph`].
#[derive(Debug, Clone, Copy)]
pub struct BagNodes {
    pub magnitudes: Var,
    pub scores: Var,
    pub label: Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub margin: f64,
    pub k: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 8e-4,
            lambda4: 8e-4,
            margin: 100.0,
            k: 3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.margin > 0.0) || !self.margin.is_finite() {
            return Err(Error::Config(format!("margin {} must be positive", self.margin)));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_magnitude: f64,
    pub l_bce: f64,
    pub l_smooth: f64,
    pub l_sparse: f64,
    pub total: f64,
    pub delta_score: f64,
}

/// Graph nodes of every loss term for one bag pair.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub l_magnitude: Var,
    pub l_bce: Var,
    pub l_smooth: Var,
    pub l_sparse: Var,
    pub total: Var,
    pub delta_score: f64,
}

impl LossNodes {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            l_magnitude: g.value(self.l_magnitude).item(),
            l_bce: g.value(self.l_bce).item(),
            l_smooth: g.value(self.l_smooth).item(),
            l_sparse: g.value(self.l_sparse).item(),
            total: g.value(self.total).item(),
            delta_score: self.delta_score,
        }
    }
}

fn top_means(g: &mut Graph, abnormal: &BagNodes, normal: &BagNodes, k: usize) -> Result<(Var, Var)> {
    let a = g.topk_mean(abnormal.magnitudes, k)?;
    let n = g.topk_mean(normal.magnitudes, k)?;
    Ok((a, n))
}

/// `max(0, m − topk_mean(abnormal) + topk_mean(normal))` and the separation
/// it was computed from.
pub fn magnitude_loss_node(
    g: &mut Graph,
    abnormal: &BagNodes,
    normal: &BagNodes,
    margin: f64,
    k: usize,
) -> Result<(Var, f64)> {
    let (a, n) = top_means(g, abnormal, normal, k)?;
    let delta = g.value(a).item() - g.value(n).item();
    let gap = g.sub(n, a)?;
    let shortfall = g.add_scalar(gap, margin)?;
    Ok((g.relu(shortfall)?, delta))
}

/// BCE of the mean score over the `k` highest-magnitude snippets against
/// the bag label.
pub fn classification_loss_node(g: &mut Graph, bag: &BagNodes, k: usize) -> Result<Var> {
    let idx = g.select_topk(bag.magnitudes, k)?;
    let p = g.select_mean(bag.scores, &idx)?;
    g.bce(p, bag.label.target())
}

pub fn smoothness_node(g: &mut Graph, bag: &BagNodes) -> Result<Var> {
    g.sq_diff_sum(bag.scores)
}

pub fn sparsity_node(g: &mut Graph, bag: &BagNodes) -> Result<Var> {
    g.sum(bag.scores)
}

/// Weighted objective for one (abnormal, normal) pair. Smoothness and
/// sparsity apply to the abnormal bag only.
pub fn total_loss_nodes(g: &mut Graph, abnormal: &BagNodes, normal: &BagNodes, w: &LossWeights) -> Result<LossNodes> {
    w.validate()?;
    if abnormal.label != Label::Abnormal || normal.label != Label::Normal {
        return Err(Error::invalid("total_loss", "expected an (abnormal, normal) bag pair"));
    }
    let (l_magnitude, delta_score) = magnitude_loss_node(g, abnormal, normal, w.margin, w.k)?;
    let bce_a = classification_loss_node(g, abnormal, w.k)?;
    let bce_n = classification_loss_node(g, normal, w.k)?;
    let l_bce = g.add(bce_a, bce_n)?;
    let l_smooth = smoothness_node(g, abnormal)?;
    let l_sparse = sparsity_node(g, abnormal)?;

    let t1 = g.scale(l_magnitude, w.lambda1)?;
    let t2 = g.scale(l_bce, w.lambda2)?;
    let t3 = g.scale(l_smooth, w.lambda3)?;
    let t4 = g.scale(l_sparse, w.lambda4)?;
    let total = g.add(t1, t2)?;
    let total = g.add(total, t3)?;
    let total = g.add(total, t4)?;
    Ok(LossNodes {
        l_magnitude,
        l_bce,
        l_smooth,
        l_sparse,
        total,
        delta_score,
    })
}

/// Difference of top-k mean magnitudes, abnormal minus normal.
pub fn separability(abnormal: &BagScores, normal: &BagScores, k: usize) -> Result<f64> {
    let mut g = Graph::new();
    let (a, n) = (abnormal.place(&mut g)?, normal.place(&mut g)?);
    let (ta, tn) = top_means(&mut g, &a, &n, k)?;
    Ok(g.value(ta).item() - g.value(tn).item())
}

pub fn magnitude_loss(abnormal: &BagScores, normal: &BagScores, margin: f64, k: usize) -> Result<f64> {
    let mut g = Graph::new();
    let (a, n) = (abnormal.place(&mut g)?, normal.place(&mut g)?);
    let (l, _) = magnitude_loss_node(&mut g, &a, &n, margin, k)?;
    Ok(g.value(l).item())
}

pub fn classification_loss(bag: &BagScores, k: usize) -> Result<f64> {
    let mut g = Graph::new();
    let b = bag.place(&mut g)?;
    let l = classification_loss_node(&mut g, &b, k)?;
    Ok(g.value(l).item())
}

pub fn smoothness(bag: &BagScores) -> Result<f64> {
    let mut g = Graph::new();
    let b = bag.place(&mut g)?;
    let l = smoothness_node(&mut g, &b)?;
    Ok(g.value(l).item())
}

pub fn sparsity(bag: &BagScores) -> Result<f64> {
    let mut g = Graph::new();
    let b = bag.place(&mut g)?;
    let l = sparsity_node(&mut g, &b)?;
    Ok(g.value(l).item())
}

pub fn total_loss(abnormal: &BagScores, normal: &BagScores, w: &LossWeights) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let (a, n) = (abnormal.place(&mut g)?, normal.place(&mut g)?);
    Ok(total_loss_nodes(&mut g, &a, &n, w)?.breakdown(&g))
}
