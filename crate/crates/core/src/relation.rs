//! Relation networks and the knowledge-conditioned parameter generator.
//!
//! Both relation networks are two-layer perceptrons over a pair vector
//! `[class ; query]` of width `2·d1`. The task-agnostic network owns its
//! parameters. The task-relevant network has no parameters of its own: they
//! are produced per task as `θ_rel = M · k_S`, a linear map of the knowledge
//! vector. The two raw scores are summed and squashed by a sigmoid.
//!
//! Parameter blocks are flat vectors laid out as `W1` (row-major, `H × 2·d1`),
//! then `b1`, then `w2`, then `b2`, for a total of `d3 = 2·d1·H + 2·H + 1`.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::numerics::{mlp2_backward, mlp2_forward, sigmoid, Matrix, MatrixView, Mlp2Grads, Mlp2Trace};
use crate::rng::Rng;

/// One flattened two-layer relation network.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationNetParams {
    input: usize,
    hidden: usize,
    flat: Vec<f64>,
}

impl RelationNetParams {
    pub fn param_count(input: usize, hidden: usize) -> usize {
        input * hidden + 2 * hidden + 1
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        RelationNetParams {
            input,
            hidden,
            flat: vec![0.0; Self::param_count(input, hidden)],
        }
    }

    /// Weights uniform in `±1/√fan_in` per layer, biases zero.
    pub fn init(input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let mut params = Self::zeros(input, hidden);
        let a1 = 1.0 / (input as f64).sqrt();
        let a2 = 1.0 / (hidden as f64).sqrt();
        let (w1, rest) = params.flat.split_at_mut(input * hidden);
        w1.iter_mut().for_each(|w| *w = rng.gen_range(-a1..=a1));
        rest[hidden..2 * hidden]
            .iter_mut()
            .for_each(|w| *w = rng.gen_range(-a2..=a2));
        params
    }

    pub fn from_flat(input: usize, hidden: usize, flat: Vec<f64>) -> Result<Self> {
        let expected = Self::param_count(input, hidden);
        if flat.len() != expected {
            return Err(Error::dim("relation network parameters", expected, flat.len()));
        }
        Ok(RelationNetParams { input, hidden, flat })
    }

    pub fn input(&self) -> usize {
        self.input
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.flat
    }

    fn split(&self) -> (MatrixView<'_>, &[f64], &[f64], f64) {
        let (w1, rest) = self.flat.split_at(self.input * self.hidden);
        let (b1, rest) = rest.split_at(self.hidden);
        let (w2, b2) = rest.split_at(self.hidden);
        let w1 = MatrixView::new(self.hidden, self.input, w1).expect("layout");
        (w1, b1, w2, b2[0])
    }

    pub fn w1(&self) -> MatrixView<'_> {
        self.split().0
    }

    pub fn b1(&self) -> &[f64] {
        self.split().1
    }

    pub fn w2(&self) -> &[f64] {
        self.split().2
    }

    pub fn b2(&self) -> f64 {
        self.split().3
    }

    pub fn forward(&self, pair: &[f64]) -> Result<Mlp2Trace> {
        let (w1, b1, w2, b2) = self.split();
        mlp2_forward(w1, b1, w2, b2, pair)
    }

    /// Accumulates `upstream · ∂output/∂θ` into `grad` (same layout as
    /// [`flat`](Self::flat)) and `upstream · ∂output/∂pair` into `d_pair`.
    pub fn backward(
        &self,
        pair: &[f64],
        trace: &Mlp2Trace,
        upstream: f64,
        grad: &mut [f64],
        d_pair: Option<&mut [f64]>,
    ) {
        let (w1, _, w2, _) = self.split();
        let (gw1, rest) = grad.split_at_mut(self.input * self.hidden);
        let (gb1, rest) = rest.split_at_mut(self.hidden);
        let (gw2, gb2) = rest.split_at_mut(self.hidden);
        mlp2_backward(
            w1,
            w2,
            pair,
            trace,
            upstream,
            Mlp2Grads {
                w1: gw1,
                b1: gb1,
                w2: gw2,
                b2: &mut gb2[0],
                x: d_pair,
            },
        );
    }
}

/// The linear map `M` (`d3 × d2`) from knowledge vectors to relation-network
/// parameters, with an optional bias that is off by default.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub input: usize,
    pub hidden: usize,
    pub matrix: Matrix,
    pub bias: Option<Vec<f64>>,
}

impl GeneratorParams {
    pub fn zeros(input: usize, hidden: usize, knowledge_dim: usize, with_bias: bool) -> Self {
        let d3 = RelationNetParams::param_count(input, hidden);
        GeneratorParams {
            input,
            hidden,
            matrix: Matrix::zeros(d3, knowledge_dim),
            bias: with_bias.then(|| vec![0.0; d3]),
        }
    }

    /// Entries of `M` uniform in `±scale`; bias zero.
    pub fn init(
        input: usize,
        hidden: usize,
        knowledge_dim: usize,
        with_bias: bool,
        scale: f64,
        rng: &mut Rng,
    ) -> Self {
        let mut gen = Self::zeros(input, hidden, knowledge_dim, with_bias);
        gen.matrix
            .as_mut_slice()
            .iter_mut()
            .for_each(|m| *m = rng.gen_range(-scale..=scale));
        gen
    }

    pub fn knowledge_dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn param_count(&self) -> usize {
        self.matrix.as_slice().len() + self.bias.as_ref().map_or(0, Vec::len)
    }
}

/// `θ_rel = M · k_S` (plus the bias when enabled), unflattened.
pub fn generate_params(gen: &GeneratorParams, knowledge: &[f64]) -> Result<RelationNetParams> {
    if knowledge.len() != gen.knowledge_dim() {
        return Err(Error::dim("knowledge vector", gen.knowledge_dim(), knowledge.len()));
    }
    let mut flat = gen.matrix.matvec(knowledge)?;
    if let Some(bias) = &gen.bias {
        flat.iter_mut().zip(bias).for_each(|(t, b)| *t += b);
    }
    RelationNetParams::from_flat(gen.input, gen.hidden, flat)
}

/// Unified-metric score of a pair.
pub fn agnostic_score(theta: &RelationNetParams, pair: &[f64]) -> Result<f64> {
    Ok(theta.forward(pair)?.output)
}

/// Score of a pair under generated parameters.
pub fn relevant_score(theta: &RelationNetParams, pair: &[f64]) -> Result<f64> {
    Ok(theta.forward(pair)?.output)
}

/// `sigmoid(r_agn + r_rel)`
pub fn combined_score(agnostic: f64, relevant: f64) -> f64 {
    sigmoid(agnostic + relevant)
}

/// Per-class scores of one query.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationScores {
    pub agnostic: Vec<f64>,
    pub relevant: Vec<f64>,
    pub fused: Vec<f64>,
}

impl RelationScores {
    /// Highest fused score; ties go to the lowest class index.
    pub fn predict(&self) -> usize {
        argmax_lowest(&self.fused)
    }
}

pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `Σ_z Σ_j (r_{z,j} − 1[y_j = z])²` over a `C × |Q|` score matrix.
/// Labels are 0-based class indices.
pub fn episode_loss(scores: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.len() != scores.cols() {
        return Err(Error::dim("labels", scores.cols(), labels.len()));
    }
    let classes = scores.rows();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Data(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut loss = 0.0;
    for z in 0..classes {
        for (j, &y) in labels.iter().enumerate() {
            let target = if y == z { 1.0 } else { 0.0 };
            let residual = scores.get(z, j) - target;
            loss += residual * residual;
        }
    }
    Ok(loss)
}

/// The objective with the residual left unsquared, kept only to document why
/// the squared form is used: it has no lower bound.
#[cfg(test)]
pub(crate) fn episode_loss_unsquared(scores: &Matrix, labels: &[usize]) -> f64 {
    let mut loss = 0.0;
    for z in 0..scores.rows() {
        for (j, &y) in labels.iter().enumerate() {
            loss += scores.get(z, j) - if y == z { 1.0 } else { 0.0 };
        }
    }
    loss
}
