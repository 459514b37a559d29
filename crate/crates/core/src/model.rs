//! The complete scorer: encoder, prototypes, pair vectors, both relation
//! branches and the fused sigmoid score, with closed-form gradients of the
//! episode loss for every trainable block.

use std::fmt;
use std::str::FromStr;

use crate::encoding::{accumulate_encoding_gradient, class_prototype, encode_sentence, pair_representation, EncoderParams, Sentence};
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Matrix, Mlp2Trace};
use crate::relation::{generate_params, GeneratorParams, RelationNetParams, RelationScores};
use crate::rng::Rng;

/// Which relation stage the model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Task-agnostic network plus the knowledge-generated network.
    Full,
    /// Task-agnostic network only.
    Ablation,
    /// Task-agnostic network plus a second, independently trained
    /// task-agnostic network in place of the generated one.
    Replacement,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::Ablation, Variant::Replacement];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Ablation => "ablation",
            Variant::Replacement => "replacement",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "ablation" => Ok(Variant::Ablation),
            "replacement" => Ok(Variant::Replacement),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected full, ablation or replacement)"
            ))),
        }
    }
}

/// Shapes and initialization scales of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelShape {
    pub vocab_size: usize,
    pub sentence_dim: usize,
    pub knowledge_dim: usize,
    pub hidden: usize,
    /// Hidden width of the second network in the replacement variant.
    pub replacement_hidden: usize,
    pub generator_bias: bool,
    pub encoder_init: f64,
    pub generator_init: f64,
}

impl ModelShape {
    pub fn pair_dim(&self) -> usize {
        2 * self.sentence_dim
    }

    /// Hidden width that gives the replacement network about as many
    /// parameters as the generator it stands in for.
    pub fn matched_replacement_hidden(sentence_dim: usize, hidden: usize, knowledge_dim: usize, bias: bool) -> usize {
        let input = 2 * sentence_dim;
        let d3 = RelationNetParams::param_count(input, hidden);
        let generator = d3 * knowledge_dim + if bias { d3 } else { 0 };
        // input·H' + 2·H' + 1 ≈ generator
        (((generator.saturating_sub(1)) as f64 / (input + 2) as f64).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub variant: Variant,
    pub encoder: EncoderParams,
    pub agnostic: RelationNetParams,
    pub generator: Option<GeneratorParams>,
    pub second: Option<RelationNetParams>,
}

impl ModelParams {
    /// Draws the encoder and the task-agnostic network first, so that every
    /// variant built from the same generator shares them exactly.
    pub fn init(variant: Variant, shape: &ModelShape, rng: &mut Rng) -> Result<Self> {
        if shape.hidden == 0 || shape.knowledge_dim == 0 {
            return Err(Error::Config("hidden width and d2 must be positive".into()));
        }
        let encoder = EncoderParams::init(shape.vocab_size, shape.sentence_dim, shape.encoder_init, rng)?;
        let agnostic = RelationNetParams::init(shape.pair_dim(), shape.hidden, rng);
        let (generator, second) = match variant {
            Variant::Full => (
                Some(GeneratorParams::init(
                    shape.pair_dim(),
                    shape.hidden,
                    shape.knowledge_dim,
                    shape.generator_bias,
                    shape.generator_init,
                    rng,
                )),
                None,
            ),
            Variant::Ablation => (None, None),
            Variant::Replacement => (
                None,
                Some(RelationNetParams::init(shape.pair_dim(), shape.replacement_hidden.max(1), rng)),
            ),
        };
        Ok(ModelParams {
            variant,
            encoder,
            agnostic,
            generator,
            second,
        })
    }

    pub fn sentence_dim(&self) -> usize {
        self.encoder.dim()
    }

    pub fn knowledge_dim(&self) -> Option<usize> {
        self.generator.as_ref().map(GeneratorParams::knowledge_dim)
    }

    /// Trainable scalars of the relation stage (everything but the encoder).
    pub fn relation_param_count(&self) -> usize {
        self.agnostic.len()
            + self.generator.as_ref().map_or(0, GeneratorParams::param_count)
            + self.second.as_ref().map_or(0, RelationNetParams::len)
    }

    pub fn param_count(&self) -> usize {
        self.encoder.table.as_slice().len() + self.relation_param_count()
    }

    /// Every trainable block in a fixed order, for optimizers and checksums.
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut blocks = vec![self.encoder.table.as_slice(), self.agnostic.flat()];
        if let Some(g) = &self.generator {
            blocks.push(g.matrix.as_slice());
            if let Some(b) = &g.bias {
                blocks.push(b);
            }
        }
        if let Some(s) = &self.second {
            blocks.push(s.flat());
        }
        blocks
    }

    /// Names of [`blocks`](Self::blocks), in the same order.
    pub fn block_names(&self) -> Vec<&'static str> {
        let mut names = vec!["token_table", "theta_agn"];
        if let Some(g) = &self.generator {
            names.push("generator");
            if g.bias.is_some() {
                names.push("generator_bias");
            }
        }
        if self.second.is_some() {
            names.push("theta_second");
        }
        names
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut blocks = vec![self.encoder.table.as_mut_slice(), self.agnostic.flat_mut()];
        if let Some(g) = &mut self.generator {
            blocks.push(g.matrix.as_mut_slice());
            if let Some(b) = &mut g.bias {
                blocks.push(b);
            }
        }
        if let Some(s) = &mut self.second {
            blocks.push(s.flat_mut());
        }
        blocks
    }

    /// Order-sensitive hash of every parameter bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for block in self.blocks() {
            for v in block {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    fn relation_branch(&self, knowledge: &[f64]) -> Result<Option<RelationNetParams>> {
        match (&self.generator, &self.second) {
            (Some(gen), _) => generate_params(gen, knowledge).map(Some),
            (None, Some(second)) => Ok(Some(second.clone())),
            (None, None) => Ok(None),
        }
    }
}

/// Gradients in the same block structure as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub encoder: Matrix,
    pub agnostic: Vec<f64>,
    pub generator: Option<Matrix>,
    pub generator_bias: Option<Vec<f64>>,
    pub second: Option<Vec<f64>>,
    /// ∂L/∂k_S, non-zero only for the full variant.
    pub knowledge: Vec<f64>,
}

impl ModelGrads {
    fn zeros_like(model: &ModelParams, knowledge_dim: usize) -> Self {
        ModelGrads {
            encoder: Matrix::zeros(model.encoder.vocab_size(), model.sentence_dim()),
            agnostic: vec![0.0; model.agnostic.len()],
            generator: model
                .generator
                .as_ref()
                .map(|g| Matrix::zeros(g.output_dim(), g.knowledge_dim())),
            generator_bias: model
                .generator
                .as_ref()
                .and_then(|g| g.bias.as_ref().map(|b| vec![0.0; b.len()])),
            second: model.second.as_ref().map(|s| vec![0.0; s.len()]),
            knowledge: vec![0.0; knowledge_dim],
        }
    }

    /// Blocks in the order of [`ModelParams::blocks`].
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut blocks = vec![self.encoder.as_slice(), self.agnostic.as_slice()];
        if let Some(g) = &self.generator {
            blocks.push(g.as_slice());
        }
        if let Some(b) = &self.generator_bias {
            blocks.push(b);
        }
        if let Some(s) = &self.second {
            blocks.push(s);
        }
        blocks
    }
}

/// One classification problem as seen by the scorer: support sentences
/// grouped by class index, queries, and the knowledge vector of the support.
#[derive(Debug, Clone)]
pub struct TaskInput<'a> {
    pub support: &'a [Vec<Sentence>],
    pub queries: &'a [Sentence],
    pub knowledge: &'a [f64],
}

struct Forward {
    branch: Option<RelationNetParams>,
    /// Indexed `[query][class]`.
    pairs: Vec<Vec<PairTrace>>,
}

struct PairTrace {
    pair: Vec<f64>,
    agnostic: Mlp2Trace,
    relevant: Option<Mlp2Trace>,
    fused: f64,
}

fn forward(model: &ModelParams, task: &TaskInput<'_>) -> Result<Forward> {
    if task.support.is_empty() {
        return Err(Error::EpisodeConstruction("no classes in support set".into()));
    }
    if let Some(dim) = model.knowledge_dim() {
        if task.knowledge.len() != dim {
            return Err(Error::dim("knowledge vector", dim, task.knowledge.len()));
        }
    }
    let mut prototypes = Vec::with_capacity(task.support.len());
    for class in task.support {
        let encoded = class
            .iter()
            .map(|s| encode_sentence(&model.encoder, s))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&[f64]> = encoded.iter().map(Vec::as_slice).collect();
        prototypes.push(class_prototype(&refs)?);
    }
    let queries = task
        .queries
        .iter()
        .map(|s| encode_sentence(&model.encoder, s))
        .collect::<Result<Vec<_>>>()?;
    let branch = model.relation_branch(task.knowledge)?;

    let mut pairs = Vec::with_capacity(queries.len());
    for h in &queries {
        let mut row = Vec::with_capacity(prototypes.len());
        for c in &prototypes {
            let pair = pair_representation(c, h)?;
            let agnostic = model.agnostic.forward(&pair)?;
            let relevant = branch.as_ref().map(|b| b.forward(&pair)).transpose()?;
            let fused = match &relevant {
                Some(r) => sigmoid(agnostic.output + r.output),
                None => sigmoid(agnostic.output),
            };
            row.push(PairTrace {
                pair,
                agnostic,
                relevant,
                fused,
            });
        }
        pairs.push(row);
    }
    Ok(Forward {
        branch,
        pairs,
    })
}

/// Scores of every query against every class.
pub fn score_task(model: &ModelParams, task: &TaskInput<'_>) -> Result<Vec<RelationScores>> {
    let fwd = forward(model, task)?;
    Ok(fwd
        .pairs
        .iter()
        .map(|row| RelationScores {
            agnostic: row.iter().map(|p| p.agnostic.output).collect(),
            relevant: row
                .iter()
                .map(|p| p.relevant.as_ref().map_or(0.0, |r| r.output))
                .collect(),
            fused: row.iter().map(|p| p.fused).collect(),
        })
        .collect())
}

/// Episode loss `Σ_z Σ_j (r_{z,j} − 1[y_j = z])²` and its gradient.
pub fn loss_and_gradients(model: &ModelParams, task: &TaskInput<'_>, labels: &[usize]) -> Result<(f64, ModelGrads)> {
    if labels.len() != task.queries.len() {
        return Err(Error::dim("labels", task.queries.len(), labels.len()));
    }
    let classes = task.support.len();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
    }
    let fwd = forward(model, task)?;
    let d1 = model.sentence_dim();
    let mut grads = ModelGrads::zeros_like(model, task.knowledge.len());
    let mut d_theta = fwd.branch.as_ref().map(|b| vec![0.0; b.len()]);
    let mut d_prototypes = vec![vec![0.0; d1]; classes];
    let mut d_pair = vec![0.0; 2 * d1];
    let mut loss = 0.0;

    for (j, row) in fwd.pairs.iter().enumerate() {
        for (z, trace) in row.iter().enumerate() {
            let target = if labels[j] == z { 1.0 } else { 0.0 };
            let residual = trace.fused - target;
            loss += residual * residual;
            let upstream = 2.0 * residual * trace.fused * (1.0 - trace.fused);

            d_pair.fill(0.0);
            model
                .agnostic
                .backward(&trace.pair, &trace.agnostic, upstream, &mut grads.agnostic, Some(&mut d_pair));
            if let (Some(branch), Some(rel), Some(d_theta)) = (&fwd.branch, &trace.relevant, d_theta.as_mut()) {
                branch.backward(&trace.pair, rel, upstream, d_theta, Some(&mut d_pair));
            }
            let (d_class, d_query) = d_pair.split_at(d1);
            d_prototypes[z].iter_mut().zip(d_class).for_each(|(a, b)| *a += b);
            accumulate_encoding_gradient(&task.queries[j], d_query, &mut grads.encoder);
        }
    }

    for (class, d_proto) in task.support.iter().zip(&d_prototypes) {
        let share: Vec<f64> = d_proto.iter().map(|g| g / class.len() as f64).collect();
        for s in class {
            accumulate_encoding_gradient(s, &share, &mut grads.encoder);
        }
    }

    if let Some(d_theta) = d_theta {
        if let (Some(gen), Some(d_m)) = (&model.generator, grads.generator.as_mut()) {
            // θ = M·k  ⇒  ∂L/∂M = ∂L/∂θ ⊗ k,  ∂L/∂k = Mᵀ·∂L/∂θ
            for (i, &dt) in d_theta.iter().enumerate() {
                if dt == 0.0 {
                    continue;
                }
                for (m, &k) in d_m.row_mut(i).iter_mut().zip(task.knowledge) {
                    *m += dt * k;
                }
            }
            grads.knowledge = gen.matrix.view().transpose_matvec(&d_theta)?;
            if let Some(b) = grads.generator_bias.as_mut() {
                b.iter_mut().zip(&d_theta).for_each(|(b, d)| *b += d);
            }
        } else if let Some(s) = grads.second.as_mut() {
            s.iter_mut().zip(&d_theta).for_each(|(a, b)| *a += b);
        }
    }
    Ok((loss, grads))
}

/// Loss only, by the same forward path.
pub fn task_loss(model: &ModelParams, task: &TaskInput<'_>, labels: &[usize]) -> Result<f64> {
    let scores = score_task(model, task)?;
    let mut loss = 0.0;
    for (row, &y) in scores.iter().zip(labels) {
        for (z, &r) in row.fused.iter().enumerate() {
            let target = if y == z { 1.0 } else { 0.0 };
            loss += (r - target) * (r - target);
        }
    }
    Ok(loss)
}
