//! Episodic meta-training, fixed-support evaluation, and the ablation and
//! replacement studies.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::encoding::{Sentence, Vocabulary};
use crate::episodes::{sample_episode, test_episode, Corpus, Episode, EpisodeShape, FixedSupport};
use crate::error::{Error, Result};
use crate::kb_embedding::{KbEmbeddings, KnowledgeBase};
use crate::model::{loss_and_gradients, score_task, ModelParams, ModelShape, TaskInput, Variant};
use crate::numerics::{adam_step, AdamConfig, AdamState};
use crate::retrieval::{KnowledgeContext, SurfaceIndex};
use crate::rng::{episode_rng, substream, Substream};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub classes: usize,
    pub shots: usize,
    pub queries: usize,
    pub episodes: usize,
    pub lr: f64,
    /// Sentence embedding width.
    pub d1: usize,
    /// KB embedding width.
    pub d2: usize,
    /// Relation-network hidden width.
    pub hidden: usize,
    /// Hidden width of the replacement network; `None` matches the
    /// generator's parameter count.
    pub replacement_hidden: Option<usize>,
    pub seed: u64,
    pub variant: Variant,
    pub freeze_kb: bool,
    /// Keep the generator at its initial value (used to pin `M = 0`).
    pub freeze_generator: bool,
    pub generator_bias: bool,
    pub balanced_queries: bool,
    /// Episodes whose gradients are summed before each Adam step.
    pub episodes_per_step: usize,
    pub encoder_init: f64,
    pub generator_init: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            classes: 2,
            shots: 5,
            queries: 10,
            episodes: 1000,
            lr: 1e-2,
            d1: 16,
            d2: 100,
            hidden: 8,
            replacement_hidden: None,
            seed: 0,
            variant: Variant::Full,
            freeze_kb: true,
            freeze_generator: false,
            generator_bias: false,
            balanced_queries: false,
            episodes_per_step: 1,
            encoder_init: 0.5,
            generator_init: 0.1,
        }
    }
}

impl TrainConfig {
    /// Full-scale settings: a 768-wide sentence encoder, 100-wide KB
    /// embeddings and a 1e-5 learning rate.
    pub fn full_scale() -> Self {
        TrainConfig {
            d1: 768,
            d2: 100,
            lr: 1e-5,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("classes", self.classes),
            ("shots", self.shots),
            ("queries", self.queries),
            ("d1", self.d1),
            ("d2", self.d2),
            ("hidden", self.hidden),
            ("episodes_per_step", self.episodes_per_step),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.replacement_hidden == Some(0) {
            return Err(Error::Config("replacement_hidden must be positive".into()));
        }
        Ok(())
    }

    pub fn episode_shape(&self) -> EpisodeShape {
        EpisodeShape {
            classes: self.classes,
            shots: self.shots,
            queries: self.queries,
            balanced_queries: self.balanced_queries,
        }
    }

    pub fn model_shape(&self, vocab_size: usize) -> ModelShape {
        ModelShape {
            vocab_size,
            sentence_dim: self.d1,
            knowledge_dim: self.d2,
            hidden: self.hidden,
            replacement_hidden: self.replacement_hidden.unwrap_or_else(|| {
                ModelShape::matched_replacement_hidden(self.d1, self.hidden, self.d2, self.generator_bias)
            }),
            generator_bias: self.generator_bias,
            encoder_init: self.encoder_init,
            generator_init: self.generator_init,
        }
    }
}

/// The KB side of the pipeline: facts, their embeddings, and the mention index.
#[derive(Debug, Clone, Copy)]
pub struct Knowledge<'a> {
    pub kb: &'a KnowledgeBase,
    pub embeddings: &'a KbEmbeddings,
    pub index: &'a SurfaceIndex,
}

impl Knowledge<'_> {
    /// Concepts retrieved from the episode's support text only.
    pub fn context(&self, corpus: &Corpus, episode: &Episode) -> Result<KnowledgeContext> {
        KnowledgeContext::retrieve(
            self.index,
            self.kb,
            self.embeddings,
            episode.support_indices().map(|i| corpus.example(i).text.as_str()),
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub vocab: Vocabulary,
    pub model: ModelParams,
    pub losses: Vec<f64>,
    /// Fine-tuned KB embeddings when `freeze_kb` is off.
    pub tuned_embeddings: Option<KbEmbeddings>,
}

/// Tokenized sentences for an episode, grouped the way the scorer wants them.
fn episode_sentences(
    corpus: &Corpus,
    vocab: &Vocabulary,
    episode: &Episode,
) -> Result<(Vec<Vec<Sentence>>, Vec<Sentence>)> {
    let sentence = |i: usize| vocab.sentence(&corpus.example(i).text);
    let support = episode
        .support
        .iter()
        .map(|class| class.iter().map(|&i| sentence(i)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let queries = episode
        .queries
        .iter()
        .map(|&i| sentence(i))
        .collect::<Result<Vec<_>>>()?;
    Ok((support, queries))
}

/// Vocabulary over the text of the given tasks, in corpus order.
pub fn training_vocabulary(corpus: &Corpus, tasks: &[String]) -> Vocabulary {
    let keep: BTreeSet<&str> = tasks.iter().map(String::as_str).collect();
    Vocabulary::build(
        corpus
            .examples()
            .iter()
            .filter(|e| keep.is_empty() || keep.contains(e.task_id.as_str()))
            .map(|e| e.text.as_str()),
    )
}

/// Trains a model on episodes drawn from `train_tasks`.
///
/// Each episode: sample, retrieve concepts from the support text, score all
/// class–query pairs, and take one Adam step on the episode loss.
pub fn train_meta(
    corpus: &Corpus,
    train_tasks: &[String],
    knowledge: Knowledge<'_>,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    let vocab = training_vocabulary(corpus, train_tasks);
    let model = init_model(&vocab, knowledge.embeddings, cfg)?;
    train_meta_from(corpus, train_tasks, knowledge, cfg, vocab, model)
}

pub fn init_model(vocab: &Vocabulary, embeddings: &KbEmbeddings, cfg: &TrainConfig) -> Result<ModelParams> {
    cfg.validate()?;
    if embeddings.dim() != cfg.d2 {
        return Err(Error::Config(format!(
            "KB embedding dimension {} does not match d2 = {}",
            embeddings.dim(),
            cfg.d2
        )));
    }
    ModelParams::init(cfg.variant, &cfg.model_shape(vocab.len()), &mut substream(cfg.seed, Substream::ModelInit))
}

/// Same as [`train_meta`] but starting from given parameters.
pub fn train_meta_from(
    corpus: &Corpus,
    train_tasks: &[String],
    knowledge: Knowledge<'_>,
    cfg: &TrainConfig,
    vocab: Vocabulary,
    mut model: ModelParams,
) -> Result<TrainOutput> {
    cfg.validate()?;
    corpus.validate_tasks(train_tasks)?;
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut states: Vec<AdamState> = model.blocks().iter().map(|b| AdamState::new(b.len(), adam)).collect();
    let frozen: Vec<bool> = model
        .block_names()
        .iter()
        .map(|n| cfg.freeze_generator && n.starts_with("generator"))
        .collect();
    let tune_kb = !cfg.freeze_kb && model.generator.is_some();
    let mut tuned = tune_kb.then(|| knowledge.embeddings.clone());
    let mut kb_state = tuned
        .as_ref()
        .map(|e| AdamState::new(e.entity_matrix().as_slice().len(), adam));

    let mut pending: Option<Vec<Vec<f64>>> = None;
    let mut pending_kb: Option<Vec<f64>> = None;
    let mut losses = Vec::with_capacity(cfg.episodes);
    for index in 0..cfg.episodes {
        let at = |source| Error::AtEpisode {
            index,
            source: Box::new(source),
        };
        let episode = sample_episode(corpus, train_tasks, cfg.episode_shape(), &mut episode_rng(cfg.seed, index))
            .map_err(at)?;
        let live = Knowledge {
            embeddings: tuned.as_ref().unwrap_or(knowledge.embeddings),
            ..knowledge
        };
        let context = live.context(corpus, &episode).map_err(at)?;
        let (support, queries) = episode_sentences(corpus, &vocab, &episode).map_err(at)?;
        let task = TaskInput {
            support: &support,
            queries: &queries,
            knowledge: &context.vector,
        };
        let (loss, grads) = loss_and_gradients(&model, &task, &episode.query_labels).map_err(at)?;
        losses.push(loss);

        let blocks: Vec<Vec<f64>> = grads.blocks().into_iter().map(<[f64]>::to_vec).collect();
        match pending.as_mut() {
            None => pending = Some(blocks),
            Some(acc) => acc
                .iter_mut()
                .zip(&blocks)
                .for_each(|(a, g)| a.iter_mut().zip(g).for_each(|(a, g)| *a += g)),
        }
        if let Some(emb) = tuned.as_ref() {
            let acc = pending_kb.get_or_insert_with(|| vec![0.0; emb.entity_matrix().as_slice().len()]);
            if !context.concepts.is_empty() {
                let share = 1.0 / context.concepts.len() as f64;
                let dim = emb.dim();
                for &c in &context.concepts {
                    for (a, g) in acc[c * dim..(c + 1) * dim].iter_mut().zip(&grads.knowledge) {
                        *a += share * g;
                    }
                }
            }
        }

        if (index + 1) % cfg.episodes_per_step == 0 || index + 1 == cfg.episodes {
            let grads = pending.take().expect("accumulated");
            let steps = model.blocks_mut().into_iter().zip(&grads).zip(states.iter_mut()).zip(&frozen);
            for (((block, g), state), &frozen) in steps {
                if !frozen {
                    adam_step(block, g, state).map_err(at)?;
                }
            }
            if let (Some(emb), Some(state), Some(g)) = (tuned.as_mut(), kb_state.as_mut(), pending_kb.take()) {
                adam_step(emb.entity_matrix_mut().as_mut_slice(), &g, state).map_err(at)?;
            }
        }
    }
    Ok(TrainOutput {
        vocab,
        model,
        losses,
        tuned_embeddings: tuned,
    })
}

/// Per-task accuracy and their unweighted mean.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_task: BTreeMap<String, f64>,
    pub mean_acc: f64,
}

impl EvalReport {
    pub fn from_accuracies(per_task: BTreeMap<String, f64>) -> Self {
        let mean_acc = if per_task.is_empty() {
            0.0
        } else {
            per_task.values().sum::<f64>() / per_task.len() as f64
        };
        EvalReport { per_task, mean_acc }
    }

    /// `task_id,accuracy` rows followed by `mean,<value>`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task_id,accuracy\n");
        for (task, acc) in &self.per_task {
            let _ = writeln!(out, "{task},{acc:.6}");
        }
        let _ = writeln!(out, "mean,{:.6}", self.mean_acc);
        out
    }
}

/// `episode,loss` rows.
pub fn loss_csv(losses: &[f64]) -> String {
    let mut out = String::from("episode,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(out, "{i},{l:.17e}");
    }
    out
}

pub fn check_disjoint(train_tasks: &[String], test_tasks: &[String]) -> Result<()> {
    let train: BTreeSet<&str> = train_tasks.iter().map(String::as_str).collect();
    let overlap: Vec<&str> = test_tasks
        .iter()
        .map(String::as_str)
        .filter(|t| train.contains(t))
        .collect();
    if overlap.is_empty() {
        Ok(())
    } else {
        Err(Error::Protocol(format!(
            "test tasks overlap training tasks: {}",
            overlap.join(", ")
        )))
    }
}

/// Accuracy of one fixed-support test task. Predictions are the arg-max of
/// the fused score, ties to the lowest class.
pub fn evaluate_task(
    model: &ModelParams,
    vocab: &Vocabulary,
    knowledge: Knowledge<'_>,
    corpus: &Corpus,
    episode: &Episode,
) -> Result<f64> {
    let context = knowledge.context(corpus, episode)?;
    let (support, queries) = episode_sentences(corpus, vocab, episode)?;
    let scores = score_task(
        model,
        &TaskInput {
            support: &support,
            queries: &queries,
            knowledge: &context.vector,
        },
    )?;
    if scores.is_empty() {
        return Err(Error::EpisodeConstruction(format!(
            "test task `{}` has no query examples",
            episode.task_id
        )));
    }
    let correct = scores
        .iter()
        .zip(&episode.query_labels)
        .filter(|(s, &y)| s.predict() == y)
        .count();
    Ok(correct as f64 / scores.len() as f64)
}

/// Scores every test task against its fixed support. Tasks are evaluated in
/// parallel; the model is only read.
pub fn evaluate(
    model: &ModelParams,
    vocab: &Vocabulary,
    knowledge: Knowledge<'_>,
    corpus: &Corpus,
    train_tasks: &[String],
    supports: &[FixedSupport],
) -> Result<EvalReport> {
    let test_ids: Vec<String> = supports.iter().map(|s| s.task_id.clone()).collect();
    check_disjoint(train_tasks, &test_ids)?;
    let episodes = supports
        .iter()
        .map(|s| test_episode(corpus, s))
        .collect::<Result<Vec<_>>>()?;
    let results: Vec<Result<(String, f64)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = episodes
            .iter()
            .map(|ep| {
                scope.spawn(move || {
                    evaluate_task(model, vocab, knowledge, corpus, ep).map(|acc| (ep.task_id.clone(), acc))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation thread panicked"))
            .collect()
    });
    let per_task = results.into_iter().collect::<Result<BTreeMap<_, _>>>()?;
    Ok(EvalReport::from_accuracies(per_task))
}

/// Everything a variant study needs besides its config.
#[derive(Debug, Clone, Copy)]
pub struct Experiment<'a> {
    pub corpus: &'a Corpus,
    pub knowledge: Knowledge<'a>,
    pub train_tasks: &'a [String],
    pub test_supports: &'a [FixedSupport],
}

#[derive(Debug, Clone)]
pub struct VariantReport {
    pub variant: Variant,
    pub relation_params: usize,
    pub report: EvalReport,
    pub losses: Vec<f64>,
}

impl VariantReport {
    pub fn summary(&self) -> String {
        format!(
            "variant={} relation_params={} mean_acc={:.6}",
            self.variant, self.relation_params, self.report.mean_acc
        )
    }
}

/// Trains `cfg.variant` on the experiment's training tasks and evaluates it.
pub fn run_variant(cfg: &TrainConfig, exp: Experiment<'_>) -> Result<VariantReport> {
    let out = train_meta(exp.corpus, exp.train_tasks, exp.knowledge, cfg)?;
    let embeddings = out.tuned_embeddings.as_ref().unwrap_or(exp.knowledge.embeddings);
    let knowledge = Knowledge {
        embeddings,
        ..exp.knowledge
    };
    let report = evaluate(&out.model, &out.vocab, knowledge, exp.corpus, exp.train_tasks, exp.test_supports)?;
    Ok(VariantReport {
        variant: cfg.variant,
        relation_params: out.model.relation_param_count(),
        report,
        losses: out.losses,
    })
}
