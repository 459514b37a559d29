//! Knowledge-base triples and their bilinear-diagonal (DistMult) embeddings.
//!
//! A triple `(s, r, o)` is scored as `sᵀ·diag(r)·o = Σᵢ sᵢ·rᵢ·oᵢ`. Embeddings
//! are trained with a margin ranking loss against negatives built by
//! replacing either the subject or the object with a random entity, and
//! checked with object-ranking hits@k.
//!
//! File formats:
//!
//! * triples: one `subject<TAB>relation<TAB>object` per line;
//! * embeddings: a `d2=<int>` header, then `E<TAB>name<TAB>v1,v2,...` for
//!   entities and `R<TAB>name<TAB>...` for relations, 17 significant digits.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::numerics::{adam_step, AdamConfig, AdamState, Matrix};
use crate::rng::{substream, Rng, Substream};

pub type EntityId = usize;
pub type RelationId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub subject: EntityId,
    pub relation: RelationId,
    pub object: EntityId,
}

impl Triple {
    pub fn new(subject: EntityId, relation: RelationId, object: EntityId) -> Self {
        Triple {
            subject,
            relation,
            object,
        }
    }
}

/// Bidirectional name ↔ dense id map; ids are assigned in first-seen order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Interner {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Interner {
    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_owned());
        self.index.insert(name.to_owned(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// A set of unique `(subject, relation, object)` facts over interned names.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeBase {
    entities: Interner,
    relations: Interner,
    triples: Vec<Triple>,
    seen: HashSet<Triple>,
    objects_by_subject: HashMap<EntityId, Vec<EntityId>>,
}

impl KnowledgeBase {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a fact by name. Returns `None` when the triple was already stored.
    pub fn insert(&mut self, subject: &str, relation: &str, object: &str) -> Option<Triple> {
        let t = Triple::new(
            self.entities.intern(subject),
            self.relations.intern(relation),
            self.entities.intern(object),
        );
        if !self.seen.insert(t) {
            return None;
        }
        self.triples.push(t);
        let objects = self.objects_by_subject.entry(t.subject).or_default();
        if !objects.contains(&t.object) {
            objects.push(t.object);
        }
        Some(t)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut kb = KnowledgeBase::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::parse(
                    origin,
                    i + 1,
                    format!("expected 3 tab-separated fields, found {}", fields.len()),
                ));
            }
            if let Some(empty) = fields.iter().position(|f| f.trim().is_empty()) {
                let which = ["subject", "relation", "object"][empty];
                return Err(Error::parse(origin, i + 1, format!("empty {which}")));
            }
            kb.insert(fields[0].trim(), fields[1].trim(), fields[2].trim());
        }
        Ok(kb)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for t in &self.triples {
            let _ = writeln!(
                out,
                "{}\t{}\t{}",
                self.entities.names[t.subject],
                self.relations.names[t.relation],
                self.entities.names[t.object]
            );
        }
        out
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn entities(&self) -> &Interner {
        &self.entities
    }

    pub fn relations(&self) -> &Interner {
        &self.relations
    }

    pub fn entity_ids(&self) -> Vec<EntityId> {
        (0..self.entities.len()).collect()
    }

    /// Objects of every stored triple whose subject is `subject`, in insertion order.
    pub fn objects_of(&self, subject: EntityId) -> &[EntityId] {
        self.objects_by_subject
            .get(&subject)
            .map_or(&[], Vec::as_slice)
    }

    /// Entities that appear as the subject of at least one triple.
    pub fn subjects(&self) -> Vec<EntityId> {
        let mut seen = HashSet::new();
        self.triples
            .iter()
            .filter(|t| seen.insert(t.subject))
            .map(|t| t.subject)
            .collect()
    }
}

/// Entity and relation vectors of a common dimension `d2`.
#[derive(Debug, Clone, PartialEq)]
pub struct KbEmbeddings {
    entity_names: Interner,
    relation_names: Interner,
    entities: Matrix,
    relations: Matrix,
}

impl KbEmbeddings {
    /// Uniform initialization in `[−0.5/√d2, 0.5/√d2]`.
    pub fn init(kb: &KnowledgeBase, dim: usize, rng: &mut Rng) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        let bound = 0.5 / (dim as f64).sqrt();
        let mut draw = |rows: usize| {
            let data = (0..rows * dim)
                .map(|_| rng.gen_range(-bound..=bound))
                .collect();
            Matrix::from_vec(rows, dim, data)
        };
        let entities = draw(kb.entities().len())?;
        let relations = draw(kb.relations().len())?;
        Ok(KbEmbeddings {
            entity_names: kb.entities().clone(),
            relation_names: kb.relations().clone(),
            entities,
            relations,
        })
    }

    pub fn from_parts(
        entity_names: &[&str],
        entity_vectors: Vec<Vec<f64>>,
        relation_names: &[&str],
        relation_vectors: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let mut en = Interner::default();
        entity_names.iter().for_each(|n| {
            en.intern(n);
        });
        let mut rn = Interner::default();
        relation_names.iter().for_each(|n| {
            rn.intern(n);
        });
        let entities = Matrix::from_rows(&entity_vectors)?;
        let relations = Matrix::from_rows(&relation_vectors)?;
        if en.len() != entities.rows() {
            return Err(Error::dim("entity vectors", en.len(), entities.rows()));
        }
        if rn.len() != relations.rows() {
            return Err(Error::dim("relation vectors", rn.len(), relations.rows()));
        }
        if relations.rows() > 0 && entities.rows() > 0 && relations.cols() != entities.cols() {
            return Err(Error::dim("relation vectors", entities.cols(), relations.cols()));
        }
        Ok(KbEmbeddings {
            entity_names: en,
            relation_names: rn,
            entities,
            relations,
        })
    }

    pub fn dim(&self) -> usize {
        self.entities.cols().max(self.relations.cols())
    }

    pub fn num_entities(&self) -> usize {
        self.entities.rows()
    }

    pub fn entity_names(&self) -> &Interner {
        &self.entity_names
    }

    pub fn entity(&self, id: EntityId) -> Result<&[f64]> {
        if id >= self.entities.rows() {
            return Err(Error::Lookup {
                kind: "entity id",
                name: id.to_string(),
            });
        }
        Ok(self.entities.row(id))
    }

    pub fn relation(&self, id: RelationId) -> Result<&[f64]> {
        if id >= self.relations.rows() {
            return Err(Error::Lookup {
                kind: "relation id",
                name: id.to_string(),
            });
        }
        Ok(self.relations.row(id))
    }

    pub fn entity_matrix(&self) -> &Matrix {
        &self.entities
    }

    pub fn entity_matrix_mut(&mut self) -> &mut Matrix {
        &mut self.entities
    }

    /// Reorders rows so that ids agree with `kb`'s interning. Fails if any KB
    /// name has no vector.
    pub fn align_to(&self, kb: &KnowledgeBase) -> Result<KbEmbeddings> {
        let pick = |names: &Interner, own: &Interner, table: &Matrix, kind: &'static str| {
            let mut data = Vec::with_capacity(names.len() * table.cols());
            for name in names.names() {
                let id = own.get(name).ok_or_else(|| Error::Lookup {
                    kind,
                    name: name.clone(),
                })?;
                data.extend_from_slice(table.row(id));
            }
            Matrix::from_vec(names.len(), table.cols(), data)
        };
        Ok(KbEmbeddings {
            entities: pick(kb.entities(), &self.entity_names, &self.entities, "entity")?,
            relations: pick(kb.relations(), &self.relation_names, &self.relations, "relation")?,
            entity_names: kb.entities().clone(),
            relation_names: kb.relations().clone(),
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("d2={}\n", self.dim());
        let mut rows = |tag: char, names: &Interner, table: &Matrix| {
            for (id, name) in names.names().iter().enumerate() {
                let values: Vec<String> =
                    table.row(id).iter().map(|v| format!("{v:.16e}")).collect();
                let _ = writeln!(out, "{tag}\t{name}\t{}", values.join(","));
            }
        };
        rows('E', &self.entity_names, &self.entities);
        rows('R', &self.relation_names, &self.relations);
        out
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(origin, 1, "missing `d2=` header"))?;
        let dim: usize = header
            .strip_prefix("d2=")
            .and_then(|d| d.trim().parse().ok())
            .filter(|&d| d > 0)
            .ok_or_else(|| Error::parse(origin, 1, format!("bad header `{header}`")))?;
        let mut en = Interner::default();
        let mut rn = Interner::default();
        let mut ev = Vec::new();
        let mut rv = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::parse(origin, i + 1, "expected `tag<TAB>name<TAB>values`"));
            }
            let values = fields[2]
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| Error::parse(origin, i + 1, format!("bad number: {e}")))?;
            if values.len() != dim {
                return Err(Error::parse(
                    origin,
                    i + 1,
                    format!("expected {dim} values, found {}", values.len()),
                ));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::parse(origin, i + 1, "non-finite value"));
            }
            let (names, vectors) = match fields[0] {
                "E" => (&mut en, &mut ev),
                "R" => (&mut rn, &mut rv),
                tag => {
                    return Err(Error::parse(origin, i + 1, format!("unknown tag `{tag}`")))
                }
            };
            if names.get(fields[1]).is_some() {
                return Err(Error::parse(
                    origin,
                    i + 1,
                    format!("duplicate name `{}`", fields[1]),
                ));
            }
            names.intern(fields[1]);
            vectors.extend(values);
        }
        Ok(KbEmbeddings {
            entities: Matrix::from_vec(en.len(), dim, ev)?,
            relations: Matrix::from_vec(rn.len(), dim, rv)?,
            entity_names: en,
            relation_names: rn,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// `sᵀ·diag(r)·o`
pub fn score_triple(emb: &KbEmbeddings, t: Triple) -> Result<f64> {
    let s = emb.entity(t.subject)?;
    let r = emb.relation(t.relation)?;
    let o = emb.entity(t.object)?;
    Ok(trilinear(s, r, o))
}

fn trilinear(s: &[f64], r: &[f64], o: &[f64]) -> f64 {
    s.iter().zip(r).zip(o).map(|((s, r), o)| s * r * o).sum()
}

/// Which position of a triple a negative replaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    Subject,
    Object,
}

/// Replaces the subject or the object (chosen uniformly) with an entity drawn
/// uniformly from `entities` minus the replaced one. Negatives are not
/// filtered against the store.
pub fn sample_negative(t: Triple, entities: &[EntityId], rng: &mut Rng) -> Result<Triple> {
    if entities.len() < 2 {
        return Err(Error::CannotCorrupt(entities.len()));
    }
    let side = if rng.gen_bool(0.5) {
        Corruption::Subject
    } else {
        Corruption::Object
    };
    corrupt(t, side, entities, rng)
}

/// Corrupts a fixed position of `t`.
pub fn corrupt(t: Triple, side: Corruption, entities: &[EntityId], rng: &mut Rng) -> Result<Triple> {
    if entities.len() < 2 {
        return Err(Error::CannotCorrupt(entities.len()));
    }
    let replaced = match side {
        Corruption::Subject => t.subject,
        Corruption::Object => t.object,
    };
    let replacement = match entities.iter().position(|&e| e == replaced) {
        Some(skip) => {
            let k = rng.gen_range(0..entities.len() - 1);
            entities[if k >= skip { k + 1 } else { k }]
        }
        None => entities[rng.gen_range(0..entities.len())],
    };
    Ok(match side {
        Corruption::Subject => Triple { subject: replacement, ..t },
        Corruption::Object => Triple { object: replacement, ..t },
    })
}

/// `max(0, γ − f_pos + f_neg)`
pub fn margin_loss(f_pos: f64, f_neg: f64, gamma: f64) -> f64 {
    (gamma - f_pos + f_neg).max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KbTrainConfig {
    pub dim: usize,
    pub gamma: f64,
    pub epochs: usize,
    pub lr: f64,
    pub negatives_per_positive: usize,
    /// Positives per Adam step.
    pub batch_size: usize,
}

impl Default for KbTrainConfig {
    fn default() -> Self {
        KbTrainConfig {
            dim: 100,
            gamma: 1.0,
            epochs: 200,
            lr: 0.01,
            negatives_per_positive: 1,
            batch_size: 8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KbTrainOutput {
    pub embeddings: KbEmbeddings,
    /// Summed margin loss of each epoch, measured as the epoch runs.
    pub epoch_losses: Vec<f64>,
}

/// Gradient of the hinge term for one (positive, negative) pair, accumulated
/// into dense buffers. Returns the loss. Zero subgradient at the kink.
pub fn accumulate_margin_gradient(
    emb: &KbEmbeddings,
    positive: Triple,
    negative: Triple,
    gamma: f64,
    d_entities: &mut Matrix,
    d_relations: &mut Matrix,
) -> Result<f64> {
    let f_pos = score_triple(emb, positive)?;
    let f_neg = score_triple(emb, negative)?;
    let loss = margin_loss(f_pos, f_neg, gamma);
    if gamma - f_pos + f_neg > 0.0 {
        for (t, sign) in [(positive, -1.0), (negative, 1.0)] {
            let s = emb.entity(t.subject)?;
            let r = emb.relation(t.relation)?;
            let o = emb.entity(t.object)?;
            let dim = s.len();
            for i in 0..dim {
                let (ds, dr, dobj) = (r[i] * o[i], s[i] * o[i], s[i] * r[i]);
                d_entities.row_mut(t.subject)[i] += sign * ds;
                d_relations.row_mut(t.relation)[i] += sign * dr;
                d_entities.row_mut(t.object)[i] += sign * dobj;
            }
        }
    }
    Ok(loss)
}

/// Trains embeddings with minibatch Adam on the summed margin loss.
///
/// Initialization draws from the `kb-init` substream of `seed`; shuffling
/// and negatives draw from `negative-sampling`.
pub fn train_kb(kb: &KnowledgeBase, cfg: &KbTrainConfig, seed: u64) -> Result<KbTrainOutput> {
    if kb.triples().is_empty() {
        return Err(Error::Config("triple store is empty".into()));
    }
    if cfg.dim == 0 {
        return Err(Error::Config("embedding dimension must be positive".into()));
    }
    if cfg.gamma.is_nan() || cfg.gamma <= 0.0 {
        return Err(Error::Config(format!("margin must be positive, got {}", cfg.gamma)));
    }
    if !cfg.lr.is_finite() || cfg.lr <= 0.0 {
        return Err(Error::Config(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    if cfg.negatives_per_positive == 0 || cfg.batch_size == 0 {
        return Err(Error::Config(
            "negatives per positive and batch size must be positive".into(),
        ));
    }
    let mut emb = KbEmbeddings::init(kb, cfg.dim, &mut substream(seed, Substream::KbInit))?;
    let mut rng = substream(seed, Substream::NegativeSampling);
    let entities = kb.entity_ids();
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut ent_state = AdamState::new(emb.entities.as_slice().len(), adam);
    let mut rel_state = AdamState::new(emb.relations.as_slice().len(), adam);
    let mut d_ent = Matrix::zeros(emb.entities.rows(), cfg.dim);
    let mut d_rel = Matrix::zeros(emb.relations.rows(), cfg.dim);

    let mut order: Vec<Triple> = kb.triples().to_vec();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            d_ent.as_mut_slice().fill(0.0);
            d_rel.as_mut_slice().fill(0.0);
            for &pos in batch {
                for _ in 0..cfg.negatives_per_positive {
                    let neg = sample_negative(pos, &entities, &mut rng)?;
                    epoch_loss +=
                        accumulate_margin_gradient(&emb, pos, neg, cfg.gamma, &mut d_ent, &mut d_rel)?;
                }
            }
            adam_step(emb.entities.as_mut_slice(), d_ent.as_slice(), &mut ent_state)?;
            adam_step(emb.relations.as_mut_slice(), d_rel.as_slice(), &mut rel_state)?;
        }
        epoch_losses.push(epoch_loss);
    }
    Ok(KbTrainOutput {
        embeddings: emb,
        epoch_losses,
    })
}

/// 1-based rank of the true object among all entities, ordering candidates
/// by descending score and then ascending id.
pub fn object_rank(emb: &KbEmbeddings, t: Triple) -> Result<usize> {
    let s = emb.entity(t.subject)?;
    let r = emb.relation(t.relation)?;
    let truth = trilinear(s, r, emb.entity(t.object)?);
    let mut ahead = 0;
    for candidate in 0..emb.num_entities() {
        let score = trilinear(s, r, emb.entities.row(candidate));
        if score > truth || (score == truth && candidate < t.object) {
            ahead += 1;
        }
    }
    Ok(ahead + 1)
}

/// Fraction of `triples` whose true object ranks within the top `k`.
pub fn hits_at_k(emb: &KbEmbeddings, triples: &[Triple], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("hits@k needs k ≥ 1".into()));
    }
    if triples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for &t in triples {
        if object_rank(emb, t)? <= k {
            hits += 1;
        }
    }
    Ok(hits as f64 / triples.len() as f64)
}
