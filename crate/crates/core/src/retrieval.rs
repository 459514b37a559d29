//! Linking sample-set text to KB concepts.
//!
//! Mentions are found by case-insensitive exact matching of token n-grams
//! (up to [`MAX_MENTION_TOKENS`]) against KB subject names, longest match
//! first, with overlapping matches suppressed left to right. Each matched
//! subject contributes every object it points to. The concept embeddings are
//! then averaged into a single knowledge vector.

use std::collections::{BTreeSet, HashMap};

use crate::error::Result;
use crate::kb_embedding::{EntityId, KbEmbeddings, KnowledgeBase};

pub const MAX_MENTION_TOKENS: usize = 3;

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Lowercased subject surface forms → entity.
#[derive(Debug, Clone, Default)]
pub struct SurfaceIndex {
    forms: HashMap<Vec<String>, EntityId>,
    warnings: Vec<String>,
}

impl SurfaceIndex {
    /// Indexes the name of every triple subject. When two subjects share a
    /// surface form the first one seen keeps it and a warning is recorded.
    pub fn build(kb: &KnowledgeBase) -> Self {
        let mut index = SurfaceIndex::default();
        for subject in kb.subjects() {
            let name = kb.entities().name(subject).unwrap_or_default();
            let key = tokenize(name);
            if key.is_empty() {
                index
                    .warnings
                    .push(format!("subject `{name}` has no alphanumeric tokens; not indexed"));
                continue;
            }
            if key.len() > MAX_MENTION_TOKENS {
                index.warnings.push(format!(
                    "subject `{name}` has {} tokens (max {MAX_MENTION_TOKENS}); not indexed",
                    key.len()
                ));
                continue;
            }
            match index.forms.get(&key) {
                Some(&existing) if existing != subject => index.warnings.push(format!(
                    "surface form `{}` already maps to `{}`; ignoring `{name}`",
                    key.join(" "),
                    kb.entities().name(existing).unwrap_or_default(),
                )),
                Some(_) => {}
                None => {
                    index.forms.insert(key, subject);
                }
            }
        }
        index
    }

    pub fn get(&self, tokens: &[String]) -> Option<EntityId> {
        self.forms.get(tokens).copied()
    }

    pub fn len(&self) -> usize {
        self.forms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forms.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &Vec<String>> {
        self.forms.keys()
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Subject mentions in one sentence, left to right.
    pub fn mentions(&self, sentence: &str) -> Vec<EntityId> {
        let tokens = tokenize(sentence);
        let mut found = Vec::new();
        let mut start = 0;
        while start < tokens.len() {
            let longest = MAX_MENTION_TOKENS.min(tokens.len() - start);
            let hit = (1..=longest)
                .rev()
                .find_map(|len| self.get(&tokens[start..start + len]).map(|e| (e, len)));
            match hit {
                Some((entity, len)) => {
                    found.push(entity);
                    start += len;
                }
                None => start += 1,
            }
        }
        found
    }
}

/// Objects of every KB subject mentioned anywhere in `sample_set`.
pub fn retrieve_concepts<'a, I>(index: &SurfaceIndex, kb: &KnowledgeBase, sample_set: I) -> BTreeSet<EntityId>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut concepts = BTreeSet::new();
    for sentence in sample_set {
        for subject in index.mentions(sentence) {
            concepts.extend(kb.objects_of(subject).iter().copied());
        }
    }
    concepts
}

/// Element-wise mean of the concept embeddings; the zero vector when there
/// are no concepts.
pub fn knowledge_representation(concepts: &BTreeSet<EntityId>, emb: &KbEmbeddings) -> Result<Vec<f64>> {
    let mut mean = vec![0.0; emb.dim()];
    for &c in concepts {
        for (m, v) in mean.iter_mut().zip(emb.entity(c)?) {
            *m += v;
        }
    }
    if !concepts.is_empty() {
        let n = concepts.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
    }
    Ok(mean)
}

/// The retrieved concept set of a sample set and its mean embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeContext {
    pub concepts: BTreeSet<EntityId>,
    pub vector: Vec<f64>,
}

impl KnowledgeContext {
    pub fn retrieve<'a, I>(index: &SurfaceIndex, kb: &KnowledgeBase, emb: &KbEmbeddings, sample_set: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let concepts = retrieve_concepts(index, kb, sample_set);
        let vector = knowledge_representation(&concepts, emb)?;
        Ok(KnowledgeContext { concepts, vector })
    }

    pub fn empty(dim: usize) -> Self {
        KnowledgeContext {
            concepts: BTreeSet::new(),
            vector: vec![0.0; dim],
        }
    }
}
