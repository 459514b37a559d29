//! Synthetic diverse-task benchmark.
//!
//! Tasks belong to families. Every sentence carries its task's keyword plus
//! a few feature words from every family's word group. Only the group of the
//! task's own family agrees with the label; the other groups are drawn at
//! random. A metric that looks at the right group classifies perfectly,
//! while a single shared metric has to average over all of them.
//!
//! Task keywords are KB subjects whose object is the task's family concept,
//! so the family (and hence the relevant word group) can be recovered from
//! the knowledge base even for test tasks whose keywords were never seen in
//! training text.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::episodes::{support_file_text, FixedSupport};
use crate::error::{Error, Result};
use crate::kb_embedding::KnowledgeBase;
use crate::rng::{substream, Substream};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Total tasks, training and test.
    pub tasks: usize,
    /// The last `test_tasks` tasks form the test split.
    pub test_tasks: usize,
    pub classes: usize,
    /// Examples per class per task.
    pub examples: usize,
    /// Feature words per (family, class).
    pub vocab: usize,
    /// Filler triples added to the KB beyond the task and family facts.
    pub kb_size: usize,
    pub families: usize,
    /// Feature words drawn from each family's group per sentence.
    pub words_per_group: usize,
    /// Fixed support examples per class for each test task.
    pub shots: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            tasks: 12,
            test_tasks: 4,
            classes: 2,
            examples: 40,
            vocab: 4,
            kb_size: 40,
            families: 4,
            words_per_group: 2,
            shots: 5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("tasks", self.tasks),
            ("classes", self.classes),
            ("examples", self.examples),
            ("vocab", self.vocab),
            ("families", self.families),
            ("words_per_group", self.words_per_group),
            ("shots", self.shots),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.test_tasks >= self.tasks {
            return Err(Error::Config(format!(
                "test_tasks ({}) must leave at least one training task out of {}",
                self.test_tasks, self.tasks
            )));
        }
        if self.test_tasks > 0 && self.shots >= self.examples {
            return Err(Error::Config(format!(
                "shots ({}) must be below examples per class ({})",
                self.shots, self.examples
            )));
        }
        Ok(())
    }

    pub fn family_of(&self, task: usize) -> usize {
        task % self.families
    }
}

pub fn task_name(task: usize) -> String {
    format!("task{task:02}")
}

pub fn keyword(task: usize) -> String {
    format!("brand{task:02}")
}

pub fn family_name(family: usize) -> String {
    format!("family{family:02}")
}

fn feature_word(family: usize, class: usize, k: usize) -> String {
    format!("w{family}x{class}x{k}")
}

/// Generated files, as text.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub corpus: String,
    pub triples: String,
    pub train_split: String,
    pub test_split: String,
    pub support: String,
}

impl SynthData {
    pub const CORPUS: &'static str = "corpus.tsv";
    pub const TRIPLES: &'static str = "triples.tsv";
    pub const TRAIN_SPLIT: &'static str = "train.txt";
    pub const TEST_SPLIT: &'static str = "test.txt";
    pub const SUPPORT: &'static str = "support.tsv";

    pub fn files(&self) -> [(&'static str, &str); 5] {
        [
            (Self::CORPUS, &self.corpus),
            (Self::TRIPLES, &self.triples),
            (Self::TRAIN_SPLIT, &self.train_split),
            (Self::TEST_SPLIT, &self.test_split),
            (Self::SUPPORT, &self.support),
        ]
    }

    pub fn write_to(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in self.files() {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = substream(cfg.seed, Substream::Synth);

    let mut corpus = String::new();
    let mut line = 0usize;
    let mut supports = Vec::new();
    let first_test = cfg.tasks - cfg.test_tasks;
    for task in 0..cfg.tasks {
        let family = cfg.family_of(task);
        let mut support_lines = Vec::new();
        for class in 0..cfg.classes {
            for e in 0..cfg.examples {
                let mut words = vec![keyword(task)];
                for group in 0..cfg.families {
                    let value = if group == family {
                        class
                    } else {
                        rng.gen_range(0..cfg.classes)
                    };
                    for _ in 0..cfg.words_per_group {
                        words.push(feature_word(group, value, rng.gen_range(0..cfg.vocab)));
                    }
                }
                words[1..].shuffle(&mut rng);
                line += 1;
                let _ = writeln!(corpus, "{}\t{}\t{}", task_name(task), class + 1, words.join(" "));
                if task >= first_test && e < cfg.shots {
                    support_lines.push(line);
                }
            }
        }
        if task >= first_test {
            supports.push(FixedSupport {
                task_id: task_name(task),
                lines: support_lines,
            });
        }
    }

    let mut kb = KnowledgeBase::new();
    for task in 0..cfg.tasks {
        kb.insert(&keyword(task), "belongs to", &family_name(cfg.family_of(task)));
    }
    for family in 0..cfg.families {
        kb.insert(&family_name(family), "subcategory of", "product");
    }
    let filler_entities = (cfg.kb_size / 2).max(2);
    let relations = ["related to", "part of", "associated with"];
    let mut attempts = 0;
    let mut added = 0;
    while added < cfg.kb_size && attempts < cfg.kb_size * 20 {
        attempts += 1;
        let subject = format!("entity{:03}", rng.gen_range(0..filler_entities));
        let relation = relations[rng.gen_range(0..relations.len())];
        let object = if rng.gen_bool(0.25) {
            family_name(rng.gen_range(0..cfg.families))
        } else {
            format!("entity{:03}", rng.gen_range(0..filler_entities))
        };
        if subject != object && kb.insert(&subject, relation, &object).is_some() {
            added += 1;
        }
    }

    let names = |range: std::ops::Range<usize>| range.map(|t| task_name(t) + "\n").collect::<String>();
    Ok(SynthData {
        corpus,
        triples: kb.to_tsv(),
        train_split: names(0..first_test),
        test_split: names(first_test..cfg.tasks),
        support: support_file_text(&supports),
    })
}
