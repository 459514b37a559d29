//! Multi-task corpus ingestion and C-way N-shot episode sampling.
//!
//! Corpus lines are `task_id<TAB>label<TAB>text`. Each task is its own
//! classification problem; episodes never mix classes from different tasks.
//! Within a task, labels are ordered lexicographically and an episode refers
//! to its classes by 0-based position in [`Episode::classes`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledExample {
    /// 1-based line in the corpus file.
    pub line: usize,
    pub task_id: String,
    pub label: String,
    pub text: String,
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    examples: Vec<LabeledExample>,
    /// task → label → example indices, in file order.
    tasks: BTreeMap<String, BTreeMap<String, Vec<usize>>>,
    by_line: HashMap<usize, usize>,
}

impl Corpus {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut corpus = Corpus::default();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.splitn(3, '\t');
            let (Some(task), Some(label), Some(text)) = (fields.next(), fields.next(), fields.next()) else {
                return Err(Error::parse(origin, line_no, "expected `task_id<TAB>label<TAB>text`"));
            };
            let (task, label, text) = (task.trim(), label.trim(), text.trim());
            if task.is_empty() || label.is_empty() || text.is_empty() {
                return Err(Error::parse(origin, line_no, "empty task id, label or text"));
            }
            corpus.push(LabeledExample {
                line: line_no,
                task_id: task.to_owned(),
                label: label.to_owned(),
                text: text.to_owned(),
            });
        }
        Ok(corpus)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    fn push(&mut self, example: LabeledExample) {
        let idx = self.examples.len();
        self.by_line.insert(example.line, idx);
        self.tasks
            .entry(example.task_id.clone())
            .or_default()
            .entry(example.label.clone())
            .or_default()
            .push(idx);
        self.examples.push(example);
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for e in &self.examples {
            let _ = writeln!(out, "{}\t{}\t{}", e.task_id, e.label, e.text);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[LabeledExample] {
        &self.examples
    }

    pub fn example(&self, idx: usize) -> &LabeledExample {
        &self.examples[idx]
    }

    pub fn task_ids(&self) -> impl Iterator<Item = &str> {
        self.tasks.keys().map(String::as_str)
    }

    pub fn task(&self, task_id: &str) -> Option<&BTreeMap<String, Vec<usize>>> {
        self.tasks.get(task_id)
    }

    pub fn example_at_line(&self, line: usize) -> Option<usize> {
        self.by_line.get(&line).copied()
    }

    /// `(task, label, count)` for every class, sorted.
    pub fn class_counts(&self) -> Vec<(&str, &str, usize)> {
        self.tasks
            .iter()
            .flat_map(|(t, classes)| {
                classes
                    .iter()
                    .map(move |(l, ex)| (t.as_str(), l.as_str(), ex.len()))
            })
            .collect()
    }

    /// Checks that every listed task exists and has at least one class.
    pub fn validate_tasks(&self, task_ids: &[String]) -> Result<()> {
        for t in task_ids {
            match self.tasks.get(t) {
                None => return Err(Error::Validation(format!("task `{t}` is not in the corpus"))),
                Some(classes) if classes.values().any(Vec::is_empty) || classes.is_empty() => {
                    return Err(Error::Validation(format!("task `{t}` has a class with no examples")))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

/// Requested episode geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeShape {
    /// C
    pub classes: usize,
    /// N
    pub shots: usize,
    /// n, the query count.
    pub queries: usize,
    /// Spread queries evenly over classes instead of drawing from the pooled remainder.
    pub balanced_queries: bool,
}

impl EpisodeShape {
    pub fn new(classes: usize, shots: usize, queries: usize) -> Self {
        EpisodeShape {
            classes,
            shots,
            queries,
            balanced_queries: false,
        }
    }

    /// Examples a class needs to take part: N support plus its share of queries.
    pub fn per_class_requirement(&self) -> usize {
        self.shots + self.queries.div_ceil(self.classes.max(1))
    }
}

/// A sampled task: `support[z]` holds the N example indices of class `z`,
/// and `queries[j]` has class `query_labels[j]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub task_id: String,
    pub classes: Vec<String>,
    pub support: Vec<Vec<usize>>,
    pub queries: Vec<usize>,
    pub query_labels: Vec<usize>,
}

impl Episode {
    pub fn support_len(&self) -> usize {
        self.support.iter().map(Vec::len).sum()
    }

    pub fn support_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.support.iter().flatten().copied()
    }
}

/// Draws one episode from the tasks listed in `tasks` (all tasks when empty).
pub fn sample_episode(corpus: &Corpus, tasks: &[String], shape: EpisodeShape, rng: &mut Rng) -> Result<Episode> {
    if shape.classes == 0 || shape.shots == 0 {
        return Err(Error::Config("episodes need C ≥ 1 and N ≥ 1".into()));
    }
    let need = shape.per_class_requirement();
    let candidates: Vec<&str> = if tasks.is_empty() {
        corpus.task_ids().collect()
    } else {
        tasks.iter().map(String::as_str).collect()
    };
    let mut eligible: Vec<(&str, Vec<&str>)> = Vec::new();
    let mut best: Option<(&str, usize)> = None;
    for &t in &candidates {
        let Some(classes) = corpus.task(t) else {
            return Err(Error::Validation(format!("task `{t}` is not in the corpus")));
        };
        let usable: Vec<&str> = classes
            .iter()
            .filter(|(_, ex)| ex.len() >= need)
            .map(|(l, _)| l.as_str())
            .collect();
        if best.is_none_or(|(_, n)| usable.len() > n) {
            best = Some((t, usable.len()));
        }
        if usable.len() >= shape.classes {
            eligible.push((t, usable));
        }
    }
    if eligible.is_empty() {
        let detail = match best {
            None => "no tasks to sample from".to_owned(),
            Some((t, n)) => format!("best task `{t}` has {n}"),
        };
        return Err(Error::Sampling(format!(
            "no task has {} classes with at least {need} examples each ({} shots + {} queries); {detail}",
            shape.classes, shape.shots, shape.queries
        )));
    }

    let (task_id, usable) = eligible.choose(rng).expect("non-empty");
    let mut classes: Vec<&str> = usable.clone();
    classes.partial_shuffle(rng, shape.classes);
    classes.truncate(shape.classes);
    classes.sort_unstable();

    let task = corpus.task(task_id).expect("eligible task exists");
    let mut support = Vec::with_capacity(shape.classes);
    let mut remainders = Vec::with_capacity(shape.classes);
    for (z, label) in classes.iter().enumerate() {
        let mut pool = task[*label].clone();
        pool.partial_shuffle(rng, shape.shots);
        let rest = pool.split_off(shape.shots);
        support.push(pool);
        remainders.push(rest.into_iter().map(move |i| (i, z)).collect::<Vec<_>>());
    }

    let mut picked: Vec<(usize, usize)> = if shape.balanced_queries {
        let base = shape.queries / shape.classes;
        let extra = shape.queries % shape.classes;
        let mut out = Vec::with_capacity(shape.queries);
        for (z, mut rest) in remainders.into_iter().enumerate() {
            let take = base + usize::from(z < extra);
            rest.partial_shuffle(rng, take);
            out.extend_from_slice(&rest[..take]);
        }
        out.shuffle(rng);
        out
    } else {
        let mut pooled: Vec<(usize, usize)> = remainders.into_iter().flatten().collect();
        pooled.partial_shuffle(rng, shape.queries);
        pooled.truncate(shape.queries);
        pooled
    };
    picked.truncate(shape.queries);

    Ok(Episode {
        task_id: (*task_id).to_owned(),
        classes: classes.into_iter().map(str::to_owned).collect(),
        support,
        queries: picked.iter().map(|&(i, _)| i).collect(),
        query_labels: picked.iter().map(|&(_, z)| z).collect(),
    })
}

/// Reads a split file: one task id per line.
pub fn parse_task_list(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect()
}

pub fn load_task_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_task_list(&text))
}

/// Fixed support of one test task, as corpus line numbers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixedSupport {
    pub task_id: String,
    pub lines: Vec<usize>,
}

/// Support file: `task_id<TAB>line,line,...` per test task.
pub fn parse_support_file(text: &str, origin: &Path) -> Result<Vec<FixedSupport>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (task, lines) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(origin, i + 1, "expected `task_id<TAB>line,line,...`"))?;
        let lines = lines
            .split(',')
            .map(|l| l.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::parse(origin, i + 1, format!("bad line number: {e}")))?;
        out.push(FixedSupport {
            task_id: task.trim().to_owned(),
            lines,
        });
    }
    Ok(out)
}

pub fn load_support_file(path: &Path) -> Result<Vec<FixedSupport>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_support_file(&text, path)
}

pub fn support_file_text(supports: &[FixedSupport]) -> String {
    let mut out = String::new();
    for s in supports {
        let lines: Vec<String> = s.lines.iter().map(usize::to_string).collect();
        let _ = writeln!(out, "{}\t{}", s.task_id, lines.join(","));
    }
    out
}

/// Evaluation problem for one test task: the fixed support, and every other
/// example of the task as a query. All of the task's classes take part.
pub fn test_episode(corpus: &Corpus, fixed: &FixedSupport) -> Result<Episode> {
    let task = corpus
        .task(&fixed.task_id)
        .ok_or_else(|| Error::Validation(format!("test task `{}` is not in the corpus", fixed.task_id)))?;
    let classes: Vec<String> = task.keys().cloned().collect();
    let class_of: HashMap<&str, usize> = classes.iter().enumerate().map(|(z, l)| (l.as_str(), z)).collect();
    let mut support = vec![Vec::new(); classes.len()];
    let mut in_support = BTreeSet::new();
    for &line in &fixed.lines {
        let idx = corpus
            .example_at_line(line)
            .ok_or_else(|| Error::Validation(format!("support line {line} is not a corpus example")))?;
        let ex = corpus.example(idx);
        if ex.task_id != fixed.task_id {
            return Err(Error::Validation(format!(
                "support line {line} belongs to task `{}`, not `{}`",
                ex.task_id, fixed.task_id
            )));
        }
        if in_support.insert(idx) {
            support[class_of[ex.label.as_str()]].push(idx);
        }
    }
    if let Some(z) = support.iter().position(Vec::is_empty) {
        return Err(Error::EpisodeConstruction(format!(
            "test task `{}` has no support example for class `{}`",
            fixed.task_id, classes[z]
        )));
    }
    let mut queries = Vec::new();
    let mut query_labels = Vec::new();
    for (z, label) in classes.iter().enumerate() {
        for &idx in &task[label] {
            if !in_support.contains(&idx) {
                queries.push(idx);
                query_labels.push(z);
            }
        }
    }
    Ok(Episode {
        task_id: fixed.task_id.clone(),
        classes,
        support,
        queries,
        query_labels,
    })
}
