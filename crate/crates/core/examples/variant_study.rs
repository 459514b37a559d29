//! Trains the three variants on the synthetic benchmark and prints their
//! mean test accuracy, averaged over seeds.
//!
//! cargo run --release --example variant_study -- [seeds] [episodes]

use std::path::Path;

use kgmeta::episodes::{parse_support_file, parse_task_list, Corpus};
use kgmeta::kb_embedding::{train_kb, KbTrainConfig, KnowledgeBase};
use kgmeta::meta_training::{run_variant, Experiment, Knowledge, TrainConfig};
use kgmeta::retrieval::SurfaceIndex;
use kgmeta::synth::{generate, SynthConfig};
use kgmeta::Variant;

fn main() -> kgmeta::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().map_or(5, |s| s.parse().expect("seeds"));
    let episodes: usize = args.next().map_or(1000, |s| s.parse().expect("episodes"));
    let mut totals = [0.0; 3];
    for seed in 0..seeds {
        let data = generate(&SynthConfig { seed, ..SynthConfig::default() })?;
        let corpus = Corpus::parse(&data.corpus, Path::new("corpus.tsv"))?;
        let kb = KnowledgeBase::parse(&data.triples, Path::new("triples.tsv"))?;
        let kb_cfg = KbTrainConfig { dim: 10, ..KbTrainConfig::default() };
        let embeddings = train_kb(&kb, &kb_cfg, seed)?.embeddings;
        let index = SurfaceIndex::build(&kb);
        let train_tasks = parse_task_list(&data.train_split);
        let supports = parse_support_file(&data.support, Path::new("support.tsv"))?;
        let exp = Experiment {
            corpus: &corpus,
            knowledge: Knowledge { kb: &kb, embeddings: &embeddings, index: &index },
            train_tasks: &train_tasks,
            test_supports: &supports,
        };
        for (i, variant) in Variant::ALL.into_iter().enumerate() {
            let cfg = TrainConfig { d2: 10, episodes, seed, variant, ..TrainConfig::default() };
            let report = run_variant(&cfg, exp)?;
            println!("seed={seed} {}", report.summary());
            totals[i] += report.report.mean_acc;
        }
    }
    for (variant, total) in Variant::ALL.iter().zip(totals) {
        println!("{variant}: {:.4}", total / seeds as f64);
    }
    Ok(())
}
