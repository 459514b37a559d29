use std::path::Path;

use kgmeta::episodes::{parse_support_file, parse_task_list, Corpus};
use kgmeta::kb_embedding::{KbEmbeddings, KnowledgeBase};
use kgmeta::meta_training::{run_variant, Experiment, Knowledge, TrainConfig};
use kgmeta::model::ModelShape;
use kgmeta::retrieval::SurfaceIndex;
use kgmeta::rng::{substream, Substream};
use kgmeta::synth::{generate, SynthConfig};
use kgmeta::Variant;

/// With no training, predictions on balanced binary tasks should sit near chance.
#[test]
fn untrained_models_score_near_chance() {
    for seed in 0..20 {
        let data = generate(&SynthConfig { seed, ..SynthConfig::default() }).unwrap();
        let corpus = Corpus::parse(&data.corpus, Path::new("corpus.tsv")).unwrap();
        let kb = KnowledgeBase::parse(&data.triples, Path::new("triples.tsv")).unwrap();
        let embeddings = KbEmbeddings::init(&kb, 10, &mut substream(seed, Substream::KbInit)).unwrap();
        let index = SurfaceIndex::build(&kb);
        let train_tasks = parse_task_list(&data.train_split);
        let supports = parse_support_file(&data.support, Path::new("support.tsv")).unwrap();
        let exp = Experiment {
            corpus: &corpus,
            knowledge: Knowledge { kb: &kb, embeddings: &embeddings, index: &index },
            train_tasks: &train_tasks,
            test_supports: &supports,
        };
        for variant in Variant::ALL {
            let cfg = TrainConfig { d2: 10, episodes: 0, seed, variant, ..TrainConfig::default() };
            let acc = run_variant(&cfg, exp).unwrap().report.mean_acc;
            assert!((0.35..=0.65).contains(&acc), "seed {seed} {variant}: {acc}");
        }
    }
}

#[test]
fn replacement_parameter_budget_tracks_full() {
    for (d1, hidden, d2) in [(16, 8, 100), (16, 8, 10), (768, 8, 100), (4, 3, 5)] {
        let cfg = TrainConfig { d1, hidden, d2, ..TrainConfig::default() };
        let count = |variant| {
            let shape = ModelShape { vocab_size: 3, ..cfg.model_shape(3) };
            kgmeta::model::ModelParams::init(variant, &shape, &mut substream(0, Substream::ModelInit))
                .unwrap()
                .relation_param_count()
        };
        let (full, ablation, replacement) = (count(Variant::Full), count(Variant::Ablation), count(Variant::Replacement));
        assert!(replacement > ablation);
        let per_unit = (2 * d1 + 2) as f64;
        assert!((replacement as f64 - full as f64).abs() <= per_unit, "{full} vs {replacement}");
    }
}
