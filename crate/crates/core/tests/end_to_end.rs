//! Black-box smoke test: drive the whole library surface the way the CLI
//! does, from raw synthetic files to scored recommendations, using only the
//! public API.

use std::collections::{BTreeMap, BTreeSet};

use pathrec::decode::{recommend, DecodeConfig};
use pathrec::ingest::{chrono_split, graph_with_train, preprocess, PreprocessConfig, SplitDataset};
use pathrec::metrics::{self, audit_faithfulness, EvalContext};
use pathrec::model::train::{train, TrainConfig};
use pathrec::model::{Model, ModelConfig};
use pathrec::sampler::{sample_paths, SamplerConfig};
use pathrec::synth::{self, SynthConfig};
use pathrec::{EntityId, Vocabulary};

#[test]
fn raw_files_to_scored_recommendations() {
    let data = synth::generate(&SynthConfig {
        n_users: 12,
        n_products: 24,
        n_genres: 4,
        n_contributors: 18,
        contributors_per_product: 3,
        interactions_per_user: 6,
        planted: true,
        seed: 1,
    })
    .unwrap();

    let pre = PreprocessConfig {
        min_count: 1,
        min_relation_share: 0.0,
    };
    let (filtered, kept) =
        preprocess(&data.interactions, &data.source, &pre, synth::INTERACTION_RELATION).unwrap();
    let split = chrono_split(&filtered, (0.6, 0.2, 0.2)).unwrap();

    let with_train = graph_with_train(&kept, &split.train, synth::INTERACTION_RELATION);
    let kg = with_train.build(synth::INTERACTION_RELATION).unwrap();
    let vocab = Vocabulary::build(&kg).unwrap();
    let bound = SplitDataset::bind(&split, &kg).unwrap();
    let by_user = SplitDataset::products_by_user(&bound.train, &kg);

    let ds = sample_paths(
        &kg,
        &by_user,
        &SamplerConfig {
            hops: 3,
            sample_size: 10,
            seed: 2,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(!ds.is_empty());

    let seqs: Vec<_> = ds.paths.iter().map(|p| vocab.encode(p).unwrap()).collect();
    let mut model = Model::new(ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        context: 9,
        dropout: 0.0,
        seed: 3,
        vocab_size: vocab.size(),
    })
    .unwrap();
    let report = train(
        &mut model,
        &seqs,
        &TrainConfig {
            steps: 40,
            batch_size: 8,
            lr: 1e-3,
            seed: 4,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.final_loss.is_finite());

    let dcfg = DecodeConfig {
        hops: 3,
        n_beams: 8,
        n_groups: 2,
        diversity_penalty: 0.3,
        n_sequences: 16,
        top_n: 5,
        seed: 5,
        ..Default::default()
    };
    let mut recs: Vec<(EntityId, Vec<EntityId>)> = Vec::new();
    let mut audited = Vec::new();
    for user in kg.users() {
        let products: BTreeSet<EntityId> = by_user[user.idx()].iter().copied().collect();
        if products.is_empty() {
            continue;
        }
        let list = recommend(&model, &kg, &vocab, user, &products, &dcfg).unwrap();
        let mut ranked = Vec::new();
        for item in &list.items {
            let path = item.path.as_ref().expect("constrained decode yields real paths");
            let report = kg.validate_path(path);
            assert!(report.valid, "decoded path must exist in the graph");
            let terminal = path.hops.last().unwrap().1;
            assert!(kg.is_product(terminal));
            assert!(!products.contains(&terminal), "already-interacted products are masked");
            ranked.push(terminal);
            audited.push(item.path.clone());
        }
        recs.push((user, ranked));
    }
    assert!(!recs.is_empty());

    let faith = audit_faithfulness(&audited, 3, &kg);
    assert_eq!(faith.total, audited.len());
    assert_eq!(faith.fully_valid, 1.0, "constrained decoding cannot hallucinate");

    let mut relevant: BTreeMap<EntityId, BTreeSet<EntityId>> = BTreeMap::new();
    for it in &bound.test {
        relevant.entry(it.user).or_default().insert(it.product);
    }
    let ctx = EvalContext {
        k: 5,
        relevant,
        popularity: metrics::popularity_counts(&bound.train),
        catalogue_size: kg.n_products(),
        genres: None,
        novelty_by_user_count: None,
    };
    let m = metrics::evaluate(&recs, &ctx);
    assert!(m.n_users > 0);
    for (value, name) in [
        (m.ndcg, "ndcg"),
        (m.mrr, "mrr"),
        (m.precision, "precision"),
        (m.recall, "recall"),
        (m.coverage, "coverage"),
        (m.novelty, "novelty"),
    ] {
        assert!((0.0..=1.0).contains(&value), "{name} = {value} out of range");
    }
}
