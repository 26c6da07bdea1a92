mod common;

use common::*;
use srapf::pipeline::{retrieve_for_task, RetrievalSource, TrainSet};
use srapf::retrieval::{load_corpus, RetrievedDataset};

#[test]
fn retrieved_sets_survive_a_disk_round_trip() {
    let bench = small_benchmark(21);
    let model = small_model(&bench, 21);
    let dir = tempfile::tempdir().unwrap();
    let corpus_path = dir.path().join("corpus.tsv");
    bench.corpus.save(&corpus_path).unwrap();
    let corpus = load_corpus(&corpus_path).unwrap();
    assert_eq!(corpus.records(), bench.corpus.records());

    let source = RetrievalSource {
        corpus: &corpus,
        payloads: &bench.payloads,
    };
    let (retrieved, set) = retrieve_for_task(&model, &bench.class_names, source, Some(15)).unwrap();
    assert!(!retrieved.is_empty());
    let path = dir.path().join("retrieved.tsv");
    retrieved.save(&path).unwrap();
    let back = RetrievedDataset::load(&path, &bench.class_names).unwrap();
    assert_eq!(back.entries, retrieved.entries);
    assert_eq!(back.to_tsv_string(), retrieved.to_tsv_string());

    let again = TrainSet::materialize(&back, &bench.payloads).unwrap();
    assert_eq!(again, set);
    assert!(set.retrieved.iter().all(|&r| r));
    for (i, e) in retrieved.entries.iter().enumerate() {
        assert_eq!(set.labels[i], e.label);
        assert_eq!(set.inputs.row(i), bench.payloads.get(&e.record.payload_ref).unwrap());
    }
    let counts: usize = retrieved.per_class_counts.iter().map(|c| c.retained).sum();
    assert_eq!(counts, retrieved.len());
    assert!(retrieved
        .per_class_counts
        .iter()
        .all(|c| c.retained <= 15 && c.retained <= c.matched));
}
