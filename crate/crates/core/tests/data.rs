use std::fs;

use prunelab::data::{Corpus, DownstreamTask, Grammar, GrammarConfig, TaskKind, TaskSize, TaskSpec, CLS, SEP};
use prunelab::RngState;

mod common;

fn write_all(seed: u64, dir: &std::path::Path) {
    let mut rng = RngState::new(seed);
    let g = Grammar::new(common::small_grammar(), &mut rng).unwrap();
    Corpus::generate(&g, 300, 40, &mut rng).unwrap().write(dir).unwrap();
    let spec = TaskSpec { name: "t".into(), kind: TaskKind::TopicMatch, size: TaskSize::Small, train_examples: Some(50), dev_examples: 20 };
    DownstreamTask::generate(&g, &spec, &rng).unwrap().write(dir).unwrap();
}

fn read_dir_sorted(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap()).map(|e| (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())).collect();
    out.sort();
    out
}

#[test]
fn same_seed_gives_identical_files() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_all(4, a.path());
    write_all(4, b.path());
    write_all(5, c.path());
    assert_eq!(read_dir_sorted(a.path()), read_dir_sorted(b.path()));
    assert_ne!(read_dir_sorted(a.path()), read_dir_sorted(c.path()));
    assert_eq!(read_dir_sorted(a.path()).len(), 4);
}

#[test]
fn corpus_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = RngState::new(1);
    let g = Grammar::new(common::small_grammar(), &mut rng).unwrap();
    let corpus = Corpus::generate(&g, 50, 10, &mut rng).unwrap();
    corpus.write(dir.path()).unwrap();
    assert_eq!(Corpus::read(dir.path()).unwrap(), corpus);
}

#[test]
fn zero_sizes_are_rejected() {
    let mut rng = RngState::new(1);
    let g = Grammar::new(common::small_grammar(), &mut rng).unwrap();
    assert!(Corpus::generate(&g, 0, 10, &mut rng).is_err());
    assert!(Corpus::generate(&g, 10, 0, &mut rng).is_err());
    let spec = TaskSpec { name: "t".into(), kind: TaskKind::Grammaticality, size: TaskSize::Small, train_examples: Some(0), dev_examples: 10 };
    assert!(DownstreamTask::generate(&g, &spec, &rng).is_err());
}

#[test]
fn large_preset_is_at_least_twenty_times_small() {
    assert!(TaskSize::Large.train_examples() >= 20 * TaskSize::Small.train_examples());
}

#[test]
fn every_sequence_is_grammatical_and_dev_is_disjoint() {
    let mut rng = RngState::new(2);
    let g = Grammar::new(GrammarConfig::default(), &mut rng).unwrap();
    let corpus = Corpus::generate(&g, 2000, 200, &mut rng).unwrap();
    assert!(corpus.train.iter().chain(&corpus.dev).all(|s| g.is_grammatical(s) && s[0] == CLS));
    let train: std::collections::HashSet<_> = corpus.train.iter().collect();
    assert!(corpus.dev.iter().all(|s| !train.contains(s)));
}

#[test]
fn labels_follow_the_documented_rule() {
    let mut rng = RngState::new(3);
    let g = Grammar::new(GrammarConfig::default(), &mut rng).unwrap();
    for kind in [TaskKind::Grammaticality, TaskKind::TopicMatch] {
        let spec = TaskSpec { name: "t".into(), kind, size: TaskSize::Small, train_examples: None, dev_examples: 300 };
        let task = DownstreamTask::generate(&g, &spec, &rng).unwrap();
        assert_eq!(task.train.len(), 500);
        for e in task.train.iter().chain(&task.dev) {
            assert_eq!(DownstreamTask::rule_label(&g, kind, &e.tokens), Some(e.label));
        }
        if kind == TaskKind::TopicMatch {
            assert!(task.train.iter().all(|e| e.tokens.iter().filter(|&&t| t == SEP).count() == 1));
        }
    }
}

#[test]
fn negatives_mix_off_topic_and_relation_errors() {
    let mut rng = RngState::new(6);
    let g = Grammar::new(GrammarConfig::default(), &mut rng).unwrap();
    let (mut off_topic, mut relation) = (0, 0);
    for _ in 0..400 {
        let t = g.random_topic(&mut rng);
        let s = g.sentence(t, &mut rng);
        let c = g.corrupt(&s, &mut rng);
        assert!(!g.sentence_is_grammatical(&c));
        let i = (0..s.len()).find(|&i| s[i] != c[i]).unwrap();
        if g.classify(c[i]).topic() == Some(t) {
            relation += 1;
        } else {
            off_topic += 1;
        }
    }
    assert!(off_topic > 150 && relation > 150, "{off_topic} / {relation}");
}
