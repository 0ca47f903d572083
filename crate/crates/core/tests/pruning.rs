use prunelab::data::{Corpus, Grammar};
use prunelab::model::{Model, ModelConfig};
use prunelab::pruning::{magnitude_mask, MaskSet, PruneMode, PruneScope, Pruner, SparsitySchedule};
use prunelab::training::{dev_instances, pretrain, PretrainConfig};
use prunelab::RngState;

mod common;

fn setup() -> (Model, Grammar, Corpus) {
    let mut rng = RngState::new(11);
    let grammar = Grammar::new(common::small_grammar(), &mut rng).unwrap();
    let corpus = Corpus::generate(&grammar, 200, 10, &mut rng).unwrap();
    let cfg = ModelConfig { num_layers: 1, hidden: 16, num_heads: 2, ffn: 32, vocab: 64, max_len: 32, dropout: 0.1, init_std: 0.05 };
    (Model::new(cfg, &mut rng).unwrap(), grammar, corpus)
}

fn train_with(mode: PruneMode) -> (Model, Model, Pruner) {
    let (mut model, grammar, corpus) = setup();
    let mut pruner = Pruner::new(&model, mode, PruneScope::MatrixLocal, None, &RngState::new(2)).unwrap();
    pruner.prune_to(&mut model, 0.5).unwrap();
    let pruned = model.clone();
    let dev = dev_instances(&corpus.dev, grammar.word_range(), 5);
    let cfg = PretrainConfig { batch_size: 4, lr: 3e-3, ..Default::default() };
    pretrain(&mut model, &corpus.train, &dev, grammar.word_range(), 200, &cfg, Some(&mut pruner), &RngState::new(3)).unwrap();
    (pruned, model, pruner)
}

fn masked_values(model: &Model, masks: &MaskSet) -> Vec<f32> {
    let set = model.prunable_set();
    set.entries()
        .iter()
        .zip(&masks.masks)
        .flat_map(|(e, m)| model.param(e.param).data().iter().zip(m.keep()).filter(|(_, &k)| !k).map(|(&v, _)| v).collect::<Vec<_>>())
        .collect()
}

#[test]
fn masked_mode_keeps_pruned_weights_at_zero() {
    let (pruned, trained, pruner) = train_with(PruneMode::Masked);
    assert!(masked_values(&pruned, pruner.masks()).iter().all(|&v| v == 0.0));
    let after = masked_values(&trained, pruner.masks());
    assert!(!after.is_empty());
    assert!(after.iter().all(|&v| v == 0.0));
}

#[test]
fn information_deletion_lets_weights_regrow() {
    let (pruned, trained, pruner) = train_with(PruneMode::InformationDeletion);
    assert!(masked_values(&pruned, pruner.masks()).iter().all(|&v| v == 0.0));
    assert!(masked_values(&trained, pruner.masks()).iter().any(|&v| v != 0.0));
}

#[test]
fn schedule_reaches_target_and_pruned_sets_only_grow() {
    let (mut model, _, _) = setup();
    let sched = SparsitySchedule::new(0.7, 0, 50, 10).unwrap();
    let mut pruner = Pruner::new(&model, PruneMode::Masked, PruneScope::MatrixLocal, Some(sched), &RngState::new(0)).unwrap();
    let mut previous = pruner.masks().clone();
    for step in 0..80 {
        if pruner.on_step(&mut model, step).unwrap() {
            for (old, new) in previous.masks.iter().zip(&pruner.masks().masks) {
                assert!(old.is_subset_of(new), "step {step}");
            }
            previous = pruner.masks().clone();
        }
    }
    assert_eq!(pruner.current_sparsity(), 0.7);
    for m in &pruner.masks().masks {
        assert!((m.sparsity() - 0.7).abs() <= 1.0 / m.len() as f64);
    }
}

#[test]
fn random_masks_are_nested_and_ignore_magnitude() {
    let (model, _, _) = setup();
    let mut pruner = Pruner::new(&model, PruneMode::RandomMasked, PruneScope::MatrixLocal, None, &RngState::new(9)).unwrap();
    let mut m = model.clone();
    pruner.prune_to(&mut m, 0.3).unwrap();
    let low = pruner.masks().clone();
    pruner.prune_to(&mut m, 0.6).unwrap();
    let high = pruner.masks().clone();
    let set = model.prunable_set();
    let mut differs_from_magnitude = false;
    for ((e, a), b) in set.entries().iter().zip(&low.masks).zip(&high.masks) {
        assert!(a.is_subset_of(b));
        assert_eq!(b.pruned_count(), prunelab::pruning::prune_count(0.6, b.len()));
        differs_from_magnitude |= *b != magnitude_mask(model.param(e.param), 0.6).unwrap();
    }
    assert!(differs_from_magnitude);
}

#[test]
fn fixed_masks_must_match_the_model() {
    let (model, _, _) = setup();
    let mut masks = MaskSet::all_kept(&model.prunable_set(), &model);
    masks.names.reverse();
    assert!(Pruner::with_masks(&model, PruneMode::Masked, masks).is_err());
}

#[test]
fn mask_files_round_trip() {
    let (mut model, _, _) = setup();
    let mut pruner = Pruner::new(&model, PruneMode::Masked, PruneScope::Global, None, &RngState::new(0)).unwrap();
    pruner.prune_to(&mut model, 0.4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.prnl");
    pruner.masks().save(&path, &pruner.meta(7)).unwrap();
    let (back, meta) = MaskSet::load(&path).unwrap();
    assert_eq!(&back, pruner.masks());
    assert_eq!(meta.seed, 7);
    assert_eq!(meta.scope, PruneScope::Global);
}
