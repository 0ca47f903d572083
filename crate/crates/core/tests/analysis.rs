use prunelab::analysis::{
    export_heatmap, gray_level, layer_cosine_sim, mask_diff, model_head_stats, model_movement, random_mask_diff_baseline, read_heatmap_csv,
    sort_order_movement, weight_stats,
};
use prunelab::model::{Model, ModelConfig};
use prunelab::pruning::{random_mask, MaskSet, PruneMode, PruneScope, Pruner};
use prunelab::{Error, RngState, Tensor2D};

mod common;

fn model(seed: u64) -> Model {
    Model::new(ModelConfig { num_layers: 2, hidden: 16, num_heads: 4, ffn: 32, vocab: 40, max_len: 16, dropout: 0.1, init_std: 0.1 }, &mut RngState::new(seed)).unwrap()
}

fn row(v: &[f32]) -> Tensor2D {
    Tensor2D::from_vec(1, v.len(), v.to_vec()).unwrap()
}

#[test]
fn movement_hand_oracle() {
    let r = sort_order_movement(&row(&[0.1, 0.2, 0.3, 0.4]), &row(&[0.2, 0.1, 0.3, 0.4])).unwrap();
    assert_eq!(r.mean, 12.5);
    let (disp, _) = prunelab::analysis::displacements(&row(&[0.1, 0.2, 0.3, 0.4]), &row(&[0.2, 0.1, 0.3, 0.4])).unwrap();
    assert_eq!(disp, vec![25.0, 25.0, 0.0, 0.0]);
    assert_eq!(r.std, 12.5);
}

#[test]
fn movement_is_zero_under_identity_and_positive_scaling() {
    let w = prunelab::tensor::normal_init(6, 9, 0.0, 1.0, &mut RngState::new(3)).unwrap();
    assert_eq!(sort_order_movement(&w, &w).unwrap().mean, 0.0);
    assert_eq!(sort_order_movement(&w, &w.scale(3.5)).unwrap().mean, 0.0);
    assert_eq!(sort_order_movement(&w, &w.scale(-0.25)).unwrap().mean, 0.0);
}

#[test]
fn model_movement_matches_an_independent_rank_oracle() {
    let (a, mut b) = (model(1), model(1));
    let noise = model(2);
    for i in 0..b.num_params() {
        let n = noise.param(i).scale(0.3);
        b.param_mut(i).add_assign(&n).unwrap();
    }
    let set = a.prunable_set();
    let report = model_movement(&a, &b, &set).unwrap();
    let rank = |w: &Tensor2D| {
        let mut idx: Vec<usize> = (0..w.len()).collect();
        idx.sort_by(|&i, &j| w.data()[i].abs().partial_cmp(&w.data()[j].abs()).unwrap().then(i.cmp(&j)));
        let mut r = vec![0i64; w.len()];
        for (pos, i) in idx.into_iter().enumerate() {
            r[i] = pos as i64;
        }
        r
    };
    for (e, (name, m)) in set.entries().iter().zip(&report.matrices) {
        assert_eq!(&e.name, name);
        let (wa, wb) = (a.param(e.param), b.param(e.param));
        let (ra, rb) = (rank(wa), rank(wb));
        let n = wa.len() as f64;
        let disp: Vec<f64> = ra.iter().zip(&rb).map(|(x, y)| (x - y).abs() as f64 / n * 100.0).collect();
        let mean = disp.iter().sum::<f64>() / n;
        let std = (disp.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((m.mean - mean).abs() < 1e-9 && (m.std - std).abs() < 1e-9, "{name}");
        assert!(m.mean > 0.0);
    }
}

#[test]
fn cosine_of_a_model_with_itself_is_one() {
    let m = model(4);
    let seqs: Vec<Vec<u32>> = (0..5).map(|i| (0..8).map(|j| (i * 7 + j * 3) % 40).collect()).collect();
    let r = layer_cosine_sim(&m, &m, &seqs).unwrap();
    assert_eq!(r.per_layer.len(), 2);
    assert!(r.per_layer.iter().all(|c| (c - 1.0).abs() < 1e-6));
    let other = layer_cosine_sim(&m, &model(5), &seqs).unwrap();
    assert!(other.per_layer.iter().all(|&c| c < 0.999));
}

#[test]
fn mismatched_models_are_rejected() {
    let small = model(1);
    let big = Model::new(ModelConfig { num_layers: 3, hidden: 16, num_heads: 4, ffn: 32, vocab: 40, max_len: 16, dropout: 0.1, init_std: 0.1 }, &mut RngState::new(1)).unwrap();
    assert!(matches!(layer_cosine_sim(&small, &big, &[vec![1u32, 2]]), Err(Error::Incompatible(_))));
    assert!(matches!(model_movement(&small, &big, &small.prunable_set()), Err(Error::Incompatible(_))));
}

#[test]
fn random_masks_differ_at_the_baseline_rate() {
    let s = 0.6;
    let a = MaskSet { names: vec!["w".into()], masks: vec![random_mask(200, 200, s, &mut RngState::new(1)).unwrap()] };
    let b = MaskSet { names: vec!["w".into()], masks: vec![random_mask(200, 200, s, &mut RngState::new(2)).unwrap()] };
    let d = mask_diff(&a, &b).unwrap().overall;
    assert!((d - random_mask_diff_baseline(s)).abs() < 0.01, "{d}");
    assert_eq!(random_mask_diff_baseline(0.5), 0.5);
}

#[test]
fn head_stats_cover_every_attention_matrix() {
    let mut m = model(6);
    let mut pruner = Pruner::new(&m, PruneMode::Masked, PruneScope::Global, None, &RngState::new(0)).unwrap();
    pruner.prune_to(&mut m, 0.5).unwrap();
    let stats = model_head_stats(pruner.masks(), &m.prunable_set(), 4, 0.5).unwrap();
    assert_eq!(stats.matrices.len(), 2 * 3);
    assert!(stats.matrices.iter().all(|h| h.fractions.len() == 4));
    assert!(stats.min <= stats.mean && stats.mean <= stats.max);
}

#[test]
fn weight_stats_match_direct_computation() {
    let m = model(7);
    let set = m.prunable_set();
    for (e, s) in set.entries().iter().zip(weight_stats(&m, &set)) {
        let d: Vec<f64> = m.param(e.param).data().iter().map(|&v| f64::from(v)).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64;
        assert_eq!(s.count, d.len());
        assert!((s.mean - mean).abs() < 1e-12 && (s.std - var.sqrt()).abs() < 1e-12);
    }
}

#[test]
fn heatmaps_round_trip_and_normalize_per_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let w = Tensor2D::from_vec(2, 3, vec![0.5, -1.0, 0.0, 0.25, 2.0, -2.0]).unwrap();
    let (csv, pgm) = export_heatmap(&w, dir.path().join("w")).unwrap();
    assert_eq!(read_heatmap_csv(&csv).unwrap(), w.map(f32::abs));
    let text = std::fs::read_to_string(pgm).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("P2"));
    assert_eq!(lines.next(), Some("3 2"));
    assert_eq!(lines.next(), Some("255"));
    assert_eq!(lines.next(), Some("64 128 0"));
    assert_eq!(lines.next(), Some("32 255 255"));
    assert_eq!(gray_level(1.0, 0.0), 0);
}
