use prunelab::experiment::{run_scenario, RunRecord, Scenario};
use prunelab::report::{loss_accuracy_fit, ReportTable, MISSING};

mod common;
use common::tiny_experiment;

fn records() -> Vec<RunRecord> {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_experiment(Scenario::PrunePretrain);
    cfg.seeds = vec![0, 1];
    run_scenario(&cfg, dir.path(), 1).unwrap()
}

#[test]
fn rows_average_over_seeds() {
    let mut recs = records();
    let vals = [(0.0, 0, 0.5, 0.25), (0.0, 1, 0.75, 0.5), (0.5, 0, 0.625, 1.0), (0.5, 1, 0.875, 2.0)];
    for r in &mut recs {
        let &(_, _, acc, loss) = vals.iter().find(|v| v.0 == r.sparsity && v.1 == r.seed).unwrap();
        r.pretrain_dev_loss = loss * 4.0;
        r.tasks[0].best_dev_accuracy = acc;
        r.tasks[0].final_train_loss = loss;
        r.tasks[1].best_dev_accuracy = 1.0 - acc;
        r.tasks[1].final_train_loss = 2.0 * loss;
    }
    let t = ReportTable::from_records(&recs).unwrap();
    assert_eq!(t.tasks, vec!["gram", "topic"]);
    assert_eq!(t.rows.len(), 2);
    let dense = &t.rows[0];
    assert_eq!((dense.sparsity, dense.seeds), (0.0, 2));
    assert_eq!(dense.pretrain_loss, Some(1.5));
    assert_eq!(dense.accuracy, vec![Some(0.625), Some(0.375)]);
    assert_eq!(dense.average_accuracy(), Some(0.5));
    assert_eq!(dense.average_train_loss(), Some((0.375 + 0.75) / 2.0));
    let csv = t.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("sparsity,seeds,pretrain_loss,gram_acc,gram_train_loss,topic_acc,topic_train_loss,avg_acc,avg_train_loss"));
    assert_eq!(lines.next(), Some("0.00,2,1.5000,0.6250,0.3750,0.3750,0.7500,0.5000,0.5625"));
    assert_eq!(lines.next(), Some("0.50,2,6.0000,0.7500,1.5000,0.2500,3.0000,0.5000,2.2500"));
}

#[test]
fn missing_cells_use_placeholder() {
    let mut recs = records();
    recs.retain(|r| r.sparsity == 0.0);
    recs[0].tasks.truncate(1);
    let t = ReportTable::from_records(&recs).unwrap();
    // The 0.5 row comes from the config grid and has no records.
    assert_eq!(t.rows.len(), 2);
    assert_eq!(t.rows[1].seeds, 0);
    let csv = t.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[2].split(',').skip(2).all(|c| c == MISSING), "{}", lines[2]);
    assert!(t.to_text().lines().all(|l| l.len() == t.to_text().lines().nth(1).unwrap().len() || l.starts_with("scenario")));
}

#[test]
fn single_record_gives_single_row() {
    let mut recs = records();
    recs.truncate(1);
    recs[0].config.sparsities = vec![recs[0].sparsity];
    let t = ReportTable::from_records(&recs).unwrap();
    assert_eq!(t.rows.len(), 1);
    assert_eq!(t.rows[0].seeds, 1);
}

#[test]
fn empty_or_mixed_inputs_are_rejected() {
    assert!(ReportTable::from_records(&[]).is_err());
    let mut recs = records();
    recs[1].scenario = Scenario::RandomPrune;
    assert!(ReportTable::from_records(&recs).is_err());
}

#[test]
fn fit_skips_chance_level_points() {
    let mut recs = records();
    for (i, r) in recs.iter_mut().enumerate() {
        r.pretrain_dev_loss = 1.0 + i as f64;
        r.tasks[0].best_dev_accuracy = 0.9 - 0.1 * i as f64;
    }
    recs[3].tasks[0].best_dev_accuracy = 0.5;
    let fit = loss_accuracy_fit(&recs, "gram", 0.5, 0.02).unwrap();
    assert_eq!(fit.n, 3);
    assert!((fit.slope + 0.1).abs() < 1e-12 && (fit.r_squared - 1.0).abs() < 1e-12);
}
