use super::*;
use crate::scenes::{generate, SceneConfig};

fn tiny_data() -> Dataset {
    let sc = SceneConfig { height: 32, width: 32, min_size: 8, max_size: 12, test_count: 6, ..SceneConfig::default() };
    generate(&sc, 9, 24, 0.25).unwrap()
}

fn tiny_cfg() -> TrainConfig {
    let mut cfg = TrainConfig {
        seed: 1,
        burn_in_iterations: 4,
        n: 3,
        n_prime: 2,
        total_iterations: 12,
        batch_labeled: 2,
        batch_unlabeled: 2,
        eval_interval: 6,
        ..TrainConfig::default()
    };
    cfg.pseudo.conf_threshold = 0.05;
    cfg.detector.c1 = 4;
    cfg.detector.c2 = 6;
    cfg.detector.kernel = 3;
    cfg.detector.anchor_size = 10.0;
    cfg
}

#[test]
fn standard_labels() {
    let r = AblationRow::standard("A1").unwrap();
    assert_eq!((r.mode, r.cascade, r.uncertainty), (Mode::ClassicalEma, false, false));
    let r = AblationRow::standard("A22").unwrap();
    assert_eq!((r.mode, r.cascade, r.uncertainty), (Mode::TmrRd, false, true));
    let r = AblationRow::standard("A31").unwrap();
    assert_eq!((r.mode, r.cascade, r.uncertainty), (Mode::Tmr, true, false));
    let r = AblationRow::standard("A4").unwrap();
    assert_eq!((r.mode, r.cascade, r.uncertainty), (Mode::ClassicalEma, true, true));
    for bad in ["A", "A5", "A13", "A111", "B1", "a1", ""] {
        assert!(AblationRow::standard(bad).is_none(), "{bad}");
    }
    assert_eq!(AblationSpec::twelve().rows.len(), 12);
    assert_eq!(AblationSpec::six().families(), vec![(false, false), (false, true)]);
}

#[test]
fn spec_file_parsing() {
    let text = "# rows\nA1\nA11   # refinement\nmine tmr_rd 1 0\n\n";
    let spec = AblationSpec::parse(text).unwrap();
    assert_eq!(spec.rows.len(), 3);
    assert_eq!(
        spec.rows[2],
        AblationRow { label: "mine".into(), mode: Mode::TmrRd, cascade: true, uncertainty: false }
    );

    let Err(Error::Config(list)) = AblationSpec::parse("A9\nx tmr maybe 0\nx y\nA1\n") else {
        panic!("expected errors")
    };
    assert_eq!(list.len(), 3, "{list:?}");
    assert!(list[0].starts_with("line 1"));
    assert!(list[2].starts_with("line 3"));

    assert!(AblationSpec::parse("# nothing\n").is_err());
    assert!(AblationSpec::parse("A1\nA1\n").is_err());
    assert!(AblationSpec::from_labels::<&str>(&[]).is_err());
}

fn fake_report() -> AblationReport {
    let spec = AblationSpec::from_labels(&["A1", "A11", "A12"]).unwrap();
    AblationReport {
        baselines: vec![Baseline {
            cascade: false,
            uncertainty: false,
            outcome: Outcome::Done { ap50: 0.5, map: 0.2 },
        }],
        rows: spec
            .rows
            .into_iter()
            .zip([
                Outcome::Done { ap50: 0.61, map: 0.25 },
                Outcome::Failed("diverged".into()),
                Outcome::Done { ap50: 0.7, map: 0.3125 },
            ])
            .map(|(row, outcome)| RowResult { row, outcome })
            .collect(),
    }
}

#[test]
fn table_has_checkmark_layout() {
    let report = fake_report();
    let table = report.to_table();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 2 + 4);
    let cols: Vec<&str> = lines[0].split('|').map(str::trim).collect();
    assert_eq!(cols, ["Abl.", "A1", "A2", "cEMA", "TMR", "RD", "c-regress.", "AP50", "mAP"]);
    let cells = |l: &str| l.split('|').map(|c| c.trim().to_string()).collect::<Vec<_>>();
    assert_eq!(cells(lines[2]), ["Supervised", "✓", "×", "×", "×", "×", "×", "50.00", "20.00"]);
    assert_eq!(cells(lines[3]), ["A1", "✓", "×", "✓", "×", "×", "×", "61.00", "25.00"]);
    assert_eq!(cells(lines[4]), ["A11", "✓", "×", "×", "✓", "×", "×", "FAILED", "FAILED"]);
    assert_eq!(cells(lines[5]), ["A12", "✓", "×", "×", "✓", "✓", "×", "70.00", "31.25"]);
    // separators line up
    let bars =
        |l: &str| l.char_indices().filter(|(_, c)| *c == '|').map(|(i, _)| l[..i].chars().count()).collect::<Vec<_>>();
    for l in &lines[2..] {
        assert_eq!(bars(l), bars(lines[0]));
    }
    assert!(!report.all_ok());
}

#[test]
fn csv_rows() {
    let csv = fake_report().to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], ABLATION_CSV_HEADER);
    assert_eq!(lines[1], "burn_in,supervised,0,0,0.5,0.2,ok");
    assert_eq!(lines[3], "A11,tmr,0,0,,,FAILED: diverged");
    assert_eq!(lines[4], "A12,tmr_rd,0,0,0.7,0.3125,ok");
}

#[test]
fn matrix_runs_and_threads_do_not_change_results() {
    let data = tiny_data();
    let spec = AblationSpec::from_labels(&["A1", "A21", "A12"]).unwrap();
    let one = run_ablation(&tiny_cfg(), &data, &spec, 1).unwrap();
    assert!(one.all_ok(), "{one:?}");
    assert_eq!(one.baselines.len(), 2);
    assert_eq!(one.rows.len(), 3);
    let three = run_ablation(&tiny_cfg(), &data, &spec, 3).unwrap();
    assert_eq!(one, three);

    // a row trained directly from the same burn-in agrees with the matrix
    let row = &spec.rows[2];
    let cfg = row.config(&tiny_cfg());
    let trainer = Trainer::new(cfg.clone(), &data).unwrap();
    let state = trainer.run().unwrap();
    let (ap50, map, _) = trainer.evaluate_state(&state).unwrap();
    assert_eq!(one.rows[2].outcome, Outcome::Done { ap50, map });
}

#[test]
fn failing_runs_are_marked() {
    let data = tiny_data();
    let cfg = TrainConfig { burn_in_lr: 1e200, ..tiny_cfg() };
    let spec = AblationSpec::from_labels(&["A1", "A11"]).unwrap();
    let report = run_ablation(&cfg, &data, &spec, 1).unwrap();
    assert!(!report.all_ok());
    assert!(report.rows.iter().all(|r| matches!(&r.outcome, Outcome::Failed(m) if m.contains("burn-in"))));
    assert!(report.to_table().contains("FAILED"));

    let bad = TrainConfig { n: 0, ..tiny_cfg() };
    assert!(run_ablation(&bad, &data, &spec, 1).is_err());
}
