use std::collections::BTreeSet;

use super::*;
use crate::tensor::{rng::stream, Rng};

fn table(header: &[&str], rows: &[&[&str]]) -> RawTable {
    RawTable {
        header: header.iter().map(|s| s.to_string()).collect(),
        rows: rows.iter().map(|r| r.iter().map(|s| s.to_string()).collect()).collect(),
    }
}

fn pm_filter() -> OutlierFilter {
    OutlierFilter { fine: "PM2.5".into(), coarse: "PM10".into(), remove_when: OutlierDirection::FineExceedsCoarse }
}

#[test]
fn outlier_filter_examples() {
    let t = table(&["PM2.5", "PM10"], &[&["60", "50"], &["38", "80"]]);
    let (kept, frac) = filter_pollution_outliers(&t, &pm_filter()).unwrap();
    assert_eq!(kept.rows, vec![vec!["38".to_string(), "80".to_string()]]);
    assert_eq!(frac, 0.5);

    let empty = table(&["PM2.5", "PM10"], &[]);
    let (kept, frac) = filter_pollution_outliers(&empty, &pm_filter()).unwrap();
    assert!(kept.rows.is_empty());
    assert_eq!(frac, 0.0);

    let flipped = OutlierFilter { remove_when: OutlierDirection::CoarseExceedsFine, ..pm_filter() };
    let (kept, _) = filter_pollution_outliers(&t, &flipped).unwrap();
    assert_eq!(kept.rows[0][0], "60");
}

#[test]
fn outlier_filter_needs_columns() {
    let t = table(&["PM2.5"], &[&["1"]]);
    assert!(matches!(filter_pollution_outliers(&t, &pm_filter()), Err(Error::Data { .. })));
}

fn small_schema() -> TableSchema {
    TableSchema {
        columns: vec![
            ColumnSpec::new("id", ColumnRole::Entity),
            ColumnSpec::new("ts", ColumnRole::Timestamp),
            ColumnSpec::new("kind", ColumnRole::Categorical),
            ColumnSpec::new("x", ColumnRole::Numerical),
            ColumnSpec::new("y", ColumnRole::Target),
        ],
        window_length: 3,
        derived: vec![DerivedFeature::Hour],
        n_bins: 2,
        timestamp_parts: None,
        label_mode: LabelMode::PerStep,
        label_kind: LabelKind::Regression,
    }
}

fn small_table() -> RawTable {
    let mut rows = Vec::new();
    for e in 0..6 {
        for t in 0..4 {
            rows.push(vec![
                format!("u{e}"),
                format!("2024-03-0{} {:02}:00", 1 + t / 24, t),
                if t % 2 == 0 { "a".into() } else { "b".into() },
                if t == 2 && e == 1 { "".into() } else { format!("{}", e * 10 + t) },
                format!("{}", e + t),
            ]);
        }
    }
    RawTable { header: ["id", "ts", "kind", "x", "y"].iter().map(|s| s.to_string()).collect(), rows }
}

#[test]
fn schema_validation() {
    let mut s = small_schema();
    assert!(s.validate().is_ok());
    s.columns.push(ColumnSpec::new("id2", ColumnRole::Entity));
    assert!(s.validate().is_err());
    let mut s = small_schema();
    s.window_length = 0;
    assert!(s.validate().is_err());
    let mut s = small_schema();
    s.columns.retain(|c| c.role != ColumnRole::Timestamp);
    assert!(s.validate().is_err(), "hour feature without a timestamp");
    let mut s = small_schema();
    s.columns[3].binner = Some(QuantileBinner { boundaries: vec![2.0, 1.0] });
    assert!(s.validate().is_err());
}

#[test]
fn prepare_small_table() {
    let prep = PrepConfig { stride: 1, split: [0.5, 0.5, 0.0], split_mode: SplitMode::ByEntity, outlier_filter: None };
    let ds = prepare(&small_table(), &small_schema(), &prep, 7).unwrap();
    assert_eq!(ds.meta.field_names, vec!["kind", "x", "hour"]);
    assert_eq!((ds.meta.rows, ds.meta.cols, ds.meta.n_labels), (3, 3, 3));
    // 6 entities x 2 windows.
    assert_eq!(ds.samples.len(), 12);
    let ents = |sp| ds.split(sp).map(|s| s.entity.clone()).collect::<BTreeSet<_>>();
    assert_eq!(ents(Split::Train).len(), 3);
    assert!(ents(Split::Train).is_disjoint(&ents(Split::Val)));
    // Missing numeric value becomes its own token.
    let s = ds.samples.iter().find(|s| s.entity == "u1" && s.window_start == 0).unwrap();
    assert_eq!(s.fields[2][1], MISSING);
    assert_eq!(s.fields[1][2], "1");
    // Labels per step, windows chronological.
    assert_eq!(s.labels, vec![1.0, 2.0, 3.0]);
    // Binner fitted on train rows only.
    let b = ds.meta.schema.columns[3].binner.as_ref().unwrap();
    let train_x: Vec<f64> = ds
        .split(Split::Train)
        .flat_map(|s| s.entity[1..].parse::<usize>().ok())
        .flat_map(|e| (0..4).filter(move |&t| !(t == 2 && e == 1)).map(move |t| (e * 10 + t) as f64))
        .collect();
    assert_eq!(b, &QuantileBinner::fit(&train_x, 2).unwrap());
    let norm = ds.normalizer.as_ref().unwrap();
    assert_eq!(norm.n_targets(), 1);
}

#[test]
fn prepare_is_deterministic_and_roundtrips() {
    let prep = PrepConfig::default();
    let a = prepare(&small_table(), &small_schema(), &prep, 3).unwrap();
    let b = prepare(&small_table(), &small_schema(), &prep, 3).unwrap();
    assert_eq!(a, b);
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    a.write(d1.path()).unwrap();
    b.write(d2.path()).unwrap();
    for f in [files::SCHEMA, files::SAMPLES, files::VOCAB, files::NORMALIZER, files::SPLITS] {
        let x = std::fs::read(d1.path().join(f)).unwrap();
        let y = std::fs::read(d2.path().join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
    let back = PreparedDataset::read(d1.path()).unwrap();
    assert_eq!(back, a);
}

#[test]
fn csv_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.csv");
    std::fs::write(&p, "a,b\n1,2\n3\n").unwrap();
    let err = RawTable::read_csv(&p).unwrap_err().to_string();
    assert!(err.contains("line 3"), "{err}");
    let missing = RawTable::read_csv(&dir.path().join("nope.csv")).unwrap_err().to_string();
    assert!(missing.contains("nope.csv"), "{missing}");
}

#[test]
fn bad_timestamp_reports_row() {
    let mut t = small_table();
    t.rows[5][1] = "yesterday".into();
    let err = prepare(&t, &small_schema(), &PrepConfig::default(), 0).unwrap_err();
    assert!(matches!(err, Error::Data { row: Some(5), .. }), "{err}");
}

#[test]
fn hour_probe_counts_up_from_start() {
    let cfg = SyntheticConfig { start_hour: Some(5), n_entities: 2, ..SyntheticConfig::new(SyntheticTask::HourProbe) };
    let (t, schema) = generate_synthetic(&cfg, &mut Rng::new(1, stream::SYNTHETIC)).unwrap();
    schema.validate().unwrap();
    let h = t.column("Hour").unwrap();
    let hours: Vec<u32> = t.rows[..10].iter().map(|r| r[h].parse().unwrap()).collect();
    assert_eq!(hours, (5..15).collect::<Vec<_>>());
}

#[test]
fn hour_probe_wraps_mod_24() {
    let cfg = SyntheticConfig { rows_per_entity: 40, n_entities: 3, ..SyntheticConfig::new(SyntheticTask::HourProbe) };
    let (t, _) = generate_synthetic(&cfg, &mut Rng::new(2, stream::SYNTHETIC)).unwrap();
    let h = t.column("Hour").unwrap();
    for w in t.rows.windows(2).filter(|w| w[0][0] == w[1][0]) {
        let (a, b): (u32, u32) = (w[0][h].parse().unwrap(), w[1][h].parse().unwrap());
        assert_eq!(b, (a + 1) % 24);
    }
}

#[test]
fn synthetic_is_seeded() {
    for task in [SyntheticTask::HourProbe, SyntheticTask::CrossFieldRegression, SyntheticTask::DefaultClassification] {
        let cfg = SyntheticConfig::new(task);
        let a = generate_synthetic(&cfg, &mut Rng::new(9, stream::SYNTHETIC)).unwrap();
        let b = generate_synthetic(&cfg, &mut Rng::new(9, stream::SYNTHETIC)).unwrap();
        let c = generate_synthetic(&cfg, &mut Rng::new(10, stream::SYNTHETIC)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, c.0);
    }
}

#[test]
fn cross_field_target_recomputes() {
    let cfg = SyntheticConfig { rows_per_entity: 30, n_entities: 5, ..SyntheticConfig::new(SyntheticTask::CrossFieldRegression) };
    let (t, _) = generate_synthetic(&cfg, &mut Rng::new(4, stream::SYNTHETIC)).unwrap();
    let (cat, y) = (t.column("cat0").unwrap(), t.column("y").unwrap());
    for e in 0..cfg.n_entities {
        let rows = &t.rows[e * 30..(e + 1) * 30];
        for (i, row) in rows.iter().enumerate() {
            // The source row is the previous one except at a window start.
            let src = if i % 10 == 0 { i + 1 } else { i - 1 };
            assert_ne!(src, i);
            let level: usize = rows[src][cat][1..].parse().unwrap();
            let perm = (level * 5 + 3) % cfg.n_levels;
            assert_eq!(row[y].parse::<f64>().unwrap(), 10.0 + 3.0 * perm as f64);
        }
    }
}

#[test]
fn default_labels_follow_trailing_sum() {
    let cfg = SyntheticConfig { rows_per_entity: 25, n_entities: 40, ..SyntheticConfig::new(SyntheticTask::DefaultClassification) };
    let (t, schema) = generate_synthetic(&cfg, &mut Rng::new(5, stream::SYNTHETIC)).unwrap();
    let (x, y) = (t.column("num0").unwrap(), t.column("default").unwrap());
    let mut positives = 0;
    for e in 0..cfg.n_entities {
        let rows = &t.rows[e * 25..(e + 1) * 25];
        for i in 9..25 {
            let s: f64 = rows[i - 9..=i].iter().map(|r| r[x].parse::<f64>().unwrap()).sum();
            let label = rows[i][y] == "1";
            assert_eq!(label, s > 0.841_621_233_572_914_2 * 10f64.sqrt());
            positives += label as usize;
        }
    }
    let rate = positives as f64 / (cfg.n_entities * 16) as f64;
    assert!((0.08..0.35).contains(&rate), "positive rate {rate}");
    // Prepared as per-window binary labels.
    let ds = prepare(&t, &schema, &PrepConfig::default(), 0).unwrap();
    assert_eq!(ds.meta.n_labels, 1);
    assert!(ds.normalizer.is_none());
}

#[test]
fn hour_probe_prepares_one_window_per_entity() {
    let cfg = SyntheticConfig::new(SyntheticTask::HourProbe);
    let (t, schema) = generate_synthetic(&cfg, &mut Rng::new(1, stream::SYNTHETIC)).unwrap();
    let ds = prepare(&t, &schema, &PrepConfig::default(), 1).unwrap();
    assert_eq!(ds.samples.len(), 100);
    assert!(ds.samples.iter().all(|s| !s.is_labeled()));
    assert_eq!(ds.meta.field_names[0], "Hour");
}

#[test]
fn invalid_synthetic_configs() {
    let mut c = SyntheticConfig::new(SyntheticTask::CrossFieldRegression);
    c.n_categorical = 0;
    assert!(generate_synthetic(&c, &mut Rng::new(0, 0)).is_err());
    let mut c = SyntheticConfig::new(SyntheticTask::HourProbe);
    c.rows_per_entity = 3;
    assert!(generate_synthetic(&c, &mut Rng::new(0, 0)).is_err());
    let mut c = SyntheticConfig::new(SyntheticTask::DefaultClassification);
    c.n_numerical = 0;
    assert!(generate_synthetic(&c, &mut Rng::new(0, 0)).is_err());
}

#[test]
fn timestamp_parts_assemble() {
    let schema = TableSchema {
        columns: vec![
            ColumnSpec::new("st", ColumnRole::Entity),
            ColumnSpec::new("pm", ColumnRole::Numerical),
            ColumnSpec::new("year", ColumnRole::Categorical),
        ],
        window_length: 2,
        derived: vec![DerivedFeature::Entity, DerivedFeature::Weekday, DerivedFeature::Hour],
        n_bins: 4,
        timestamp_parts: Some(TimestampParts { year: "year".into(), month: "m".into(), day: "d".into(), hour: Some("h".into()) }),
        label_mode: LabelMode::PerStep,
        label_kind: LabelKind::Regression,
    };
    let t = table(
        &["st", "pm", "year", "m", "d", "h"],
        &[&["A", "1", "2024", "6", "1", "13"], &["A", "2", "2024", "6", "1", "14"]],
    );
    let prep = PrepConfig { split: [1.0, 0.0, 0.0], ..PrepConfig::default() };
    let ds = prepare(&t, &schema, &prep, 0).unwrap();
    assert_eq!(ds.meta.field_names, vec!["pm", "year", "entity", "weekday", "hour"]);
    assert_eq!(ds.samples[0].fields[0][2..], ["A", "Saturday", "13"]);
}
