#![allow(dead_code)]

//! Worked examples for the preprocessing operations. Shared by the
//! `pipeline` test target and the acceptance runner.

use std::collections::BTreeMap;

use milestone_forecast::data::{split_kfold, Column, ColumnKind, Dataset, FeatureSchema, Value};
use milestone_forecast::evaluation::{evaluate_fold, CvOptions, FitSettings, HyperParams, ModelKind};
use milestone_forecast::pipeline::*;
use rand::Rng;

use crate::support::*;

pub const ALL: &[(&str, fn())] = &[
    ("date_features_examples", date_features_examples),
    ("zip_examples", zip_examples),
    ("climate_examples", climate_examples),
    ("duration_examples", duration_examples),
    ("prune_examples", prune_examples),
    ("ranking_examples", ranking_examples),
    ("gap_examples", gap_examples),
    ("lag_examples", lag_examples),
    ("chi_square_independent_case_matches_scipy", chi_square_independent_case_matches_scipy),
    ("chi_square_perfect_dependence", chi_square_perfect_dependence),
    ("numeric_selection_matches_direct_correlation", numeric_selection_matches_direct_correlation),
    ("gap_matrix_antisymmetry_on_random_records", gap_matrix_antisymmetry_on_random_records),
    ("lags_do_not_cross_series", lags_do_not_cross_series),
    ("gwa_reader_handles_semicolons_and_decimal_commas", gwa_reader_handles_semicolons_and_decimal_commas),
    ("imputation_examples", imputation_examples),
    ("all_missing_column_is_dropped", all_missing_column_is_dropped),
    ("test_fold_uses_training_median", test_fold_uses_training_median),
    ("milestone_csv_to_dataset", milestone_csv_to_dataset),
    ("pruning_only_removes_rows", pruning_only_removes_rows),
];

fn rec(project: &str, milestone: &str, phase: &str, date: Option<&str>) -> MilestoneRecord {
    MilestoneRecord {
        project_id: project.into(),
        site_id: format!("S-{project}"),
        milestone: milestone.into(),
        phase: phase.into(),
        actual_date: date.map(String::from),
        ..Default::default()
    }
}

pub fn date_features_examples() {
    let f = derive_date_features("2021-05-17").unwrap();
    assert_eq!((f.month, f.quarter, f.year), (5, 2, 2021));
    let f = derive_date_features("2020-12-31").unwrap();
    assert_eq!((f.month, f.quarter, f.year), (12, 4, 2020));
    let f = derive_date_features("2020-01-01").unwrap();
    assert_eq!((f.month, f.quarter, f.year), (1, 1, 2020));
    assert!(derive_date_features("2020-13-01").is_err());
}

pub fn zip_examples() {
    assert_eq!(zip_region("75201").unwrap(), "75");
    assert_eq!(zip_region("07030").unwrap(), "07");
    assert_eq!(zip_region("9").unwrap(), "9");
    assert!(zip_region("").is_err());
}

pub fn climate_examples() {
    let table = ClimateTable::from_csv("state,climate\nTX,hot-arid\n".as_bytes()).unwrap();
    assert_eq!(attach_climate(Some("TX"), None, &table), "hot-arid");
    assert_eq!(attach_climate(Some("ME"), Some("NE"), &table), "unknown");
    let empty = ClimateTable::from_csv("state,climate\n".as_bytes()).unwrap();
    assert_eq!(attach_climate(Some("TX"), None, &empty), "unknown");
    assert!(ClimateTable::from_csv("state,climate\nTX\n".as_bytes()).is_err());
    assert!(ClimateTable::from_csv("state\nTX\n".as_bytes()).is_err());
}

pub fn duration_examples() {
    let records = vec![
        rec("p1", "src", "build", Some("2021-01-01")),
        rec("p1", "mid", "build", Some("2021-01-11")),
        rec("p1", "tgt", "build", Some("2021-02-01")),
        rec("p2", "src", "build", Some("2021-01-01")),
        rec("p2", "tgt", "build", Some("2021-02-01")),
        rec("p3", "src", "build", Some("2021-01-01")),
        rec("p3", "mid", "build", Some("2021-03-01")),
        rec("p3", "tgt", "build", Some("2021-02-01")),
    ];
    let (rows, report) = intermediate_durations(&records, "src", &["mid".into()], "tgt").unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].intermediates, vec![10.0]);
    assert_eq!(rows[0].target, 31.0);
    assert_eq!((report.missing_milestone, report.ordering_violation, report.kept), (1, 1, 1));
}

pub fn prune_examples() {
    let schema = FeatureSchema::new(vec![Column::new("a", ColumnKind::Numeric), Column::new("y", ColumnKind::Numeric)], "y", "").unwrap();
    let ds = Dataset::new(schema, [5.0, 20.0, 400.0].iter().map(|&v| vec![Value::Number(v), Value::Number(1.0)]).collect()).unwrap();
    let (out, rep) = prune_tail(&ds, "a", 100.0).unwrap();
    let vals: Vec<f64> = out.column("a").unwrap().filter_map(Value::as_f64).collect();
    assert_eq!(vals, vec![5.0, 20.0]);
    assert_eq!(rep.removed, 1);
    assert_eq!(prune_tail(&ds, "a", 1000.0).unwrap().0, ds);
    let (out, rep) = prune_tail(&ds, "a", 1.0).unwrap();
    assert!(out.is_empty());
    assert_eq!(rep.removed, 3);
}

pub fn ranking_examples() {
    let records = vec![
        rec("p1", "A", "build", Some("2021-01-01")),
        rec("p1", "B", "build", Some("2021-01-05")),
        rec("p2", "A", "build", Some("2021-01-01")),
        rec("p2", "B", "build", Some("2021-01-05")),
        rec("p3", "A", "build", Some("2021-01-09")),
        rec("p3", "B", "build", Some("2021-01-05")),
        rec("p1", "S", "acq", Some("2020-01-01")),
    ];
    let ranks = rank_milestones(&records).unwrap();
    let build = &ranks["build"];
    assert_eq!(build[0].name, "A");
    assert!((build[0].mean_rank - 4.0 / 3.0).abs() < 1e-12);
    assert!((build[1].mean_rank - 5.0 / 3.0).abs() < 1e-12);
    assert_eq!(ranks["acq"].len(), 1);
    assert!(rank_milestones(&[rec("p", "A", "x", None)]).is_err());
}

pub fn gap_examples() {
    let records = vec![
        rec("p1", "A", "", Some("2021-01-01")),
        rec("p1", "B", "", Some("2021-01-04")),
        rec("p2", "A", "", Some("2021-01-01")),
        rec("p2", "B", "", Some("2021-01-06")),
    ];
    let g = gap_matrix(&records).unwrap();
    let c = g.get("A", "B").unwrap();
    assert_eq!((c.mean, c.median, c.support), (4.0, 4.0, 2));
    assert_eq!(g.get("B", "A").unwrap().mean, -4.0);
    assert_eq!(g.get("A", "A").unwrap().mean, 0.0);
}

pub fn lag_examples() {
    let rows = lag_features(&[1.0, 2.0, 3.0, 4.0, 5.0], 3).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0], (vec![3.0, 2.0, 1.0], 4.0));
    assert!(lag_features(&[1.0, 2.0], 2).is_err());
    assert!(lag_features(&[1.0, 2.0], 0).is_err());
}

fn cat_dataset(levels: Vec<String>, y: Vec<f64>) -> Dataset {
    let schema = FeatureSchema::new(
        vec![Column::new("c", ColumnKind::Categorical), Column::new("one", ColumnKind::Categorical), Column::new("y", ColumnKind::Numeric)],
        "y",
        "",
    )
    .unwrap();
    let rows = levels.into_iter().zip(y).map(|(l, y)| vec![Value::Text(l), "only".into(), y.into()]).collect();
    Dataset::new(schema, rows).unwrap()
}

/// Uniform level in {a, b, c, d} independent of a uniform target.
fn independent_case() -> Dataset {
    let mut r = rng(2024);
    let (levels, y): (Vec<String>, Vec<f64>) =
        (0..400).map(|_| (["a", "b", "c", "d"][r.random_range(0..4)].to_string(), r.random_range(0.0..100.0))).unzip();
    cat_dataset(levels, y)
}

pub fn chi_square_independent_case_matches_scipy() {
    // scipy.stats.chi2_contingency(table, correction=False) on the same rows
    // with numpy.percentile quartiles: statistic 6.097722340601394,
    // p 0.7300993813896924, dof 9
    let ds = independent_case();
    let y = ds.target().unwrap();
    let bins = quartile_bins(&y);
    let mut table = vec![vec![0.0; 4]; 4];
    for (r, b) in ds.rows().iter().zip(bins) {
        let level = (r[0].as_text().unwrap().as_bytes()[0] - b'a') as usize;
        table[level][b] += 1.0;
    }
    let c = chi_square(&table).unwrap();
    assert!((c.statistic - 6.097722340601394).abs() < 1e-9);
    assert!((c.p_value - 0.7300993813896924).abs() < 1e-9);
    assert_eq!(c.dof, 9);
    let scores = select_categorical(&ds, 0.05).unwrap();
    let c_score = scores.iter().find(|s| s.column == "c").unwrap();
    assert!(!c_score.retained);
    assert!((c_score.score.unwrap() - 0.7300993813896924).abs() < 1e-9);
    // one-level column is dropped
    assert!(!scores.iter().find(|s| s.column == "one").unwrap().retained);
}

pub fn chi_square_perfect_dependence() {
    let y: Vec<f64> = (0..400).map(f64::from).collect();
    let levels: Vec<String> = y.iter().map(|v| format!("q{}", (*v as usize) / 100)).collect();
    let ds = cat_dataset(levels, y);
    let scores = select_categorical(&ds, 0.05).unwrap();
    let s = scores.iter().find(|s| s.column == "c").unwrap();
    assert!(s.retained && s.score.unwrap() < 1e-6);
    // statistic by hand: n * (min(r, c) - 1) for a perfect association
    let bins = quartile_bins(&ds.target().unwrap());
    let mut table = vec![vec![0.0; 4]; 4];
    for (i, b) in bins.iter().enumerate() {
        table[i / 100][*b] += 1.0;
    }
    assert!((chi_square(&table).unwrap().statistic - 1200.0).abs() < 1e-9);
}

pub fn numeric_selection_matches_direct_correlation() {
    let mut r = rng(77);
    let n = 200;
    let mut cols: Vec<Column> = (0..6).map(|j| Column::new(format!("x{j}"), ColumnKind::Numeric)).collect();
    cols.push(Column::new("const", ColumnKind::Numeric));
    cols.push(Column::new("y", ColumnKind::Numeric));
    let schema = FeatureSchema::new(cols, "y", "").unwrap();
    let mut raw = Vec::new();
    for _ in 0..n {
        let x: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
        let y = x[0] + 0.4 * x[1] + 0.1 * x[2] + r.random_range(-0.5..0.5);
        raw.push((x, y));
    }
    let rows = raw
        .iter()
        .map(|(x, y)| x.iter().map(|v| Value::Number(*v)).chain([Value::Number(1.0), Value::Number(*y)]).collect())
        .collect();
    let ds = Dataset::new(schema, rows).unwrap();
    let threshold = 0.2;
    let scores = select_numeric(&ds, threshold).unwrap();
    let ys: Vec<f64> = raw.iter().map(|r| r.1).collect();
    for j in 0..6 {
        let xs: Vec<f64> = raw.iter().map(|r| r.0[j]).collect();
        // textbook form: cov / (sd sd) with n - 1 denominators
        let mx = xs.iter().sum::<f64>() / n as f64;
        let my = ys.iter().sum::<f64>() / n as f64;
        let cov = xs.iter().zip(&ys).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (n - 1) as f64;
        let sx = (xs.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let sy = (ys.iter().map(|b| (b - my).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let rr = (cov / (sx * sy)).abs();
        let s = scores.iter().find(|s| s.column == format!("x{j}")).unwrap();
        assert!((s.score.unwrap() - rr).abs() < 1e-12);
        assert_eq!(s.retained, rr >= threshold);
    }
    let c = scores.iter().find(|s| s.column == "const").unwrap();
    assert!(c.score.is_none() && !c.retained);
    // a copy of the target has r = 1
    assert!((pearson(&ys, &ys).unwrap() - 1.0).abs() < 1e-12);
    let kept = apply_selection(&ds, &scores).unwrap();
    assert!(kept.schema().index_of("const").is_none());
    assert!(kept.schema().index_of("x0").is_some());
}

pub fn gap_matrix_antisymmetry_on_random_records() {
    let mut r = rng(31);
    let names = ["A", "B", "C", "D"];
    let mut records = Vec::new();
    for p in 0..30 {
        for m in names {
            if r.random_bool(0.8) {
                let day = r.random_range(1..=28);
                let month = r.random_range(1..=12);
                records.push(MilestoneRecord {
                    project_id: format!("p{p}"),
                    milestone: m.into(),
                    actual_date: Some(format!("2021-{month:02}-{day:02}")),
                    ..Default::default()
                });
            }
        }
    }
    let g = gap_matrix(&records).unwrap();
    for i in 0..g.names().len() {
        assert_eq!(g.cell(i, i).unwrap().mean, 0.0);
        for j in 0..g.names().len() {
            if let (Some(a), Some(b)) = (g.cell(i, j), g.cell(j, i)) {
                assert!((a.mean + b.mean).abs() < 1e-9);
                assert_eq!(a.support, b.support);
            }
        }
    }
    let same: Vec<MilestoneRecord> = records.iter().cloned().map(|mut r| { r.actual_date = Some("2021-06-01".into()); r }).collect();
    let z = gap_matrix(&same).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            let c = z.cell(i, j).unwrap();
            assert_eq!((c.mean, c.median), (0.0, 0.0));
        }
    }
}

pub fn lags_do_not_cross_series() {
    let trace = |vm: &str, base: f64, n: usize| GwaTrace {
        vm: vm.into(),
        timestamps: (0..n).map(|i| chrono::DateTime::from_timestamp(1_376_314_846 + 300 * i as i64, 0).unwrap().naive_utc()).collect(),
        columns: [(GWA_TARGET.to_string(), (0..n).map(|i| base + i as f64).collect())].into_iter().collect(),
    };
    let ds = build_gwa_dataset(&[trace("vm1", 100.0, 6), trace("vm2", 900.0, 8)], 3).unwrap();
    assert_eq!(ds.len(), (6 - 3) + (8 - 3));
    let vm = ds.schema().index_of("vm").unwrap();
    for row in ds.rows() {
        let base = if row[vm].as_text() == Some("vm1") { 100.0 } else { 900.0 };
        for l in 1..=3 {
            let v = row[ds.schema().index_of(&lag_column(l)).unwrap()].as_f64().unwrap();
            assert!((base..base + 10.0).contains(&v), "lag crosses series: {v}");
        }
        let y = row[ds.schema().target_index()].as_f64().unwrap();
        assert_eq!(row[ds.schema().index_of(&lag_column(1)).unwrap()].as_f64().unwrap(), y - 1.0);
    }
}

pub fn gwa_reader_handles_semicolons_and_decimal_commas() {
    let text = "Timestamp [ms];\tCPU cores;\tCPU usage [MHZ];\tMemory usage [KB]\n\
                1376314846;2;11,5;1024\n1376315146;2;12,5;2048\n1376315446;2;13;2048\n1376315746;2;14;4096\n";
    let t = read_gwa_trace(text.as_bytes(), "vm", b';').unwrap();
    assert_eq!(t.columns[GWA_TARGET], vec![11.5, 12.5, 13.0, 14.0]);
    let ds = build_gwa_dataset(&[t], 3).unwrap();
    assert_eq!(ds.len(), 1);
    let hour = ds.schema().index_of("hour").unwrap();
    assert_eq!(ds.rows()[0][hour].as_text(), Some("13"));
    assert!(read_gwa_trace("a;b\n1;2\n".as_bytes(), "vm", b';').is_err());
}

pub fn imputation_examples() {
    let schema = FeatureSchema::new(
        vec![Column::new("n", ColumnKind::Numeric), Column::new("c", ColumnKind::Categorical), Column::new("y", ColumnKind::Numeric)],
        "y",
        "",
    )
    .unwrap();
    let ds = Dataset::new(
        schema,
        vec![
            vec![1.0.into(), "A".into(), 1.0.into()],
            vec![Value::Missing, Value::Missing, 2.0.into()],
            vec![3.0.into(), "B".into(), 3.0.into()],
        ],
    )
    .unwrap();
    let imp = Imputer::fit(&ds);
    let out = imp.transform(&ds).unwrap();
    assert_eq!(out.rows()[1][0], Value::Number(2.0));
    assert_eq!(out.rows()[1][1], Value::from("missing"));
}

pub fn all_missing_column_is_dropped() {
    let schema = FeatureSchema::new(
        vec![Column::new("gone", ColumnKind::Numeric), Column::new("n", ColumnKind::Numeric), Column::new("y", ColumnKind::Numeric)],
        "y",
        "",
    )
    .unwrap();
    let ds = Dataset::new(schema, (0..4).map(|i| vec![Value::Missing, Value::Number(i as f64), Value::Number(1.0)]).collect()).unwrap();
    let imp = Imputer::fit(&ds);
    assert_eq!(imp.dropped, vec!["gone".to_string()]);
    assert!(imp.transform(&ds).unwrap().schema().index_of("gone").is_none());
}

pub fn test_fold_uses_training_median() {
    // two folds whose observed medians differ: rows 0..10 hold small values
    let schema = FeatureSchema::new(vec![Column::new("n", ColumnKind::Numeric), Column::new("y", ColumnKind::Numeric)], "y", "").unwrap();
    let mut r = rng(4);
    let rows: Vec<Vec<Value>> = (0..40)
        .map(|i| {
            let v = if i % 5 == 0 { Value::Missing } else { Value::Number(r.random_range(0.0..100.0)) };
            vec![v, Value::Number(i as f64)]
        })
        .collect();
    let ds = Dataset::new(schema, rows).unwrap();
    let folds = split_kfold(ds.len(), 2, 9).unwrap();
    let hp = HyperParams { lambda: Some(0.0), ..Default::default() };
    for (i, fold) in folds.iter().enumerate() {
        let res = evaluate_fold(ModelKind::Ridge, &hp, &ds, i, fold, &FitSettings::default(), &CvOptions::default()).unwrap();
        let train_median = column_median(&ds.select(&fold.train), "n").unwrap();
        let test_median = column_median(&ds.select(&fold.test), "n").unwrap();
        assert_ne!(train_median, test_median);
        assert_eq!(res.imputer.medians["n"], train_median);
        let filled = res.imputer.transform(&ds.select(&fold.test)).unwrap();
        for (orig, new) in ds.select(&fold.test).rows().iter().zip(filled.rows()) {
            if orig[0].is_missing() {
                assert_eq!(new[0], Value::Number(train_median));
            }
        }
    }
}

pub fn milestone_csv_to_dataset() {
    let csv = "project_id,site_id,milestone,phase,planned_date,actual_date,city,state,region,market,latitude,longitude,zip,nature,technology\n\
               P1,S1,start,build,2021-01-01,2021-01-01,Dallas,TX,South,M1,32.7,-96.8,75201,new,5g\n\
               P1,S1,mid,build,,2021-01-11,Dallas,TX,South,M1,32.7,-96.8,75201,new,5g\n\
               P1,S1,end,build,,2021-02-01,Dallas,TX,South,M1,32.7,-96.8,75201,new,5g\n\
               P2,S2,start,build,,2021-03-05,Hoboken,NJ,East,M2,,,07030,upgrade,4g\n\
               P2,S2,mid,build,,,Hoboken,NJ,East,M2,,,07030,upgrade,4g\n\
               P2,S2,end,build,,2021-04-01,Hoboken,NJ,East,M2,,,07030,upgrade,4g\n";
    let records = read_milestones(csv.as_bytes(), b',').unwrap();
    let climate = ClimateTable::from_pairs([("TX".to_string(), "hot-arid".to_string())]);
    let config = MilestoneConfig { source: "start".into(), intermediates: vec!["mid".into()], target: "end".into() };
    let (ds, report) = build_milestone_dataset(&records, &config, Some(&climate)).unwrap();
    assert_eq!(ds.len(), 1);
    assert_eq!(report.missing_milestone, 1);
    let row = &ds.rows()[0];
    let get = |c: &str| row[ds.schema().index_of(c).unwrap()].clone();
    assert_eq!(get("mid_days"), Value::Number(10.0));
    assert_eq!(get(TARGET_COLUMN), Value::Number(31.0));
    assert_eq!(get("zip_region"), Value::from("75"));
    assert_eq!(get("climate"), Value::from("hot-arid"));
    assert_eq!(get("source_quarter"), Value::from("1"));
    assert!(read_milestones("project_id,milestone,actual_date\nP,m,2021-02-30\n".as_bytes(), b',').is_err());
}

pub fn pruning_only_removes_rows() {
    let mut r = rng(6);
    let schema = FeatureSchema::new(vec![Column::new("d", ColumnKind::Numeric), Column::new("y", ColumnKind::Numeric)], "y", "").unwrap();
    let rows: Vec<Vec<Value>> = (0..100).map(|_| vec![r.random_range(0.0..200.0).into(), r.random_range(0.0..500.0).into()]).collect();
    let ds = Dataset::new(schema, rows).unwrap();
    let caps: BTreeMap<String, f64> = [("d".to_string(), 150.0), ("y".to_string(), 400.0)].into_iter().collect();
    let (out, rep) = prune_caps(&ds, &caps).unwrap();
    assert_eq!(rep.removed + out.len(), ds.len());
    for row in out.rows() {
        assert!(ds.rows().contains(row));
        assert!(row[0].as_f64().unwrap() <= 150.0 && row[1].as_f64().unwrap() <= 400.0);
    }
    assert!(prune_tail(&ds, "d", 0.0).is_err());
}
