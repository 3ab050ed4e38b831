mod support;

use milestone_forecast::composite::{CompositeKind, CompositeParams, CompositeQuantileModel, Partitioner};
use milestone_forecast::data::{encode, Column, ColumnKind, Dataset, FeatureSchema, Value};
use milestone_forecast::linear::{fit_quantile_with, LinearFitOptions, LinearPredictor};
use milestone_forecast::partition::TreeParams;
use milestone_forecast::synthetic::{generate_synthetic, SyntheticSpec};
use rand::Rng;
use support::*;

fn mixed(n: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let schema = FeatureSchema::new(
        vec![
            Column::new("site", ColumnKind::Categorical),
            Column::new("tech", ColumnKind::Categorical),
            Column::new("a", ColumnKind::Numeric),
            Column::new("y", ColumnKind::Numeric),
        ],
        "y",
        "days",
    )
    .unwrap();
    let rows = (0..n)
        .map(|_| {
            let s = ["n", "s", "e"][r.random_range(0..3)];
            let t = ["4g", "5g"][r.random_range(0..2)];
            let a: f64 = r.random_range(0.0..30.0);
            let y = 2.0 + 1.5 * a + if s == "e" { 6.0 } else { 0.0 } + r.random_range(-4.0..4.0);
            vec![s.into(), t.into(), a.into(), y.into()]
        })
        .collect();
    Dataset::new(schema, rows).unwrap()
}

#[test]
fn degenerate_partitions_equal_global_fit() {
    for seed in 0..3 {
        let ds = mixed(90, seed);
        let (x, y, _) = encode(&ds, None).unwrap();
        let lambda = [0.0, 0.01, 0.5][seed as usize];
        let base = CompositeParams { lambda, ..Default::default() };
        let qt = CompositeQuantileModel::fit(CompositeKind::QuantileTree, &ds, &CompositeParams { tree: TreeParams::new(0, 2, 1), ..base.clone() }).unwrap();
        let pw = CompositeQuantileModel::fit(CompositeKind::PiecewiseQr, &ds, &CompositeParams { n_clusters: 1, ..base.clone() }).unwrap();
        let nn = CompositeQuantileModel::fit(CompositeKind::NnQr, &ds, &CompositeParams { n_neighbors: 90, ..base.clone() }).unwrap();
        for alpha in [0.05, 0.5, 0.95] {
            let g = fit_quantile_with(&x, &y, alpha, lambda, LinearFitOptions::STANDARDIZED).unwrap();
            for row in x.rows().step_by(7) {
                let want = g.predict(row).unwrap();
                for m in [&qt, &pw, &nn] {
                    let got = m.predict_encoded(row, alpha).unwrap();
                    assert!((got - want).abs() < 1e-6, "{:?} alpha {alpha}: {got} vs {want}", m.kind());
                }
            }
        }
    }
}

#[test]
fn two_regime_tree_recovers_both_lines() {
    let mut r = rng(40);
    let schema = FeatureSchema::new(
        vec![Column::new("regime", ColumnKind::Categorical), Column::new("x", ColumnKind::Numeric), Column::new("y", ColumnKind::Numeric)],
        "y",
        "",
    )
    .unwrap();
    let noise = |r: &mut rand_chacha::ChaCha8Rng| -> f64 {
        // Box-Muller, sd 0.01
        let (u1, u2): (f64, f64) = (r.random_range(1e-12..1.0), r.random());
        0.01 * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    };
    let rows: Vec<Vec<Value>> = (0..400)
        .map(|i| {
            let b = i % 2 == 1;
            // on [0, 10] both regimes share mean 5 and no greedy split finds them
            let x: f64 = r.random_range(0.0..20.0);
            let y = if b { 10.0 - x } else { x } + noise(&mut r);
            vec![if b { "B" } else { "A" }.into(), x.into(), y.into()]
        })
        .collect();
    let ds = Dataset::new(schema.clone(), rows).unwrap();
    let params = CompositeParams { tree: TreeParams::new(2, 2, 1), lambda: 0.0, ..Default::default() };
    let model = CompositeQuantileModel::fit(CompositeKind::QuantileTree, &ds, &params).unwrap();
    for (regime, truth) in [("A", 1.0f64), ("B", -1.0)] {
        let mut errs = Vec::new();
        for k in 0..50 {
            let x = 0.1 + 0.39 * k as f64;
            let want = if truth > 0.0 { x } else { 10.0 - x };
            let got = model.predict_quantile(&schema, &[regime.into(), x.into(), Value::Missing], 0.5).unwrap();
            errs.push((got - want).abs());
        }
        errs.sort_by(f64::total_cmp);
        assert!(errs[25] < 0.1, "regime {regime}: median error {}", errs[25]);
    }
}

#[test]
fn seventy_eight_parameters() {
    let mut r = rng(9);
    let x = random_rows(&mut r, 240, 5, false);
    let mut cols: Vec<Column> = (0..5).map(|j| Column::new(format!("f{j}"), ColumnKind::Numeric)).collect();
    cols.push(Column::new("y", ColumnKind::Numeric));
    let schema = FeatureSchema::new(cols, "y", "").unwrap();
    let rows = x
        .iter()
        .map(|row| {
            let y = 40.0 * (row[0] > 0.0) as u8 as f64 + 15.0 * (row[1] > 0.0) as u8 as f64 + row[2] + r.random_range(-0.5..0.5);
            row.iter().map(|v| Value::Number(*v)).chain([Value::Number(y)]).collect()
        })
        .collect();
    let ds = Dataset::new(schema, rows).unwrap();
    let model = CompositeQuantileModel::fit(CompositeKind::QuantileTree, &ds, &CompositeParams { tree: TreeParams::new(2, 2, 1), ..Default::default() }).unwrap();
    let Partitioner::Tree(tree) = model.partitioner() else { unreachable!() };
    assert_eq!((tree.n_internal(), tree.n_leaves(), model.n_features(), model.quantiles().len()), (3, 4, 5, 3));
    assert!(model.partitions().iter().all(|p| !p.fallback));
    assert_eq!(model.count_parameters(), Some(78));
}

#[test]
fn interval_width_tracks_noise_scale() {
    let spec = SyntheticSpec { n_projects: 3000, rho: 0.0, seed: 12, ..Default::default() };
    let ds = generate_synthetic(&spec).unwrap();
    let train = ds.select(&(0..2000).collect::<Vec<_>>());
    let test = ds.select(&(2000..3000).collect::<Vec<_>>());
    let model = CompositeQuantileModel::fit(CompositeKind::QuantileTree, &train, &CompositeParams { tree: TreeParams::new(2, 30, 10), ..Default::default() }).unwrap();
    let site = ds.schema().index_of("site_type").unwrap();
    let mut widths: Vec<(f64, f64)> = Vec::new();
    for level in &spec.site_levels {
        let w: Vec<f64> = test
            .rows()
            .iter()
            .filter(|r| r[site].as_text() == Some(level.name.as_str()))
            .map(|r| {
                let iv = model.predict_interval(test.schema(), r).unwrap();
                assert!(iv.lower <= iv.median && iv.median <= iv.upper);
                iv.upper - iv.lower
            })
            .collect();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        // the true 5-95 width of N(0, s) is 2 * 1.645 s
        widths.push((level.noise, mean));
        assert!((mean / (3.29 * level.noise) - 1.0).abs() < 0.35, "{}: width {mean}", level.name);
    }
    widths.sort_by(|a, b| a.0.total_cmp(&b.0));
    assert!(widths.windows(2).all(|w| w[0].1 < w[1].1), "{widths:?}");
}
