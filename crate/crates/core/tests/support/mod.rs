//! Independent reference implementations used by the integration and
//! acceptance tests. Nothing here calls into the library's solvers.
#![allow(dead_code)]

use milestone_forecast::baselines::ForestModel;
use milestone_forecast::data::EncodedMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn matrix(rows: &[Vec<f64>]) -> EncodedMatrix {
    let p = rows.first().map_or(0, Vec::len);
    EncodedMatrix::numeric(rows, p).unwrap()
}

/// Rows of uniform features in `[-5, 5)`, optionally rounded to integers so
/// that duplicate values occur.
pub fn random_rows(rng: &mut ChaCha8Rng, n: usize, p: usize, integer: bool) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            (0..p)
                .map(|_| {
                    let v: f64 = rng.random_range(-5.0..5.0);
                    if integer { v.round() } else { v }
                })
                .collect()
        })
        .collect()
}

pub fn check(v: f64, alpha: f64) -> f64 {
    if v >= 0.0 { alpha * v } else { (alpha - 1.0) * v }
}

/// `sum pinball + lambda * sum |b_j|`, raw scale.
pub fn qr_objective(x: &[Vec<f64>], y: &[f64], b0: f64, beta: &[f64], alpha: f64, lambda: f64) -> f64 {
    let loss: f64 = x
        .iter()
        .zip(y)
        .map(|(r, yi)| check(yi - b0 - r.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>(), alpha))
        .sum();
    loss + lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
}

/// Gaussian elimination with partial pivoting; `None` if singular.
pub fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
        if a[piv][c].abs() < 1e-12 {
            return None;
        }
        a.swap(c, piv);
        b.swap(c, piv);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

fn combinations(n: usize, k: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
        if cur.len() == k {
            f(cur);
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, f);
            cur.pop();
        }
    }
    rec(0, n, k, &mut Vec::with_capacity(k), f);
}

/// Exact minimum of the penalized quantile objective by enumerating LP
/// vertices: every optimum set contains a point where `p + 1` of the
/// hyperplanes `{residual_i = 0}` and `{beta_j = 0}` are active.
pub fn qr_vertex_oracle(x: &[Vec<f64>], y: &[f64], alpha: f64, lambda: f64) -> f64 {
    let p = x.first().map_or(0, Vec::len);
    let m = p + 1;
    // hyperplane rows over (b0, beta): data rows then coordinate rows
    let mut planes: Vec<(Vec<f64>, f64)> = x
        .iter()
        .zip(y)
        .map(|(r, yi)| (std::iter::once(1.0).chain(r.iter().copied()).collect(), *yi))
        .collect();
    for j in 0..p {
        let mut e = vec![0.0; m];
        e[j + 1] = 1.0;
        planes.push((e, 0.0));
    }
    let mut best = f64::INFINITY;
    combinations(planes.len(), m, &mut |idx| {
        let a: Vec<Vec<f64>> = idx.iter().map(|&i| planes[i].0.clone()).collect();
        let b: Vec<f64> = idx.iter().map(|&i| planes[i].1).collect();
        if let Some(sol) = solve(a, b) {
            let obj = qr_objective(x, y, sol[0], &sol[1..], alpha, lambda);
            best = best.min(obj);
        }
    });
    best
}

/// Zooming grid search over a coefficient box centred at the origin.
pub fn qr_grid_oracle(x: &[Vec<f64>], y: &[f64], alpha: f64, lambda: f64, half_width: f64) -> f64 {
    let p = x.first().map_or(0, Vec::len);
    let m = p + 1;
    let steps = 24usize;
    let mut center = vec![0.0; m];
    let mut half = half_width;
    let mut best = f64::INFINITY;
    for _ in 0..40 {
        let mut best_point = center.clone();
        let total = (steps + 1).pow(m as u32);
        for code in 0..total {
            let mut c = code;
            let point: Vec<f64> = (0..m)
                .map(|d| {
                    let k = c % (steps + 1);
                    c /= steps + 1;
                    center[d] - half + 2.0 * half * k as f64 / steps as f64
                })
                .collect();
            let obj = qr_objective(x, y, point[0], &point[1..], alpha, lambda);
            if obj < best {
                best = obj;
                best_point = point;
            }
        }
        center = best_point;
        half *= 0.5;
    }
    best
}

/// Ridge by the centered normal equations `(Xc'Xc + lambda I) b = Xc'yc`.
pub fn ridge_closed_form(x: &[Vec<f64>], y: &[f64], lambda: f64) -> (f64, Vec<f64>) {
    let n = x.len() as f64;
    let p = x[0].len();
    let mx: Vec<f64> = (0..p).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let my = y.iter().sum::<f64>() / n;
    let mut a = vec![vec![0.0; p]; p];
    let mut b = vec![0.0; p];
    for (r, yi) in x.iter().zip(y) {
        for i in 0..p {
            b[i] += (r[i] - mx[i]) * (yi - my);
            for j in 0..p {
                a[i][j] += (r[i] - mx[i]) * (r[j] - mx[j]);
            }
        }
    }
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += lambda;
    }
    let beta = solve(a, b).expect("ridge system is nonsingular");
    let b0 = my - mx.iter().zip(&beta).map(|(m, b)| m * b).sum::<f64>();
    (b0, beta)
}

/// Within-node sum of squared errors.
pub fn sse(y: &[f64]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    let m = y.iter().sum::<f64>() / y.len() as f64;
    y.iter().map(|v| (v - m).powi(2)).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleSplit {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
}

/// All admissible splits of `rows` with their direct two-pass SSE gains.
pub fn enumerate_splits(x: &[Vec<f64>], y: &[f64], rows: &[usize], min_leaf: usize) -> Vec<OracleSplit> {
    let p = x[0].len();
    let parent = sse(&rows.iter().map(|&i| y[i]).collect::<Vec<_>>());
    let mut out = Vec::new();
    for f in 0..p {
        let mut vals: Vec<f64> = rows.iter().map(|&i| x[i][f]).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        for w in vals.windows(2) {
            let thr = 0.5 * (w[0] + w[1]);
            let (l, r): (Vec<f64>, Vec<f64>) = {
                let l = rows.iter().filter(|&&i| x[i][f] <= thr).map(|&i| y[i]).collect();
                let r = rows.iter().filter(|&&i| x[i][f] > thr).map(|&i| y[i]).collect();
                (l, r)
            };
            if l.len() < min_leaf || r.len() < min_leaf {
                continue;
            }
            out.push(OracleSplit { feature: f, threshold: thr, gain: parent - sse(&l) - sse(&r) });
        }
    }
    out
}

/// Brute-force quantile-forest weights: loop over training rows and count
/// their occurrences in each tree's leaf for `q`.
pub fn qrf_weights_oracle(forest: &ForestModel, q: &[f64]) -> Vec<f64> {
    let n = forest.train_targets().len();
    let t = forest.trees().len() as f64;
    let leaves: Vec<Vec<usize>> = forest.trees().iter().map(|tree| tree.leaf(tree.route(q).unwrap()).0.to_vec()).collect();
    (0..n)
        .map(|i| {
            leaves
                .iter()
                .map(|rows| rows.iter().filter(|&&r| r == i).count() as f64 / rows.len() as f64)
                .sum::<f64>()
                / t
        })
        .collect()
}

/// Smallest target (ties by row index) whose cumulative weight reaches alpha.
pub fn weighted_quantile_oracle(y: &[f64], w: &[f64], alpha: f64) -> f64 {
    let mut idx: Vec<usize> = (0..y.len()).filter(|&i| w[i] > 0.0).collect();
    idx.sort_by(|&a, &b| y[a].total_cmp(&y[b]).then(a.cmp(&b)));
    let mut acc = 0.0;
    for &i in &idx {
        acc += w[i];
        if acc >= alpha - 1e-12 {
            return y[i];
        }
    }
    y[*idx.last().unwrap()]
}

pub fn skewness(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let m2 = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let m3 = v.iter().map(|x| (x - m).powi(3)).sum::<f64>() / n;
    m3 / m2.powf(1.5)
}

/// Walks `tree` from the root and checks every node against exhaustive
/// split enumeration under the same stopping rules. Returns the number of
/// nodes checked.
pub fn check_tree(
    tree: &milestone_forecast::partition::RegressionTree,
    x: &[Vec<f64>],
    y: &[f64],
    params: milestone_forecast::partition::TreeParams,
) -> Result<usize, String> {
    use milestone_forecast::partition::Node;
    let mut stack = vec![(0usize, (0..x.len()).collect::<Vec<usize>>(), 0usize)];
    let mut checked = 0;
    while let Some((node, rows, depth)) = stack.pop() {
        checked += 1;
        let ys: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
        let parent = sse(&ys);
        let tol = 1e-9 * parent.max(1.0);
        let candidates = if depth < params.max_depth && rows.len() >= params.min_samples_split {
            enumerate_splits(x, y, &rows, params.min_samples_leaf)
        } else {
            Vec::new()
        };
        let best = candidates.iter().map(|c| c.gain).fold(f64::NEG_INFINITY, f64::max);
        let should_split = best > 1e-12 * parent.max(1.0);
        match &tree.nodes()[node] {
            Node::Split { feature, threshold, left, right } => {
                if !should_split {
                    return Err(format!("node {node}: split on {feature}@{threshold} but oracle keeps a leaf"));
                }
                let ours = candidates
                    .iter()
                    .find(|c| c.feature == *feature && c.threshold == *threshold)
                    .ok_or_else(|| format!("node {node}: split {feature}@{threshold} is not an admissible midpoint"))?;
                if ours.gain < best - tol {
                    return Err(format!("node {node}: gain {} below oracle best {best}", ours.gain));
                }
                let near: Vec<&OracleSplit> = candidates.iter().filter(|c| c.gain >= best - tol).collect();
                if near.len() == 1 && near[0] != ours {
                    return Err(format!("node {node}: oracle prefers {:?}", near[0]));
                }
                let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| x[i][*feature] <= *threshold);
                stack.push((*right, r, depth + 1));
                stack.push((*left, l, depth + 1));
            }
            Node::Leaf { rows: leaf_rows, value, .. } => {
                if should_split {
                    return Err(format!("node {node}: leaf but oracle splits with gain {best}"));
                }
                let mut a = leaf_rows.clone();
                a.sort_unstable();
                let mut b = rows.clone();
                b.sort_unstable();
                if a != b {
                    return Err(format!("node {node}: leaf rows differ"));
                }
                let mean = ys.iter().sum::<f64>() / ys.len() as f64;
                if (mean - value).abs() > 1e-9 * mean.abs().max(1.0) {
                    return Err(format!("node {node}: leaf value {value} vs mean {mean}"));
                }
            }
        }
    }
    Ok(checked)
}
