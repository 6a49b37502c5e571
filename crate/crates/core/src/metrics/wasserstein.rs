//! Quadratic Wasserstein distances between empirical samples: exact sorted
//! matching in one dimension, exact assignment up to 256 points, entropic
//! regularization above.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum W2Error {
    #[error("sample dimension mismatch: {a} vs {b}")]
    DimensionMismatch { a: usize, b: usize },
    #[error("empty sample set")]
    EmptyInput,
}

/// Ground metric on sample points.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum GroundMetric {
    /// Plain Euclidean distance on the flattened points.
    Euclidean,
    /// Points are paths `[time][block]`; distance is the max over time nodes
    /// of the Euclidean block distance (discrete sup metric).
    SupOverBlocks { block: usize },
}

#[derive(Clone, Copy, Debug, Serialize)]
pub enum W2Method {
    Sorted1d,
    Hungarian,
    Sinkhorn { regularization: f64 },
}

#[derive(Clone, Debug, Serialize)]
pub struct W2Report {
    /// The distance (not squared).
    pub value: f64,
    pub method: W2Method,
    pub samples: usize,
}

const EXACT_ASSIGNMENT_CAP: usize = 256;

/// `W₂` between two empirical measures with equal weights. Unequal counts
/// are deterministically subsampled to the smaller one.
pub fn wasserstein2(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    metric: GroundMetric,
) -> Result<f64, W2Error> {
    Ok(wasserstein2_detailed(a, b, metric)?.value)
}

pub fn wasserstein2_detailed(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    metric: GroundMetric,
) -> Result<W2Report, W2Error> {
    if a.is_empty() || b.is_empty() {
        return Err(W2Error::EmptyInput);
    }
    let dim = a[0].len();
    for row in a.iter().chain(b.iter()) {
        if row.len() != dim {
            return Err(W2Error::DimensionMismatch { a: dim, b: row.len() });
        }
    }
    let m = a.len().min(b.len());
    let a_sub = subsample(a, m);
    let b_sub = subsample(b, m);

    if dim == 1 && matches!(metric, GroundMetric::Euclidean) {
        let mut xa: Vec<f64> = a_sub.iter().map(|p| p[0]).collect();
        let mut xb: Vec<f64> = b_sub.iter().map(|p| p[0]).collect();
        xa.sort_by(|x, y| x.partial_cmp(y).unwrap());
        xb.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let sq: f64 =
            xa.iter().zip(&xb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / m as f64;
        return Ok(W2Report { value: sq.sqrt(), method: W2Method::Sorted1d, samples: m });
    }

    let cost = cost_matrix(&a_sub, &b_sub, metric);
    if m <= EXACT_ASSIGNMENT_CAP {
        let (_, total) = min_cost_assignment(&cost, m);
        Ok(W2Report { value: (total / m as f64).sqrt(), method: W2Method::Hungarian, samples: m })
    } else {
        let spread = cost.iter().cloned().fold(0.0f64, f64::max).max(1e-300);
        let reg = 5e-3 * spread;
        let value_sq = sinkhorn_cost(&cost, m, m, None, None, reg).max(0.0);
        Ok(W2Report {
            value: value_sq.sqrt(),
            method: W2Method::Sinkhorn { regularization: reg },
            samples: m,
        })
    }
}

/// Exact `W₂²` between weighted one-dimensional histograms (sorted supports)
/// via quantile coupling.
pub fn wasserstein2_weighted_1d(xa: &[f64], wa: &[f64], xb: &[f64], wb: &[f64]) -> f64 {
    debug_assert_eq!(xa.len(), wa.len());
    debug_assert_eq!(xb.len(), wb.len());
    let mut i = 0;
    let mut j = 0;
    let mut rem_a = wa.first().copied().unwrap_or(0.0);
    let mut rem_b = wb.first().copied().unwrap_or(0.0);
    let mut acc = 0.0;
    while i < xa.len() && j < xb.len() {
        if rem_a <= 0.0 {
            i += 1;
            if i < xa.len() {
                rem_a = wa[i];
            }
            continue;
        }
        if rem_b <= 0.0 {
            j += 1;
            if j < xb.len() {
                rem_b = wb[j];
            }
            continue;
        }
        let chunk = rem_a.min(rem_b);
        let d = xa[i] - xb[j];
        acc += chunk * d * d;
        rem_a -= chunk;
        rem_b -= chunk;
    }
    acc
}

fn subsample(rows: &[Vec<f64>], m: usize) -> Vec<Vec<f64>> {
    if rows.len() == m {
        return rows.to_vec();
    }
    (0..m).map(|k| rows[k * rows.len() / m].clone()).collect()
}

fn cost_matrix(a: &[Vec<f64>], b: &[Vec<f64>], metric: GroundMetric) -> Vec<f64> {
    let m = a.len();
    let mut cost = vec![0.0; m * m];
    for (i, pa) in a.iter().enumerate() {
        for (j, pb) in b.iter().enumerate() {
            cost[i * m + j] = ground_sq(pa, pb, metric);
        }
    }
    cost
}

#[inline]
fn ground_sq(pa: &[f64], pb: &[f64], metric: GroundMetric) -> f64 {
    match metric {
        GroundMetric::Euclidean => pa.iter().zip(pb).map(|(x, y)| (x - y) * (x - y)).sum(),
        GroundMetric::SupOverBlocks { block } => {
            let mut worst = 0.0f64;
            for (ca, cb) in pa.chunks(block).zip(pb.chunks(block)) {
                let d: f64 = ca.iter().zip(cb).map(|(x, y)| (x - y) * (x - y)).sum();
                worst = worst.max(d);
            }
            worst
        }
    }
}

/// Exact minimum-cost perfect matching (shortest augmenting paths, O(n³)).
/// Returns `(assignment of rows to columns, total cost)`.
pub fn min_cost_assignment(cost: &[f64], n: usize) -> (Vec<usize>, f64) {
    const INF: f64 = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1]; // column -> row, 1-based
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        matched_row[0] = row;
        let mut j0 = 0usize;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    let mut total = 0.0;
    for j in 1..=n {
        assignment[matched_row[j] - 1] = j - 1;
        total += cost[(matched_row[j] - 1) * n + (j - 1)];
    }
    (assignment, total)
}

/// Log-domain Sinkhorn transport cost `⟨P, C⟩` between uniform (or supplied)
/// marginals; an entropically biased estimate of the squared distance.
pub fn sinkhorn_cost(
    cost: &[f64],
    na: usize,
    nb: usize,
    wa: Option<&[f64]>,
    wb: Option<&[f64]>,
    reg: f64,
) -> f64 {
    let log_wa: Vec<f64> = match wa {
        Some(w) => w.iter().map(|x| x.max(1e-300).ln()).collect(),
        None => vec![-(na as f64).ln(); na],
    };
    let log_wb: Vec<f64> = match wb {
        Some(w) => w.iter().map(|x| x.max(1e-300).ln()).collect(),
        None => vec![-(nb as f64).ln(); nb],
    };
    let mut f = vec![0.0; na];
    let mut g = vec![0.0; nb];
    let lse = |vals: &[f64]| -> f64 {
        let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
    };
    let mut row = vec![0.0; nb.max(na)];
    for _ in 0..500 {
        let mut worst = 0.0f64;
        for i in 0..na {
            for j in 0..nb {
                row[j] = g[j] + log_wb[j] - cost[i * nb + j] / reg;
            }
            let new_f = -lse(&row[..nb]);
            worst = worst.max((new_f - f[i]).abs());
            f[i] = new_f;
        }
        for j in 0..nb {
            for i in 0..na {
                row[i] = f[i] + log_wa[i] - cost[i * nb + j] / reg;
            }
            let new_g = -lse(&row[..na]);
            worst = worst.max((new_g - g[j]).abs());
            g[j] = new_g;
        }
        if worst * reg < 1e-10 {
            break;
        }
    }
    let mut total = 0.0;
    for i in 0..na {
        for j in 0..nb {
            let logp = f[i] + g[j] + log_wa[i] + log_wb[j] - cost[i * nb + j] / reg;
            total += logp.exp() * cost[i * nb + j];
        }
    }
    total
}
