//! K-means anchors over image-level feature vectors: construction (k-means++
//! seeding, Lloyd iterations with empty-cluster repair), nearest-anchor
//! queries, and smooth EMA tracking of the nearest anchor.

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::data::Domain;
use crate::error::{Error, Result};

/// K centroids in image-vector space.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    /// K x dim.
    pub anchors: Array2<f64>,
    pub domain: Domain,
    /// Member counts at construction (zero for a repaired-but-never-claimed
    /// centroid).
    pub assignment_counts: Vec<usize>,
}

impl AnchorSet {
    pub fn k(&self) -> usize {
        self.anchors.nrows()
    }
    pub fn dim(&self) -> usize {
        self.anchors.ncols()
    }
}

/// One Lloyd iteration of the trace: objective value after the update step.
/// `repaired` marks iterations where an empty cluster was reseeded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LloydIter {
    pub wcss: f64,
    pub repaired: bool,
}

#[derive(Debug, Clone)]
pub struct KmeansResult {
    pub anchors: AnchorSet,
    /// Cluster index per input vector (final assignment).
    pub assignments: Vec<usize>,
    pub trace: Vec<LloydIter>,
    pub converged: bool,
}

impl KmeansResult {
    /// Final within-cluster sum of squared distances.
    pub fn wcss(&self) -> f64 {
        self.trace.last().map(|t| t.wcss).unwrap_or(0.0)
    }
}

pub fn squared_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn assign_all(vectors: &Array2<f64>, centroids: &Array2<f64>) -> Vec<usize> {
    vectors
        .rows()
        .into_iter()
        .map(|v| nearest_row(v, centroids).0)
        .collect()
}

fn nearest_row(v: ArrayView1<f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (k, c) in centroids.rows().into_iter().enumerate() {
        let d = squared_distance(v, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn objective(vectors: &Array2<f64>, centroids: &Array2<f64>, assign: &[usize]) -> f64 {
    vectors
        .rows()
        .into_iter()
        .zip(assign.iter())
        .map(|(v, &k)| squared_distance(v, centroids.row(k)))
        .sum()
}

/// Means per cluster; an empty cluster is reseeded (when `repair` is set) to
/// the member point farthest from its own centroid.
fn update_centroids(
    vectors: &Array2<f64>,
    assign: &[usize],
    k: usize,
    old: &Array2<f64>,
    repair: bool,
) -> (Array2<f64>, bool) {
    let dim = vectors.ncols();
    let mut sums = Array2::<f64>::zeros((k, dim));
    let mut counts = vec![0usize; k];
    for (v, &c) in vectors.rows().into_iter().zip(assign.iter()) {
        counts[c] += 1;
        let mut row = sums.row_mut(c);
        row += &v;
    }
    let mut repaired = false;
    let mut out = Array2::zeros((k, dim));
    for c in 0..k {
        if counts[c] > 0 {
            out.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
        } else if repair {
            // farthest point from the stale centroid of this (empty) cluster
            let far = vectors
                .rows()
                .into_iter()
                .enumerate()
                .max_by(|(i, a), (j, b)| {
                    squared_distance(*a, old.row(c))
                        .total_cmp(&squared_distance(*b, old.row(c)))
                        .then(i.cmp(j))
                })
                .map(|(i, _)| i)
                .unwrap();
            out.row_mut(c).assign(&vectors.row(far));
            repaired = true;
        } else {
            out.row_mut(c).assign(&old.row(c));
        }
    }
    (out, repaired)
}

fn kmeanspp_init(vectors: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = vectors.nrows();
    let dim = vectors.ncols();
    let mut centroids = Array2::zeros((k, dim));
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).assign(&vectors.row(first));
    let mut d2: Vec<f64> = vectors
        .rows()
        .into_iter()
        .map(|v| squared_distance(v, centroids.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut draw = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if draw < w {
                    chosen = i;
                    break;
                }
                draw -= w;
            }
            chosen
        } else {
            // all remaining points coincide with chosen centroids
            rng.gen_range(0..n)
        };
        centroids.row_mut(c).assign(&vectors.row(idx));
        for (i, v) in vectors.rows().into_iter().enumerate() {
            let d = squared_distance(v, centroids.row(c));
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centroids
}

/// Number of k-means++ restarts; the run with the lowest final objective wins.
pub const KMEANS_RESTARTS: usize = 10;

/// Lloyd's algorithm with k-means++ seeding and [`KMEANS_RESTARTS`] restarts
/// (seeds derived from `seed`); the restart with the lowest final objective is
/// returned.
pub fn kmeans(
    vectors: &Array2<f64>,
    k: usize,
    domain: Domain,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<KmeansResult> {
    let mut best: Option<KmeansResult> = None;
    for restart in 0..KMEANS_RESTARTS {
        let run = kmeans_single(
            vectors,
            k,
            domain,
            crate::data::mix64(seed, 0xafe1 + restart as u64),
            max_iter,
            tol,
        )?;
        if best.as_ref().map(|b| run.wcss() < b.wcss()).unwrap_or(true) {
            best = Some(run);
        }
    }
    Ok(best.unwrap())
}

/// One Lloyd run: iterate until the assignment reaches a fixpoint, the
/// relative objective change drops below `tol`, or `max_iter` iterations; a
/// final update pass restores the centroid-equals-member-mean invariant on
/// every exit path.
fn kmeans_single(
    vectors: &Array2<f64>,
    k: usize,
    domain: Domain,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<KmeansResult> {
    let n = vectors.nrows();
    if k == 0 {
        return Err(Error::Config("kmeans requires k >= 1".into()));
    }
    if n < k {
        return Err(Error::Config(format!(
            "kmeans requires at least k={k} vectors, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeanspp_init(vectors, k, &mut rng);
    let mut trace = Vec::new();
    let mut prev_assign: Option<Vec<usize>> = None;
    let mut prev_wcss = f64::INFINITY;
    let mut converged = false;
    for _ in 0..max_iter {
        let assign = assign_all(vectors, &centroids);
        if prev_assign.as_deref() == Some(&assign[..]) {
            converged = true;
            break;
        }
        let (next, repaired) = update_centroids(vectors, &assign, k, &centroids, true);
        centroids = next;
        let wcss = objective(vectors, &centroids, &assign);
        trace.push(LloydIter { wcss, repaired });
        if prev_wcss.is_finite() {
            let denom = prev_wcss.abs().max(1e-300);
            if (prev_wcss - wcss).abs() / denom < tol {
                converged = true;
                break;
            }
        }
        prev_wcss = wcss;
        prev_assign = Some(assign);
    }
    // Finalize so reported anchors are exactly the means of the reported
    // assignment (no repair here: an empty cluster keeps its centroid and a
    // zero count).
    let assignments = assign_all(vectors, &centroids);
    let (finals, _) = update_centroids(vectors, &assignments, k, &centroids, false);
    centroids = finals;
    let wcss = objective(vectors, &centroids, &assignments);
    trace.push(LloydIter {
        wcss,
        repaired: false,
    });
    let mut counts = vec![0usize; k];
    for &a in &assignments {
        counts[a] += 1;
    }
    Ok(KmeansResult {
        anchors: AnchorSet {
            anchors: centroids,
            domain,
            assignment_counts: counts,
        },
        assignments,
        trace,
        converged,
    })
}

/// Index and squared L2 distance of the anchor nearest to `v`; ties break to
/// the lowest index.
pub fn nearest_anchor(v: ArrayView1<f64>, anchors: &AnchorSet) -> (usize, f64) {
    nearest_row(v, &anchors.anchors)
}

/// Move only the anchor nearest to `v`: a_new = alpha * a + (1 - alpha) * v.
/// Every other anchor is bit-identical to its input.
pub fn ema_update(anchors: &mut AnchorSet, v: ArrayView1<f64>, alpha: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Config(format!("EMA alpha must be in [0, 1), got {alpha}")));
    }
    if v.len() != anchors.dim() {
        return Err(Error::Dimension(format!(
            "vector dim {} != anchor dim {}",
            v.len(),
            anchors.dim()
        )));
    }
    let (idx, _) = nearest_anchor(v, anchors);
    let mut row = anchors.anchors.row_mut(idx);
    for (a, &x) in row.iter_mut().zip(v.iter()) {
        *a = alpha * *a + (1.0 - alpha) * x;
    }
    Ok(idx)
}

// --- anchor dump/load --------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct AnchorFile {
    format: String,
    domain: Domain,
    k: usize,
    dim: usize,
    assignment_counts: Vec<usize>,
    anchors: Vec<Vec<f64>>,
}

const ANCHOR_FORMAT: &str = "anchor-set-v1";

pub fn save_anchors(anchors: &AnchorSet, path: &Path) -> Result<()> {
    let file = AnchorFile {
        format: ANCHOR_FORMAT.to_string(),
        domain: anchors.domain,
        k: anchors.k(),
        dim: anchors.dim(),
        assignment_counts: anchors.assignment_counts.clone(),
        anchors: anchors.anchors.rows().into_iter().map(|r| r.to_vec()).collect(),
    };
    let json = serde_json::to_string_pretty(&file).expect("anchor serialize");
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_anchors(path: &Path) -> Result<AnchorSet> {
    let text = std::fs::read_to_string(path)?;
    let file: AnchorFile =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("bad anchor file: {e}")))?;
    if file.format != ANCHOR_FORMAT {
        return Err(Error::Format(format!(
            "unsupported anchor format `{}`",
            file.format
        )));
    }
    if file.anchors.len() != file.k || file.anchors.iter().any(|a| a.len() != file.dim) {
        return Err(Error::Format("anchor file dims inconsistent".into()));
    }
    let mut anchors = Array2::zeros((file.k, file.dim));
    for (i, row) in file.anchors.iter().enumerate() {
        anchors.row_mut(i).assign(&Array1::from_vec(row.clone()));
    }
    Ok(AnchorSet {
        anchors,
        domain: file.domain,
        assignment_counts: file.assignment_counts,
    })
}
