//! K-means over candidate-pool embeddings, with the cluster count chosen by
//! macro silhouette.
//!
//! Distances are Euclidean on the embedding rows. On unit vectors this orders
//! pairs exactly like cosine distance (`|a-b|^2 = 2 - 2 a.b`).

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::index::CandidatePool;
use crate::io::{read_jsonl, write_jsonl};
use crate::seed::{derive_seed, rng};

pub const MAX_LLOYD_ITERATIONS: usize = 100;

/// Number of k-means++ initialisations tried by [`kmeans_fit`]; the lowest
/// objective wins.
pub const KMEANS_RESTARTS: usize = 25;

/// Inclusive range of cluster counts to try.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "[usize; 2]", into = "[usize; 2]")]
pub struct KRange {
    pub min: usize,
    pub max: usize,
}

impl KRange {
    pub fn new(min: usize, max: usize) -> Result<KRange> {
        if min < 2 || min > max {
            return Err(Error::Config(format!("k range [{min}, {max}] must satisfy 2 <= min <= max")));
        }
        Ok(KRange { min, max })
    }

    /// Cluster counts that can actually be fit on `n` points.
    pub fn feasible(&self, n: usize) -> Option<std::ops::RangeInclusive<usize>> {
        let hi = self.max.min(n);
        (self.min <= hi).then_some(self.min..=hi)
    }
}

impl Default for KRange {
    fn default() -> Self {
        KRange { min: 3, max: 6 }
    }
}

impl TryFrom<[usize; 2]> for KRange {
    type Error = Error;

    fn try_from(v: [usize; 2]) -> Result<Self> {
        KRange::new(v[0], v[1])
    }
}

impl From<KRange> for [usize; 2] {
    fn from(r: KRange) -> Self {
        [r.min, r.max]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances from each point to its centroid.
    pub objective: f64,
    pub iterations: usize,
    /// Objective after each centroid update of the winning run.
    pub objective_trace: Vec<f64>,
}

impl KMeansFit {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }
}

fn to_f64<P: AsRef<[f32]>>(points: &[P]) -> Result<Vec<Vec<f64>>> {
    let mut dim = None;
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let p = p.as_ref();
            if *dim.get_or_insert(p.len()) != p.len() {
                return Err(Error::invalid(format!("point {i} has a different dimension")));
            }
            if p.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("point {i} is not finite")));
            }
            Ok(p.iter().map(|&x| x as f64).collect())
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm, refined with single-point transfers, from
/// [`KMEANS_RESTARTS`] k-means++ seedings; returns the run with the lowest
/// objective. Deterministic for a fixed seed.
pub fn kmeans_fit<P: AsRef<[f32]>>(points: &[P], k: usize, seed: u64) -> Result<KMeansFit> {
    let pts = to_f64(points)?;
    check_k(pts.len(), k)?;
    Ok(fit_restarts(&pts, k, seed))
}

/// A single k-means++ seeded run.
pub fn kmeans_single<P: AsRef<[f32]>>(points: &[P], k: usize, seed: u64) -> Result<KMeansFit> {
    let pts = to_f64(points)?;
    check_k(pts.len(), k)?;
    Ok(lloyd(&pts, plus_plus_init(&pts, k, seed)))
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::invalid("k-means on an empty point set"));
    }
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k = {k} is not in 1..={n}")));
    }
    Ok(())
}

fn fit_restarts(pts: &[Vec<f64>], k: usize, seed: u64) -> KMeansFit {
    let mut best: Option<KMeansFit> = None;
    for r in 0..KMEANS_RESTARTS {
        let init = plus_plus_init(pts, k, derive_seed(seed, "kmeans-restart", &r.to_string()));
        let fit = lloyd(pts, init);
        if best.as_ref().is_none_or(|b| fit.objective < b.objective) {
            best = Some(fit);
        }
    }
    best.expect("at least one restart")
}

/// Greedy k-means++: each new centroid is the best, by total potential, of
/// `2 + ln k` candidates drawn proportionally to squared distance.
fn plus_plus_init(pts: &[Vec<f64>], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng(seed);
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut centroids = vec![pts[rng.random_range(0..pts.len())].clone()];
    let mut d2: Vec<f64> = pts.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let pick = if total > 0.0 {
                weighted_pick(&d2, rng.random::<f64>() * total)
            } else {
                rng.random_range(0..pts.len())
            };
            let updated: Vec<f64> = d2.iter().zip(pts).map(|(d, p)| d.min(sq_dist(p, &pts[pick]))).collect();
            let potential: f64 = updated.iter().sum();
            if best.as_ref().is_none_or(|(b, _, _)| potential < *b) {
                best = Some((potential, pick, updated));
            }
        }
        let (_, pick, updated) = best.expect("at least one trial");
        centroids.push(pts[pick].clone());
        d2 = updated;
    }
    centroids
}

/// Index whose cumulative weight first exceeds `target`, skipping
/// zero-weight points.
fn weighted_pick(weights: &[f64], mut target: f64) -> usize {
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 && target < w {
            return i;
        }
        target -= w;
    }
    // float slack can run past the end
    weights.iter().rposition(|&w| w > 0.0).expect("positive total weight")
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

/// Gives every empty cluster the point farthest from its current centroid,
/// taken from a cluster that can spare one. Never increases the objective.
fn repair_empty(pts: &[Vec<f64>], assign: &mut [usize], centroids: &[Vec<f64>]) {
    let k = centroids.len();
    let mut counts = vec![0usize; k];
    for &a in assign.iter() {
        counts[a] += 1;
    }
    let mut moved = vec![false; pts.len()];
    for j in 0..k {
        if counts[j] > 0 {
            continue;
        }
        let mut pick: Option<(usize, f64)> = None;
        for (i, p) in pts.iter().enumerate() {
            if moved[i] || counts[assign[i]] < 2 {
                continue;
            }
            let d = sq_dist(p, &centroids[assign[i]]);
            if pick.is_none_or(|(_, bd)| d > bd) {
                pick = Some((i, d));
            }
        }
        let (i, _) = pick.expect("n >= k guarantees a donor cluster");
        counts[assign[i]] -= 1;
        counts[j] += 1;
        assign[i] = j;
        moved[i] = true;
    }
}

fn means(pts: &[Vec<f64>], assign: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = pts[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in pts.iter().zip(assign) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p) {
            *s += x;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        debug_assert!(c > 0, "means() called with an empty cluster");
        for x in s.iter_mut() {
            *x /= c as f64;
        }
    }
    sums
}

fn objective(pts: &[Vec<f64>], assign: &[usize], centroids: &[Vec<f64>]) -> f64 {
    pts.iter().zip(assign).map(|(p, &a)| sq_dist(p, &centroids[a])).sum()
}

fn lloyd(pts: &[Vec<f64>], init: Vec<Vec<f64>>) -> KMeansFit {
    let k = init.len();
    let mut assign: Vec<usize> = pts.iter().map(|p| nearest(p, &init)).collect();
    repair_empty(pts, &mut assign, &init);
    let mut centroids = means(pts, &assign, k);
    let mut trace = vec![objective(pts, &assign, &centroids)];
    let mut iterations = 1;
    loop {
        while iterations < MAX_LLOYD_ITERATIONS {
            let mut next: Vec<usize> = pts.iter().map(|p| nearest(p, &centroids)).collect();
            repair_empty(pts, &mut next, &centroids);
            if next == assign {
                break;
            }
            assign = next;
            centroids = means(pts, &assign, k);
            trace.push(objective(pts, &assign, &centroids));
            iterations += 1;
        }
        if iterations >= MAX_LLOYD_ITERATIONS || !transfer_pass(pts, &mut assign, &mut centroids) {
            break;
        }
        centroids = means(pts, &assign, k);
        trace.push(objective(pts, &assign, &centroids));
        iterations += 1;
    }
    KMeansFit {
        objective: *trace.last().expect("non-empty"),
        assignments: assign,
        centroids,
        iterations,
        objective_trace: trace,
    }
}

/// One sweep of Hartigan single-point transfers: a point moves when taking
/// it out of its cluster and into another strictly lowers the objective.
/// Lloyd fixpoints are often not transfer-stable, so this escapes some poor
/// local optima. Returns whether anything moved.
fn transfer_pass(pts: &[Vec<f64>], assign: &mut [usize], centroids: &mut [Vec<f64>]) -> bool {
    let mut counts = vec![0usize; centroids.len()];
    for &a in assign.iter() {
        counts[a] += 1;
    }
    let mut moved = false;
    for (i, p) in pts.iter().enumerate() {
        let from = assign[i];
        if counts[from] < 2 {
            continue;
        }
        let n_from = counts[from] as f64;
        let removal = n_from / (n_from - 1.0) * sq_dist(p, &centroids[from]);
        let mut best: Option<(usize, f64)> = None;
        for (j, c) in centroids.iter().enumerate() {
            if j == from {
                continue;
            }
            let n = counts[j] as f64;
            let cost = n / (n + 1.0) * sq_dist(p, c);
            if best.is_none_or(|(_, b)| cost < b) {
                best = Some((j, cost));
            }
        }
        let Some((to, addition)) = best else { continue };
        if addition >= removal - 1e-12 * (1.0 + removal) {
            continue;
        }
        let n_to = counts[to] as f64;
        for (c, x) in centroids[from].iter_mut().zip(p) {
            *c = (*c * n_from - x) / (n_from - 1.0);
        }
        for (c, x) in centroids[to].iter_mut().zip(p) {
            *c = (*c * n_to + x) / (n_to + 1.0);
        }
        counts[from] -= 1;
        counts[to] += 1;
        assign[i] = to;
        moved = true;
    }
    moved
}

/// Pairwise Euclidean distances.
fn distance_matrix(pts: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = pts.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = sq_dist(&pts[i], &pts[j]).sqrt();
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

/// Macro silhouette: the unweighted mean over clusters of the mean per-point
/// silhouette `s(i) = (b - a) / max(a, b)`.
///
/// Points in singleton clusters score 0, as do points with `a = b = 0`.
pub fn silhouette_macro<P: AsRef<[f32]>>(points: &[P], assignments: &[usize]) -> Result<f64> {
    let pts = to_f64(points)?;
    if pts.len() != assignments.len() {
        return Err(Error::invalid("assignment count differs from point count"));
    }
    silhouette_from_distances(&distance_matrix(&pts), assignments)
}

fn silhouette_from_distances(dist: &[Vec<f64>], assign: &[usize]) -> Result<f64> {
    let k = assign.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &a in assign {
        sizes[a] += 1;
    }
    if k < 2 {
        return Err(Error::invalid("silhouette needs at least two clusters"));
    }
    if let Some(empty) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::invalid(format!("cluster {empty} is empty")));
    }
    let mut per_cluster = vec![0.0; k];
    let mut sums = vec![0.0; k];
    for (i, row) in dist.iter().enumerate() {
        let own = assign[i];
        if sizes[own] == 1 {
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        for (j, &d) in row.iter().enumerate() {
            sums[assign[j]] += d;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            per_cluster[own] += (b - a) / m;
        }
    }
    let total: f64 = per_cluster.iter().zip(&sizes).map(|(s, &n)| s / n as f64).sum();
    Ok(total / k as f64)
}

/// Result of choosing k for one point set.
#[derive(Debug, Clone, PartialEq)]
pub struct KSelection {
    pub k: usize,
    pub fit: KMeansFit,
    pub silhouette: f64,
    /// `(k, silhouette)` for every k tried, ascending.
    pub scores: Vec<(usize, f64)>,
}

/// Fits every feasible k in `range` and keeps the best macro silhouette
/// (smaller k on ties). `None` when fewer points than `range.min`.
pub fn select_k<P: AsRef<[f32]>>(points: &[P], range: KRange, seed: u64) -> Result<Option<KSelection>> {
    let pts = to_f64(points)?;
    let Some(ks) = range.feasible(pts.len()) else {
        return Ok(None);
    };
    let dist = distance_matrix(&pts);
    let mut best: Option<KSelection> = None;
    let mut scores = Vec::new();
    for k in ks {
        let fit = fit_restarts(&pts, k, derive_seed(seed, "select-k", &k.to_string()));
        let s = silhouette_from_distances(&dist, &fit.assignments)?;
        scores.push((k, s));
        if best.as_ref().is_none_or(|b| s > b.silhouette) {
            best = Some(KSelection {
                k,
                fit,
                silhouette: s,
                scores: Vec::new(),
            });
        }
    }
    Ok(best.map(|mut b| {
        b.scores = scores;
        b
    }))
}

/// K-means clustering of one query's candidate pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteredPool {
    pub query_id: String,
    pub k: usize,
    pub silhouette_macro: f64,
    pub gold_cluster: Option<usize>,
    pub assignments: BTreeMap<String, usize>,
    pub centroids: Vec<Vec<f64>>,
}

impl ClusteredPool {
    pub fn cluster_of(&self, doc_id: &str) -> Option<usize> {
        self.assignments.get(doc_id).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "UPPERCASE")]
pub enum PoolClustering {
    Clustered(ClusteredPool),
    /// Fewer pool documents than the smallest k in range.
    Unclusterable { query_id: String, n_points: usize },
}

impl PoolClustering {
    pub fn query_id(&self) -> &str {
        match self {
            PoolClustering::Clustered(c) => &c.query_id,
            PoolClustering::Unclusterable { query_id, .. } => query_id,
        }
    }

    pub fn clustered(&self) -> Option<&ClusteredPool> {
        match self {
            PoolClustering::Clustered(c) => Some(c),
            PoolClustering::Unclusterable { .. } => None,
        }
    }
}

/// Clusters the document embeddings of `pool` and locates the gold cluster.
pub fn cluster_pool(
    pool: &CandidatePool,
    docs: &EmbeddingMatrix,
    gold: Option<&str>,
    range: KRange,
    seed: u64,
) -> Result<PoolClustering> {
    let ids: Vec<&str> = pool.doc_ids().collect();
    let missing: Vec<String> = ids.iter().filter(|id| docs.get(id).is_none()).map(|s| s.to_string()).collect();
    if !missing.is_empty() {
        return Err(Error::MissingIds(missing));
    }
    let rows: Vec<&[f32]> = ids.iter().map(|id| docs.get(id).expect("checked")).collect();
    let Some(sel) = select_k(&rows, range, seed)? else {
        return Ok(PoolClustering::Unclusterable {
            query_id: pool.query_id.clone(),
            n_points: rows.len(),
        });
    };
    let assignments: BTreeMap<String, usize> = ids
        .iter()
        .zip(&sel.fit.assignments)
        .map(|(id, &c)| (id.to_string(), c))
        .collect();
    let gold_cluster = gold.and_then(|g| assignments.get(g).copied());
    Ok(PoolClustering::Clustered(ClusteredPool {
        query_id: pool.query_id.clone(),
        k: sel.k,
        silhouette_macro: sel.silhouette,
        gold_cluster,
        assignments,
        centroids: sel.fit.centroids,
    }))
}

/// The non-gold cluster whose centroid is closest to the gold centroid
/// (lower index on ties).
pub fn nearest_cluster(pool: &ClusteredPool) -> Result<usize> {
    let gold = pool.gold_cluster.ok_or_else(|| Error::GoldAbsent {
        query_id: pool.query_id.clone(),
    })?;
    let g = &pool.centroids[gold];
    pool.centroids
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != gold)
        .fold(None, |best: Option<(usize, f64)>, (j, c)| {
            let d = sq_dist(g, c);
            match best {
                Some((_, bd)) if bd <= d => best,
                _ => Some((j, d)),
            }
        })
        .map(|(j, _)| j)
        .ok_or_else(|| Error::invalid(format!("query `{}`: nearest cluster needs k >= 2", pool.query_id)))
}

pub fn write_clusterings(path: &Path, items: &[PoolClustering]) -> Result<()> {
    write_jsonl(path, items).map(|_| ())
}

pub fn load_clusterings(path: &Path) -> Result<Vec<PoolClustering>> {
    Ok(read_jsonl(path)?.into_iter().map(|(_, c)| c).collect())
}
