//! Filtering, diverse subsampling and n-gram decontamination of generated
//! text.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::LazyLock;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

static WORD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\w+").expect("valid word regex"));

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusMatrix {
    rows: Array2<f64>,
    row_norms: Array1<f64>,
    terms: Option<Vec<String>>,
}

impl CorpusMatrix {
    pub fn new(rows: Array2<f64>) -> Result<Self> {
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("corpus matrix has non-finite entries"));
        }
        let row_norms = rows.map_axis(Axis(1), |r| r.dot(&r).sqrt());
        Ok(Self { rows, row_norms, terms: None })
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn row_norms(&self) -> &Array1<f64> {
        &self.row_norms
    }

    pub fn n_docs(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dims(&self) -> usize {
        self.rows.ncols()
    }

    /// Feature names, present for TF-IDF matrices.
    pub fn terms(&self) -> Option<&[String]> {
        self.terms.as_deref()
    }
}

/// Indices of first occurrences, in order.
pub fn dedup_indices(docs: &[String]) -> Vec<usize> {
    let mut seen = HashSet::new();
    (0..docs.len()).filter(|&i| seen.insert(docs[i].as_str())).collect()
}

pub fn dedup_exact(docs: &[String]) -> Vec<String> {
    dedup_indices(docs).into_iter().map(|i| docs[i].clone()).collect()
}

fn words(doc: &str) -> Vec<String> {
    WORD.find_iter(&doc.to_lowercase()).map(|m| m.as_str().to_string()).collect()
}

/// Raw counts weighted by `ln((1+N)/(1+df)) + 1`, rows scaled to unit norm.
pub fn tfidf_vectorize(docs: &[String]) -> Result<CorpusMatrix> {
    if docs.is_empty() {
        return Err(Error::validation("no documents to vectorize"));
    }
    let tokenized: Vec<Vec<String>> = docs.iter().map(|d| words(d)).collect();
    let mut df: BTreeMap<&str, usize> = BTreeMap::new();
    for toks in &tokenized {
        let uniq: HashSet<&str> = toks.iter().map(String::as_str).collect();
        for t in uniq {
            *df.entry(t).or_default() += 1;
        }
    }
    if df.is_empty() {
        return Err(Error::validation("documents contain no word tokens"));
    }
    let col: HashMap<&str, usize> = df.keys().enumerate().map(|(i, t)| (*t, i)).collect();
    let n = docs.len() as f64;
    let idf: Vec<f64> = df.values().map(|&d| ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0).collect();
    let mut rows = Array2::zeros((docs.len(), df.len()));
    for (i, toks) in tokenized.iter().enumerate() {
        for t in toks {
            rows[[i, col[t.as_str()]]] += 1.0;
        }
        let mut row = rows.row_mut(i);
        row.iter_mut().zip(&idf).for_each(|(v, w): (&mut f64, &f64)| *v *= w);
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    let terms = df.keys().map(|t| t.to_string()).collect();
    let mut m = CorpusMatrix::new(rows)?;
    m.terms = Some(terms);
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedSvd {
    /// `n × dims` projections of the rows.
    pub scores: Array2<f64>,
    /// `dims × cols` right singular directions.
    pub components: Array2<f64>,
    pub singular_values: Array1<f64>,
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Top-`dims` truncated SVD from the eigen-decomposition of the smaller
/// Gram matrix. Each component's largest-magnitude loading is positive.
pub fn truncated_svd(matrix: &CorpusMatrix, dims: usize) -> Result<TruncatedSvd> {
    let a = &matrix.rows;
    let (n, p) = a.dim();
    if dims == 0 || dims > n.min(p) {
        return Err(Error::validation(format!("cannot keep {dims} dims of a {n}x{p} matrix")));
    }
    let row_side = n <= p;
    let gram = if row_side { a.dot(&a.t()) } else { a.t().dot(a) };
    let eig = SymmetricEigen::new(to_dmatrix(&gram));
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let scale = gram.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut components = Array2::zeros((dims, p));
    let mut singular_values = Array1::zeros(dims);
    for (c, &k) in order.iter().take(dims).enumerate() {
        let lambda = eig.eigenvalues[k].max(0.0);
        let sigma = lambda.sqrt();
        singular_values[c] = sigma;
        let vec = Array1::from_iter(eig.eigenvectors.column(k).iter().copied());
        let v = if !row_side {
            vec
        } else if lambda > scale * 1e-12 {
            a.t().dot(&vec) / sigma
        } else {
            Array1::zeros(p)
        };
        components.row_mut(c).assign(&v);
    }
    for mut v in components.rows_mut() {
        let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v.mapv_inplace(|x| -x);
        }
    }
    let scores = a.dot(&components.t());
    Ok(TruncatedSvd { scores, components, singular_values })
}

pub fn svd_reduce(matrix: &CorpusMatrix, dims: usize) -> Result<CorpusMatrix> {
    CorpusMatrix::new(truncated_svd(matrix, dims)?.scores)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub centroids: Array2<f64>,
    pub k: usize,
}

impl ClusterAssignment {
    pub fn new(labels: Vec<usize>, centroids: Array2<f64>) -> Result<Self> {
        let k = centroids.nrows();
        if labels.iter().any(|&l| l >= k) {
            return Err(Error::validation("cluster label out of range"));
        }
        Ok(Self { labels, centroids, k })
    }

    /// Sum of squared distances from each row to its centroid.
    pub fn inertia(&self, rows: &Array2<f64>) -> f64 {
        rows.outer_iter()
            .zip(&self.labels)
            .map(|(r, &l)| sq_dist(r, self.centroids.row(l)))
            .sum()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        self.labels.iter().for_each(|&l| s[l] += 1);
        s
    }
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid by Euclidean distance, lowest index on ties.
pub fn nearest(row: ArrayView1<f64>, centroids: &Array2<f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.outer_iter().enumerate() {
        let d = sq_dist(row, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best.0
}

pub fn assign_all(rows: &Array2<f64>, centroids: &Array2<f64>) -> Vec<usize> {
    (0..rows.nrows()).into_par_iter().map(|i| nearest(rows.row(i), centroids)).collect()
}

/// k-means++ seeding over the rows listed in `pool`.
pub fn kmeans_plus_plus(rows: &Array2<f64>, pool: &[usize], k: usize, r: &mut rng::Rng) -> Result<Array2<f64>> {
    if k == 0 || k > pool.len() {
        return Err(Error::validation(format!("cannot seed {k} centroids from {} points", pool.len())));
    }
    let mut chosen = vec![pool[r.random_range(0..pool.len())]];
    let mut d2: Vec<f64> = pool.iter().map(|&i| sq_dist(rows.row(i), rows.row(chosen[0]))).collect();
    while chosen.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => pool[w.sample(r)],
            Err(_) => {
                let rest: Vec<usize> = pool.iter().copied().filter(|i| !chosen.contains(i)).collect();
                rest[r.random_range(0..rest.len())]
            }
        };
        chosen.push(next);
        for (d, &i) in d2.iter_mut().zip(pool) {
            *d = d.min(sq_dist(rows.row(i), rows.row(next)));
        }
    }
    Ok(rows.select(Axis(0), &chosen))
}

/// Mini-batch k-means: k-means++ on a seeded subsample, then per-batch
/// centroid moves with step `1 / count`, then a full assignment pass.
pub fn minibatch_kmeans(matrix: &CorpusMatrix, k: usize, batch: usize, iters: usize, seed: u64) -> Result<ClusterAssignment> {
    let rows = &matrix.rows;
    let n = rows.nrows();
    if k == 0 || k > n {
        return Err(Error::validation(format!("k = {k} needs between 1 and {n} rows")));
    }
    if batch == 0 {
        return Err(Error::validation("batch size must be positive"));
    }
    let mut r = rng::seeded(seed);
    let init_size = n.min((3 * batch).max(3 * k));
    let pool = index::sample(&mut r, n, init_size).into_vec();
    let mut centroids = kmeans_plus_plus(rows, &pool, k, &mut r)?;
    let mut counts = vec![0usize; k];
    for _ in 0..iters {
        let idx = index::sample(&mut r, n, batch.min(n)).into_vec();
        let labels: Vec<usize> = idx.iter().map(|&i| nearest(rows.row(i), &centroids)).collect();
        for (&i, &c) in idx.iter().zip(&labels) {
            counts[c] += 1;
            let eta = 1.0 / counts[c] as f64;
            let mut cen = centroids.row_mut(c);
            cen.zip_mut_with(&rows.row(i), |m, &x| *m += eta * (x - *m));
        }
    }
    ClusterAssignment::new(assign_all(rows, &centroids), centroids)
}

/// Full-batch Lloyd iterations from k-means++ seeding.
pub fn lloyd_kmeans(rows: &Array2<f64>, k: usize, iters: usize, seed: u64) -> Result<ClusterAssignment> {
    let n = rows.nrows();
    if k == 0 || k > n {
        return Err(Error::validation(format!("k = {k} needs between 1 and {n} rows")));
    }
    let mut r = rng::seeded(seed);
    let pool: Vec<usize> = (0..n).collect();
    let mut centroids = kmeans_plus_plus(rows, &pool, k, &mut r)?;
    let mut labels = assign_all(rows, &centroids);
    for _ in 0..iters {
        let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
        let mut counts = vec![0usize; k];
        for (row, &l) in rows.outer_iter().zip(&labels) {
            sums.row_mut(l).scaled_add(1.0, &row);
            counts[l] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let mean = &sums.row(c) / counts[c] as f64;
                centroids.row_mut(c).assign(&mean);
            }
        }
        let next = assign_all(rows, &centroids);
        if next == labels {
            break;
        }
        labels = next;
    }
    ClusterAssignment::new(labels, centroids)
}

/// Visits clusters in id order, drawing one unselected member per visit,
/// until `n_s` indices are chosen. Returned ascending.
pub fn round_robin_subsample(assignment: &ClusterAssignment, n_s: usize, seed: u64) -> Result<Vec<usize>> {
    let n = assignment.labels.len();
    if n_s > n {
        return Err(Error::validation(format!("cannot select {n_s} of {n} documents")));
    }
    let mut members = vec![Vec::new(); assignment.k];
    for (i, &l) in assignment.labels.iter().enumerate() {
        members[l].push(i);
    }
    let mut r = rng::seeded(seed);
    let mut picked = Vec::with_capacity(n_s);
    while picked.len() < n_s {
        for m in members.iter_mut() {
            if picked.len() == n_s {
                break;
            }
            if !m.is_empty() {
                picked.push(m.swap_remove(r.random_range(0..m.len())));
            }
        }
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Lowercases, deletes punctuation and digits, splits on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .filter(|c| c.is_whitespace() || (c.is_alphanumeric() && !c.is_numeric()))
        .collect();
    cleaned.split_whitespace().map(String::from).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemovedDoc {
    pub index: usize,
    /// The first matching reference n-gram, space-joined.
    pub ngram: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Decontamination {
    pub kept: Vec<usize>,
    pub removed: Vec<RemovedDoc>,
}

/// Drops every candidate sharing a normalized `n`-gram with the reference.
pub fn decontaminate(candidates: &[String], reference: &[String], n: usize) -> Result<Decontamination> {
    if n == 0 {
        return Err(Error::validation("n-gram length must be at least 1"));
    }
    let grams: HashSet<Vec<String>> = reference
        .par_iter()
        .map(|d| normalize(d).windows(n).map(<[String]>::to_vec).collect::<Vec<_>>())
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    let hits: Vec<Option<String>> = candidates
        .par_iter()
        .map(|c| normalize(c).windows(n).find(|w| grams.contains(*w)).map(|w| w.join(" ")))
        .collect();
    let mut out = Decontamination::default();
    for (index, hit) in hits.into_iter().enumerate() {
        match hit {
            Some(ngram) => out.removed.push(RemovedDoc { index, ngram }),
            None => out.kept.push(index),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostprocessConfig {
    pub svd_dims: usize,
    pub clusters: usize,
    pub batch: usize,
    pub iters: usize,
    pub n_s: usize,
}

impl PostprocessConfig {
    pub fn desk() -> Self {
        Self { svd_dims: 16, clusters: 32, batch: 64, iters: 50, n_s: 500 }
    }

    pub fn paper() -> Self {
        Self { svd_dims: 100, clusters: 700, batch: 64, iters: 50, n_s: 50_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    /// First-occurrence indices after exact dedup.
    pub unique: Vec<usize>,
    /// Chosen indices into the input, ascending.
    pub selected: Vec<usize>,
}

/// Dedup, vectorize, reduce, cluster and subsample. When the deduplicated
/// set is smaller than the configured dims or clusters those are capped at
/// what the data supports.
pub fn select_diverse(docs: &[String], cfg: &PostprocessConfig, seed: u64) -> Result<Selection> {
    let unique = dedup_indices(docs);
    if unique.is_empty() {
        return Ok(Selection { unique, selected: Vec::new() });
    }
    let texts: Vec<String> = unique.iter().map(|&i| docs[i].clone()).collect();
    let n_s = cfg.n_s.min(texts.len());
    let tfidf = tfidf_vectorize(&texts)?;
    let dims = cfg.svd_dims.min(tfidf.n_docs()).min(tfidf.dims());
    let reduced = svd_reduce(&tfidf, dims)?;
    let k = cfg.clusters.min(reduced.n_docs());
    let assignment = minibatch_kmeans(&reduced, k, cfg.batch, cfg.iters, rng::stream_seed(seed, "kmeans", 0))?;
    let local = round_robin_subsample(&assignment, n_s, rng::stream_seed(seed, "subsample", 0))?;
    let selected = local.into_iter().map(|i| unique[i]).collect();
    Ok(Selection { unique, selected })
}
