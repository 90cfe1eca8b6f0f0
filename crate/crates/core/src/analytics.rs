//! Dataset analytics: term-frequency tables (word-cloud input) and a 2-D
//! t-SNE embedding of TF-IDF vectors.
//!
//! The t-SNE here is the exact O(n²) algorithm: per-point bandwidths found
//! by bisection to a target perplexity, symmetrized affinities, and plain
//! gradient descent with early exaggeration and a momentum switch. Fine at
//! desk scale (thousands of records); anything bigger wants an
//! approximation this module deliberately does not implement.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tokenize::terms;

#[derive(Debug, thiserror::Error)]
pub enum AnalyticsError {
    #[error("no non-empty texts to vectorize")]
    EmptyCorpus,
    #[error("need at least 4 points, got {got}")]
    TooFewPoints { got: usize },
    #[error("perplexity {perplexity} infeasible for {n_points} points (needs < (n-1)/3)")]
    PerplexityInfeasible { perplexity: f64, n_points: usize },
    #[error("embedding diverged at iteration {iteration}")]
    NumericalOverflow { iteration: usize },
    #[error("invalid embedding config: {0}")]
    InvalidConfig(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> AnalyticsError {
    AnalyticsError::Io { path: path.to_path_buf(), source }
}

// ==== term frequencies ====================================================

/// Top-k terms by count across `records`, case-folded and stripped of edge
/// punctuation, stopwords removed. Ties break lexicographically.
pub fn term_frequencies(
    records: &[String],
    stopwords: &HashSet<String>,
    top_k: usize,
) -> Vec<(String, u64)> {
    let mut counts: HashMap<String, u64> = HashMap::new();
    for record in records {
        for term in terms(record) {
            if !stopwords.contains(&term) {
                *counts.entry(term).or_insert(0) += 1;
            }
        }
    }
    let mut table: Vec<(String, u64)> = counts.into_iter().collect();
    table.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    table.truncate(top_k);
    table
}

/// Delimiter-separated (term, count) table.
pub fn write_term_frequencies(
    table: &[(String, u64)],
    delimiter: char,
    path: &Path,
) -> Result<(), AnalyticsError> {
    let mut text = format!("term{delimiter}count\n");
    for (term, count) in table {
        text.push_str(&format!("{term}{delimiter}{count}\n"));
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

// ==== tf-idf ==============================================================

/// Sparse TF-IDF rows over a sorted vocabulary. Rows are L2-normalized;
/// a record with no in-vocabulary terms keeps a zero row.
#[derive(Debug, Clone, PartialEq)]
pub struct TfidfMatrix {
    pub vocabulary: Vec<String>,
    /// Per record: (term index, weight), sorted by term index.
    pub rows: Vec<Vec<(usize, f64)>>,
    /// Documents containing each vocabulary term; always ≥ 1.
    pub df: Vec<u64>,
    pub n_docs: usize,
}

impl TfidfMatrix {
    pub fn n_terms(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn row_dense(&self, row: usize) -> Vec<f64> {
        let mut dense = vec![0.0; self.vocabulary.len()];
        for &(term, weight) in &self.rows[row] {
            dense[term] = weight;
        }
        dense
    }

    fn row_dot(&self, a: usize, b: usize) -> f64 {
        // Merge join over index-sorted sparse rows.
        let (ra, rb) = (&self.rows[a], &self.rows[b]);
        let (mut i, mut j, mut dot) = (0, 0, 0.0);
        while i < ra.len() && j < rb.len() {
            match ra[i].0.cmp(&rb[j].0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    dot += ra[i].1 * rb[j].1;
                    i += 1;
                    j += 1;
                }
            }
        }
        dot
    }

    /// Dense n×n Gram matrix of row inner products. The embedding consumes
    /// this, so the sparse rows never densify to n×vocabulary.
    pub fn gram(&self) -> Vec<f64> {
        let n = self.n_docs;
        let mut gram = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let dot = self.row_dot(i, j);
                gram[i * n + j] = dot;
                gram[j * n + i] = dot;
            }
        }
        gram
    }
}

/// Vectorize texts: tf = raw term count, idf = ln((1+n)/(1+df)) + 1,
/// rows L2-normalized. Errors only when every text is empty.
pub fn compute_tfidf(texts: &[String]) -> Result<TfidfMatrix, AnalyticsError> {
    let tokenized: Vec<Vec<String>> = texts.iter().map(|t| terms(t)).collect();
    if tokenized.iter().all(|t| t.is_empty()) {
        return Err(AnalyticsError::EmptyCorpus);
    }

    let mut df_map: BTreeMap<String, u64> = BTreeMap::new();
    for tokens in &tokenized {
        let unique: HashSet<&String> = tokens.iter().collect();
        for term in unique {
            *df_map.entry(term.clone()).or_insert(0) += 1;
        }
    }
    let vocabulary: Vec<String> = df_map.keys().cloned().collect();
    let df: Vec<u64> = df_map.values().copied().collect();
    let index: HashMap<&str, usize> =
        vocabulary.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();

    let n_docs = texts.len();
    let idf: Vec<f64> =
        df.iter().map(|&d| ((1.0 + n_docs as f64) / (1.0 + d as f64)).ln() + 1.0).collect();

    let mut rows = Vec::with_capacity(n_docs);
    for tokens in &tokenized {
        let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
        for token in tokens {
            *counts.entry(index[token.as_str()]).or_insert(0.0) += 1.0;
        }
        let mut row: Vec<(usize, f64)> =
            counts.into_iter().map(|(term, tf)| (term, tf * idf[term])).collect();
        let norm = row.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (_, w) in &mut row {
                *w /= norm;
            }
        }
        rows.push(row);
    }
    Ok(TfidfMatrix { vocabulary, rows, df, n_docs })
}

// ==== embedding config ====================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Pca,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    pub perplexity: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub init: InitMode,
    pub output_dims: usize,
    /// Affinity multiplier for the first `exaggeration_iters` iterations.
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub momentum_initial: f64,
    pub momentum_final: f64,
    pub momentum_switch_iter: usize,
    pub seed: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            perplexity: 30.0,
            learning_rate: 200.0,
            iterations: 1000,
            init: InitMode::Pca,
            output_dims: 2,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            momentum_initial: 0.5,
            momentum_final: 0.8,
            momentum_switch_iter: 250,
            seed: 0,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self, n_points: usize) -> Result<(), AnalyticsError> {
        let invalid = |msg: &str| Err(AnalyticsError::InvalidConfig(msg.to_string()));
        if self.iterations == 0 {
            return invalid("iterations must be at least 1");
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return invalid("learning_rate must be positive");
        }
        if !self.early_exaggeration.is_finite() || self.early_exaggeration < 1.0 {
            return invalid("early_exaggeration must be at least 1");
        }
        if self.output_dims == 0 {
            return invalid("output_dims must be at least 1");
        }
        for momentum in [self.momentum_initial, self.momentum_final] {
            if !(0.0..1.0).contains(&momentum) {
                return invalid("momentum must lie in [0, 1)");
            }
        }
        if n_points < 4 {
            return Err(AnalyticsError::TooFewPoints { got: n_points });
        }
        if !self.perplexity.is_finite()
            || self.perplexity <= 0.0
            || self.perplexity >= (n_points as f64 - 1.0) / 3.0
        {
            return Err(AnalyticsError::PerplexityInfeasible {
                perplexity: self.perplexity,
                n_points,
            });
        }
        Ok(())
    }
}

// ==== affinities ==========================================================

/// Squared Euclidean distances from a Gram matrix:
/// d²(i,j) = g_ii + g_jj − 2 g_ij, clamped at 0 against rounding.
pub fn sq_dists_from_gram(gram: &[f64], n: usize) -> Vec<f64> {
    let mut sq = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sq[i * n + j] = (gram[i * n + i] + gram[j * n + j] - 2.0 * gram[i * n + j]).max(0.0);
            }
        }
    }
    sq
}

/// Squared Euclidean distances between dense points.
pub fn pairwise_sq_dists(points: &[Vec<f64>]) -> Vec<f64> {
    let n = points.len();
    let mut sq = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 =
                points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            sq[i * n + j] = d;
            sq[j * n + i] = d;
        }
    }
    sq
}

/// How close each point's conditional perplexity must land to the target.
pub const PERPLEXITY_TOLERANCE: f64 = 1e-2;

/// Conditional affinities p_{j|i} with per-point bandwidths bisected until
/// each row's perplexity is within [`PERPLEXITY_TOLERANCE`] of the target.
/// Returns the row-major n×n conditional matrix (zero diagonal, rows sum
/// to 1) and the achieved perplexity per point.
pub fn conditional_affinities(
    sq_dists: &[f64],
    n: usize,
    perplexity: f64,
) -> Result<(Vec<f64>, Vec<f64>), AnalyticsError> {
    let mut cond = vec![0.0; n * n];
    let mut achieved = vec![0.0; n];
    let mut probs = vec![0.0; n];

    for i in 0..n {
        let row = &sq_dists[i * n..(i + 1) * n];
        // Shift by the smallest off-diagonal distance so exp() stays in
        // range at large beta; entropy is shift-invariant.
        let shift = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &d)| d)
            .fold(f64::INFINITY, f64::min);

        let mut beta = 1.0f64;
        let mut beta_min = 0.0f64;
        let mut beta_max = f64::INFINITY;
        let mut perp = f64::NAN;
        for _ in 0..200 {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for (j, &d) in row.iter().enumerate() {
                if j == i {
                    probs[j] = 0.0;
                    continue;
                }
                let shifted = d - shift;
                let p = (-beta * shifted).exp();
                probs[j] = p;
                sum += p;
                weighted += shifted * p;
            }
            // Entropy in nats via H = ln S + beta * <d>; perplexity e^H.
            let entropy = sum.ln() + beta * weighted / sum;
            perp = entropy.exp();
            if (perp - perplexity).abs() <= PERPLEXITY_TOLERANCE * 0.5 {
                for (j, p) in probs.iter().enumerate() {
                    cond[i * n + j] = p / sum;
                }
                break;
            }
            if perp > perplexity {
                // Too flat: tighten the kernel.
                beta_min = beta;
                beta = if beta_max.is_finite() { (beta + beta_max) / 2.0 } else { beta * 2.0 };
            } else {
                beta_max = beta;
                beta = (beta + beta_min) / 2.0;
            }
            // Keep the best row so far in case the loop runs out.
            let row_out = &mut cond[i * n..(i + 1) * n];
            for (j, p) in probs.iter().enumerate() {
                row_out[j] = p / sum;
            }
        }
        if (perp - perplexity).abs() > PERPLEXITY_TOLERANCE {
            return Err(AnalyticsError::InvalidConfig(format!(
                "bandwidth search stuck at perplexity {perp:.4} for point {i} (target {perplexity})"
            )));
        }
        achieved[i] = perp;
    }
    Ok((cond, achieved))
}

/// Symmetrized joint affinities P = (P_{j|i} + P_{i|j}) / (2n): symmetric,
/// non-negative, zero diagonal, entries summing to 1.
pub fn joint_affinities(cond: &[f64], n: usize) -> Vec<f64> {
    let mut joint = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            joint[i * n + j] = (cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64);
        }
    }
    joint
}

/// Heavy-tailed low-dimensional affinities for a flattened n×dims layout:
/// returns (Q, W) where w_ij = 1/(1+d²) and q_ij = w_ij / Σ w.
pub fn low_dim_affinities(y: &[f64], n: usize, dims: usize) -> (Vec<f64>, Vec<f64>) {
    let mut w = vec![0.0; n * n];
    let mut sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let mut d2 = 0.0;
            for k in 0..dims {
                let diff = y[i * dims + k] - y[j * dims + k];
                d2 += diff * diff;
            }
            let weight = 1.0 / (1.0 + d2);
            w[i * n + j] = weight;
            w[j * n + i] = weight;
            sum += 2.0 * weight;
        }
    }
    let q: Vec<f64> = w.iter().map(|&v| v / sum).collect();
    (q, w)
}

const PROB_FLOOR: f64 = 1e-12;

/// KL(P‖Q) over off-diagonal entries with p > 0.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(&pv, &qv)| pv * (pv / qv.max(PROB_FLOOR)).ln())
        .sum()
}

/// KL(P‖Q(y)) as a function of the flattened embedding.
pub fn kl_objective(p: &[f64], y: &[f64], n: usize, dims: usize) -> f64 {
    let (q, _) = low_dim_affinities(y, n, dims);
    kl_divergence(p, &q)
}

/// Analytic t-SNE gradient: dC/dy_i = 4 Σ_j (p_ij − q_ij) w_ij (y_i − y_j).
pub fn kl_gradient(p: &[f64], y: &[f64], n: usize, dims: usize) -> Vec<f64> {
    let (q, w) = low_dim_affinities(y, n, dims);
    let mut grad = vec![0.0; n * dims];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let coeff = 4.0 * (p[i * n + j] - q[i * n + j]) * w[i * n + j];
            for k in 0..dims {
                grad[i * dims + k] += coeff * (y[i * dims + k] - y[j * dims + k]);
            }
        }
    }
    grad
}

// ==== initialization ======================================================

fn box_muller(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Scale every column to variance 1e-4 (standard small-norm start).
fn scale_columns(y: &mut [f64], n: usize, dims: usize) {
    for k in 0..dims {
        let mean = (0..n).map(|i| y[i * dims + k]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (y[i * dims + k] - mean).powi(2)).sum::<f64>() / n as f64;
        if var > 0.0 {
            let factor = (1e-4 / var).sqrt();
            for i in 0..n {
                y[i * dims + k] = (y[i * dims + k] - mean) * factor;
            }
        }
    }
}

/// Principal-component initialization straight from the Gram matrix
/// (kernel-PCA form): double-center, power-iterate the top components with
/// deflation, project as sqrt(λ)·u.
fn pca_init(gram: &[f64], n: usize, dims: usize, seed: u64) -> Vec<f64> {
    let mut centered = vec![0.0; n * n];
    let row_means: Vec<f64> =
        (0..n).map(|i| gram[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64).collect();
    let total_mean = row_means.iter().sum::<f64>() / n as f64;
    for i in 0..n {
        for j in 0..n {
            centered[i * n + j] = gram[i * n + j] - row_means[i] - row_means[j] + total_mean;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = vec![0.0; n * dims];
    let mut next = vec![0.0; n];
    for k in 0..dims {
        let mut v: Vec<f64> = (0..n).map(|_| box_muller(&mut rng)).collect();
        normalize(&mut v);
        for _ in 0..500 {
            for (i, slot) in next.iter_mut().enumerate() {
                *slot = centered[i * n..(i + 1) * n].iter().zip(&v).map(|(a, b)| a * b).sum();
            }
            let norm = normalize(&mut next);
            if norm == 0.0 {
                break;
            }
            let drift: f64 =
                v.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            std::mem::swap(&mut v, &mut next);
            if drift < 1e-13 {
                break;
            }
        }
        let lambda: f64 = (0..n)
            .map(|i| {
                v[i] * centered[i * n..(i + 1) * n].iter().zip(&v).map(|(a, b)| a * b).sum::<f64>()
            })
            .sum();
        if lambda > 1e-12 {
            let scale = lambda.sqrt();
            for i in 0..n {
                y[i * dims + k] = v[i] * scale;
            }
            for i in 0..n {
                for j in 0..n {
                    centered[i * n + j] -= lambda * v[i] * v[j];
                }
            }
        }
    }
    scale_columns(&mut y, n, dims);
    y
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}

fn random_init(n: usize, dims: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * dims).map(|_| box_muller(&mut rng) * 1e-2).collect()
}

// ==== embedding ===========================================================

/// A finished embedding plus the diagnostics the quality checks need.
#[derive(Debug, Clone)]
pub struct Embedding {
    /// n rows of `output_dims` coordinates.
    pub coords: Vec<Vec<f64>>,
    /// Conditional perplexity the bandwidth search achieved per point.
    pub achieved_perplexities: Vec<f64>,
    /// KL(P‖Q) at the initial layout, before any descent.
    pub initial_kl: f64,
    /// KL(P‖Q) at the returned layout.
    pub final_kl: f64,
}

/// Embed TF-IDF rows. Distances are Euclidean on the L2-normalized rows,
/// computed through the Gram matrix so the sparse side stays sparse.
pub fn tsne_embed(matrix: &TfidfMatrix, cfg: &EmbeddingConfig) -> Result<Embedding, AnalyticsError> {
    cfg.validate(matrix.n_docs)?;
    let gram = matrix.gram();
    embed_from_sq_dists(&sq_dists_from_gram(&gram, matrix.n_docs), Some(&gram), matrix.n_docs, cfg)
}

/// Embed dense points (same algorithm, no TF-IDF in front).
pub fn tsne_embed_points(
    points: &[Vec<f64>],
    cfg: &EmbeddingConfig,
) -> Result<Embedding, AnalyticsError> {
    cfg.validate(points.len())?;
    let n = points.len();
    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let dot: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| a * b).sum();
            gram[i * n + j] = dot;
            gram[j * n + i] = dot;
        }
    }
    embed_from_sq_dists(&pairwise_sq_dists(points), Some(&gram), n, cfg)
}

fn embed_from_sq_dists(
    sq_dists: &[f64],
    gram: Option<&[f64]>,
    n: usize,
    cfg: &EmbeddingConfig,
) -> Result<Embedding, AnalyticsError> {
    let dims = cfg.output_dims;
    let (cond, achieved) = conditional_affinities(sq_dists, n, cfg.perplexity)?;
    let p = joint_affinities(&cond, n);

    let mut y = match cfg.init {
        InitMode::Pca => match gram {
            Some(gram) => pca_init(gram, n, dims, cfg.seed),
            None => random_init(n, dims, cfg.seed),
        },
        InitMode::Random => random_init(n, dims, cfg.seed),
    };
    let initial_kl = kl_objective(&p, &y, n, dims);

    let mut velocity = vec![0.0; n * dims];
    let mut grad = vec![0.0; n * dims];
    for iter in 0..cfg.iterations {
        let exaggeration =
            if iter < cfg.exaggeration_iters { cfg.early_exaggeration } else { 1.0 };
        let momentum = if iter < cfg.momentum_switch_iter {
            cfg.momentum_initial
        } else {
            cfg.momentum_final
        };

        let (q, w) = low_dim_affinities(&y, n, dims);
        grad.fill(0.0);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let coeff =
                    4.0 * (exaggeration * p[i * n + j] - q[i * n + j]) * w[i * n + j];
                for k in 0..dims {
                    grad[i * dims + k] += coeff * (y[i * dims + k] - y[j * dims + k]);
                }
            }
        }

        for idx in 0..n * dims {
            velocity[idx] = momentum * velocity[idx] - cfg.learning_rate * grad[idx];
            y[idx] += velocity[idx];
        }
        // Recenter; the objective is translation-invariant and this keeps
        // coordinates from drifting.
        for k in 0..dims {
            let mean = (0..n).map(|i| y[i * dims + k]).sum::<f64>() / n as f64;
            for i in 0..n {
                y[i * dims + k] -= mean;
            }
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(AnalyticsError::NumericalOverflow { iteration: iter });
        }
    }

    let final_kl = kl_objective(&p, &y, n, dims);
    let coords = (0..n).map(|i| y[i * dims..(i + 1) * dims].to_vec()).collect();
    Ok(Embedding { coords, achieved_perplexities: achieved, initial_kl, final_kl })
}

/// Delimiter-separated (record_id, x, y, ...) rows for plotting.
pub fn write_embedding(
    record_ids: &[String],
    embedding: &Embedding,
    delimiter: char,
    path: &Path,
) -> Result<(), AnalyticsError> {
    assert_eq!(record_ids.len(), embedding.coords.len(), "one id per embedded point");
    let dims = embedding.coords.first().map_or(0, Vec::len);
    let mut text = String::from("record_id");
    for k in 0..dims {
        text.push(delimiter);
        text.push_str(match k {
            0 => "x",
            1 => "y",
            _ => "z",
        });
    }
    text.push('\n');
    for (id, coords) in record_ids.iter().zip(&embedding.coords) {
        text.push_str(id);
        for value in coords {
            text.push(delimiter);
            text.push_str(&value.to_string());
        }
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}
