//! Streaming minibatch k-means: the pseudo-label teacher.
//!
//! State is one K×D centroid matrix plus counts — O(K·D + B·D) with the
//! minibatch buffer, independent of corpus size. Updates use the streaming
//! mean c ← c + (x − c)/count, so a batch repeated to convergence reaches a
//! Lloyd fixed point.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureSequence};
use crate::rng::{rng_for, rng_from};
use crate::runio::write_atomic;
use crate::tensorfile;

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// K×D centroid matrix.
    pub centroids: Array2<f64>,
    /// Lifetime update counts, one per centroid.
    pub counts: Vec<u64>,
    /// Feature kind this codebook was fit on.
    pub kind: FeatureKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelSequence {
    pub utterance_id: String,
    /// Cluster ids in [0, K), one per frame.
    pub labels: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    /// Minibatch size in frames.
    pub batch_size: usize,
    /// Full passes over the corpus frames.
    pub passes: usize,
    /// A centroid updated fewer than this many times during a pass is dead.
    pub repair_threshold: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig { batch_size: 1024, passes: 3, repair_threshold: 1 }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("cluster batch_size must be >= 1"));
        }
        if self.passes == 0 {
            return Err(Error::config("cluster passes must be >= 1"));
        }
        Ok(())
    }
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid, ties to the lowest index.
fn nearest(centroids: &Array2<f64>, x: ArrayView1<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(row, x);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

impl Codebook {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    /// Floats held by the clustering state proper (the memory-bound claim).
    pub fn state_floats(&self) -> usize {
        self.centroids.len()
    }

    /// Sum of squared distances from each row of `data` to its nearest
    /// centroid.
    pub fn inertia(&self, data: ArrayView2<f64>) -> f64 {
        data.rows().into_iter().map(|x| nearest(&self.centroids, x).1).sum()
    }

    /// Persist as `centroids.tnsr` plus a `codebook.json` sidecar.
    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        tensorfile::save(
            &dir.join("centroids.tnsr"),
            &[self.k(), self.dim()],
            self.centroids.as_slice().expect("contiguous"),
        )?;
        let sidecar = serde_json::json!({
            "k": self.k(),
            "kind": self.kind.to_string(),
            "counts": self.counts,
        });
        write_atomic(&dir.join("codebook.json"), serde_json::to_string_pretty(&sidecar)?.as_bytes())?;
        Ok(())
    }

    pub fn load(dir: &std::path::Path) -> Result<Codebook> {
        let raw = tensorfile::load(&dir.join("centroids.tnsr"))?;
        let centroids = raw.into_array2()?;
        let sidecar: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.join("codebook.json"))?)?;
        let kind: FeatureKind = sidecar["kind"]
            .as_str()
            .ok_or_else(|| Error::config("codebook sidecar missing `kind`"))?
            .parse()?;
        let counts: Vec<u64> = serde_json::from_value(sidecar["counts"].clone())?;
        let k = sidecar["k"]
            .as_u64()
            .ok_or_else(|| Error::config("codebook sidecar missing `k`"))? as usize;
        if k != centroids.nrows() || counts.len() != k {
            return Err(Error::config("codebook sidecar inconsistent with tensor"));
        }
        Ok(Codebook { centroids, counts, kind })
    }
}

/// k-means++ seeding over `sample`: first pick uniform, each next pick
/// drawn with probability proportional to squared distance from the chosen
/// set. Deterministic for a fixed seed.
pub fn init_codebook(
    k: usize,
    sample: ArrayView2<f64>,
    kind: FeatureKind,
    seed: u64,
) -> Result<Codebook> {
    let n = sample.nrows();
    if k == 0 {
        return Err(Error::config("k must be >= 1"));
    }
    if k > n {
        return Err(Error::config(format!("k = {k} exceeds the {n}-row seeding sample")));
    }
    let mut rng = rng_from(seed);
    let d = sample.ncols();
    let mut centroids = Array2::zeros((k, d));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&sample.row(first));

    // squared distance to the nearest chosen centroid, refreshed per pick
    let mut dist2: Vec<f64> = sample
        .rows()
        .into_iter()
        .map(|x| sq_dist(x, centroids.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = dist2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in dist2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            // all mass at existing centroids: fall back to uniform
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&sample.row(pick));
        for (i, x) in sample.rows().into_iter().enumerate() {
            dist2[i] = dist2[i].min(sq_dist(x, centroids.row(c)));
        }
    }
    Ok(Codebook { centroids, counts: vec![0; k], kind })
}

/// One streaming pass over a minibatch: each frame moves its nearest
/// centroid by 1/count toward itself, count incremented first. Centroids
/// missing from the batch are untouched.
pub fn partial_fit(codebook: &mut Codebook, minibatch: ArrayView2<f64>) -> Result<()> {
    if minibatch.ncols() != codebook.dim() {
        return Err(Error::DimMismatch(format!(
            "minibatch dim {} vs codebook dim {}",
            minibatch.ncols(),
            codebook.dim()
        )));
    }
    for x in minibatch.rows() {
        let (c, _) = nearest(&codebook.centroids, x);
        codebook.counts[c] += 1;
        let lr = 1.0 / codebook.counts[c] as f64;
        let mut row = codebook.centroids.row_mut(c);
        for (ci, xi) in row.iter_mut().zip(x.iter()) {
            *ci += lr * (xi - *ci);
        }
    }
    Ok(())
}

/// Label every frame with its nearest centroid.
pub fn assign(codebook: &Codebook, features: &FeatureSequence) -> Result<LabelSequence> {
    if features.dim() != codebook.dim() {
        return Err(Error::DimMismatch(format!(
            "features dim {} vs codebook dim {}",
            features.dim(),
            codebook.dim()
        )));
    }
    if features.kind != codebook.kind {
        return Err(Error::config(format!(
            "assigning {} features with a {} codebook",
            features.kind, codebook.kind
        )));
    }
    let labels = features
        .frames
        .rows()
        .into_iter()
        .map(|x| nearest(&codebook.centroids, x).0 as u32)
        .collect();
    Ok(LabelSequence { utterance_id: features.utterance_id.clone(), labels })
}

/// Re-seed centroids whose count rose by less than `threshold` since
/// `counts_at_epoch_start`: each dead centroid jumps to the reservoir frame
/// currently farthest from its nearest centroid, with its count reset.
pub fn dead_cluster_repair(
    codebook: &mut Codebook,
    reservoir: ArrayView2<f64>,
    counts_at_epoch_start: &[u64],
    threshold: u64,
) -> Result<usize> {
    if reservoir.nrows() == 0 {
        return Err(Error::config("dead-cluster repair needs a nonempty reservoir"));
    }
    let dead: Vec<usize> = (0..codebook.k())
        .filter(|&c| codebook.counts[c] - counts_at_epoch_start[c] < threshold)
        .collect();
    for &c in &dead {
        let far = reservoir
            .rows()
            .into_iter()
            .enumerate()
            .map(|(i, x)| (i, nearest(&codebook.centroids, x).1))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .expect("nonempty reservoir");
        codebook.centroids.row_mut(c).assign(&reservoir.row(far));
        codebook.counts[c] = 0;
    }
    Ok(dead.len())
}

/// Fit a codebook over corpus features: k-means++ init on a seeded sample,
/// then `passes` shuffled streaming passes in minibatches of `batch_size`
/// frames, with dead-cluster repair after each pass. Frame order is a
/// seeded shuffle fixed per pass, so the result is deterministic.
pub fn fit_codebook(
    k: usize,
    features: &[FeatureSequence],
    kind: FeatureKind,
    config: &ClusterConfig,
    seed: u64,
) -> Result<Codebook> {
    if features.is_empty() {
        return Err(Error::config("no features to cluster"));
    }
    let d = features[0].dim();
    let total_frames: usize = features.iter().map(|f| f.len()).sum();
    if total_frames < k {
        return Err(Error::config(format!("{total_frames} frames cannot seed k = {k} clusters")));
    }
    // global frame index -> (utterance, row)
    let locate = |g: usize| -> (usize, usize) {
        let mut rest = g;
        for (u, f) in features.iter().enumerate() {
            if rest < f.len() {
                return (u, rest);
            }
            rest -= f.len();
        }
        unreachable!("index within total_frames")
    };

    // seeding sample: up to 4k frames, evenly strided through the corpus
    let sample_n = (4 * k).min(total_frames);
    let mut sample = Array2::zeros((sample_n, d));
    for i in 0..sample_n {
        let g = i * total_frames / sample_n;
        let (u, r) = locate(g);
        sample.row_mut(i).assign(&features[u].frames.row(r));
    }
    let mut codebook = init_codebook(k, sample.view(), kind, crate::rng::derive_seed(seed, "init", 0))?;

    let mut order: Vec<u32> = (0..total_frames as u32).collect();
    let mut batch = Array2::zeros((config.batch_size.min(total_frames), d));
    for pass in 0..config.passes {
        let mut rng = rng_for(seed, "pass", pass as u64);
        // Fisher-Yates, explicit for stability across rand versions
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let counts_start = codebook.counts.clone();
        for chunk in order.chunks(batch.nrows()) {
            for (bi, &g) in chunk.iter().enumerate() {
                let (u, r) = locate(g as usize);
                batch.row_mut(bi).assign(&features[u].frames.row(r));
            }
            partial_fit(&mut codebook, batch.slice(ndarray::s![..chunk.len(), ..]))?;
        }
        // reservoir for repair: the final batch's frames
        let last = order.chunks(batch.nrows()).last().expect("nonempty order");
        dead_cluster_repair(
            &mut codebook,
            batch.slice(ndarray::s![..last.len(), ..]),
            &counts_start,
            config.repair_threshold,
        )?;
    }
    Ok(codebook)
}

/// Assign the whole corpus in parallel, preserving order.
pub fn assign_corpus(codebook: &Codebook, features: &[FeatureSequence]) -> Result<Vec<LabelSequence>> {
    features.par_iter().map(|f| assign(codebook, f)).collect()
}
