//! Layer-wise analysis: LID probes on pooled activations and k-means/MI on frames.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::Utterance;
use crate::encoder::stream_rng;
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::sshr_model::SshrModel;

const STREAM_SPLIT: u64 = 1;
const STREAM_FRAMES: u64 = 2;
const STREAM_KMEANS: u64 = 1_000;

pub const KMEANS_MAX_ITERS: usize = 300;

/// True when layer `d`'s dump carries the spliced LID row at position 0.
pub fn has_lid_row(model: &SshrModel, d: usize) -> bool {
    model.config().lid_extract_layer.is_some_and(|i| d >= i)
}

fn check_layer(model: &SshrModel, d: usize) -> Result<()> {
    if d > model.depth() {
        return Err(Error::config(format!(
            "layer {d} is out of range for a stack of depth {}",
            model.depth()
        )));
    }
    Ok(())
}

/// Activations of every utterance at every depth, as the next layer sees them.
fn dump_all(model: &SshrModel, utts: &[Utterance]) -> Result<Vec<Vec<Tensor<f32>>>> {
    let lid = model.config().lid_extract_layer;
    let per_utt = utts
        .par_iter()
        .map(|u| {
            let mut acts = model
                .forward(&u.features, true)
                .map_err(|e| e.at(format!("utterance {}", u.id)))?
                .activations
                .expect("activations were requested");
            if let Some(i) = lid {
                acts[i] = spliced(&acts[i]);
            }
            Ok(acts)
        })
        .collect::<Result<Vec<_>>>()?;
    let depth = model.depth();
    let mut by_layer: Vec<Vec<Tensor<f32>>> = (0..=depth).map(|_| Vec::with_capacity(utts.len())).collect();
    for acts in per_utt {
        for (d, a) in acts.into_iter().enumerate() {
            by_layer[d].push(a);
        }
    }
    Ok(by_layer)
}

fn spliced(x: &Tensor<f32>) -> Tensor<f32> {
    let (t, h) = x.dims2();
    let mut mean = vec![0.0f32; h];
    for r in 0..t {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= t as f32);
    mean.extend_from_slice(x.values());
    Tensor::matrix(t + 1, h, mean).expect("shape is consistent")
}

/// `T'×H` input to layer `d + 1` for each utterance; `d = 0` is the projected,
/// position-encoded input.
pub fn dump_representations(model: &SshrModel, utts: &[Utterance], d: usize) -> Result<Vec<Tensor<f32>>> {
    check_layer(model, d)?;
    Ok(dump_all(model, utts)?.swap_remove(d))
}

/// Mean over all rows of each dump, LID row included.
pub fn pool_mean(reps: &[Tensor<f32>]) -> Vec<Vec<f64>> {
    reps.iter()
        .map(|x| {
            let (t, h) = x.dims2();
            let mut m = vec![0.0f64; h];
            for r in 0..t {
                for (a, &v) in m.iter_mut().zip(x.row(r)) {
                    *a += f64::from(v);
                }
            }
            m.iter_mut().for_each(|a| *a /= t as f64);
            m
        })
        .collect()
}

/// Frame rows (LID row dropped) with each frame's phoneme label.
pub fn frame_rows(reps: &[Tensor<f32>], utts: &[Utterance], lid_row: bool) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (x, u) in reps.iter().zip(utts) {
        let skip = usize::from(lid_row);
        if x.rows() != u.alignment.len() + skip {
            return Err(Error::config(format!(
                "utterance {}: {} rows but {} aligned frames",
                u.id,
                x.rows(),
                u.alignment.len()
            )));
        }
        for (r, &lab) in (skip..x.rows()).zip(&u.alignment) {
            rows.push(x.row(r).iter().map(|&v| f64::from(v)).collect());
            labels.push(lab);
        }
    }
    Ok((rows, labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LidProbeConfig {
    pub l2: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for LidProbeConfig {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            max_iters: 2000,
            grad_tol: 1e-5,
            train_fraction: 0.7,
            seed: 0,
        }
    }
}

/// Per-class shuffled split; each class sends `round(f·n)` items to train.
pub fn stratified_split(labels: &[usize], train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = stream_rng(seed, STREAM_SPLIT);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for idx in by_class.values_mut() {
        idx.shuffle(&mut rng);
        let n = ((idx.len() as f64 * train_fraction).round() as usize).clamp(1, idx.len());
        train.extend_from_slice(&idx[..n]);
        test.extend_from_slice(&idx[n..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Centering plus `Λ^{-1/2}Uᵀ` on the non-degenerate eigendirections of the
/// training covariance.
struct Whitener {
    mean: Vec<f64>,
    /// `r × D`.
    proj: DMatrix<f64>,
}

impl Whitener {
    fn fit(xs: &[&[f64]]) -> Self {
        let n = xs.len();
        let dim = xs[0].len();
        let mut mean = vec![0.0; dim];
        for x in xs {
            for (m, v) in mean.iter_mut().zip(*x) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centered = DMatrix::from_fn(n, dim, |r, c| xs[r][c] - mean[c]);
        let cov = centered.transpose() * &centered / n as f64;
        let eig = SymmetricEigen::new(cov);
        let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
        let keep: Vec<usize> = (0..dim).filter(|&j| top > 0.0 && eig.eigenvalues[j] > 1e-10 * top).collect();
        let proj = DMatrix::from_fn(keep.len(), dim, |r, c| {
            let j = keep[r];
            eig.eigenvectors[(c, j)] / eig.eigenvalues[j].sqrt()
        });
        Self { mean, proj }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let c: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        (0..self.proj.nrows())
            .map(|r| (0..c.len()).map(|k| self.proj[(r, k)] * c[k]).sum())
            .collect()
    }
}

/// Multinomial logistic regression; `weights` is `M × (r + 1)` with the bias last.
struct Softmax {
    classes: usize,
    width: usize,
    weights: Vec<f64>,
}

impl Softmax {
    fn probs(&self, x: &[f64], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            let w = &self.weights[c * self.width..(c + 1) * self.width];
            *o = w[self.width - 1] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        let top = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for o in out.iter_mut() {
            *o = (*o - top).exp();
            z += *o;
        }
        out.iter_mut().for_each(|o| *o /= z);
    }

    /// Lowest class wins ties.
    fn predict(&self, x: &[f64]) -> usize {
        let mut p = vec![0.0; self.classes];
        self.probs(x, &mut p);
        let mut best = 0;
        for (c, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = c;
            }
        }
        best
    }

    /// Full-batch gradient descent with step `1/L`, `L = ½·λmax(Gram) + l2`;
    /// whitened inputs with a bias column have `λmax = 1`.
    fn fit(xs: &[Vec<f64>], ys: &[usize], classes: usize, cfg: &LidProbeConfig) -> Self {
        let width = xs.first().map_or(0, Vec::len) + 1;
        let mut m = Self {
            classes,
            width,
            weights: vec![0.0; classes * width],
        };
        let lr = 1.0 / (0.5 + cfg.l2);
        let n = xs.len() as f64;
        let mut grad = vec![0.0; m.weights.len()];
        let mut p = vec![0.0; classes];
        for _ in 0..cfg.max_iters {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for (x, &y) in xs.iter().zip(ys) {
                m.probs(x, &mut p);
                for c in 0..classes {
                    let e = (p[c] - f64::from(u8::from(c == y))) / n;
                    let g = &mut grad[c * width..(c + 1) * width];
                    for (gk, xk) in g.iter_mut().zip(x) {
                        *gk += e * xk;
                    }
                    g[width - 1] += e;
                }
            }
            for c in 0..classes {
                for k in 0..width - 1 {
                    grad[c * width + k] += cfg.l2 * m.weights[c * width + k];
                }
            }
            if grad.iter().map(|g| g * g).sum::<f64>().sqrt() < cfg.grad_tol {
                break;
            }
            for (w, g) in m.weights.iter_mut().zip(&grad) {
                *w -= lr * g;
            }
        }
        m
    }
}

/// Held-out accuracy of a logistic-regression language classifier.
pub fn lid_probe(features: &[Vec<f64>], labels: &[usize], cfg: &LidProbeConfig) -> Result<f64> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::EmptyInput { op: "lid_probe" });
    }
    let classes: Vec<usize> = labels.iter().copied().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let index = |l: usize| classes.binary_search(&l).expect("label was collected");
    let (train, test) = stratified_split(labels, cfg.train_fraction, cfg.seed);
    let present: std::collections::BTreeSet<usize> = train.iter().map(|&i| labels[i]).collect();
    if present.len() < 2 {
        return Err(Error::config("lid_probe needs at least two classes in the training split"));
    }
    if test.is_empty() {
        return Err(Error::EmptyInput { op: "lid_probe test split" });
    }
    let white = Whitener::fit(&train.iter().map(|&i| features[i].as_slice()).collect::<Vec<_>>());
    let xs: Vec<Vec<f64>> = train.iter().map(|&i| white.apply(&features[i])).collect();
    let ys: Vec<usize> = train.iter().map(|&i| index(labels[i])).collect();
    let model = Softmax::fit(&xs, &ys, classes.len(), cfg);
    let hits = test
        .iter()
        .filter(|&&i| model.predict(&white.apply(&features[i])) == index(labels[i]))
        .count();
    Ok(hits as f64 / test.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Distortion after each assignment step.
    pub distortions: Vec<f64>,
    pub converged: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, m) in centroids.iter().enumerate() {
        let d = sq_dist(x, m);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations. An emptied cluster keeps
/// its previous centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeans> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::config(format!("k = {k} needs 1 ≤ k ≤ N = {n}")));
    }
    let mut rng = stream_rng(seed, STREAM_KMEANS);
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if r < w {
                        break;
                    }
                    r -= w;
                }
            }
            pick.expect("total is positive")
        } else {
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        centroids.push(points[pick].clone());
        let c = centroids.last().expect("just pushed");
        for (w, p) in d2.iter_mut().zip(points) {
            *w = w.min(sq_dist(p, c));
        }
    }

    let dim = points[0].len();
    let mut assignments = vec![usize::MAX; n];
    let mut distortions = Vec::new();
    let mut converged = false;
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        let mut distortion = 0.0;
        for (a, p) in assignments.iter_mut().zip(points) {
            let (c, d) = nearest(p, &centroids);
            distortion += d;
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        distortions.push(distortion);
        if !changed {
            converged = true;
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assignments.iter().zip(points) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for ((c, s), &m) in centroids.iter_mut().zip(sums).zip(&counts) {
            if m > 0 {
                *c = s.into_iter().map(|v| v / m as f64).collect();
            }
        }
    }
    Ok(KMeans {
        assignments,
        centroids,
        distortions,
        converged,
    })
}

/// Plug-in entropy in nats.
pub fn entropy(labels: &[usize]) -> f64 {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let n = labels.len() as f64;
    -counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            p * p.ln()
        })
        .sum::<f64>()
}

/// Plug-in mutual information in nats from the joint count table.
pub fn mutual_information(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "label sequences differ in length");
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut ca: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cb: BTreeMap<usize, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
    }
    let n = a.len() as f64;
    let mi: f64 = joint
        .iter()
        .map(|(&(x, y), &c)| {
            let c = c as f64;
            let ratio = (c * n) / (ca[&x] as f64 * cb[&y] as f64);
            c / n * ratio.ln()
        })
        .sum();
    mi.max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Clusters for k-means; `None` means 4 × phoneme inventory.
    pub k: Option<usize>,
    pub seed: u64,
    /// Frame subsample cap for k-means.
    pub max_frames: usize,
    /// `None` probes every depth `0..=D`.
    pub layers: Option<Vec<usize>>,
    pub lid: LidProbeConfig,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            k: None,
            seed: 0,
            max_frames: 3000,
            layers: None,
            lid: LidProbeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProbe {
    pub layer: usize,
    pub lid_accuracy: f64,
    pub mi_nats: f64,
    pub cluster_entropy: f64,
    pub phoneme_entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub layers: Vec<LayerProbe>,
    pub depth: usize,
    pub checkpoint_id: String,
    pub probe_set_id: String,
    pub k: usize,
    pub seed: u64,
    pub frames: usize,
}

impl ProbeReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,lid_acc,mi_nats\n");
        for l in &self.layers {
            let _ = writeln!(s, "{},{},{}", l.layer, l.lid_accuracy, l.mi_nats);
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("probe.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("probe.json");
        fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))
    }
}

fn probe_set_id(utts: &[Utterance]) -> String {
    let mut h = crc32fast::Hasher::new();
    for u in utts {
        h.update(u.id.as_bytes());
        h.update(b"\n");
    }
    format!("{}:{:08x}", utts.len(), h.finalize())
}

/// LID accuracy and cluster–phoneme MI at each requested depth.
pub fn probe_all_layers(model: &SshrModel, utts: &[Utterance], cfg: &ProbeConfig) -> Result<ProbeReport> {
    let depth = model.depth();
    let layers = cfg.layers.clone().unwrap_or_else(|| (0..=depth).collect());
    for &d in &layers {
        check_layer(model, d)?;
    }
    let k = cfg.k.unwrap_or(4 * model.vocabulary().num_phonemes());
    let dumps = dump_all(model, utts)?;
    let langs: Vec<usize> = utts.iter().map(|u| u.lang).collect();

    let total: usize = utts.iter().map(|u| u.alignment.len()).sum();
    let mut keep: Vec<usize> = (0..total).collect();
    if total > cfg.max_frames {
        keep.shuffle(&mut stream_rng(cfg.seed, STREAM_FRAMES));
        keep.truncate(cfg.max_frames);
        keep.sort_unstable();
    }
    let lid_cfg = LidProbeConfig {
        seed: cfg.seed,
        ..cfg.lid.clone()
    };

    let rows = layers
        .par_iter()
        .map(|&d| {
            let reps = &dumps[d];
            let lid_accuracy = lid_probe(&pool_mean(reps), &langs, &lid_cfg).map_err(|e| e.at(format!("layer {d} LID probe")))?;
            let (frames, labels) = frame_rows(reps, utts, has_lid_row(model, d))?;
            let frames: Vec<Vec<f64>> = keep.iter().map(|&i| frames[i].clone()).collect();
            let labels: Vec<usize> = keep.iter().map(|&i| labels[i]).collect();
            let km = kmeans(&frames, k, cfg.seed.wrapping_add(d as u64)).map_err(|e| e.at(format!("layer {d} k-means")))?;
            Ok(LayerProbe {
                layer: d,
                lid_accuracy,
                mi_nats: mutual_information(&km.assignments, &labels),
                cluster_entropy: entropy(&km.assignments),
                phoneme_entropy: entropy(&labels),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(ProbeReport {
        layers: rows,
        depth,
        checkpoint_id: format!("{:08x}", crc32fast::hash(&model.to_bytes()?)),
        probe_set_id: probe_set_id(utts),
        k,
        seed: cfg.seed,
        frames: keep.len(),
    })
}
