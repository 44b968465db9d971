//! Shared test machinery: central finite-difference gradient checks,
//! an exhaustive CTC path-enumeration oracle, an independent span
//! masking simulator written against the sampler from first
//! principles, and small experiment builders.

#![allow(dead_code)]

pub mod criteria;

use std::collections::{BTreeMap, HashMap};

use jedssl_core::config::{load_config, ExperimentConfig};
use jedssl_core::corpus::Utterance;
use jedssl_core::frontend::FrontendConfig;
use jedssl_core::graph::{Graph, Precision, Tensor, TensorId};
use jedssl_core::params::ParamStore;
use jedssl_core::Result;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    use rand_distr::{Distribution, Normal};
    let d = Normal::new(0.0, std).unwrap();
    (0..n).map(|_| d.sample(rng)).collect()
}

/// A parameter store of independently drawn normal tensors.
pub fn random_store(shapes: &[(&str, Vec<usize>)], std: f64, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut ps = ParamStore::new();
    for (name, shape) in shapes {
        let n: usize = shape.iter().product();
        ps.insert(name, Tensor::new(randn(rng, n, std), shape.clone()).unwrap())
            .unwrap();
    }
    ps
}

// ── Finite-difference gradient checking ─────────────────────────────

pub const FD_H: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub struct GradReport {
    pub checked: usize,
    pub max_rel: f64,
}

fn eval_loss<F>(params: &ParamStore, build: &F) -> f64
where
    F: Fn(&mut Graph, &BTreeMap<String, TensorId>) -> Result<TensorId>,
{
    let mut g = Graph::new(Precision::F64);
    let binding = params.bind_all(&mut g);
    let loss = build(&mut g, &binding).expect("forward build");
    let v = g.value(loss);
    assert_eq!(v.len(), 1, "loss must be scalar");
    v[0]
}

/// Checks the analytic gradient of a scalar loss against 64-bit
/// central differences with step `FD_H`, over every parameter element
/// or a uniform sample of `max_elements` of them. Relative error is
/// |a - f| / max(|a|, |f|, 1e-5).
pub fn grad_check<F>(
    params: &mut ParamStore,
    build: F,
    max_elements: usize,
    rng: &mut ChaCha8Rng,
) -> GradReport
where
    F: Fn(&mut Graph, &BTreeMap<String, TensorId>) -> Result<TensorId>,
{
    let mut g = Graph::new(Precision::F64);
    let binding = params.bind_all(&mut g);
    let loss = build(&mut g, &binding).expect("forward build");
    g.backward(loss).expect("backward");
    let mut analytic: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (name, &id) in &binding {
        let grad = g
            .grad(id)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; g.value(id).len()]);
        analytic.insert(name.clone(), grad);
    }
    drop(g);

    let mut elems: Vec<(String, usize)> = Vec::new();
    for (name, grad) in &analytic {
        for i in 0..grad.len() {
            elems.push((name.clone(), i));
        }
    }
    if elems.len() > max_elements {
        for i in 0..max_elements {
            let j = rng.gen_range(i..elems.len());
            elems.swap(i, j);
        }
        elems.truncate(max_elements);
    }

    let mut max_rel = 0.0f64;
    for (name, i) in &elems {
        let a = analytic[name][*i];
        let orig = params.get(name).unwrap().data[*i];
        params.get_mut(name).unwrap().data[*i] = orig + FD_H;
        let lp = eval_loss(params, &build);
        params.get_mut(name).unwrap().data[*i] = orig - FD_H;
        let lm = eval_loss(params, &build);
        params.get_mut(name).unwrap().data[*i] = orig;
        let f = (lp - lm) / (2.0 * FD_H);
        let rel = (a - f).abs() / a.abs().max(f.abs()).max(1e-5);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    GradReport { checked: elems.len(), max_rel }
}

// ── Exhaustive CTC oracle ───────────────────────────────────────────

/// Row-wise softmax of a [t, c] logit matrix.
pub fn softmax_rows(logits: &[f64], t: usize, c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(t * c);
    for row in logits.chunks(c).take(t) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|&e| e / z));
    }
    out
}

/// Total path probability of every label sequence, by brute-force
/// enumeration of all classes^t alignment paths. A path maps to its
/// label by collapsing repeats first, then dropping blanks.
pub fn ctc_label_probs(
    probs: &[f64],
    t: usize,
    classes: usize,
    blank: usize,
) -> HashMap<Vec<usize>, f64> {
    assert_eq!(probs.len(), t * classes);
    let mut acc: HashMap<Vec<usize>, f64> = HashMap::new();
    let mut path = vec![0usize; t];
    loop {
        let mut p = 1.0;
        for (i, &c) in path.iter().enumerate() {
            p *= probs[i * classes + c];
        }
        let mut label = Vec::new();
        let mut prev = usize::MAX;
        for &c in &path {
            if c != prev {
                if c != blank {
                    label.push(c);
                }
                prev = c;
            }
        }
        *acc.entry(label).or_insert(0.0) += p;

        let mut k = 0;
        loop {
            if k == t {
                return acc;
            }
            path[k] += 1;
            if path[k] < classes {
                break;
            }
            path[k] = 0;
            k += 1;
        }
    }
}

// ── Independent masking simulator ───────────────────────────────────

/// Expected masked fraction by direct simulation: Bernoulli(p) starts,
/// coverage counted by interval sweep rather than a frame array.
pub fn simulate_mask_fraction(
    t: usize,
    p: f64,
    span: usize,
    trials: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut total = 0usize;
    for _ in 0..trials {
        let mut covered = 0usize;
        let mut reach = 0usize;
        for s in 0..t {
            if rng.gen::<f64>() < p {
                let e = (s + span).min(t);
                if s >= reach {
                    covered += e - s;
                    reach = e;
                } else if e > reach {
                    covered += e - reach;
                    reach = e;
                }
            }
        }
        total += covered;
    }
    total as f64 / (trials as f64 * t as f64)
}

/// A mask is a union of fixed-length spans truncated only at the right
/// edge iff every maximal masked run is at least span long or touches
/// the end.
pub fn is_union_of_spans(mask: &[bool], span: usize) -> bool {
    let t = mask.len();
    let mut i = 0;
    while i < t {
        if mask[i] {
            let mut j = i;
            while j < t && mask[j] {
                j += 1;
            }
            if j - i < span && j != t {
                return false;
            }
            i = j;
        } else {
            i += 1;
        }
    }
    true
}

// ── Corpus and config builders ──────────────────────────────────────

pub fn tiny_cfg() -> ExperimentConfig {
    load_config("desk-tiny").unwrap()
}

pub fn small_cfg() -> ExperimentConfig {
    load_config("desk-small").unwrap()
}

/// Desk-tiny shrunk to a handful of steps for wiring tests.
pub fn mini_cfg() -> ExperimentConfig {
    let mut c = tiny_cfg();
    c.pretrain.steps = 6;
    c.pretrain.warmup_steps = 3;
    c.pretrain.checkpoint_every = 3;
    c.pretrain.log_every = 1;
    c.finetune.steps = 4;
    c.finetune.warmup_steps = 2;
    c.finetune.checkpoint_every = 2;
    c.finetune.log_every = 1;
    c.kmeans.max_iters = 10;
    c
}

/// Hidden phone under each feature frame, labeling a frame by the
/// phone at its receptive-field center.
pub fn frame_phone_labels(utt: &Utterance, fcfg: &FrontendConfig, t: usize) -> Vec<usize> {
    let hop = fcfg.hop();
    let rf = fcfg.min_samples();
    (0..t)
        .map(|i| utt.phone_at((i * hop + rf / 2).min(utt.samples.len() - 1)))
        .collect()
}
