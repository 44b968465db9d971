//! The nine acceptance checks as callable runners, shared between the
//! per-topic test files and the sequential acceptance binary. Each
//! runner is self-contained: it builds its own data, models, and
//! temporary directories, and reports a pass/fail verdict with detail.

use std::collections::BTreeMap;
use std::time::Instant;

use jedssl_core::corpus::{generate_corpus, train_test_split};
use jedssl_core::frontend::{self, FrontendConfig};
use jedssl_core::graph::{Graph, Precision, TensorId};
use jedssl_core::kmeans::{kmeans_fit, purity};
use jedssl_core::losses::{
    ctc_loss, joint_finetune_loss, joint_ssl_loss, masked_prediction_loss, sequence_loss,
    JointFinetuneWeights, JointSslWeights,
};
use jedssl_core::model::{
    decoder_forward, decoder_param_shapes, encoder_forward, encoder_param_shapes, getter, linear,
    register_shapes, DecoderConfig, Dropout, EncoderConfig,
};
use jedssl_core::params::ParamStore;
use jedssl_core::targets::{
    add_sos_eos, collapse_repetitions, collapse_runs, decoder_targets, sample_mask_spans,
    MaskSpec,
};
use jedssl_core::training::{
    discover_units, evaluate, finetune, pretrain, resume_pretrain, same_trajectory,
    scratch_params, FinetuneMode, PretrainInit,
};
use jedssl_core::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::*;

pub struct Criterion {
    pub name: &'static str,
    pub pass: bool,
    /// Ordering check that may legitimately fail at desk scale; a
    /// flagged result is reported loudly but does not fail the build.
    pub flagged: bool,
    pub detail: String,
}

impl Criterion {
    fn ok(name: &'static str, detail: String) -> Self {
        Criterion { name, pass: true, flagged: false, detail }
    }

    fn fail(name: &'static str, detail: String) -> Self {
        Criterion { name, pass: false, flagged: false, detail }
    }
}

pub fn all_runners() -> Vec<fn() -> Criterion> {
    vec![
        criterion_1,
        criterion_2,
        criterion_3,
        criterion_4,
        criterion_5,
        criterion_6,
        criterion_7,
        criterion_8,
        criterion_9,
    ]
}

// ── 1: finite-difference gradient suite ─────────────────────────────

type Build = Box<dyn Fn(&mut Graph, &BTreeMap<String, TensorId>) -> Result<TensorId>>;

fn fd_case<G>(instances: usize, seed: u64, max_elems: usize, gen: G) -> (usize, f64)
where
    G: Fn(&mut ChaCha8Rng) -> (ParamStore, Build),
{
    let mut r = rng(seed);
    let mut checked = 0;
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (mut ps, build) = gen(&mut r);
        let rep = grad_check(&mut ps, build, max_elems, &mut r);
        checked += rep.checked;
        worst = worst.max(rep.max_rel);
    }
    (checked, worst)
}

fn proj_weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| (1.3 * i as f64 + 0.7).sin() + 0.1).collect()
}

/// Weighted sum to a scalar, so upstream gradients are non-uniform.
fn project(g: &mut Graph, out: TensorId) -> Result<TensorId> {
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w = g.constant(proj_weights(n), shape)?;
    let m = g.mul(out, w)?;
    g.sum_all(m)
}

/// Random CTC label admissible for `t` frames: symbols 1..classes,
/// blank 0, adjacent repeats allowed when frames permit.
fn random_label(r: &mut ChaCha8Rng, t: usize, classes: usize, max_len: usize) -> Vec<usize> {
    loop {
        let len = r.gen_range(0..=max_len.min(t));
        let label: Vec<usize> = (0..len).map(|_| r.gen_range(1..classes)).collect();
        if jedssl_core::ctc::min_frames(&label) <= t {
            return label;
        }
    }
}

fn tiny_model(r: &mut ChaCha8Rng) -> (FrontendConfig, EncoderConfig, DecoderConfig, usize, ParamStore, Vec<f64>, usize) {
    let fcfg = FrontendConfig {
        sample_rate: 16000,
        channels: 4,
        kernels: vec![4, 3],
        strides: vec![3, 2],
    };
    let ecfg = EncoderConfig { n_layers: 1, n_heads: 2, d_model: 8, d_ff: 16, dropout: 0.0 };
    let dcfg = DecoderConfig { n_layers: 1, n_heads: 2, d_model: 8, d_ff: 16, dropout: 0.0 };
    let k = 5;
    let mut ps = ParamStore::new();
    register_shapes(&mut ps, &fcfg.param_shapes(), r.gen()).unwrap();
    register_shapes(&mut ps, &encoder_param_shapes(&ecfg, fcfg.channels, k), r.gen()).unwrap();
    register_shapes(&mut ps, &decoder_param_shapes(&dcfg, k), r.gen()).unwrap();
    let n_samples = fcfg.min_samples() + r.gen_range(1..4) * fcfg.hop();
    let samples = randn(r, n_samples, 0.5);
    let t = fcfg.frame_count(n_samples).unwrap();
    (fcfg, ecfg, dcfg, k, ps, samples, t)
}

fn nonempty_mask(r: &mut ChaCha8Rng, t: usize) -> Vec<usize> {
    let mut rows: Vec<usize> = (0..t).filter(|_| r.gen_bool(0.5)).collect();
    if rows.is_empty() {
        rows.push(r.gen_range(0..t));
    }
    rows
}

pub fn criterion_1() -> Criterion {
    let started = Instant::now();
    let mut results: Vec<(&str, usize, f64)> = Vec::new();
    let mut run = |name: &'static str, out: (usize, f64)| results.push((name, out.0, out.1));

    run("matmul", fd_case(22, 101, 400, |r| {
        let (m, k, n) = (r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(1..=4));
        let ps = random_store(&[("x", vec![m, k]), ("y", vec![k, n])], 1.0, r);
        (ps, Box::new(move |g, b| {
            let out = g.matmul(b["x"], b["y"])?;
            project(g, out)
        }))
    }));
    run("add", fd_case(22, 102, 400, |r| {
        let (m, n) = (r.gen_range(1..=4), r.gen_range(1..=5));
        let ps = random_store(&[("x", vec![m, n]), ("y", vec![m, n])], 1.0, r);
        (ps, Box::new(move |g, b| {
            let out = g.add(b["x"], b["y"])?;
            project(g, out)
        }))
    }));
    run("mul", fd_case(22, 103, 400, |r| {
        let (m, n) = (r.gen_range(1..=4), r.gen_range(1..=5));
        let ps = random_store(&[("x", vec![m, n]), ("y", vec![m, n])], 1.0, r);
        (ps, Box::new(move |g, b| {
            let out = g.mul(b["x"], b["y"])?;
            project(g, out)
        }))
    }));
    run("scale", fd_case(22, 104, 400, |r| {
        let (m, n) = (r.gen_range(1..=4), r.gen_range(1..=5));
        let c = r.gen_range(-2.0..2.0);
        let ps = random_store(&[("x", vec![m, n])], 1.0, r);
        (ps, Box::new(move |g, b| {
            let out = g.scale(b["x"], c)?;
            project(g, out)
        }))
    }));
    run("broadcast_add_row", fd_case(22, 105, 400, |r| {
        let (m, n) = (r.gen_range(1..=4), r.gen_range(1..=5));
        let ps = random_store(&[("x", vec![m, n]), ("b", vec![n])], 1.0, r);
        (ps, Box::new(move |g, bi| {
            let out = g.broadcast_add_row(bi["x"], bi["b"])?;
            project(g, out)
        }))
    }));
    run("transpose", fd_case(22, 106, 400, |r| {
        let (m, n) = (r.gen_range(1..=4), r.gen_range(1..=5));
        let ps = random_store(&[("x", vec![m, n])], 1.0, r);
        (ps, Box::new(move |g, b| {
            let out = g.transpose(b["x"])?;
            project(g, out)
        }))
    }));
    run("reshape", fd_case(22, 107, 400, |r| {
        let (m, n) = (r.gen_range(1..=4), r.gen_range(1..=5));
        let ps = random_store(&[("x", vec![m, n])], 1.0, r);
        (ps, Box::new(move |g, b| {
            let out = g.reshape(b["x"], vec![1, m * n])?;
            project(g, out)
        }))
    }));
    run("slice_cols", fd_case(22, 108, 400, |r| {
        let (m, n) = (r.gen_range(1..=4), r.gen_range(2..=6));
        let start = r.gen_range(0..n);
        let len = r.gen_range(1..=n - start);
        let ps = random_store(&[("x", vec![m, n])], 1.0, r);
        (ps, Box::new(move |g, b| {
            let out = g.slice_cols(b["x"], start, len)?;
            project(g, out)
        }))
    }));
    run("slice_rows", fd_case(22, 109, 400, |r| {
        let (m, n) = (r.gen_range(2..=6), r.gen_range(1..=4));
        let start = r.gen_range(0..m);
        let len = r.gen_range(1..=m - start);
        let ps = random_store(&[("x", vec![m, n])], 1.0, r);
        (ps, Box::new(move |g, b| {
            let out = g.slice_rows(b["x"], start, len)?;
            project(g, out)
        }))
    }));
    run("concat_cols", fd_case(22, 110, 400, |r| {
        let (m, n1, n2) = (r.gen_range(1..=4), r.gen_range(1..=3), r.gen_range(1..=3));
        let ps = random_store(&[("x", vec![m, n1]), ("y", vec![m, n2])], 1.0, r);
        (ps, Box::new(move |g, b| {
            let out = g.concat_cols(&[b["x"], b["y"]])?;
            project(g, out)
        }))
    }));
    run("concat_rows", fd_case(22, 111, 400, |r| {
        let (m1, m2, n) = (r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(1..=4));
        let ps = random_store(&[("x", vec![m1, n]), ("y", vec![m2, n])], 1.0, r);
        (ps, Box::new(move |g, b| {
            let out = g.concat_rows(&[b["x"], b["y"]])?;
            project(g, out)
        }))
    }));
    run("softmax", fd_case(22, 112, 400, |r| {
        let (m, n) = (r.gen_range(1..=4), r.gen_range(2..=5));
        let ps = random_store(&[("x", vec![m, n])], 2.0, r);
        (ps, Box::new(move |g, b| {
            let out = g.softmax(b["x"])?;
            project(g, out)
        }))
    }));
    run("log_softmax", fd_case(22, 113, 400, |r| {
        let (m, n) = (r.gen_range(1..=4), r.gen_range(2..=5));
        let ps = random_store(&[("x", vec![m, n])], 2.0, r);
        (ps, Box::new(move |g, b| {
            let out = g.log_softmax(b["x"])?;
            project(g, out)
        }))
    }));
    run("layer_norm", fd_case(22, 114, 400, |r| {
        let (m, n) = (r.gen_range(1..=4), r.gen_range(2..=6));
        let ps = random_store(&[("x", vec![m, n]), ("g", vec![n]), ("b", vec![n])], 1.0, r);
        (ps, Box::new(move |g, b| {
            let out = g.layer_norm(b["x"], b["g"], b["b"], 1e-5)?;
            project(g, out)
        }))
    }));
    run("gelu", fd_case(22, 115, 400, |r| {
        let (m, n) = (r.gen_range(1..=4), r.gen_range(1..=5));
        let ps = random_store(&[("x", vec![m, n])], 1.5, r);
        (ps, Box::new(move |g, b| {
            let out = g.gelu(b["x"])?;
            project(g, out)
        }))
    }));
    run("embedding", fd_case(22, 116, 400, |r| {
        let (v, d) = (r.gen_range(2..=5), r.gen_range(1..=4));
        let len = r.gen_range(1..=5);
        let idx: Vec<usize> = (0..len).map(|_| r.gen_range(0..v)).collect();
        let ps = random_store(&[("table", vec![v, d])], 1.0, r);
        (ps, Box::new(move |g, b| {
            let out = g.embedding(b["table"], &idx)?;
            project(g, out)
        }))
    }));
    run("mask_rows", fd_case(22, 117, 400, |r| {
        let (m, n) = (r.gen_range(2..=5), r.gen_range(1..=4));
        let rows = nonempty_mask(r, m);
        let ps = random_store(&[("x", vec![m, n]), ("e", vec![n])], 1.0, r);
        (ps, Box::new(move |g, b| {
            let out = g.mask_rows(b["x"], &rows, b["e"])?;
            project(g, out)
        }))
    }));
    run("frame_patches", fd_case(22, 118, 400, |r| {
        let (t, c) = (r.gen_range(4..=8), r.gen_range(1..=3));
        let k = r.gen_range(1..=4.min(t));
        let s = r.gen_range(1..=3);
        let ps = random_store(&[("x", vec![t, c])], 1.0, r);
        (ps, Box::new(move |g, b| {
            let out = g.frame_patches(b["x"], k, s)?;
            project(g, out)
        }))
    }));
    run("sum_all", fd_case(22, 119, 400, |r| {
        let (m, n) = (r.gen_range(1..=4), r.gen_range(1..=5));
        let ps = random_store(&[("x", vec![m, n])], 1.0, r);
        (ps, Box::new(move |g, b| g.sum_all(b["x"])))
    }));
    run("mean_all", fd_case(22, 120, 400, |r| {
        let (m, n) = (r.gen_range(1..=4), r.gen_range(1..=5));
        let ps = random_store(&[("x", vec![m, n])], 1.0, r);
        (ps, Box::new(move |g, b| g.mean_all(b["x"])))
    }));
    run("gather_nll_mean", fd_case(22, 121, 400, |r| {
        let (m, v) = (r.gen_range(2..=5), r.gen_range(2..=5));
        let targets: Vec<usize> = (0..m).map(|_| r.gen_range(0..v)).collect();
        let rows = nonempty_mask(r, m);
        let ps = random_store(&[("x", vec![m, v])], 1.0, r);
        (ps, Box::new(move |g, b| {
            let lp = g.log_softmax(b["x"])?;
            g.gather_nll_mean(lp, &targets, &rows)
        }))
    }));
    run("ctc_nll", fd_case(22, 122, 400, |r| {
        let t = r.gen_range(3..=7);
        let c = r.gen_range(2..=5);
        let label = random_label(r, t, c, 4);
        let ps = random_store(&[("x", vec![t, c])], 1.5, r);
        (ps, Box::new(move |g, b| {
            let lp = g.log_softmax(b["x"])?;
            g.ctc_nll(lp, &label, 0)
        }))
    }));
    run("ctc_loss", fd_case(22, 123, 400, |r| {
        let t = r.gen_range(3..=7);
        let c = r.gen_range(2..=5);
        let label = random_label(r, t, c, 4);
        let ps = random_store(&[("x", vec![t, c])], 1.5, r);
        (ps, Box::new(move |g, b| ctc_loss(g, b["x"], &label, 0)))
    }));

    run("encoder_decoder_forward", fd_case(20, 201, 30, |r| {
        let (fcfg, ecfg, dcfg, k, ps, samples, t) = tiny_model(r);
        let rows = nonempty_mask(r, t);
        let len = r.gen_range(1..=3);
        let mut tokens = vec![k];
        tokens.extend((0..len).map(|_| r.gen_range(0..k)));
        (ps, Box::new(move |g, b| {
            let get = getter(b);
            let feats = frontend::forward(g, &fcfg, &samples, &get)?;
            let masked = g.mask_rows(feats, &rows, get("enc.mask_embed")?)?;
            let enc = encoder_forward(g, &get, &ecfg, masked, &mut Dropout::off())?;
            let dec = decoder_forward(
                g, &get, &dcfg, "dec", "dec.embed", "dec.head", &tokens, enc.states,
                &mut Dropout::off(),
            )?;
            project(g, dec.logits)
        }))
    }));
    run("masked_prediction_loss", fd_case(20, 202, 30, |r| {
        let (fcfg, ecfg, _, k, ps, samples, t) = tiny_model(r);
        let rows = nonempty_mask(r, t);
        let mut masked = vec![false; t];
        for &i in &rows {
            masked[i] = true;
        }
        let spec = MaskSpec { masked, selection_prob: 0.5, span_length: 1 };
        let ids: Vec<usize> = (0..t).map(|_| r.gen_range(0..k)).collect();
        (ps, Box::new(move |g, b| {
            let get = getter(b);
            let feats = frontend::forward(g, &fcfg, &samples, &get)?;
            let x = g.mask_rows(feats, &spec.indices(), get("enc.mask_embed")?)?;
            let enc = encoder_forward(g, &get, &ecfg, x, &mut Dropout::off())?;
            let logits = linear(g, &get, "enc.unit_head", enc.states)?;
            masked_prediction_loss(g, logits, &ids, &spec)
        }))
    }));
    run("sequence_loss", fd_case(20, 203, 30, |r| {
        let (fcfg, ecfg, dcfg, k, ps, samples, t) = tiny_model(r);
        let ids: Vec<usize> = (0..t).map(|_| r.gen_range(0..k)).collect();
        let tg = decoder_targets(&ids, k).unwrap();
        let smooth = if r.gen_bool(0.5) { 0.1 } else { 0.0 };
        (ps, Box::new(move |g, b| {
            let get = getter(b);
            let feats = frontend::forward(g, &fcfg, &samples, &get)?;
            let enc = encoder_forward(g, &get, &ecfg, feats, &mut Dropout::off())?;
            let dec = decoder_forward(
                g, &get, &dcfg, "dec", "dec.embed", "dec.head", &tg.input, enc.states,
                &mut Dropout::off(),
            )?;
            sequence_loss(g, dec.logits, &tg.target, smooth)
        }))
    }));
    run("joint_ssl_loss", fd_case(20, 204, 30, |r| {
        let (fcfg, ecfg, dcfg, k, ps, samples, t) = tiny_model(r);
        let rows = nonempty_mask(r, t);
        let mut masked = vec![false; t];
        for &i in &rows {
            masked[i] = true;
        }
        let spec = MaskSpec { masked, selection_prob: 0.5, span_length: 1 };
        let ids: Vec<usize> = (0..t).map(|_| r.gen_range(0..k)).collect();
        let tg = decoder_targets(&ids, k).unwrap();
        let w = JointSslWeights::new(0.5).unwrap();
        (ps, Box::new(move |g, b| {
            let get = getter(b);
            let feats = frontend::forward(g, &fcfg, &samples, &get)?;
            let x = g.mask_rows(feats, &spec.indices(), get("enc.mask_embed")?)?;
            let enc = encoder_forward(g, &get, &ecfg, x, &mut Dropout::off())?;
            let unit_logits = linear(g, &get, "enc.unit_head", enc.states)?;
            let l_m = masked_prediction_loss(g, unit_logits, &ids, &spec)?;
            let dec = decoder_forward(
                g, &get, &dcfg, "dec", "dec.embed", "dec.head", &tg.input, enc.states,
                &mut Dropout::off(),
            )?;
            let l_s = sequence_loss(g, dec.logits, &tg.target, 0.1)?;
            joint_ssl_loss(g, l_m, l_s, w)
        }))
    }));

    let elapsed = started.elapsed().as_secs_f64();
    let total: usize = results.iter().map(|r| r.1).sum();
    let worst = results.iter().fold(0.0f64, |a, r| a.max(r.2));
    let bad: Vec<String> = results
        .iter()
        .filter(|r| r.2 >= FD_TOL)
        .map(|r| format!("{} rel {:.2e}", r.0, r.2))
        .collect();
    let pass = bad.is_empty() && elapsed < 120.0;
    let detail = if bad.is_empty() {
        format!(
            "{} cases, {} elements, worst rel err {:.2e}, {:.1}s (budget 120s)",
            results.len(),
            total,
            worst,
            elapsed
        )
    } else {
        format!("failures: {} ({:.1}s)", bad.join(", "), elapsed)
    };
    Criterion { name: "1 gradient suite", pass, flagged: false, detail }
}

// ── 2: exhaustive CTC oracle ────────────────────────────────────────

pub fn criterion_2() -> Criterion {
    let mut r = rng(0xC7C0);
    let mut worst_nll = 0.0f64;
    let mut worst_total = 0.0f64;
    let instances = 500;
    for _ in 0..instances {
        let t = r.gen_range(1..=8);
        let c = r.gen_range(1..=4);
        let classes = c + 1;
        let label = random_label(&mut r, t, classes, 4);
        let logits = randn(&mut r, t * classes, 1.5);
        let probs = softmax_rows(&logits, t, classes);
        let oracle = ctc_label_probs(&probs, t, classes, 0);

        let total: f64 = oracle.values().sum();
        worst_total = worst_total.max((total - 1.0).abs());

        let mut g = Graph::new(Precision::F64);
        let x = g.constant(logits.clone(), vec![t, classes]).unwrap();
        let loss = ctc_loss(&mut g, x, &label, 0).unwrap();
        let nll = g.value(loss)[0];
        let p = oracle.get(&label).copied().unwrap_or(0.0);
        assert!(p > 0.0, "admissible label must have path mass");
        worst_nll = worst_nll.max((nll - (-p.ln())).abs());
    }
    let pass = worst_nll < 1e-8 && worst_total < 1e-8;
    Criterion {
        name: "2 CTC oracle",
        pass,
        flagged: false,
        detail: format!(
            "{} instances, worst |nll - oracle| {:.2e}, worst |total prob - 1| {:.2e}",
            instances, worst_nll, worst_total
        ),
    }
}

// ── 3: target preparation properties ────────────────────────────────

pub fn criterion_3() -> Criterion {
    let mut r = rng(0x7A26);
    let n = 10_000;
    for _ in 0..n {
        let len = r.gen_range(1..=50);
        let k = r.gen_range(2..=8);
        let ids: Vec<usize> = (0..len).map(|_| r.gen_range(0..k)).collect();

        let once = collapse_repetitions(&ids).unwrap();
        let twice = collapse_repetitions(&once).unwrap();
        if once != twice {
            return Criterion::fail("3 target preparation", format!("not idempotent on {:?}", ids));
        }
        if once.windows(2).any(|w| w[0] == w[1]) {
            return Criterion::fail(
                "3 target preparation",
                format!("adjacent duplicate in {:?}", once),
            );
        }
        let runs = collapse_runs(&ids);
        let expanded: Vec<usize> = runs
            .iter()
            .flat_map(|&(id, n)| std::iter::repeat(id).take(n))
            .collect();
        if expanded != ids {
            return Criterion::fail(
                "3 target preparation",
                format!("run expansion lost information on {:?}", ids),
            );
        }

        let t1 = decoder_targets(&ids, k).unwrap();
        let m1 = sample_mask_spans(len, 0.3, 3, &mut r).unwrap();
        let m2 = sample_mask_spans(len, 0.3, 3, &mut r).unwrap();
        let t2 = decoder_targets(&ids, k).unwrap();
        if t1 != t2 || t1 != add_sos_eos(&once, k).unwrap() {
            return Criterion::fail(
                "3 target preparation",
                format!("decoder target depends on mask {:?} vs {:?}", m1.indices(), m2.indices()),
            );
        }
    }
    Criterion::ok(
        "3 target preparation",
        format!("{} sequences: idempotent, duplicate-free, run-inverse, mask-invariant", n),
    )
}

// ── 4: masking structure and Monte-Carlo fraction ───────────────────

pub fn criterion_4() -> Criterion {
    let mut r = rng(0x3A5F);
    let span = 10;
    for _ in 0..2000 {
        let t = r.gen_range(1..=60);
        let p = if r.gen_bool(0.5) { 0.08 } else { 0.15 };
        let spec = sample_mask_spans(t, p, span, &mut r).unwrap();
        if !is_union_of_spans(&spec.masked, span) {
            return Criterion::fail(
                "4 masking",
                format!("mask not a union of {}-spans at t={}: {:?}", span, t, spec.masked),
            );
        }
    }

    let (t, p, trials) = (1000, 0.08, 10_000);
    let mut sampler_total = 0usize;
    for _ in 0..trials {
        sampler_total += sample_mask_spans(t, p, span, &mut r).unwrap().count();
    }
    let sampled = sampler_total as f64 / (trials as f64 * t as f64);
    let mut r2 = rng(0x51A1);
    let simulated = simulate_mask_fraction(t, p, span, trials, &mut r2);
    let diff = (sampled - simulated).abs();
    let pass = diff < 0.01;
    Criterion {
        name: "4 masking",
        pass,
        flagged: false,
        detail: format!(
            "2000 structure checks; fraction {:.4} vs simulated {:.4} (|diff| {:.4} < 0.01)",
            sampled, simulated, diff
        ),
    }
}

// ── 5: loss combination exactness and gradient coupling ─────────────

struct FixedBatch {
    fcfg: FrontendConfig,
    ecfg: EncoderConfig,
    dcfg: DecoderConfig,
    k: usize,
    ps: ParamStore,
    samples: Vec<f64>,
    spec: MaskSpec,
    ids: Vec<usize>,
}

fn fixed_batch(seed: u64) -> FixedBatch {
    let mut r = rng(seed);
    let (fcfg, ecfg, dcfg, k, ps, samples, t) = tiny_model(&mut r);
    let rows = nonempty_mask(&mut r, t);
    let mut masked = vec![false; t];
    for &i in &rows {
        masked[i] = true;
    }
    let spec = MaskSpec { masked, selection_prob: 0.5, span_length: 1 };
    let ids: Vec<usize> = (0..t).map(|_| r.gen_range(0..k)).collect();
    FixedBatch { fcfg, ecfg, dcfg, k, ps, samples, spec, ids }
}

/// Builds L_M and L_S on one graph; returns their ids and the binding.
fn build_components(
    fx: &FixedBatch,
    g: &mut Graph,
) -> (TensorId, TensorId, BTreeMap<String, TensorId>) {
    let binding = fx.ps.bind_all(g);
    let get = getter(&binding);
    let feats = frontend::forward(g, &fx.fcfg, &fx.samples, &get).unwrap();
    let x = g.mask_rows(feats, &fx.spec.indices(), get("enc.mask_embed").unwrap()).unwrap();
    let enc = encoder_forward(g, &get, &fx.ecfg, x, &mut Dropout::off()).unwrap();
    let unit_logits = linear(g, &get, "enc.unit_head", enc.states).unwrap();
    let l_m = masked_prediction_loss(g, unit_logits, &fx.ids, &fx.spec).unwrap();
    let tg = decoder_targets(&fx.ids, fx.k).unwrap();
    let dec = decoder_forward(
        g, &get, &fx.dcfg, "dec", "dec.embed", "dec.head", &tg.input, enc.states,
        &mut Dropout::off(),
    )
    .unwrap();
    let l_s = sequence_loss(g, dec.logits, &tg.target, 0.1).unwrap();
    drop(get);
    (l_m, l_s, binding)
}

fn grads_by_prefix(g: &Graph, binding: &BTreeMap<String, TensorId>, prefix: &str) -> BTreeMap<String, Vec<f64>> {
    binding
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(n, &id)| {
            let grad = g
                .grad(id)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; g.value(id).len()]);
            (n.clone(), grad)
        })
        .collect()
}

pub fn criterion_5() -> Criterion {
    let fx = fixed_batch(0x5A11);
    let name = "5 loss combination";

    // Mix values reproduce the weighted component sums exactly.
    for &alpha in &[0.0, 0.5, 1.0] {
        let mut g = Graph::new(Precision::F64);
        let (l_m, l_s, _) = build_components(&fx, &mut g);
        let lm = g.value(l_m)[0];
        let ls = g.value(l_s)[0];
        let joint = joint_ssl_loss(&mut g, l_m, l_s, JointSslWeights::new(alpha).unwrap()).unwrap();
        let got = g.value(joint)[0];
        let want = alpha * lm + (1.0 - alpha) * ls;
        if (got - want).abs() > 4.0 * f64::EPSILON * want.abs().max(1.0) {
            return Criterion::fail(
                name,
                format!("alpha {}: joint {} vs exact {}", alpha, got, want),
            );
        }
    }
    {
        let mut r = rng(0x5A22);
        let t = 6;
        let classes = 4;
        let logits_ctc = randn(&mut r, t * classes, 1.0);
        let label = vec![1, 2];
        let va = 5;
        let logits_att = randn(&mut r, 3 * va, 1.0);
        let tgt = vec![1, 3, 4];
        for &beta in &[0.0, 0.3, 1.0] {
            let mut g = Graph::new(Precision::F64);
            let lc_in = g.constant(logits_ctc.clone(), vec![t, classes]).unwrap();
            let la_in = g.constant(logits_att.clone(), vec![3, va]).unwrap();
            let l_ctc = ctc_loss(&mut g, lc_in, &label, 0).unwrap();
            let l_att = sequence_loss(&mut g, la_in, &tgt, 0.1).unwrap();
            let (vc, va_) = (g.value(l_ctc)[0], g.value(l_att)[0]);
            let joint =
                joint_finetune_loss(&mut g, l_ctc, l_att, JointFinetuneWeights::new(beta).unwrap())
                    .unwrap();
            let got = g.value(joint)[0];
            let want = beta * vc + (1.0 - beta) * va_;
            if (got - want).abs() > 4.0 * f64::EPSILON * want.abs().max(1.0) {
                return Criterion::fail(
                    name,
                    format!("beta {}: joint {} vs exact {}", beta, got, want),
                );
            }
        }
    }

    // Alpha 1: decoder gradients identically zero.
    {
        let mut g = Graph::new(Precision::F64);
        let (l_m, l_s, binding) = build_components(&fx, &mut g);
        let joint = joint_ssl_loss(&mut g, l_m, l_s, JointSslWeights::new(1.0).unwrap()).unwrap();
        g.backward(joint).unwrap();
        let dec = grads_by_prefix(&g, &binding, "dec.");
        for (n, grad) in dec {
            if grad.iter().any(|&v| v != 0.0) {
                return Criterion::fail(name, format!("alpha 1 leaks gradient into {}", n));
            }
        }
    }

    // Alpha in (0,1): the decoder contributes gradient to the encoder,
    // beyond pure rescaling of the masked-prediction gradient.
    {
        let mut g1 = Graph::new(Precision::F64);
        let (l_m, _, b1) = build_components(&fx, &mut g1);
        g1.backward(l_m).unwrap();
        let lm_only = grads_by_prefix(&g1, &b1, "enc.");

        let alpha = 0.5;
        let mut g2 = Graph::new(Precision::F64);
        let (l_m2, l_s2, b2) = build_components(&fx, &mut g2);
        let joint =
            joint_ssl_loss(&mut g2, l_m2, l_s2, JointSslWeights::new(alpha).unwrap()).unwrap();
        g2.backward(joint).unwrap();
        let joint_grads = grads_by_prefix(&g2, &b2, "enc.");

        let mut max_dev = 0.0f64;
        for (n, jg) in &joint_grads {
            let base = &lm_only[n];
            for (a, b) in jg.iter().zip(base) {
                max_dev = max_dev.max((a - alpha * b).abs());
            }
        }
        if max_dev < 1e-9 {
            return Criterion::fail(
                name,
                format!("encoder gradient shows no decoder coupling (max dev {:.2e})", max_dev),
            );
        }
    }
    Criterion::ok(
        name,
        "alpha/beta mixes exact; alpha=1 decoder grads zero; decoder couples into encoder grads"
            .to_string(),
    )
}

// ── 6: k-means properties ───────────────────────────────────────────

pub fn criterion_6() -> Criterion {
    let name = "6 k-means";
    let mut r = rng(0x6B6B);

    // Lloyd inertia monotone on random blobs.
    for trial in 0..20 {
        let k = r.gen_range(2..=5);
        let n = r.gen_range(20..=80);
        let d = r.gen_range(1..=4);
        let feats = randn(&mut r, n * d, 1.0);
        let m = kmeans_fit(&feats, n, d, k, 50, trial).unwrap();
        for w in m.inertia_history.windows(2) {
            if w[1] > w[0] + 1e-9 * w[0].abs().max(1.0) {
                return Criterion::fail(name, format!("inertia rose: {:?}", m.inertia_history));
            }
        }

        // Assignment equals a brute-force nearest-centroid scan.
        let assign = jedssl_core::kmeans::kmeans_assign(&m, &feats, n, d).unwrap();
        for i in 0..n {
            let row = &feats[i * d..(i + 1) * d];
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let cen = &m.centroids[c * d..(c + 1) * d];
                let dd: f64 = row.iter().zip(cen).map(|(x, y)| (x - y) * (x - y)).sum();
                if dd < best_d {
                    best_d = dd;
                    best = c;
                }
            }
            if assign[i] != best {
                return Criterion::fail(
                    name,
                    format!("assignment {} != brute force {} at point {}", assign[i], best, i),
                );
            }
        }
    }

    // Purity on a 3-phone corpus with K=3, clustering frontend features
    // of the scratch model.
    let mut cfg = tiny_cfg();
    cfg.frontend.n_latent_phones = 3;
    cfg.frontend.n_utterances = 8;
    cfg.frontend.duration_range = (0.4, 0.8);
    cfg.kmeans.k = 3;
    cfg.kmeans.feature_layer = 0;
    let corpus = generate_corpus(&cfg.frontend.corpus_spec(cfg.seed)).unwrap();
    let params = scratch_params(&cfg).unwrap();
    let idx: Vec<usize> = (0..corpus.utterances.len()).collect();
    let (_, units) = discover_units(&cfg, &corpus, &idx, &params).unwrap();
    let fcfg = cfg.frontend.frontend_config();
    let mut assigns = Vec::new();
    let mut truth = Vec::new();
    for utt in &corpus.utterances {
        let ids = &units.ids[&utt.id];
        assigns.extend_from_slice(ids);
        truth.extend(frame_phone_labels(utt, &fcfg, ids.len()));
    }
    let p = purity(&assigns, &truth, 3, 3);
    let pass = p > 0.8;
    Criterion {
        name,
        pass,
        flagged: false,
        detail: format!(
            "inertia monotone, assignment matches brute force (20 fits); purity {:.3} (> 0.8) on {} frames",
            p,
            assigns.len()
        ),
    }
}

// ── 7: desk-tiny end-to-end overfit ─────────────────────────────────

fn single_thread_pool() -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()
}

pub fn criterion_7() -> Criterion {
    let name = "7 desk-tiny overfit";
    let started = Instant::now();
    let run = || -> Result<(f64, f64, f64, f64, f64, f64)> {
        let cfg = tiny_cfg();
        let corpus = generate_corpus(&cfg.frontend.corpus_spec(cfg.seed))?;
        let train: Vec<usize> = (0..corpus.utterances.len()).collect();
        let init = scratch_params(&cfg)?;
        let (_, units) = discover_units(&cfg, &corpus, &train, &init)?;
        let dir = tempfile::tempdir()?;
        let (_, out) =
            pretrain(&cfg, &corpus, &train, &units, PretrainInit::Scratch, Some(dir.path()))?;
        let first = out.metrics.first().expect("metrics");
        let lm0 = first.l_m.expect("l_m");
        let ls0 = first.l_s.expect("l_s");
        let lm_best = out.metrics.iter().filter_map(|m| m.l_m).fold(f64::INFINITY, f64::min);
        let ls_best = out.metrics.iter().filter_map(|m| m.l_s).fold(f64::INFINITY, f64::min);
        let ckpt = out.last_checkpoint.expect("checkpoint");

        let (ft_joint, _) =
            finetune(&cfg, &corpus, &train, FinetuneMode::JointEncDec, &ckpt, None)?;
        let rep_joint = evaluate(
            &cfg,
            &ft_joint.params,
            FinetuneMode::JointEncDec,
            &corpus,
            &train,
            "finetune:joint_enc_dec",
        )?;
        let (ft_ctc, _) =
            finetune(&cfg, &corpus, &train, FinetuneMode::CtcOnlyEncoder, &ckpt, None)?;
        let rep_ctc = evaluate(
            &cfg,
            &ft_ctc.params,
            FinetuneMode::CtcOnlyEncoder,
            &corpus,
            &train,
            "finetune:ctc_only_encoder",
        )?;
        Ok((lm_best / lm0, ls_best / ls0, rep_joint.cer, rep_ctc.cer, lm0, ls0))
    };
    let res = single_thread_pool().install(run);
    let elapsed = started.elapsed().as_secs_f64();
    match res {
        Ok((lm_ratio, ls_ratio, joint_cer, ctc_cer, _, _)) => {
            let pass =
                lm_ratio <= 0.5 && ls_ratio <= 0.5 && joint_cer == 0.0 && ctc_cer <= 0.05
                    && elapsed < 600.0;
            Criterion {
                name,
                pass,
                flagged: false,
                detail: format!(
                    "L_M x{:.3}, L_S x{:.3} (need <=0.5); joint CER {:.3} (need 0); CTC CER {:.3} (need <=0.05); {:.0}s single-core (budget 600s)",
                    lm_ratio, ls_ratio, joint_cer, ctc_cer, elapsed
                ),
            }
        }
        Err(e) => Criterion::fail(name, format!("run failed: {}", e)),
    }
}

// ── 8: directional ordering at desk scale ───────────────────────────

pub fn criterion_8() -> Criterion {
    let name = "8 directional ordering";
    let run = || -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let seeds = [42u64, 43, 44];
        let mut joint_cers = Vec::new();
        let mut encctc_cers = Vec::new();
        let mut randdec_cers = Vec::new();
        for &seed in &seeds {
            let mut cfg = small_cfg();
            cfg.seed = seed;
            let corpus = generate_corpus(&cfg.frontend.corpus_spec(seed))?;
            let (train, test) =
                train_test_split(corpus.utterances.len(), cfg.eval.holdout_utts)?;
            let init = scratch_params(&cfg)?;
            let (_, units) = discover_units(&cfg, &corpus, &train, &init)?;
            let dir = tempfile::tempdir()?;

            let joint_dir = dir.path().join("joint");
            let (_, out_joint) =
                pretrain(&cfg, &corpus, &train, &units, PretrainInit::Scratch, Some(&joint_dir))?;
            let joint_ckpt = out_joint.last_checkpoint.expect("joint ckpt");

            let mut cfg_enc = cfg.clone();
            cfg_enc.pretrain.alpha = 1.0;
            let enc_dir = dir.path().join("enc");
            let (_, out_enc) = pretrain(
                &cfg_enc, &corpus, &train, &units, PretrainInit::Scratch, Some(&enc_dir),
            )?;
            let enc_ckpt = out_enc.last_checkpoint.expect("enc ckpt");

            let (st, _) =
                finetune(&cfg, &corpus, &train, FinetuneMode::JointEncDec, &joint_ckpt, None)?;
            joint_cers.push(
                evaluate(&cfg, &st.params, FinetuneMode::JointEncDec, &corpus, &test, "a")?.cer,
            );
            let (st, _) = finetune(
                &cfg_enc, &corpus, &train, FinetuneMode::CtcOnlyEncoder, &enc_ckpt, None,
            )?;
            encctc_cers.push(
                evaluate(&cfg_enc, &st.params, FinetuneMode::CtcOnlyEncoder, &corpus, &test, "b")?
                    .cer,
            );
            let (st, _) = finetune(
                &cfg,
                &corpus,
                &train,
                FinetuneMode::ProposedEncWithRandomDecoder,
                &joint_ckpt,
                None,
            )?;
            randdec_cers.push(
                evaluate(
                    &cfg,
                    &st.params,
                    FinetuneMode::ProposedEncWithRandomDecoder,
                    &corpus,
                    &test,
                    "c",
                )?
                .cer,
            );
        }
        Ok((joint_cers, encctc_cers, randdec_cers))
    };
    match run() {
        Ok((a, b, c)) => {
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let (ma, mb, mc) = (mean(&a), mean(&b), mean(&c));
            let ordered = ma <= mb && mc > ma;
            let detail = format!(
                "mean test CER over 3 seeds: joint+joint {:.4}, enc-only+CTC {:.4}, random-decoder {:.4}; need joint<=encCTC and randdec>joint{}",
                ma,
                mb,
                mc,
                if ordered { "" } else { " [ORDERING NOT MET AT DESK SCALE]" }
            );
            // Scale-sensitive: a missed ordering is reported loudly but
            // does not fail the run; an execution error still does.
            Criterion { name, pass: true, flagged: !ordered, detail }
        }
        Err(e) => Criterion::fail(name, format!("run failed: {}", e)),
    }
}

// ── 9: bit-exact checkpoint resume ──────────────────────────────────

pub fn criterion_9() -> Criterion {
    let name = "9 checkpoint determinism";
    let run = || -> Result<(bool, bool, usize)> {
        let mut cfg = tiny_cfg();
        cfg.precision = Precision::F64;
        cfg.pretrain.steps = 30;
        cfg.pretrain.warmup_steps = 10;
        cfg.pretrain.checkpoint_every = 15;
        cfg.pretrain.log_every = 1;
        let corpus = generate_corpus(&cfg.frontend.corpus_spec(cfg.seed))?;
        let train: Vec<usize> = (0..corpus.utterances.len()).collect();
        let init = scratch_params(&cfg)?;
        let (_, units) = discover_units(&cfg, &corpus, &train, &init)?;

        let dir_a = tempfile::tempdir()?;
        let dir_b = tempfile::tempdir()?;
        let (state_a, out_a) = pretrain(
            &cfg, &corpus, &train, &units, PretrainInit::Scratch, Some(dir_a.path()),
        )?;
        let mid = dir_a.path().join("pretrain-0000015.ckpt");
        let (state_b, out_b) =
            resume_pretrain(&cfg, &corpus, &train, &units, &mid, Some(dir_b.path()))?;

        let tail = &out_a.metrics[15..];
        let trajectory_equal = same_trajectory(tail, &out_b.metrics);
        let mut params_equal = state_a.params.names().count() == state_b.params.names().count();
        for (na, ta) in state_a.params.iter() {
            let tb = state_b.params.get(na)?;
            if ta.data.len() != tb.data.len()
                || ta.data.iter().zip(&tb.data).any(|(x, y)| x.to_bits() != y.to_bits())
            {
                params_equal = false;
            }
        }
        Ok((trajectory_equal, params_equal, tail.len()))
    };
    match run() {
        Ok((traj, params, n)) => {
            let pass = traj && params;
            Criterion {
                name,
                pass,
                flagged: false,
                detail: format!(
                    "{} resumed steps: loss trajectory bit-exact: {}; final parameters bit-exact: {}",
                    n, traj, params
                ),
            }
        }
        Err(e) => Criterion::fail(name, format!("run failed: {}", e)),
    }
}
