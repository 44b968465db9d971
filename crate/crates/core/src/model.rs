//! Pre-norm transformer encoder and decoder over the autodiff graph,
//! with sinusoidal positions, multi-head attention built from the
//! primitive set, and the classification heads.
//!
//! Parameter initialization draws one RNG stream per tensor name, so
//! init values never depend on registration order and a decoder
//! re-initialized next to a loaded encoder gets the same values it
//! would from scratch.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CoreError, Result};
use crate::graph::{Graph, Tensor, TensorId};
use crate::params::ParamStore;
use crate::rng::{name_index, stream_rng, Domain};

pub const LN_EPS: f64 = 1e-5;
const NEG_INF_MASK: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            dropout: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DecoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 128,
            dropout: 0.0,
        }
    }
}

fn check_dims(what: &str, n_heads: usize, d_model: usize, d_ff: usize, dropout: f64) -> Result<()> {
    if n_heads == 0 || d_model == 0 || d_ff == 0 {
        return Err(CoreError::Config(format!("{}: zero-sized dimension", what)));
    }
    if d_model % n_heads != 0 {
        return Err(CoreError::Config(format!(
            "{}: d_model {} not divisible by {} heads",
            what, d_model, n_heads
        )));
    }
    if !(0.0..1.0).contains(&dropout) {
        return Err(CoreError::Config(format!("{}: dropout {} outside [0,1)", what, dropout)));
    }
    Ok(())
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        check_dims("encoder", self.n_heads, self.d_model, self.d_ff, self.dropout)
    }
}

impl DecoderConfig {
    pub fn validate(&self, encoder_d_model: usize) -> Result<()> {
        check_dims("decoder", self.n_heads, self.d_model, self.d_ff, self.dropout)?;
        if self.d_model != encoder_d_model {
            return Err(CoreError::Config(format!(
                "decoder d_model {} must match encoder d_model {}",
                self.d_model, encoder_d_model
            )));
        }
        Ok(())
    }
}

// ── Initialization ──────────────────────────────────────────────────

/// Init rule by the last name component: weights scaled-normal by
/// fan-in, biases zero, layer-norm gains one, embeddings normal(0.02).
pub fn init_tensor(name: &str, shape: &[usize], master_seed: u64) -> Tensor {
    let numel: usize = shape.iter().product();
    let comp = name.rsplit('.').next().unwrap_or(name);
    let data: Vec<f64> = if comp.starts_with('b') {
        vec![0.0; numel]
    } else if comp.starts_with('g') {
        vec![1.0; numel]
    } else {
        let std = if comp.contains("embed") {
            0.02
        } else {
            1.0 / (shape[0] as f64).sqrt()
        };
        let mut rng = stream_rng(master_seed, Domain::Init, name_index(name));
        let normal = Normal::new(0.0, std).unwrap();
        (0..numel).map(|_| normal.sample(&mut rng)).collect()
    };
    Tensor::new(data, shape.to_vec()).unwrap()
}

fn block_shapes(prefix: &str, d: usize, ff: usize, attn: &[&str], n_ln: usize) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for att in attn {
        for side in ["q", "k", "v", "o"] {
            out.push((format!("{}.{}.w{}", prefix, att, side), vec![d, d]));
            out.push((format!("{}.{}.b{}", prefix, att, side), vec![d]));
        }
    }
    for l in 1..=n_ln {
        out.push((format!("{}.ln{}.g", prefix, l), vec![d]));
        out.push((format!("{}.ln{}.b", prefix, l), vec![d]));
    }
    out.push((format!("{}.ffn.w1", prefix), vec![d, ff]));
    out.push((format!("{}.ffn.b1", prefix), vec![ff]));
    out.push((format!("{}.ffn.w2", prefix), vec![ff, d]));
    out.push((format!("{}.ffn.b2", prefix), vec![d]));
    out
}

pub fn encoder_param_shapes(cfg: &EncoderConfig, d_in: usize, n_units: usize) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let mut out = vec![
        ("enc.mask_embed".to_string(), vec![d_in]),
        ("enc.in_proj.w".to_string(), vec![d_in, d]),
        ("enc.in_proj.b".to_string(), vec![d]),
    ];
    for l in 0..cfg.n_layers {
        out.extend(block_shapes(&format!("enc.layer{}", l), d, cfg.d_ff, &["att"], 2));
    }
    out.push(("enc.final_ln.g".to_string(), vec![d]));
    out.push(("enc.final_ln.b".to_string(), vec![d]));
    out.push(("enc.unit_head.w".to_string(), vec![d, n_units]));
    out.push(("enc.unit_head.b".to_string(), vec![n_units]));
    out
}

/// Decoder body plus its unit-vocabulary embedding and head
/// (vocab = n_units + 2 for the SOS and EOS sentinels).
pub fn decoder_param_shapes(cfg: &DecoderConfig, n_units: usize) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let vocab = n_units + 2;
    let mut out = vec![("dec.embed".to_string(), vec![vocab, d])];
    for l in 0..cfg.n_layers {
        out.extend(block_shapes(
            &format!("dec.layer{}", l),
            d,
            cfg.d_ff,
            &["self_att", "cross_att"],
            3,
        ));
    }
    out.push(("dec.final_ln.g".to_string(), vec![d]));
    out.push(("dec.final_ln.b".to_string(), vec![d]));
    out.push(("dec.head.w".to_string(), vec![d, vocab]));
    out.push(("dec.head.b".to_string(), vec![vocab]));
    out
}

/// Finetune-only tensors: CTC head over blank + characters, and the
/// character-vocabulary decoder embedding and head.
/// Character heads added for finetuning: always the CTC head; the
/// attention embedding and output head (vocab + SOS/EOS) only when a
/// decoder branch trains alongside it.
pub fn finetune_param_shapes(
    d_model: usize,
    n_chars: usize,
    with_attention: bool,
) -> Vec<(String, Vec<usize>)> {
    let att_vocab = n_chars + 2;
    let mut shapes = vec![
        ("ft.ctc_head.w".to_string(), vec![d_model, n_chars + 1]),
        ("ft.ctc_head.b".to_string(), vec![n_chars + 1]),
    ];
    if with_attention {
        shapes.push(("ft_dec.embed".to_string(), vec![att_vocab, d_model]));
        shapes.push(("ft_dec.head.w".to_string(), vec![d_model, att_vocab]));
        shapes.push(("ft_dec.head.b".to_string(), vec![att_vocab]));
    }
    shapes
}

pub fn register_shapes(ps: &mut ParamStore, shapes: &[(String, Vec<usize>)], seed: u64) -> Result<()> {
    for (name, shape) in shapes {
        ps.insert(name, init_tensor(name, shape, seed))?;
    }
    Ok(())
}

/// Re-draw every tensor under `prefix` from the given seed, keeping
/// shapes. Realizes the randomly-initialized-decoder regimes.
pub fn reinit_prefix(ps: &mut ParamStore, prefix: &str, seed: u64) -> Result<usize> {
    let names: Vec<String> = ps
        .names()
        .filter(|n| n.starts_with(prefix))
        .map(|s| s.to_string())
        .collect();
    for name in &names {
        let shape = ps.get(name)?.shape.clone();
        *ps.get_mut(name)? = init_tensor(name, &shape, seed);
        ps.get_mut(name)?.requires_grad = true;
    }
    Ok(names.len())
}

// ── Dropout ─────────────────────────────────────────────────────────

/// Inverted dropout on residual branches. `off` (or rate 0) is an
/// exact no-op so evaluation and oracle graphs stay untouched.
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn off() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, rng: ChaCha8Rng) -> Self {
        if rate == 0.0 {
            Self::off()
        } else {
            Dropout { rate, rng: Some(rng) }
        }
    }

    fn apply(&mut self, g: &mut Graph, x: TensorId) -> Result<TensorId> {
        let Some(rng) = &mut self.rng else { return Ok(x) };
        use rand::Rng;
        let numel: usize = g.shape(x).iter().product();
        let keep = 1.0 / (1.0 - self.rate);
        let mask: Vec<f64> = (0..numel)
            .map(|_| if rng.gen::<f64>() < self.rate { 0.0 } else { keep })
            .collect();
        let m = g.constant(mask, g.shape(x).to_vec())?;
        g.mul(x, m)
    }
}

// ── Forward pieces ──────────────────────────────────────────────────

/// Fixed sinusoidal position table.
pub fn sinusoidal_positions(t: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; t * d];
    for pos in 0..t {
        for j in 0..d / 2 {
            let omega = 1.0 / 10000f64.powf(2.0 * j as f64 / d as f64);
            pe[pos * d + 2 * j] = (pos as f64 * omega).sin();
            if 2 * j + 1 < d {
                pe[pos * d + 2 * j + 1] = (pos as f64 * omega).cos();
            }
        }
    }
    pe
}

/// Affine head: x . {prefix}.w + {prefix}.b.
pub fn linear<F>(g: &mut Graph, get: &F, prefix: &str, x: TensorId) -> Result<TensorId>
where
    F: Fn(&str) -> Result<TensorId>,
{
    let w = get(&format!("{}.w", prefix))?;
    let b = get(&format!("{}.b", prefix))?;
    let y = g.matmul(x, w)?;
    g.broadcast_add_row(y, b)
}

fn layer_norm_named<F>(g: &mut Graph, get: &F, prefix: &str, x: TensorId) -> Result<TensorId>
where
    F: Fn(&str) -> Result<TensorId>,
{
    let gain = get(&format!("{}.g", prefix))?;
    let bias = get(&format!("{}.b", prefix))?;
    g.layer_norm(x, gain, bias, LN_EPS)
}

/// Multi-head attention from primitives. Heads are column slices of the
/// projected Q/K/V; scores scale by 1/sqrt(head dim); an optional
/// additive causal mask blocks j > i. Returns (output, per-head
/// probability matrices).
fn mha<F>(
    g: &mut Graph,
    get: &F,
    prefix: &str,
    n_heads: usize,
    q_in: TensorId,
    kv_in: TensorId,
    causal: bool,
) -> Result<(TensorId, Vec<TensorId>)>
where
    F: Fn(&str) -> Result<TensorId>,
{
    let d = *g.shape(q_in).last().unwrap();
    let dh = d / n_heads;
    let tq = g.shape(q_in)[0];
    let tk = g.shape(kv_in)[0];

    let q = linear_qkv(g, get, prefix, "q", q_in)?;
    let k = linear_qkv(g, get, prefix, "k", kv_in)?;
    let v = linear_qkv(g, get, prefix, "v", kv_in)?;

    let mask = if causal {
        debug_assert_eq!(tq, tk, "causal mask is square");
        let mut m = vec![0.0; tq * tk];
        for i in 0..tq {
            for j in i + 1..tk {
                m[i * tk + j] = NEG_INF_MASK;
            }
        }
        Some(g.constant(m, vec![tq, tk])?)
    } else {
        None
    };

    let mut heads = Vec::with_capacity(n_heads);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let raw = g.matmul(qh, kt)?;
        let scaled = g.scale(raw, 1.0 / (dh as f64).sqrt())?;
        let logits = match mask {
            Some(m) => g.add(scaled, m)?,
            None => scaled,
        };
        let att = g.softmax(logits)?;
        probs.push(att);
        heads.push(g.matmul(att, vh)?);
    }
    let ctx = g.concat_cols(&heads)?;
    let wo = get(&format!("{}.wo", prefix))?;
    let bo = get(&format!("{}.bo", prefix))?;
    let proj = g.matmul(ctx, wo)?;
    Ok((g.broadcast_add_row(proj, bo)?, probs))
}

fn linear_qkv<F>(g: &mut Graph, get: &F, prefix: &str, side: &str, x: TensorId) -> Result<TensorId>
where
    F: Fn(&str) -> Result<TensorId>,
{
    let w = get(&format!("{}.w{}", prefix, side))?;
    let b = get(&format!("{}.b{}", prefix, side))?;
    let y = g.matmul(x, w)?;
    g.broadcast_add_row(y, b)
}

fn ffn<F>(g: &mut Graph, get: &F, prefix: &str, x: TensorId) -> Result<TensorId>
where
    F: Fn(&str) -> Result<TensorId>,
{
    let w1 = get(&format!("{}.w1", prefix))?;
    let b1 = get(&format!("{}.b1", prefix))?;
    let w2 = get(&format!("{}.w2", prefix))?;
    let b2 = get(&format!("{}.b2", prefix))?;
    let h = g.matmul(x, w1)?;
    let h = g.broadcast_add_row(h, b1)?;
    let h = g.gelu(h)?;
    let y = g.matmul(h, w2)?;
    g.broadcast_add_row(y, b2)
}

pub struct EncoderOut {
    /// Final-normed states, T x d_model.
    pub states: TensorId,
    /// intermediates[0] is the raw feature input; intermediates[l] for
    /// l >= 1 is the residual stream after encoder layer l.
    pub intermediates: Vec<TensorId>,
    /// Attention probability matrices, n_layers x n_heads.
    pub attn: Vec<Vec<TensorId>>,
}

/// Pre-norm encoder stack over already-masked features (T x d_in).
pub fn encoder_forward<F>(
    g: &mut Graph,
    get: &F,
    cfg: &EncoderConfig,
    features: TensorId,
    drop: &mut Dropout,
) -> Result<EncoderOut>
where
    F: Fn(&str) -> Result<TensorId>,
{
    let t = g.shape(features)[0];
    let mut intermediates = vec![features];
    let proj = linear(g, get, "enc.in_proj", features)?;
    let pe = g.constant(sinusoidal_positions(t, cfg.d_model), vec![t, cfg.d_model])?;
    let mut x = g.add(proj, pe)?;
    let mut attn = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let p = format!("enc.layer{}", l);
        let normed = layer_norm_named(g, get, &format!("{}.ln1", p), x)?;
        let (att, probs) = mha(g, get, &format!("{}.att", p), cfg.n_heads, normed, normed, false)?;
        attn.push(probs);
        let att = drop.apply(g, att)?;
        x = g.add(x, att)?;
        let normed = layer_norm_named(g, get, &format!("{}.ln2", p), x)?;
        let f = ffn(g, get, &format!("{}.ffn", p), normed)?;
        let f = drop.apply(g, f)?;
        x = g.add(x, f)?;
        intermediates.push(x);
    }
    let states = layer_norm_named(g, get, "enc.final_ln", x)?;
    Ok(EncoderOut {
        states,
        intermediates,
        attn,
    })
}

pub struct DecoderOut {
    /// L x vocab logits.
    pub logits: TensorId,
    pub self_attn: Vec<Vec<TensorId>>,
    pub cross_attn: Vec<Vec<TensorId>>,
}

/// Causal decoder over a token prefix with source attention into the
/// encoder states. `embed_name` and `head_name` select the vocabulary
/// (cluster units in pretraining, characters in finetuning) while the
/// body weights live under `body`.
pub fn decoder_forward<F>(
    g: &mut Graph,
    get: &F,
    cfg: &DecoderConfig,
    body: &str,
    embed_name: &str,
    head_name: &str,
    tokens: &[usize],
    enc_states: TensorId,
    drop: &mut Dropout,
) -> Result<DecoderOut>
where
    F: Fn(&str) -> Result<TensorId>,
{
    if tokens.is_empty() {
        return Err(CoreError::Shape {
            op: "decoder_forward",
            detail: "empty token prefix".into(),
        });
    }
    let table = get(embed_name)?;
    let emb = g.embedding(table, tokens)?;
    let l = tokens.len();
    let pe = g.constant(sinusoidal_positions(l, cfg.d_model), vec![l, cfg.d_model])?;
    let mut x = g.add(emb, pe)?;
    let mut self_attn = Vec::new();
    let mut cross_attn = Vec::new();
    for li in 0..cfg.n_layers {
        let p = format!("{}.layer{}", body, li);
        let normed = layer_norm_named(g, get, &format!("{}.ln1", p), x)?;
        let (sa, sp) = mha(g, get, &format!("{}.self_att", p), cfg.n_heads, normed, normed, true)?;
        self_attn.push(sp);
        let sa = drop.apply(g, sa)?;
        x = g.add(x, sa)?;
        let normed = layer_norm_named(g, get, &format!("{}.ln2", p), x)?;
        let (ca, cp) = mha(
            g,
            get,
            &format!("{}.cross_att", p),
            cfg.n_heads,
            normed,
            enc_states,
            false,
        )?;
        cross_attn.push(cp);
        let ca = drop.apply(g, ca)?;
        x = g.add(x, ca)?;
        let normed = layer_norm_named(g, get, &format!("{}.ln3", p), x)?;
        let f = ffn(g, get, &format!("{}.ffn", p), normed)?;
        let f = drop.apply(g, f)?;
        x = g.add(x, f)?;
    }
    let states = layer_norm_named(g, get, &format!("{}.final_ln", body), x)?;
    let logits = linear(g, get, head_name, states)?;
    Ok(DecoderOut {
        logits,
        self_attn,
        cross_attn,
    })
}

/// Lookup closure over a binding map, shared by every forward helper.
pub fn getter(
    binding: &std::collections::BTreeMap<String, TensorId>,
) -> impl Fn(&str) -> Result<TensorId> + '_ {
    move |name: &str| {
        binding
            .get(name)
            .copied()
            .ok_or_else(|| CoreError::Missing(format!("parameter {}", name)))
    }
}
