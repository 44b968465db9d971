//! Training regimes over the graph: joint self-supervised pretraining
//! (masked unit prediction plus the collapsed-unit sequence objective),
//! continued pretraining with a freshly drawn decoder, four finetuning
//! variants, and evaluation, with batch assembly under a frame budget,
//! periodic checkpoints, and JSON-lines metrics.
//!
//! Every stochastic choice is a pure function of (master seed, domain,
//! step or epoch), so a resumed run replays the exact trajectory of an
//! uninterrupted one. Batch elements run forward and backward on
//! independent graphs, possibly in parallel; gradients are then
//! harvested serially in batch order so accumulation order is fixed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{check_config, config_mismatch, load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::config::ExperimentConfig;
use crate::corpus::{char_classes, transcript_to_labels, Corpus, Utterance};
use crate::ctc::check_admissible;
use crate::decode::{attention_beam, ctc_greedy_decode, edit_distance, Hypothesis};
use crate::error::{CoreError, Result};
use crate::frontend::{self, FrontendConfig};
use crate::graph::{Graph, Precision, Tensor, TensorId};
use crate::kmeans::{kmeans_assign, kmeans_fit, KMeansModel};
use crate::losses::{
    ctc_loss, joint_finetune_loss, joint_ssl_loss, masked_prediction_loss, sequence_loss,
    JointFinetuneWeights, JointSslWeights,
};
use crate::model::{
    decoder_param_shapes, encoder_forward, encoder_param_shapes, finetune_param_shapes, getter,
    linear, register_shapes, DecoderConfig, Dropout, EncoderConfig,
};
use crate::optim::{AdamHyper, AdamState, WarmupSchedule};
use crate::params::ParamStore;
use crate::rng::{stream_rng, Domain};
use crate::targets::{decoder_targets, sample_mask_nonempty, MaskSpec};

pub const CTC_BLANK: usize = 0;

// ── Metrics ─────────────────────────────────────────────────────────

/// One logged training step. Pretraining fills `l_m`/`l_s`
/// (`l_s` absent when the decoder objective is off), finetuning fills
/// `ctc`/`attention` (`attention` absent in the CTC-only mode).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ctc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<f64>,
    pub wall_ms: u64,
}

/// Equality of the numeric trajectory, ignoring wall time.
pub fn same_trajectory(a: &[MetricsRecord], b: &[MetricsRecord]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.step == y.step
                && x.lr == y.lr
                && x.loss == y.loss
                && x.l_m == y.l_m
                && x.l_s == y.l_s
                && x.ctc == y.ctc
                && x.attention == y.attention
        })
}

/// Serializes records as JSON lines.
pub fn metrics_to_jsonl(records: &[MetricsRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| CoreError::Config(format!("metrics encode: {}", e)))?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

/// Appends records to a JSONL file in one write call.
pub fn append_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    use std::io::Write as _;
    let text = metrics_to_jsonl(records)?;
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// Reads a JSONL metrics file back.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(line)
                .map_err(|e| CoreError::Config(format!("metrics decode: {}", e)))?,
        );
    }
    Ok(out)
}

// ── Batch assembly ──────────────────────────────────────────────────

/// Groups utterances under the frame budget: sort by length
/// descending (ties by index), then fill batches greedily, starting a
/// new one when the next utterance would overflow. Returns batches of
/// indices into `frames`.
pub fn assemble_batches(frames: &[usize], budget: usize) -> Result<Vec<Vec<usize>>> {
    if frames.is_empty() {
        return Err(CoreError::Config("no utterances to batch".into()));
    }
    for (i, &f) in frames.iter().enumerate() {
        if f > budget {
            return Err(CoreError::Config(format!(
                "utterance {} needs {} frames, over the batch budget {}",
                i, f, budget
            )));
        }
    }
    let mut order: Vec<usize> = (0..frames.len()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(frames[i]), i));
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut used = 0;
    for i in order {
        if used + frames[i] > budget && !cur.is_empty() {
            batches.push(std::mem::take(&mut cur));
            used = 0;
        }
        used += frames[i];
        cur.push(i);
    }
    batches.push(cur);
    Ok(batches)
}

/// Fixed per-epoch visiting order of the batches.
pub fn epoch_batch_order(n_batches: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_batches).collect();
    let mut rng = stream_rng(seed, Domain::Batch, epoch);
    order.shuffle(&mut rng);
    order
}

// ── Unit assignments ────────────────────────────────────────────────

/// Frozen per-frame cluster IDs keyed by utterance id: the pretraining
/// targets, fixed before the run starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitAssignments {
    pub k: usize,
    /// Model layer the clustered features came from (0 = frontend).
    pub feature_layer: usize,
    pub ids: BTreeMap<String, Vec<usize>>,
}

pub fn save_assignments(ua: &UnitAssignments, path: &Path) -> Result<()> {
    let text = serde_json::to_string(ua)
        .map_err(|e| CoreError::Config(format!("assignments encode: {}", e)))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_assignments(path: &Path) -> Result<UnitAssignments> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CoreError::Config(format!("assignments decode: {}", e)))
}

/// Features of one utterance at a model layer: 0 is the frontend
/// output, 1..=n_layers the residual stream after that encoder layer.
/// Returns (row-major values, frames, feature dim).
pub fn layer_features(
    params: &ParamStore,
    fcfg: &FrontendConfig,
    ecfg: &EncoderConfig,
    samples: &[f64],
    layer: usize,
    precision: Precision,
) -> Result<(Vec<f64>, usize, usize)> {
    if layer > ecfg.n_layers {
        return Err(CoreError::Config(format!(
            "feature layer {} outside 0..={}",
            layer, ecfg.n_layers
        )));
    }
    if layer == 0 {
        let (vals, t) = frontend::extract_features(params, fcfg, samples, precision)?;
        return Ok((vals, t, fcfg.channels));
    }
    let mut g = Graph::new(precision);
    let binding =
        params.bind_where(&mut g, |n| n.starts_with("frontend.") || n.starts_with("enc."));
    let get = getter(&binding);
    let feats = frontend::forward(&mut g, fcfg, samples, &get)?;
    let out = encoder_forward(&mut g, &get, ecfg, feats, &mut Dropout::off())?;
    let id = out.intermediates[layer];
    let t = g.shape(id)[0];
    Ok((g.value(id).to_vec(), t, ecfg.d_model))
}

/// Fresh randomly initialized feature-extraction model: the frontend
/// and encoder exactly as scratch pretraining would draw them from the
/// same seed, so discovered units line up with the model that will
/// train on them.
pub fn scratch_params(cfg: &ExperimentConfig) -> Result<ParamStore> {
    let fcfg = cfg.frontend.frontend_config();
    let mut params = ParamStore::new();
    register_shapes(&mut params, &fcfg.param_shapes(), cfg.seed)?;
    register_shapes(
        &mut params,
        &encoder_param_shapes(&cfg.encoder, fcfg.channels, cfg.kmeans.k),
        cfg.seed,
    )?;
    Ok(params)
}

/// Unit discovery over a set of utterances: pools their features at
/// the configured layer, fits K centroids, and freezes the per-frame
/// assignments that pretraining will predict.
pub fn discover_units(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    indices: &[usize],
    params: &ParamStore,
) -> Result<(KMeansModel, UnitAssignments)> {
    if indices.is_empty() {
        return Err(CoreError::Config("no utterances for unit discovery".into()));
    }
    let fcfg = cfg.frontend.frontend_config();
    let layer = cfg.kmeans.feature_layer;
    let per_utt: Result<Vec<(String, Vec<f64>, usize, usize)>> = indices
        .par_iter()
        .map(|&i| {
            let utt = &corpus.utterances[i];
            let (vals, t, d) =
                layer_features(params, &fcfg, &cfg.encoder, &utt.samples, layer, cfg.precision)?;
            Ok((utt.id.clone(), vals, t, d))
        })
        .collect();
    let per_utt = per_utt?;
    let d = per_utt[0].3;
    let n: usize = per_utt.iter().map(|u| u.2).sum();
    let mut pooled = Vec::with_capacity(n * d);
    for (_, vals, _, _) in &per_utt {
        pooled.extend_from_slice(vals);
    }
    let model = kmeans_fit(&pooled, n, d, cfg.kmeans.k, cfg.kmeans.max_iters, cfg.seed)?;
    let mut ids = BTreeMap::new();
    for (id, vals, t, _) in &per_utt {
        ids.insert(id.clone(), kmeans_assign(&model, vals, *t, d)?);
    }
    let ua = UnitAssignments { k: model.k, feature_layer: layer, ids };
    Ok((model, ua))
}

/// Assigns every frame of the listed utterances to its nearest
/// cluster, producing the frozen pretraining targets.
pub fn assign_units(
    params: &ParamStore,
    fcfg: &FrontendConfig,
    ecfg: &EncoderConfig,
    corpus: &Corpus,
    indices: &[usize],
    layer: usize,
    model: &KMeansModel,
    precision: Precision,
) -> Result<UnitAssignments> {
    let per_utt: Result<Vec<(String, Vec<usize>)>> = indices
        .par_iter()
        .map(|&i| {
            let utt = &corpus.utterances[i];
            let (vals, t, d) = layer_features(params, fcfg, ecfg, &utt.samples, layer, precision)?;
            let ids = kmeans_assign(model, &vals, t, d)?;
            Ok((utt.id.clone(), ids))
        })
        .collect();
    let ids: BTreeMap<String, Vec<usize>> = per_utt?.into_iter().collect();
    Ok(UnitAssignments { k: model.k, feature_layer: layer, ids })
}

// ── Checkpoint keeper ───────────────────────────────────────────────

/// Rolling checkpoint directory: the last three step files survive,
/// plus a `<prefix>best.ckpt` copy of the lowest-loss save.
struct Keeper {
    dir: PathBuf,
    prefix: &'static str,
    entries: Vec<(u64, PathBuf)>,
    best_loss: f64,
    best_path: Option<PathBuf>,
    last_path: Option<PathBuf>,
}

impl Keeper {
    fn new(dir: &Path, prefix: &'static str) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Keeper {
            dir: dir.to_path_buf(),
            prefix,
            entries: Vec::new(),
            best_loss: f64::INFINITY,
            best_path: None,
            last_path: None,
        })
    }

    fn save(
        &mut self,
        meta: &CheckpointMeta,
        params: &ParamStore,
        opt: &BTreeMap<String, AdamState>,
        loss: f64,
    ) -> Result<()> {
        let path = self.dir.join(format!("{}{:07}.ckpt", self.prefix, meta.step));
        save_checkpoint(&path, meta, params, opt)?;
        self.entries.push((meta.step, path.clone()));
        self.last_path = Some(path.clone());
        if loss < self.best_loss {
            self.best_loss = loss;
            let best = self.dir.join(format!("{}best.ckpt", self.prefix));
            std::fs::copy(&path, &best)?;
            self.best_path = Some(best);
        }
        while self.entries.len() > 3 {
            let (_, old) = self.entries.remove(0);
            std::fs::remove_file(old)?;
        }
        Ok(())
    }
}

// ── Shared run state ────────────────────────────────────────────────

/// Parameters and optimizer state after a stage completed.
#[derive(Debug)]
pub struct TrainedState {
    pub params: ParamStore,
    pub opt: BTreeMap<String, AdamState>,
    pub step: u64,
}

#[derive(Debug)]
pub struct StageOutcome {
    pub metrics: Vec<MetricsRecord>,
    pub final_step: u64,
    pub final_loss: f64,
    pub last_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
}

/// Model-shape fingerprint used for checkpoint compatibility checks:
/// the waveform stack, encoder, resolved decoder, and unit count.
fn structural_echo(cfg: &ExperimentConfig) -> serde_json::Value {
    serde_json::json!({
        "frontend": {
            "sample_rate": cfg.frontend.sample_rate,
            "channels": cfg.frontend.channels,
            "kernels": cfg.frontend.kernels,
            "strides": cfg.frontend.strides,
        },
        "encoder": cfg.encoder,
        "decoder": cfg.decoder.decoder_config(cfg.encoder.d_model),
        "units": cfg.kmeans.k,
    })
}

fn parse_echo(meta: &CheckpointMeta) -> Result<ExperimentConfig> {
    serde_json::from_value(meta.config.clone())
        .map_err(|e| CoreError::Checkpoint(format!("config echo unreadable: {}", e)))
}

/// Requires the checkpoint's model shapes to match the current config
/// in the listed top-level regions of the structural fingerprint.
fn check_structure(cfg: &ExperimentConfig, meta: &CheckpointMeta, regions: &[&str]) -> Result<()> {
    let stored = structural_echo(&parse_echo(meta)?);
    let current = structural_echo(cfg);
    let mut diffs = Vec::new();
    for region in regions {
        for d in config_mismatch(&current[region], &stored[region]) {
            diffs.push(if d.is_empty() {
                region.to_string()
            } else {
                format!("{}.{}", region, d)
            });
        }
    }
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(CoreError::ConfigDiff(diffs))
    }
}

fn dropout_stream(seed: u64, step: u64, pos: usize, which: u64, rate: f64) -> Dropout {
    if rate == 0.0 {
        return Dropout::off();
    }
    debug_assert!(pos < (1 << 20), "batch position fits the stream index");
    let index = step * (1 << 21) + (pos as u64) * 2 + which;
    Dropout::new(rate, stream_rng(seed, Domain::Dropout, index))
}

fn divergence(step: u64, keeper: &Option<Keeper>) -> CoreError {
    CoreError::Diverged { step, last: keeper.as_ref().and_then(|k| k.last_path.clone()) }
}

fn is_numeric_failure(e: &CoreError) -> bool {
    matches!(e, CoreError::NonFinite { .. } | CoreError::NanGradient(_))
}

// ── Pretraining ─────────────────────────────────────────────────────

pub enum PretrainInit<'a> {
    Scratch,
    /// Continued pretraining: frontend and encoder weights from the
    /// checkpoint, decoder drawn fresh from the current seed.
    EncoderFromCheckpointDecoderRandom(&'a Path),
}

struct PretrainPlan<'a> {
    cfg: &'a ExperimentConfig,
    fcfg: FrontendConfig,
    ecfg: EncoderConfig,
    dcfg: DecoderConfig,
    weights: JointSslWeights,
    utts: Vec<&'a Utterance>,
    unit_ids: Vec<&'a [usize]>,
    batches: Vec<Vec<usize>>,
}

fn pretrain_plan<'a>(
    cfg: &'a ExperimentConfig,
    corpus: &'a Corpus,
    train_idx: &[usize],
    units: &'a UnitAssignments,
) -> Result<PretrainPlan<'a>> {
    cfg.validate()?;
    if units.k != cfg.kmeans.k {
        return Err(CoreError::Config(format!(
            "assignments built for {} units, config says {}",
            units.k, cfg.kmeans.k
        )));
    }
    let fcfg = cfg.frontend.frontend_config();
    let ecfg = cfg.encoder.clone();
    let dcfg = cfg.decoder.decoder_config(ecfg.d_model);
    let mut utts = Vec::with_capacity(train_idx.len());
    let mut unit_ids = Vec::with_capacity(train_idx.len());
    let mut frames = Vec::with_capacity(train_idx.len());
    for &i in train_idx {
        let utt = &corpus.utterances[i];
        let t = fcfg.frame_count(utt.samples.len())?;
        let ids = units.ids.get(&utt.id).ok_or_else(|| {
            CoreError::Missing(format!("unit assignments for utterance {}", utt.id))
        })?;
        if ids.len() != t {
            return Err(CoreError::Config(format!(
                "utterance {}: {} assigned frames but frontend yields {}",
                utt.id,
                ids.len(),
                t
            )));
        }
        utts.push(utt);
        unit_ids.push(ids.as_slice());
        frames.push(t);
    }
    let batches = assemble_batches(&frames, cfg.pretrain.batch_frames)?;
    Ok(PretrainPlan { cfg, fcfg, ecfg, dcfg, weights: JointSslWeights::new(cfg.pretrain.alpha)?, utts, unit_ids, batches })
}

struct UttBackward {
    graph: Graph,
    binding: BTreeMap<String, TensorId>,
    loss: f64,
    l_m: f64,
    l_s: Option<f64>,
}

fn pretrain_utt_backward(
    plan: &PretrainPlan,
    params: &ParamStore,
    utt: &Utterance,
    ids: &[usize],
    mask: &MaskSpec,
    step: u64,
    pos: usize,
    batch_n: usize,
) -> Result<UttBackward> {
    let cfg = plan.cfg;
    let mut g = Graph::new(cfg.precision);
    let binding = params.bind_all(&mut g);
    let get = getter(&binding);

    let feats = frontend::forward(&mut g, &plan.fcfg, &utt.samples, &get)?;
    let masked = g.mask_rows(feats, &mask.indices(), get("enc.mask_embed")?)?;
    let mut enc_drop = dropout_stream(cfg.seed, step, pos, 0, plan.ecfg.dropout);
    let enc = encoder_forward(&mut g, &get, &plan.ecfg, masked, &mut enc_drop)?;
    let unit_logits = linear(&mut g, &get, "enc.unit_head", enc.states)?;
    let l_m = masked_prediction_loss(&mut g, unit_logits, ids, mask)?;

    let (total, l_s_value) = if plan.weights.alpha < 1.0 {
        let tg = decoder_targets(ids, plan.unit_vocab())?;
        let mut dec_drop = dropout_stream(cfg.seed, step, pos, 1, plan.dcfg.dropout);
        let dec = crate::model::decoder_forward(
            &mut g,
            &get,
            &plan.dcfg,
            "dec",
            "dec.embed",
            "dec.head",
            &tg.input,
            enc.states,
            &mut dec_drop,
        )?;
        let l_s = sequence_loss(&mut g, dec.logits, &tg.target, cfg.pretrain.label_smoothing)?;
        (joint_ssl_loss(&mut g, l_m, l_s, plan.weights)?, Some(g.value(l_s)[0]))
    } else {
        (l_m, None)
    };

    drop(get);
    let loss = g.value(total)[0];
    let scaled = g.scale(total, 1.0 / batch_n as f64)?;
    g.backward(scaled)?;
    Ok(UttBackward { loss, l_m: g.value(l_m)[0], l_s: l_s_value, graph: g, binding })
}

impl PretrainPlan<'_> {
    fn unit_vocab(&self) -> usize {
        self.cfg.kmeans.k
    }
}

fn run_pretrain_steps(
    plan: &PretrainPlan,
    params: &mut ParamStore,
    opt: &mut BTreeMap<String, AdamState>,
    start_step: u64,
    ckpt_dir: Option<&Path>,
) -> Result<StageOutcome> {
    let cfg = plan.cfg;
    let pt = &cfg.pretrain;
    let schedule = WarmupSchedule::new(pt.lr, pt.warmup_steps)?;
    let hp = AdamHyper::default();
    let mut keeper = match ckpt_dir {
        Some(dir) => Some(Keeper::new(dir, "pretrain-")?),
        None => None,
    };
    let spe = plan.batches.len() as u64;
    let mut metrics = Vec::new();
    let mut last_loss = f64::NAN;

    for step in start_step + 1..=pt.steps {
        let t0 = Instant::now();
        let epoch = (step - 1) / spe;
        let order = epoch_batch_order(plan.batches.len(), cfg.seed, epoch);
        let batch = &plan.batches[order[((step - 1) % spe) as usize]];

        let mut mask_rng = stream_rng(cfg.seed, Domain::Mask, step);
        let mut masks = Vec::with_capacity(batch.len());
        for &u in batch {
            masks.push(sample_mask_nonempty(
                plan.unit_ids[u].len(),
                cfg.mask.selection_prob,
                cfg.mask.span_length,
                &mut mask_rng,
            )?);
        }

        let outs: Result<Vec<UttBackward>> = batch
            .par_iter()
            .zip(&masks)
            .enumerate()
            .map(|(pos, (&u, mask))| {
                pretrain_utt_backward(
                    plan,
                    params,
                    plan.utts[u],
                    plan.unit_ids[u],
                    mask,
                    step,
                    pos,
                    batch.len(),
                )
            })
            .collect();
        let outs = outs.map_err(|e| {
            if is_numeric_failure(&e) {
                divergence(step, &keeper)
            } else {
                e
            }
        })?;

        for out in &outs {
            params.harvest_grads(&out.graph, &out.binding);
        }
        let lr = schedule.lr(step)?;
        params.apply_adam(opt, &hp, lr, step, cfg.precision).map_err(|e| {
            if is_numeric_failure(&e) {
                divergence(step, &keeper)
            } else {
                e
            }
        })?;

        let n = outs.len() as f64;
        let loss = outs.iter().map(|o| o.loss).sum::<f64>() / n;
        let l_m = outs.iter().map(|o| o.l_m).sum::<f64>() / n;
        let l_s = if plan.weights.alpha < 1.0 {
            Some(outs.iter().map(|o| o.l_s.unwrap()).sum::<f64>() / n)
        } else {
            None
        };
        if !loss.is_finite() {
            return Err(divergence(step, &keeper));
        }
        last_loss = loss;

        if step % pt.log_every == 0 || step == pt.steps {
            metrics.push(MetricsRecord {
                step,
                lr,
                loss,
                l_m: Some(l_m),
                l_s,
                ctc: None,
                attention: None,
                wall_ms: t0.elapsed().as_millis() as u64,
            });
        }
        if let Some(k) = keeper.as_mut() {
            if step % pt.checkpoint_every == 0 || step == pt.steps {
                let meta = CheckpointMeta {
                    seed: cfg.seed,
                    step,
                    precision: cfg.precision,
                    schedule,
                    stage: Some("pretrain".to_string()),
                    config: serde_json::to_value(cfg)
                        .map_err(|e| CoreError::Config(format!("config echo: {}", e)))?,
                };
                k.save(&meta, params, opt, loss)?;
            }
        }
    }

    Ok(StageOutcome {
        metrics,
        final_step: pt.steps,
        final_loss: last_loss,
        last_checkpoint: keeper.as_ref().and_then(|k| k.last_path.clone()),
        best_checkpoint: keeper.as_ref().and_then(|k| k.best_path.clone()),
    })
}

/// Pretrains from scratch or continues from a checkpoint with a fresh
/// decoder. The decoder is only registered when the sequence objective
/// is on (alpha < 1), so encoder-only baselines produce checkpoints
/// without decoder names.
pub fn pretrain(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    train_idx: &[usize],
    units: &UnitAssignments,
    init: PretrainInit,
    ckpt_dir: Option<&Path>,
) -> Result<(TrainedState, StageOutcome)> {
    let plan = pretrain_plan(cfg, corpus, train_idx, units)?;
    let mut params;
    match init {
        PretrainInit::Scratch => {
            params = scratch_params(cfg)?;
        }
        PretrainInit::EncoderFromCheckpointDecoderRandom(path) => {
            params = ParamStore::new();
            let (meta, loaded, _) = load_checkpoint(path)?;
            check_structure(cfg, &meta, &["frontend", "encoder", "units"])?;
            for (name, t) in loaded.iter() {
                if name.starts_with("frontend.") || name.starts_with("enc.") {
                    params.insert(name, t.clone())?;
                }
            }
            for (name, shape) in
                encoder_param_shapes(&plan.ecfg, plan.fcfg.channels, cfg.kmeans.k)
            {
                if !params.contains(&name) {
                    return Err(CoreError::Missing(format!(
                        "checkpoint tensor {} (shape {:?})",
                        name, shape
                    )));
                }
            }
        }
    }
    if plan.weights.alpha < 1.0 {
        register_shapes(&mut params, &decoder_param_shapes(&plan.dcfg, cfg.kmeans.k), cfg.seed)?;
    }
    let mut opt = BTreeMap::new();
    let outcome = run_pretrain_steps(&plan, &mut params, &mut opt, 0, ckpt_dir)?;
    Ok((TrainedState { params, opt, step: outcome.final_step }, outcome))
}

/// Resumes an interrupted pretraining run from one of its own
/// checkpoints. The full config echo must match exactly; the replayed
/// steps then reproduce the uninterrupted trajectory bit for bit.
pub fn resume_pretrain(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    train_idx: &[usize],
    units: &UnitAssignments,
    ckpt: &Path,
    ckpt_dir: Option<&Path>,
) -> Result<(TrainedState, StageOutcome)> {
    let plan = pretrain_plan(cfg, corpus, train_idx, units)?;
    let (meta, mut params, mut opt) = load_checkpoint(ckpt)?;
    if meta.stage.as_deref() != Some("pretrain") {
        return Err(CoreError::Checkpoint(format!(
            "resume needs a pretraining checkpoint, found stage {:?}",
            meta.stage
        )));
    }
    let current = serde_json::to_value(cfg)
        .map_err(|e| CoreError::Config(format!("config echo: {}", e)))?;
    check_config(&current, &meta.config)?;
    let outcome = run_pretrain_steps(&plan, &mut params, &mut opt, meta.step, ckpt_dir)?;
    Ok((TrainedState { params, opt, step: outcome.final_step }, outcome))
}

// ── Finetuning ──────────────────────────────────────────────────────

/// The four supervised regimes. The two random-decoder modes run the
/// same computation (fresh decoder body, joint objective) and exist as
/// distinct tags for the two pretraining lineages they are applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    CtcOnlyEncoder,
    JointEncDec,
    EncPlusRandomDecoder,
    ProposedEncWithRandomDecoder,
}

impl FinetuneMode {
    pub const ALL: [FinetuneMode; 4] = [
        FinetuneMode::CtcOnlyEncoder,
        FinetuneMode::JointEncDec,
        FinetuneMode::EncPlusRandomDecoder,
        FinetuneMode::ProposedEncWithRandomDecoder,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            FinetuneMode::CtcOnlyEncoder => "ctc_only_encoder",
            FinetuneMode::JointEncDec => "joint_enc_dec",
            FinetuneMode::EncPlusRandomDecoder => "enc_plus_random_decoder",
            FinetuneMode::ProposedEncWithRandomDecoder => "proposed_enc_with_random_decoder",
        }
    }

    pub fn parse(s: &str) -> Option<FinetuneMode> {
        Self::ALL.into_iter().find(|m| m.tag() == s)
    }

    pub fn uses_decoder(self) -> bool {
        !matches!(self, FinetuneMode::CtcOnlyEncoder)
    }

    pub fn random_decoder(self) -> bool {
        matches!(self, FinetuneMode::EncPlusRandomDecoder | FinetuneMode::ProposedEncWithRandomDecoder)
    }
}

/// The frontend never trains downstream, and the pretraining heads
/// (unit head, mask embedding, unit-vocabulary decoder embedding and
/// head) stay out of every finetune graph.
fn finetune_bound(mode: FinetuneMode, name: &str) -> bool {
    if name.starts_with("frontend.") || name.starts_with("enc.unit_head") || name == "enc.mask_embed" {
        return false;
    }
    if name == "dec.embed" || name.starts_with("dec.head") {
        return false;
    }
    if name.starts_with("dec.") || name.starts_with("ft_dec.") {
        return mode.uses_decoder();
    }
    true
}

struct FinetunePlan<'a> {
    cfg: &'a ExperimentConfig,
    ecfg: EncoderConfig,
    dcfg: DecoderConfig,
    mode: FinetuneMode,
    weights: JointFinetuneWeights,
    /// Per train utterance: precomputed frontend features.
    feats: Vec<Tensor>,
    /// CTC labels (1-based characters, blank 0 excluded).
    labels: Vec<Vec<usize>>,
    /// Teacher-forcing input/target with SOS/EOS sentinels.
    targets: Vec<crate::targets::DecoderTargetSeq>,
    batches: Vec<Vec<usize>>,
}

fn finetune_plan<'a>(
    cfg: &'a ExperimentConfig,
    corpus: &'a Corpus,
    train_idx: &[usize],
    mode: FinetuneMode,
    params: &ParamStore,
) -> Result<FinetunePlan<'a>> {
    cfg.validate()?;
    let fcfg = cfg.frontend.frontend_config();
    let ecfg = cfg.encoder.clone();
    let dcfg = cfg.decoder.decoder_config(ecfg.d_model);
    let n_chars = char_classes(cfg.frontend.n_latent_phones);

    let mut feats = Vec::with_capacity(train_idx.len());
    let mut labels = Vec::with_capacity(train_idx.len());
    let mut targets = Vec::with_capacity(train_idx.len());
    let mut frames = Vec::with_capacity(train_idx.len());
    for &i in train_idx {
        let utt = &corpus.utterances[i];
        let (vals, t) = frontend::extract_features(params, &fcfg, &utt.samples, cfg.precision)?;
        let label = transcript_to_labels(&utt.transcript)?;
        check_admissible(&label, CTC_BLANK, n_chars + 1, t)?;
        let chars0: Vec<usize> = label.iter().map(|&c| c - 1).collect();
        targets.push(crate::targets::add_sos_eos(&chars0, n_chars)?);
        feats.push(Tensor::new(vals, vec![t, fcfg.channels])?);
        labels.push(label);
        frames.push(t);
    }
    let batches = assemble_batches(&frames, cfg.finetune.batch_frames)?;
    Ok(FinetunePlan {
        cfg,
        ecfg,
        dcfg,
        mode,
        weights: JointFinetuneWeights::new(cfg.finetune.beta)?,
        feats,
        labels,
        targets,
        batches,
    })
}

struct FtUttOut {
    graph: Graph,
    binding: BTreeMap<String, TensorId>,
    loss: f64,
    ctc: f64,
    attention: Option<f64>,
}

fn finetune_utt_backward(
    plan: &FinetunePlan,
    params: &ParamStore,
    u: usize,
    step: u64,
    pos: usize,
    batch_n: usize,
) -> Result<FtUttOut> {
    let cfg = plan.cfg;
    let mode = plan.mode;
    let mut g = Graph::new(cfg.precision);
    let binding = params.bind_where(&mut g, |n| finetune_bound(mode, n));
    let get = getter(&binding);

    let feats = g.leaf(&plan.feats[u]);
    let mut enc_drop = dropout_stream(cfg.seed, step, pos, 0, plan.ecfg.dropout);
    let enc = encoder_forward(&mut g, &get, &plan.ecfg, feats, &mut enc_drop)?;
    let ctc_logits = linear(&mut g, &get, "ft.ctc_head", enc.states)?;
    let l_ctc = ctc_loss(&mut g, ctc_logits, &plan.labels[u], CTC_BLANK)?;

    let (total, att_value) = if mode.uses_decoder() {
        let tg = &plan.targets[u];
        let mut dec_drop = dropout_stream(cfg.seed, step, pos, 1, plan.dcfg.dropout);
        let dec = crate::model::decoder_forward(
            &mut g,
            &get,
            &plan.dcfg,
            "dec",
            "ft_dec.embed",
            "ft_dec.head",
            &tg.input,
            enc.states,
            &mut dec_drop,
        )?;
        let l_att = sequence_loss(&mut g, dec.logits, &tg.target, cfg.finetune.label_smoothing)?;
        (joint_finetune_loss(&mut g, l_ctc, l_att, plan.weights)?, Some(g.value(l_att)[0]))
    } else {
        (l_ctc, None)
    };

    drop(get);
    let loss = g.value(total)[0];
    let scaled = g.scale(total, 1.0 / batch_n as f64)?;
    g.backward(scaled)?;
    Ok(FtUttOut { loss, ctc: g.value(l_ctc)[0], attention: att_value, graph: g, binding })
}

/// Finetunes a pretrained checkpoint in the given mode. The leaf
/// binding excludes frontend tensors, so their gradients stay
/// structurally zero; features are precomputed once outside the graph.
pub fn finetune(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    train_idx: &[usize],
    mode: FinetuneMode,
    pretrain_ckpt: &Path,
    ckpt_dir: Option<&Path>,
) -> Result<(TrainedState, StageOutcome)> {
    let (meta, mut params, _) = load_checkpoint(pretrain_ckpt)?;
    match meta.stage.as_deref() {
        Some("pretrain") | None => {}
        Some(other) => {
            return Err(CoreError::Checkpoint(format!(
                "finetune needs a pretraining checkpoint, found stage {}",
                other
            )));
        }
    }
    let mut regions = vec!["frontend", "encoder"];
    if mode == FinetuneMode::JointEncDec {
        regions.push("decoder");
    }
    check_structure(cfg, &meta, &regions)?;

    let ecfg = cfg.encoder.clone();
    let dcfg = cfg.decoder.decoder_config(ecfg.d_model);
    if mode.uses_decoder() {
        if mode.random_decoder() {
            let names: Vec<String> =
                params.names().filter(|n| n.starts_with("dec.")).map(String::from).collect();
            for name in names {
                params.remove(&name);
            }
            register_shapes(&mut params, &decoder_param_shapes(&dcfg, cfg.kmeans.k), cfg.seed)?;
        } else if !params.contains("dec.final_ln.g") {
            return Err(CoreError::Missing(
                "decoder weights (dec.*) in the checkpoint; joint_enc_dec needs a jointly \
                 pretrained model or a random-decoder mode"
                    .into(),
            ));
        }
    }
    let n_chars = char_classes(cfg.frontend.n_latent_phones);
    register_shapes(
        &mut params,
        &finetune_param_shapes(ecfg.d_model, n_chars, mode.uses_decoder()),
        cfg.seed,
    )?;

    let plan = finetune_plan(cfg, corpus, train_idx, mode, &params)?;
    let ft = &cfg.finetune;
    let schedule = WarmupSchedule::new(ft.lr, ft.warmup_steps)?;
    let hp = AdamHyper::default();
    let mut keeper = match ckpt_dir {
        Some(dir) => Some(Keeper::new(dir, "finetune-")?),
        None => None,
    };
    let mut opt: BTreeMap<String, AdamState> = BTreeMap::new();
    let spe = plan.batches.len() as u64;
    let mut metrics = Vec::new();
    let mut last_loss = f64::NAN;

    for step in 1..=ft.steps {
        let t0 = Instant::now();
        let epoch = (step - 1) / spe;
        let order = epoch_batch_order(plan.batches.len(), cfg.seed, epoch);
        let batch = &plan.batches[order[((step - 1) % spe) as usize]];

        let outs: Result<Vec<FtUttOut>> = batch
            .par_iter()
            .enumerate()
            .map(|(pos, &u)| finetune_utt_backward(&plan, &params, u, step, pos, batch.len()))
            .collect();
        let outs = outs.map_err(|e| {
            if is_numeric_failure(&e) {
                divergence(step, &keeper)
            } else {
                e
            }
        })?;

        for out in &outs {
            params.harvest_grads(&out.graph, &out.binding);
        }
        debug_assert!(params
            .iter()
            .filter(|(n, _)| n.starts_with("frontend."))
            .all(|(_, t)| t.grad.is_none()));
        let lr = schedule.lr(step)?;
        params.apply_adam(&mut opt, &hp, lr, step, cfg.precision).map_err(|e| {
            if is_numeric_failure(&e) {
                divergence(step, &keeper)
            } else {
                e
            }
        })?;

        let n = outs.len() as f64;
        let loss = outs.iter().map(|o| o.loss).sum::<f64>() / n;
        let ctc = outs.iter().map(|o| o.ctc).sum::<f64>() / n;
        let attention = if mode.uses_decoder() {
            Some(outs.iter().map(|o| o.attention.unwrap()).sum::<f64>() / n)
        } else {
            None
        };
        if !loss.is_finite() {
            return Err(divergence(step, &keeper));
        }
        last_loss = loss;

        if step % ft.log_every == 0 || step == ft.steps {
            metrics.push(MetricsRecord {
                step,
                lr,
                loss,
                l_m: None,
                l_s: None,
                ctc: Some(ctc),
                attention,
                wall_ms: t0.elapsed().as_millis() as u64,
            });
        }
        if let Some(k) = keeper.as_mut() {
            if step % ft.checkpoint_every == 0 || step == ft.steps {
                let meta = CheckpointMeta {
                    seed: cfg.seed,
                    step,
                    precision: cfg.precision,
                    schedule,
                    stage: Some(format!("finetune:{}", mode.tag())),
                    config: serde_json::to_value(cfg)
                        .map_err(|e| CoreError::Config(format!("config echo: {}", e)))?,
                };
                k.save(&meta, &params, &opt, loss)?;
            }
        }
    }

    let outcome = StageOutcome {
        metrics,
        final_step: ft.steps,
        final_loss: last_loss,
        last_checkpoint: keeper.as_ref().and_then(|k| k.last_path.clone()),
        best_checkpoint: keeper.as_ref().and_then(|k| k.best_path.clone()),
    };
    Ok((TrainedState { params, opt, step: ft.steps }, outcome))
}

// ── Evaluation ──────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalUtt {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
    pub distance: usize,
    /// Beam search hit the length cap without emitting EOS.
    pub unterminated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Distinguishes the producing regime, e.g. "finetune:joint_enc_dec".
    pub model: String,
    pub cer: f64,
    pub n_utterances: usize,
    pub utterances: Vec<EvalUtt>,
}

fn encoder_state_values(
    params: &ParamStore,
    cfg: &ExperimentConfig,
    ecfg: &EncoderConfig,
    samples: &[f64],
) -> Result<(Vec<f64>, usize)> {
    let fcfg = cfg.frontend.frontend_config();
    let (vals, t) = frontend::extract_features(params, &fcfg, samples, cfg.precision)?;
    let mut g = Graph::new(cfg.precision);
    let binding = params.bind_where(&mut g, |n| {
        n.starts_with("enc.") && !n.starts_with("enc.unit_head") && n != "enc.mask_embed"
    });
    let get = getter(&binding);
    let feats = g.constant(vals, vec![t, fcfg.channels])?;
    let enc = encoder_forward(&mut g, &get, ecfg, feats, &mut Dropout::off())?;
    Ok((g.value(enc.states).to_vec(), t))
}

fn ctc_hypothesis(
    params: &ParamStore,
    cfg: &ExperimentConfig,
    ecfg: &EncoderConfig,
    n_chars: usize,
    samples: &[f64],
) -> Result<Vec<usize>> {
    let (states, t) = encoder_state_values(params, cfg, ecfg, samples)?;
    let mut g = Graph::new(cfg.precision);
    let binding = params.bind_where(&mut g, |n| n.starts_with("ft.ctc_head"));
    let get = getter(&binding);
    let st = g.constant(states, vec![t, ecfg.d_model])?;
    let logits = linear(&mut g, &get, "ft.ctc_head", st)?;
    let logp = g.log_softmax(logits)?;
    let labels = ctc_greedy_decode(g.value(logp), t, n_chars + 1, CTC_BLANK)?;
    // CTC classes are 1-based characters; shift to the 0-based ids the
    // report compares against.
    Ok(labels.into_iter().map(|c| c - 1).collect())
}

/// Exact CTC log-probability of a 0-based character sequence under a
/// [t, classes] log-probability matrix, or None when the sequence
/// needs more frames than available.
fn ctc_label_logprob(
    ctc_logp: &[f64],
    t: usize,
    n_chars: usize,
    tokens: &[usize],
    precision: Precision,
) -> Result<Option<f64>> {
    let label: Vec<usize> = tokens.iter().map(|&c| c + 1).collect();
    if check_admissible(&label, CTC_BLANK, n_chars + 1, t).is_err() {
        return Ok(None);
    }
    let mut g = Graph::new(precision);
    let logp = g.constant(ctc_logp.to_vec(), vec![t, n_chars + 1])?;
    let nll = g.ctc_nll(logp, &label, CTC_BLANK)?;
    Ok(Some(-g.value(nll)[0]))
}

/// Hybrid CTC/attention decoding for the joint regimes: beam search
/// over the attention decoder, then rescoring of terminated
/// hypotheses as (1-beta) * attention + beta * exact CTC, both per
/// token, with the finetuning weight beta. Mirrors the multitask
/// recipe the models were trained with.
fn attention_hypothesis(
    params: &ParamStore,
    cfg: &ExperimentConfig,
    ecfg: &EncoderConfig,
    dcfg: &DecoderConfig,
    n_chars: usize,
    samples: &[f64],
) -> Result<(Vec<usize>, bool)> {
    let (states, t) = encoder_state_values(params, cfg, ecfg, samples)?;
    let vocab = n_chars + 2;
    let beam = attention_beam(
        |prefix| {
            let mut g = Graph::new(cfg.precision);
            let binding = params
                .bind_where(&mut g, |n| n.starts_with("dec.") || n.starts_with("ft_dec."));
            let get = getter(&binding);
            let st = g.constant(states.clone(), vec![t, ecfg.d_model])?;
            let dec = crate::model::decoder_forward(
                &mut g,
                &get,
                dcfg,
                "dec",
                "ft_dec.embed",
                "ft_dec.head",
                prefix,
                st,
                &mut Dropout::off(),
            )?;
            let last = g.slice_rows(dec.logits, prefix.len() - 1, 1)?;
            let logp = g.log_softmax(last)?;
            Ok(g.value(logp).to_vec())
        },
        vocab,
        n_chars,
        n_chars + 1,
        cfg.eval.beam_size,
        cfg.eval.max_len,
    )?;

    let ctc_logp = {
        let mut g = Graph::new(cfg.precision);
        let binding = params.bind_where(&mut g, |n| n.starts_with("ft.ctc_head"));
        let get = getter(&binding);
        let st = g.constant(states, vec![t, ecfg.d_model])?;
        let logits = linear(&mut g, &get, "ft.ctc_head", st)?;
        let logp = g.log_softmax(logits)?;
        g.value(logp).to_vec()
    };
    let beta = cfg.finetune.beta;
    let mut best: Option<(f64, &Hypothesis)> = None;
    for h in beam.iter().filter(|h| h.terminated) {
        let Some(lp_ctc) =
            ctc_label_logprob(&ctc_logp, t, n_chars, &h.tokens, cfg.precision)?
        else {
            continue;
        };
        let per_tok = (h.tokens.len() + 1) as f64;
        let mixed = (1.0 - beta) * h.score / per_tok + beta * lp_ctc / per_tok;
        let better = match &best {
            None => true,
            Some((s, b)) => {
                mixed > *s
                    || (mixed == *s
                        && (h.tokens.len(), &h.tokens) < (b.tokens.len(), &b.tokens))
            }
        };
        if better {
            best = Some((mixed, h));
        }
    }
    if let Some((_, h)) = best {
        return Ok((h.tokens.clone(), false));
    }
    // Nothing terminated and CTC-admissible: fall back to the plain
    // attention pick over the same pool.
    let fallback = beam
        .iter()
        .filter(|h| h.terminated)
        .max_by(|a, b| {
            crate::decode::normalized(a).partial_cmp(&crate::decode::normalized(b)).unwrap()
        })
        .or_else(|| beam.first())
        .cloned()
        .ok_or_else(|| CoreError::Numerical("empty decode beam".into()))?;
    Ok((fallback.tokens.clone(), !fallback.terminated))
}

/// Decodes and scores a set of utterances with the finetuned model:
/// greedy CTC for the encoder-only regime, hybrid CTC/attention
/// decoding for the joint regimes.
pub fn evaluate(
    cfg: &ExperimentConfig,
    params: &ParamStore,
    mode: FinetuneMode,
    corpus: &Corpus,
    eval_idx: &[usize],
    model_tag: &str,
) -> Result<EvalReport> {
    if eval_idx.is_empty() {
        return Err(CoreError::Config("empty evaluation set".into()));
    }
    let ecfg = cfg.encoder.clone();
    let dcfg = cfg.decoder.decoder_config(ecfg.d_model);
    let n_chars = char_classes(cfg.frontend.n_latent_phones);

    let rows: Result<Vec<EvalUtt>> = eval_idx
        .par_iter()
        .map(|&i| {
            let utt = &corpus.utterances[i];
            let (hyp_ids, unterminated) = if mode.uses_decoder() {
                attention_hypothesis(params, cfg, &ecfg, &dcfg, n_chars, &utt.samples)?
            } else {
                (ctc_hypothesis(params, cfg, &ecfg, n_chars, &utt.samples)?, false)
            };
            let ref_ids: Vec<usize> =
                transcript_to_labels(&utt.transcript)?.iter().map(|&c| c - 1).collect();
            let distance = edit_distance(&ref_ids, &hyp_ids);
            let hypothesis: String = hyp_ids
                .iter()
                .map(|&c| if c < n_chars { (b'a' + c as u8) as char } else { '#' })
                .collect();
            Ok(EvalUtt {
                id: utt.id.clone(),
                reference: utt.transcript.clone(),
                hypothesis,
                distance,
                unterminated,
            })
        })
        .collect();
    let utterances = rows?;

    let total_ref: usize = utterances.iter().map(|u| u.reference.len()).sum();
    if total_ref == 0 {
        return Err(CoreError::Numerical("zero total reference length".into()));
    }
    let total_dist: usize = utterances.iter().map(|u| u.distance).sum();
    Ok(EvalReport {
        model: model_tag.to_string(),
        cer: total_dist as f64 / total_ref as f64,
        n_utterances: utterances.len(),
        utterances,
    })
}

pub fn save_report(report: &EvalReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report)
        .map_err(|e| CoreError::Config(format!("report encode: {}", e)))?;
    std::fs::write(path, text)?;
    Ok(())
}
