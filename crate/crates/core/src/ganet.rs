//! Stage-2 grayscale-aware reconstruction network.
//!
//! A U-shaped network maps an RGB image onto the multi-scale feature
//! pyramid the stage-1 decoder expects. Every decoder stage quantizes its
//! features against the frozen mixture of codebooks, fuses the quantized
//! and raw features, and refines them with a grayscale-attention block:
//! quantized-query attention (GQA) followed by a gated feedforward that
//! applies gamma and logarithmic tone mappings with channel weights
//! learned from the feature statistics. Only the attention-vector
//! parameters of those tone mappings are eligible for test-time updates.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::{quantize, quantize_topk, QuantizationResult, QuantizeOpts, TopKResult};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::io::{apply_blocks_to_store, blocks_from_store, Stage1Checkpoint, Stage2Checkpoint};
use crate::msvqvae::{
    conv_block, cube_constant, insert_conv, multiscale_reconstruct, ScaleSchedule, Stage1Meta,
    StepStats, CHARBONNIER_EPS, WEIGHT_DECAY,
};
use crate::optim::{AdamW, Bound, CycleScheduler, ParamKind, ParamStore};
use crate::tensor::{Graph, Scalar, TensorId};

/// Default number of codebook entries kept by the top-K query/key selection.
pub const DEFAULT_TOPK: usize = 256;

// ---------------------------------------------------------------------------
// Configuration

/// Hyperparameters of a stage-2 training run (and of inference, for the
/// knobs that do not change parameter shapes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    /// Entries kept per quantized-attention query/key matrix.
    pub topk: usize,
    /// Fraction of the doubled feedforward channels routed through the
    /// logarithmic mapping (the rest take the gamma mapping).
    pub ga_ratio: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            topk: DEFAULT_TOPK,
            ga_ratio: 0.5,
            learning_rate: 4e-4,
            epochs: 1,
            batch_size: 4,
            seed: 0,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if self.topk < 1 {
            return Err(Error::Config("topk must be at least 1".into()));
        }
        if !(self.ga_ratio.is_finite() && self.ga_ratio > 0.0 && self.ga_ratio < 1.0) {
            return Err(Error::Config(format!(
                "ga_ratio must lie strictly between 0 and 1, got {}",
                self.ga_ratio
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Grayscale-attention primitives

fn require_3d<T: Scalar>(g: &Graph<T>, x: TensorId, what: &str) -> Result<(usize, usize, usize)> {
    let s = g.shape(x);
    if s.len() != 3 {
        return Err(Error::Dim(format!("{what} expects [C,H,W], got {s:?}")));
    }
    Ok((s[0], s[1], s[2]))
}

/// Channel attention vector `a = softmax(W·avgpool(x) + b)`, shaped `[C]`.
///
/// `x` is expected to already be normalized; the checked tone-mapping ops
/// normalize before calling this.
pub fn ga_attention_vector<T: Scalar>(
    g: &mut Graph<T>,
    x: TensorId,
    w: TensorId,
    b: TensorId,
) -> Result<TensorId> {
    let (c, _, _) = require_3d(g, x, "ga_attention_vector")?;
    let ws = g.shape(w);
    if ws != [c, c] {
        return Err(Error::Dim(format!(
            "attention weight must be [{c},{c}] for {c}-channel input, got {ws:?}"
        )));
    }
    if g.shape(b) != [c] {
        return Err(Error::Dim(format!(
            "attention bias must be [{c}], got {:?}",
            g.shape(b)
        )));
    }
    let z = g.avg_pool_spatial(x)?;
    let z = g.reshape(z, vec![c, 1])?;
    let wz = g.matmul(w, z)?;
    let b2 = g.reshape(b, vec![c, 1])?;
    let pre = g.add(wz, b2)?;
    let a = g.softmax(pre, 0)?;
    g.reshape(a, vec![c])
}

/// Gamma tone mapping on an already-sanitized input: normalize to `[0,1]`,
/// derive the attention vector, and raise each channel to its exponent.
fn ga_gamma_raw<T: Scalar>(
    g: &mut Graph<T>,
    x: TensorId,
    w: TensorId,
    b: TensorId,
) -> Result<TensorId> {
    let xn = g.minmax_normalize(x)?;
    let a = ga_attention_vector(g, xn, w, b)?;
    g.pow_channel(xn, a)
}

/// Logarithmic tone mapping on an already-sanitized input:
/// `(1 + 4a_c) · ln(1 + x_n)` per channel.
fn ga_log_raw<T: Scalar>(
    g: &mut Graph<T>,
    x: TensorId,
    w: TensorId,
    b: TensorId,
) -> Result<TensorId> {
    let xn = g.minmax_normalize(x)?;
    let a = ga_attention_vector(g, xn, w, b)?;
    let scaled = g.scale(a, T::from_f64(4.0));
    let s = g.add_scalar(scaled, T::one());
    let lg = g.log1p(xn)?;
    g.mul_channel(lg, s)
}

fn check_non_negative<T: Scalar>(g: &Graph<T>, x: TensorId, what: &str) -> Result<()> {
    if let Some(v) = g.data(x).iter().find(|v| **v < T::zero()) {
        return Err(Error::Domain(format!(
            "{what} expects non-negative input, found {v}"
        )));
    }
    Ok(())
}

/// Gamma tone mapping `x_n^(a_c)`. The input is min-max normalized to
/// `[0,1]` internally; raw negative values are rejected because callers are
/// expected to clamp physical intensities first.
pub fn ga_gamma<T: Scalar>(
    g: &mut Graph<T>,
    x: TensorId,
    w: TensorId,
    b: TensorId,
) -> Result<TensorId> {
    require_3d(g, x, "ga_gamma")?;
    check_non_negative(g, x, "ga_gamma")?;
    ga_gamma_raw(g, x, w, b)
}

/// Logarithmic tone mapping `(1+4a_c)·ln(1+x_n)`, with the same input
/// contract as [`ga_gamma`]. The range is `[0, 5·ln 2]`.
pub fn ga_log<T: Scalar>(
    g: &mut Graph<T>,
    x: TensorId,
    w: TensorId,
    b: TensorId,
) -> Result<TensorId> {
    require_3d(g, x, "ga_log")?;
    check_non_negative(g, x, "ga_log")?;
    ga_log_raw(g, x, w, b)
}

// ---------------------------------------------------------------------------
// Quantized-query attention

/// Graph leaves of one GQA instance.
#[derive(Debug, Clone, Copy)]
pub struct GqaParts {
    pub q_w: TensorId,
    pub q_b: TensorId,
    pub k_w: TensorId,
    pub k_b: TensorId,
    pub v_w: TensorId,
    pub v_b: TensorId,
    pub ga_w: TensorId,
    pub ga_b: TensorId,
}

impl GqaParts {
    /// Resolve the conventional names under `prefix` (e.g. `ganet.gqa1`).
    pub fn from_bound(bound: &Bound, prefix: &str) -> Result<Self> {
        Ok(GqaParts {
            q_w: bound.id(&format!("{prefix}.q.w"))?,
            q_b: bound.id(&format!("{prefix}.q.b"))?,
            k_w: bound.id(&format!("{prefix}.k.w"))?,
            k_b: bound.id(&format!("{prefix}.k.b"))?,
            v_w: bound.id(&format!("{prefix}.v.w"))?,
            v_b: bound.id(&format!("{prefix}.v.b"))?,
            ga_w: bound.id(&format!("{prefix}.ga.w"))?,
            ga_b: bound.id(&format!("{prefix}.ga.b"))?,
        })
    }
}

/// GQA outputs; the two top-K results carry the quantization calls whose
/// probability rows feed the adaptation entropy.
#[derive(Debug, Clone)]
pub struct GqaOutput {
    pub out: TensorId,
    pub q_top: TopKResult,
    pub k_top: TopKResult,
}

fn conv1x1<T: Scalar>(g: &mut Graph<T>, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
    let y = g.conv2d(x, w, 1, 0)?;
    g.add_channel_bias(y, b)
}

/// Quantized-query attention over the channel dimension.
///
/// Queries and keys are projected by 1×1 convs, replaced by the `k` most
/// frequently hit codebook entries (`[C, k]` each), the queries are passed
/// through the logarithmic tone mapping, and the resulting `C×C` attention
/// mixes the value channels. `k` is clamped to the codebook size.
pub fn gqa<T: Scalar>(
    g: &mut Graph<T>,
    x: TensorId,
    book: TensorId,
    k: usize,
    parts: &GqaParts,
    opts: &QuantizeOpts<T>,
) -> Result<GqaOutput> {
    let (c, h, w) = require_3d(g, x, "gqa")?;
    if k == 0 {
        return Err(Error::Arg("gqa needs k >= 1".into()));
    }
    let bs = g.shape(book).to_vec();
    if bs.len() != 2 || bs[1] != c {
        return Err(Error::Dim(format!(
            "gqa codebook shaped {bs:?} does not match the {c}-channel input"
        )));
    }
    let q = conv1x1(g, x, parts.q_w, parts.q_b)?;
    let key = conv1x1(g, x, parts.k_w, parts.k_b)?;
    let v = conv1x1(g, x, parts.v_w, parts.v_b)?;

    let k_eff = k.min(bs[0]);
    let q_top = quantize_topk(g, book, q, k_eff, opts)?;
    let k_top = quantize_topk(g, book, key, k_eff, opts)?;

    let q_cols = g.reshape(q_top.selected, vec![c, k_eff, 1])?;
    let q_tilde = ga_log_raw(g, q_cols, parts.ga_w, parts.ga_b)?;
    let q_tilde = g.reshape(q_tilde, vec![c, k_eff])?;
    let k_t = g.transpose2d(k_top.selected)?;
    let scores = g.matmul(q_tilde, k_t)?;
    let scaled = g.scale(scores, T::from_f64(1.0 / (c as f64).sqrt()));
    let attn = g.softmax(scaled, 1)?;
    let v_flat = g.reshape(v, vec![c, h * w])?;
    let mixed = g.matmul(attn, v_flat)?;
    let out = g.reshape(mixed, vec![c, h, w])?;
    Ok(GqaOutput { out, q_top, k_top })
}

// ---------------------------------------------------------------------------
// Grayscale-attention feedforward

/// Graph leaves of one feedforward instance.
#[derive(Debug, Clone, Copy)]
pub struct FfnParts {
    pub pre_w: TensorId,
    pub pre_b: TensorId,
    pub double_w: TensorId,
    pub double_b: TensorId,
    pub gamma_w: TensorId,
    pub gamma_b: TensorId,
    pub log_w: TensorId,
    pub log_b: TensorId,
    pub out_w: TensorId,
    pub out_b: TensorId,
}

impl FfnParts {
    pub fn from_bound(bound: &Bound, prefix: &str) -> Result<Self> {
        Ok(FfnParts {
            pre_w: bound.id(&format!("{prefix}.pre.w"))?,
            pre_b: bound.id(&format!("{prefix}.pre.b"))?,
            double_w: bound.id(&format!("{prefix}.double.w"))?,
            double_b: bound.id(&format!("{prefix}.double.b"))?,
            gamma_w: bound.id(&format!("{prefix}.gamma.w"))?,
            gamma_b: bound.id(&format!("{prefix}.gamma.b"))?,
            log_w: bound.id(&format!("{prefix}.log.w"))?,
            log_b: bound.id(&format!("{prefix}.log.b"))?,
            out_w: bound.id(&format!("{prefix}.out.w"))?,
            out_b: bound.id(&format!("{prefix}.out.b"))?,
        })
    }
}

/// Tone-mapped feedforward: `C → C → 2C` convs build a GELU shortcut, the
/// shortcut splits into a gamma branch (`2C − n_log` channels) and a log
/// branch (`n_log` channels), and a final 1×1 conv fuses branch outputs and
/// shortcut (`4C` channels) back down to `C`.
pub fn ga_feedforward<T: Scalar>(
    g: &mut Graph<T>,
    x: TensorId,
    parts: &FfnParts,
    n_log: usize,
) -> Result<TensorId> {
    let (c, _, _) = require_3d(g, x, "ga_feedforward")?;
    let c2 = 2 * c;
    if n_log == 0 || n_log >= c2 {
        return Err(Error::Arg(format!(
            "n_log must split {c2} channels into two non-empty branches, got {n_log}"
        )));
    }
    let pre = conv1x1(g, x, parts.pre_w, parts.pre_b)?;
    let doubled = conv_block_raw(g, pre, parts.double_w, parts.double_b)?;
    let shortcut = g.gelu(doubled);
    let n_gamma = c2 - n_log;
    let x1 = g.slice_channels(shortcut, 0, n_gamma)?;
    let x2 = g.slice_channels(shortcut, n_gamma, n_log)?;
    let xg = ga_gamma_raw(g, x1, parts.gamma_w, parts.gamma_b)?;
    let xl = ga_log_raw(g, x2, parts.log_w, parts.log_b)?;
    let cat = g.concat_channels(&[xg, xl, shortcut])?;
    let fused = conv1x1(g, cat, parts.out_w, parts.out_b)?;
    Ok(g.gelu(fused))
}

fn conv_block_raw<T: Scalar>(
    g: &mut Graph<T>,
    x: TensorId,
    w: TensorId,
    b: TensorId,
) -> Result<TensorId> {
    let k = g.shape(w)[2];
    let y = g.conv2d(x, w, 1, k / 2)?;
    g.add_channel_bias(y, b)
}

// ---------------------------------------------------------------------------
// Model

/// Stage-2 model: frozen codebooks, the (retrainable) stage-1 decoder, and
/// the grayscale-aware encoder/decoder parameters, in one store.
#[derive(Debug, Clone)]
pub struct GanetModel {
    pub config: Stage2Config,
    /// The stage-1 artifact this model was built from; re-embedded verbatim
    /// when the model is checkpointed.
    pub stage1: Stage1Checkpoint,
    pub meta: Stage1Meta,
    pub schedule: ScaleSchedule,
    /// Log-branch width of each stage's feedforward split.
    pub n_log: Vec<usize>,
    pub params: ParamStore<f32>,
    /// Names of the parameters eligible for test-time adaptation.
    pub ga_manifest: Vec<String>,
}

fn insert_ga(
    store: &mut ParamStore<f32>,
    rng: &mut ChaCha8Rng,
    name: &str,
    c: usize,
) -> Result<()> {
    store.insert(
        &format!("{name}.w"),
        ParamKind::Ga,
        vec![c, c],
        crate::msvqvae::conv_weights(rng, c, c, 1),
    )?;
    store.insert(&format!("{name}.b"), ParamKind::Ga, vec![c], vec![0.0; c])
}

impl GanetModel {
    /// Build a fresh stage-2 model on top of a stage-1 checkpoint. The
    /// codebooks enter frozen; the stage-1 decoder parameters are copied in
    /// as trainable convs.
    pub fn new(stage1: &Stage1Checkpoint, config: Stage2Config) -> Result<Self> {
        config.validate()?;
        let meta: Stage1Meta = serde_json::from_str(&stage1.config_json)?;
        let schedule = ScaleSchedule::new(meta.config.scales, meta.channels)?;
        let scales = schedule.scales;
        if stage1.books.scales.len() != scales {
            return Err(Error::Config(format!(
                "stage-1 checkpoint carries {} codebook scales but the config declares {scales}",
                stage1.books.scales.len()
            )));
        }
        let n_log: Vec<usize> = (1..=scales)
            .map(|j| {
                let c2 = 2 * schedule.level_channels(j);
                ((c2 as f64 * config.ga_ratio).round() as usize).clamp(1, c2 - 1)
            })
            .collect();
        Self::assemble(stage1.clone(), config, meta, schedule, n_log)
    }

    fn assemble(
        stage1: Stage1Checkpoint,
        config: Stage2Config,
        meta: Stage1Meta,
        schedule: ScaleSchedule,
        n_log: Vec<usize>,
    ) -> Result<Self> {
        let scales = schedule.scales;
        let cm = schedule.cm;
        let mut params = ParamStore::new();
        for (i, mixed) in stage1.books.scales.iter().enumerate() {
            let want = schedule.level_channels(i + 1);
            if mixed.dim != want {
                return Err(Error::Dim(format!(
                    "scale {} codebook dim {} does not match schedule dim {want}",
                    i + 1,
                    mixed.dim
                )));
            }
            params.insert(
                &format!("book{}", i + 1),
                ParamKind::Codebook,
                vec![mixed.n_entries(), mixed.dim],
                mixed.vectors.clone(),
            )?;
        }
        params.freeze_kind(ParamKind::Codebook);

        let mut found_decoder = false;
        for block in &stage1.params {
            if block.name.starts_with("dec.") {
                params.insert(&block.name, ParamKind::Conv, block.shape.clone(), block.values.clone())?;
                found_decoder = true;
            }
        }
        if !found_decoder {
            return Err(Error::Config(
                "stage-1 checkpoint carries no decoder parameters".into(),
            ));
        }
        for i in 1..=scales {
            params.get(&format!("dec.phi_r{i}.w")).map_err(|_| {
                Error::Config(format!("stage-1 checkpoint lacks the scale-{i} decoder conv"))
            })?;
        }
        params.get("dec.out.w").map_err(|_| {
            Error::Config("stage-1 checkpoint lacks the decoder output conv".into())
        })?;

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        insert_conv(&mut params, &mut rng, "ganet.stem", cm >> scales, 3, 3)?;
        for i in 2..=scales {
            insert_conv(
                &mut params,
                &mut rng,
                &format!("ganet.enc{i}"),
                cm >> (scales - i + 1),
                cm >> (scales - i + 2),
                3,
            )?;
        }
        for j in 1..=scales {
            let c = schedule.level_channels(j);
            insert_conv(&mut params, &mut rng, &format!("ganet.fuse{j}"), c, 2 * c, 1)?;
            for proj in ["q", "k", "v"] {
                insert_conv(&mut params, &mut rng, &format!("ganet.gqa{j}.{proj}"), c, c, 1)?;
            }
            insert_ga(&mut params, &mut rng, &format!("ganet.gqa{j}.ga"), c)?;
            insert_conv(&mut params, &mut rng, &format!("ganet.ffn{j}.pre"), c, c, 1)?;
            insert_conv(&mut params, &mut rng, &format!("ganet.ffn{j}.double"), 2 * c, c, 3)?;
            insert_ga(&mut params, &mut rng, &format!("ganet.ffn{j}.gamma"), 2 * c - n_log[j - 1])?;
            insert_ga(&mut params, &mut rng, &format!("ganet.ffn{j}.log"), n_log[j - 1])?;
            insert_conv(&mut params, &mut rng, &format!("ganet.ffn{j}.out"), c, 4 * c, 1)?;
            if j < scales {
                insert_conv(
                    &mut params,
                    &mut rng,
                    &format!("ganet.up{j}"),
                    schedule.level_channels(j + 1),
                    c,
                    1,
                )?;
            }
        }
        let ga_manifest: Vec<String> = params
            .entries()
            .iter()
            .filter(|e| e.kind == ParamKind::Ga)
            .map(|e| e.name.clone())
            .collect();
        Ok(GanetModel {
            config,
            stage1,
            meta,
            schedule,
            n_log,
            params,
            ga_manifest,
        })
    }

    /// Graph leaves of the frozen per-scale codebooks, in scale order.
    pub fn book_ids(&self, bound: &Bound) -> Result<Vec<TensorId>> {
        (1..=self.schedule.scales)
            .map(|i| bound.id(&format!("book{i}")))
            .collect()
    }

    pub fn to_checkpoint(&self) -> Stage2Checkpoint {
        Stage2Checkpoint {
            stage1: self.stage1.clone(),
            params: blocks_from_store(&self.params, |e| e.kind != ParamKind::Codebook),
            ga_manifest: self.ga_manifest.clone(),
        }
    }

    /// Rebuild a model from a checkpoint. Parameter shapes (and thus the
    /// feedforward split widths) come from the stored blocks; `config`
    /// supplies the runtime knobs (top-K, learning rates) that leave no
    /// trace in the parameter shapes.
    pub fn from_checkpoint(ckpt: &Stage2Checkpoint, config: Stage2Config) -> Result<Self> {
        config.validate()?;
        let meta: Stage1Meta = serde_json::from_str(&ckpt.stage1.config_json)?;
        let schedule = ScaleSchedule::new(meta.config.scales, meta.channels)?;
        let n_log: Vec<usize> = (1..=schedule.scales)
            .map(|j| {
                let name = format!("ganet.ffn{j}.log.b");
                ckpt.params
                    .iter()
                    .find(|b| b.name == name)
                    .map(|b| b.shape[0])
                    .ok_or_else(|| {
                        Error::Config(format!("checkpoint lacks the stage-{j} feedforward split"))
                    })
            })
            .collect::<Result<_>>()?;
        let mut model = Self::assemble(ckpt.stage1.clone(), config, meta, schedule, n_log)?;
        apply_blocks_to_store(&mut model.params, &ckpt.params)?;
        for name in &ckpt.ga_manifest {
            let entry = model.params.get(name)?;
            if entry.kind != ParamKind::Ga {
                return Err(Error::Config(format!(
                    "manifest entry '{name}' is not a grayscale-attention parameter"
                )));
            }
        }
        model.ga_manifest = ckpt.ga_manifest.clone();
        Ok(model)
    }
}

// ---------------------------------------------------------------------------
// Forward passes

/// Outputs of the grayscale-aware network proper (encoder + decoder stages).
#[derive(Debug, Clone)]
pub struct GanetForward {
    /// Encoder features `E_1..E_S`.
    pub encodings: Vec<TensorId>,
    /// Stage outputs `H_1^GA..H_S^GA`, indexed by codebook scale: entry
    /// `j−1` has `cm/2^j` channels.
    pub pyramid: Vec<TensorId>,
    /// Every quantization performed, in execution order: per stage the
    /// feature quantization followed by the query and key top-K calls.
    pub quants: Vec<QuantizationResult>,
}

/// Run the grayscale-aware network on an RGB tensor `[3,H,W]`.
pub fn ganet_forward<T: Scalar>(
    g: &mut Graph<T>,
    bound: &Bound,
    model: &GanetModel,
    books: &[TensorId],
    rgb: TensorId,
    opts: &QuantizeOpts<T>,
) -> Result<GanetForward> {
    let (c, h, w) = require_3d(g, rgb, "ganet_forward")?;
    if c != 3 {
        return Err(Error::Dim(format!("expected an RGB input with 3 channels, got {c}")));
    }
    let scales = model.schedule.scales;
    let div = 1usize << scales;
    if h % div != 0 || w % div != 0 || h / div == 0 || w / div == 0 {
        return Err(Error::Arg(format!(
            "input {h}x{w} does not survive {scales} exact halvings"
        )));
    }
    if books.len() != scales {
        return Err(Error::Dim(format!(
            "expected {scales} codebooks, got {}",
            books.len()
        )));
    }

    let mut encodings = Vec::with_capacity(scales);
    let mut e = conv_block(g, bound, "ganet.stem", rgb, 2)?;
    encodings.push(e);
    for i in 2..=scales {
        e = conv_block(g, bound, &format!("ganet.enc{i}"), e, 2)?;
        encodings.push(e);
    }

    let mut quants = Vec::with_capacity(3 * scales);
    let mut pyramid = Vec::with_capacity(scales);
    let mut hj = encodings[scales - 1];
    for j in 1..=scales {
        let q = quantize(g, books[j - 1], hj, opts)?;
        let cat = g.concat_channels(&[hj, q.quantized])?;
        quants.push(q);
        let fused = conv_block(g, bound, &format!("ganet.fuse{j}"), cat, 1)?;
        let gqa_parts = GqaParts::from_bound(bound, &format!("ganet.gqa{j}"))?;
        let attn = gqa(g, fused, books[j - 1], model.config.topk, &gqa_parts, opts)?;
        let x1 = g.add(fused, attn.out)?;
        quants.push(attn.q_top.quant);
        quants.push(attn.k_top.quant);
        let ffn_parts = FfnParts::from_bound(bound, &format!("ganet.ffn{j}"))?;
        let ffn = ga_feedforward(g, x1, &ffn_parts, model.n_log[j - 1])?;
        let hga = g.add(x1, ffn)?;
        pyramid.push(hga);
        if j < scales {
            let up = g.upsample_nearest(hga, 2)?;
            let halved = conv_block(g, bound, &format!("ganet.up{j}"), up, 1)?;
            hj = g.add(halved, encodings[scales - j - 1])?;
        }
    }
    Ok(GanetForward {
        encodings,
        pyramid,
        quants,
    })
}

/// Full RGB→HSI composition: grayscale-aware pyramid, then the stage-1
/// multi-scale decoder at the input's resolution.
#[derive(Debug, Clone)]
pub struct Stage2Forward {
    pub xhat: TensorId,
    pub pyramid: Vec<TensorId>,
    /// Network quantizations followed by the decoder's per-scale calls.
    pub quants: Vec<QuantizationResult>,
}

pub fn reconstruct_rgb_to_hsi<T: Scalar>(
    g: &mut Graph<T>,
    bound: &Bound,
    model: &GanetModel,
    books: &[TensorId],
    rgb: TensorId,
    opts: &QuantizeOpts<T>,
) -> Result<Stage2Forward> {
    let (_, h, w) = require_3d(g, rgb, "reconstruct_rgb_to_hsi")?;
    let fwd = ganet_forward(g, bound, model, books, rgb, opts)?;
    let beta = T::from_f64(model.meta.config.beta);
    let dec = multiscale_reconstruct(g, bound, books, beta, &fwd.pyramid, (h, w), opts)?;
    let mut quants = fwd.quants;
    quants.extend(dec.quants);
    Ok(Stage2Forward {
        xhat: dec.xhat,
        pyramid: fwd.pyramid,
        quants,
    })
}

/// Plain inference: reconstruct one RGB cube into a hyperspectral cube.
pub fn infer(model: &GanetModel, rgb: &crate::data::HsiCube) -> Result<crate::data::HsiCube> {
    let mut g: Graph<f32> = Graph::new();
    let bound = model.params.bind(&mut g)?;
    let books = model.book_ids(&bound)?;
    let input = cube_constant(&mut g, rgb)?;
    let opts = QuantizeOpts {
        with_probabilities: false,
        ..QuantizeOpts::default()
    };
    let fwd = reconstruct_rgb_to_hsi(&mut g, &bound, model, &books, input, &opts)?;
    let s = g.shape(fwd.xhat).to_vec();
    crate::data::HsiCube::new(s[0], s[1], s[2], g.data(fwd.xhat).to_vec())
}

// ---------------------------------------------------------------------------
// Training

/// One AdamW step over a batch of paired samples; minimizes the Charbonnier
/// loss of the reconstruction only (codebooks are frozen).
pub fn stage2_step(
    model: &mut GanetModel,
    opt: &mut AdamW<f32>,
    batch: &[&Sample],
    lr: f64,
    step: usize,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::Arg("stage2_step on an empty batch".into()));
    }
    let mut g: Graph<f32> = Graph::new();
    let bound = model.params.bind(&mut g)?;
    let books = model.book_ids(&bound)?;
    let opts = QuantizeOpts {
        with_probabilities: false,
        ..QuantizeOpts::default()
    };
    let mut losses = Vec::with_capacity(batch.len());
    for sample in batch {
        let rgb = cube_constant(&mut g, &sample.rgb)?;
        let hsi = cube_constant(&mut g, &sample.hsi)?;
        let fwd = reconstruct_rgb_to_hsi(&mut g, &bound, model, &books, rgb, &opts)?;
        losses.push(g.charbonnier(hsi, fwd.xhat, CHARBONNIER_EPS as f32)?);
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = g.add(total, l)?;
    }
    let total = g.scale(total, 1.0 / losses.len() as f32);
    let value = g.scalar_value(total) as f64;
    if !value.is_finite() {
        return Err(Error::Training {
            step,
            message: format!("non-finite reconstruction loss (lr={lr})"),
        });
    }
    g.backward(total)?;
    opt.step(&mut model.params, &g, &bound, lr)?;
    Ok(StepStats {
        step,
        total: value,
        rec: value,
        l1: 0.0,
        l2: 0.0,
        lr,
    })
}

/// Train a fresh stage-2 model on RGB/HSI pairs against a stage-1 artifact.
pub fn train_stage2(
    pairs: &[Sample],
    stage1: &Stage1Checkpoint,
    cfg: &Stage2Config,
) -> Result<(GanetModel, Vec<StepStats>)> {
    let model = GanetModel::new(stage1, cfg.clone())?;
    let first = pairs
        .first()
        .ok_or_else(|| Error::Arg("train_stage2 needs a non-empty dataset".into()))?;
    for (idx, s) in pairs.iter().enumerate() {
        if s.rgb.c != 3 {
            return Err(Error::Dim(format!(
                "sample {idx} has {} RGB channels, expected 3",
                s.rgb.c
            )));
        }
        if s.hsi.c != model.meta.channels {
            return Err(Error::Dim(format!(
                "sample {idx} has {} bands but the stage-1 decoder produces {}",
                s.hsi.c, model.meta.channels
            )));
        }
        if (s.rgb.h, s.rgb.w) != (s.hsi.h, s.hsi.w) {
            return Err(Error::Dim(format!(
                "sample {idx} pairs a {}x{} RGB with a {}x{} cube",
                s.rgb.h, s.rgb.w, s.hsi.h, s.hsi.w
            )));
        }
        if (s.rgb.h, s.rgb.w) != (first.rgb.h, first.rgb.w) {
            return Err(Error::Dim(format!(
                "sample {idx} is {}x{} but sample 0 is {}x{}",
                s.rgb.h, s.rgb.w, first.rgb.h, first.rgb.w
            )));
        }
    }
    let mut model = model;
    if cfg.epochs == 0 {
        return Ok((model, Vec::new()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let steps_per_epoch = pairs.len().div_ceil(cfg.batch_size);
    let sched = CycleScheduler::new(cfg.learning_rate, cfg.epochs * steps_per_epoch);
    let mut opt = AdamW::new(&model.params, WEIGHT_DECAY);
    let mut history = Vec::with_capacity(cfg.epochs * steps_per_epoch);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut step = 0;
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &pairs[i]).collect();
            let lr = sched.lr_at(step);
            history.push(stage2_step(&mut model, &mut opt, &batch, lr, step)?);
            step += 1;
        }
    }
    Ok((model, history))
}
