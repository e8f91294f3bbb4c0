//! Stage-1 multi-scale vector-quantized autoencoder.
//!
//! The encoder masks the input cube down to a power-of-two channel count,
//! then walks a scale schedule: at scale `i` the running feature map is
//! downsampled to `(cm/2^i) × (H/2^i) × (W/2^i)`, quantized against the
//! scale's codebook, upsampled back to full resolution, and refined by a
//! 3×3 conv before the next scale consumes it. The decoder replays the
//! pyramid from the coarsest scale to the finest, quantizing each level,
//! concatenating the level with its quantized twin, upsampling to full
//! resolution, and fusing everything through a final conv that restores
//! the original channel count — including the bands the mask dropped.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codebook::{
    init_codebook, quantize, MixedCodebook, MixtureOfCodebooks, QuantizationResult, QuantizeOpts,
};
use crate::data::{channel_mask, masked_channel_count, select_channels, HsiCube};
use crate::error::{Error, Result};
use crate::io::{apply_blocks_to_store, blocks_from_store, canonical_json, Stage1Checkpoint};
use crate::optim::{AdamW, Bound, CycleScheduler, ParamKind, ParamStore};
use crate::tensor::{Graph, Scalar, TensorId};

/// Charbonnier smoothing constant for the reconstruction loss.
pub const CHARBONNIER_EPS: f64 = 1e-6;

/// Default weight-decay used for every AdamW optimizer in the pipeline.
pub const WEIGHT_DECAY: f64 = 0.01;

// ---------------------------------------------------------------------------
// Configuration

/// Hyperparameters of a stage-1 training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    /// Number of quantization scales `S`.
    pub scales: usize,
    /// Weight of the quantization losses in the total objective.
    pub beta: f64,
    /// Peak learning rate of the one-cycle schedule.
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Codebook entries per scale.
    pub entries: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            scales: 2,
            beta: 0.25,
            learning_rate: 4e-4,
            epochs: 1,
            batch_size: 4,
            seed: 0,
            entries: 512,
        }
    }
}

impl Stage1Config {
    /// Internal consistency checks that do not need the data shape.
    pub fn validate(&self) -> Result<()> {
        if self.scales < 1 {
            return Err(Error::Config(format!(
                "scales must be at least 1, got {}",
                self.scales
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.entries < 1 {
            return Err(Error::Config("entries must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "beta must be non-negative and finite, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Scale schedule

/// Channel schedule implied by the input channel count and the scale count.
///
/// Invalid combinations are rejected here, at construction, so the forward
/// passes only ever see workable shapes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaleSchedule {
    /// Original channel count of the data.
    pub c: usize,
    /// Masked channel count `2^⌊log2(c/2)⌋`.
    pub cm: usize,
    pub scales: usize,
}

impl ScaleSchedule {
    pub fn new(scales: usize, c: usize) -> Result<Self> {
        if scales < 1 {
            return Err(Error::Config(format!(
                "scales must be at least 1, got {scales}"
            )));
        }
        let cm = masked_channel_count(c)?;
        if cm >> scales == 0 {
            return Err(Error::Config(format!(
                "{scales} scales exhaust the {cm} masked channels (of {c} input channels); \
                 the deepest scale would have zero channels"
            )));
        }
        Ok(ScaleSchedule { c, cm, scales })
    }

    /// Channels of pyramid level `i` (1-based): `cm / 2^i`.
    pub fn level_channels(&self, i: usize) -> usize {
        self.cm >> i
    }

    /// Input channels of the final decoder conv: `Σ_i cm/2^i`.
    pub fn decoder_in_channels(&self) -> usize {
        (1..=self.scales).map(|i| self.level_channels(i)).sum()
    }

    /// Spatial dims must halve exactly at every scale.
    pub fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let div = 1usize << self.scales;
        if h % div != 0 || w % div != 0 || h / div == 0 || w / div == 0 {
            return Err(Error::Config(format!(
                "spatial dims {h}x{w} do not survive {} halvings; \
                 both must be positive multiples of {div}",
                self.scales
            )));
        }
        Ok(())
    }

    /// Full shape of pyramid level `i` for an `h × w` input.
    pub fn level_shape(&self, i: usize, h: usize, w: usize) -> (usize, usize, usize) {
        (self.level_channels(i), h >> i, w >> i)
    }
}

// ---------------------------------------------------------------------------
// Model

fn book_name(i: usize) -> String {
    format!("book{i}")
}

/// Seed-deterministic normal init with LeCun scaling (variance `1/fan_in`).
pub(crate) fn conv_weights(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize, k: usize) -> Vec<f32> {
    let std = (1.0 / (c_in * k * k) as f64).sqrt();
    (0..c_out * c_in * k * k)
        .map(|_| {
            let v: f64 = rng.sample(StandardNormal);
            (v * std) as f32
        })
        .collect()
}

/// Insert a conv weight+bias pair under `name.w` / `name.b`.
pub(crate) fn insert_conv(
    store: &mut ParamStore<f32>,
    rng: &mut ChaCha8Rng,
    name: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
) -> Result<()> {
    store.insert(
        &format!("{name}.w"),
        ParamKind::Conv,
        vec![c_out, c_in, k, k],
        conv_weights(rng, c_out, c_in, k),
    )?;
    store.insert(
        &format!("{name}.b"),
        ParamKind::Conv,
        vec![c_out],
        vec![0.0; c_out],
    )
}

/// Stage-1 model: per-scale codebooks plus the encoder/decoder convolutions,
/// all held in one parameter store so a single optimizer can walk them.
#[derive(Debug, Clone)]
pub struct Stage1Model {
    pub config: Stage1Config,
    pub schedule: ScaleSchedule,
    /// Identifier of the dataset the books are (being) trained on.
    pub source_tag: String,
    /// Spatial dims the model was constructed for.
    pub height: usize,
    pub width: usize,
    /// Per-scale `(source_tag, rows)` provenance of the codebooks.
    pub book_sources: Vec<Vec<(String, usize)>>,
    pub params: ParamStore<f32>,
}

/// Metadata serialized (as canonical JSON) into stage-1 checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Meta {
    pub config: Stage1Config,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub source_tag: String,
}

impl Stage1Model {
    /// Build a freshly initialized model for `c × h × w` cubes. All shape
    /// constraints are enforced here, not during the forward pass.
    pub fn new(
        config: Stage1Config,
        c: usize,
        h: usize,
        w: usize,
        source_tag: &str,
    ) -> Result<Self> {
        config.validate()?;
        let schedule = ScaleSchedule::new(config.scales, c)?;
        schedule.check_spatial(h, w)?;

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let mut book_sources = Vec::with_capacity(config.scales);
        for i in 1..=config.scales {
            let dim = schedule.level_channels(i);
            let book = init_codebook(config.entries, dim, rng.gen(), i as u32, source_tag)?;
            params.insert(
                &book_name(i),
                ParamKind::Codebook,
                vec![book.n_entries, book.dim],
                book.vectors,
            )?;
            book_sources.push(vec![(source_tag.to_string(), config.entries)]);
        }
        let cm = schedule.cm;
        for i in 1..=config.scales {
            for j in 1..=i {
                let c_in = if j == 1 { cm >> (i - 1) } else { cm >> i };
                insert_conv(&mut params, &mut rng, &format!("enc.down{i}.{j}"), cm >> i, c_in, 3)?;
            }
            if i < config.scales {
                insert_conv(&mut params, &mut rng, &format!("enc.phi{i}"), cm >> i, cm >> i, 3)?;
            }
        }
        for i in (1..=config.scales).rev() {
            let li = schedule.level_channels(i);
            insert_conv(&mut params, &mut rng, &format!("dec.phi_r{i}"), li, 2 * li, 3)?;
        }
        insert_conv(&mut params, &mut rng, "dec.out", c, schedule.decoder_in_channels(), 3)?;

        Ok(Stage1Model {
            config,
            schedule,
            source_tag: source_tag.to_string(),
            height: h,
            width: w,
            book_sources,
            params,
        })
    }

    /// Rebuild a model around existing (possibly mixed, hence wider) books.
    pub fn with_books(meta: &Stage1Meta, books: &MixtureOfCodebooks) -> Result<Self> {
        let mut model = Self::new(
            meta.config.clone(),
            meta.channels,
            meta.height,
            meta.width,
            &meta.source_tag,
        )?;
        if books.scales.len() != model.config.scales {
            return Err(Error::Dim(format!(
                "model wants {} codebook scales, mixture provides {}",
                model.config.scales,
                books.scales.len()
            )));
        }
        for (i, mixed) in books.scales.iter().enumerate() {
            let scale = i + 1;
            let want = model.schedule.level_channels(scale);
            if mixed.dim != want {
                return Err(Error::Dim(format!(
                    "scale {scale} codebook dim {} does not match schedule dim {want}",
                    mixed.dim
                )));
            }
            let entry = model.params.get_mut(&book_name(scale))?;
            entry.shape = vec![mixed.n_entries(), mixed.dim];
            entry.data = mixed.vectors.clone();
            model.book_sources[i] = mixed.sources.clone();
        }
        Ok(model)
    }

    pub fn meta(&self) -> Stage1Meta {
        Stage1Meta {
            config: self.config.clone(),
            channels: self.schedule.c,
            height: self.height,
            width: self.width,
            source_tag: self.source_tag.clone(),
        }
    }

    /// Snapshot the codebooks with their per-scale provenance tables.
    pub fn books(&self) -> Result<MixtureOfCodebooks> {
        let mut scales = Vec::with_capacity(self.config.scales);
        for i in 1..=self.config.scales {
            let entry = self.params.get(&book_name(i))?;
            scales.push(MixedCodebook {
                scale_index: i as u32,
                dim: entry.shape[1],
                vectors: entry.data.clone(),
                sources: self.book_sources[i - 1].clone(),
            });
        }
        Ok(MixtureOfCodebooks { scales })
    }

    /// Graph leaves of the per-scale codebooks, in scale order.
    pub fn book_ids(&self, bound: &Bound) -> Result<Vec<TensorId>> {
        (1..=self.config.scales)
            .map(|i| bound.id(&book_name(i)))
            .collect()
    }

    pub fn to_checkpoint(&self) -> Result<Stage1Checkpoint> {
        Ok(Stage1Checkpoint {
            config_json: canonical_json(&self.meta())?,
            books: self.books()?,
            params: blocks_from_store(&self.params, |e| e.kind != ParamKind::Codebook),
        })
    }

    pub fn from_checkpoint(ckpt: &Stage1Checkpoint) -> Result<Self> {
        let meta: Stage1Meta = serde_json::from_str(&ckpt.config_json)?;
        let mut model = Self::with_books(&meta, &ckpt.books)?;
        apply_blocks_to_store(&mut model.params, &ckpt.params)?;
        Ok(model)
    }
}

// ---------------------------------------------------------------------------
// Forward passes

/// Insert a cube as a (gradient-free) graph constant shaped `[C, H, W]`.
pub fn cube_constant<T: Scalar>(g: &mut Graph<T>, cube: &HsiCube) -> Result<TensorId> {
    g.constant(
        vec![cube.c, cube.h, cube.w],
        cube.data.iter().map(|&v| T::from_f64(v as f64)).collect(),
    )
}

/// Seed-deterministic channel masking of a cube: keeps `2^⌊log2(C/2)⌋`
/// channels chosen at random, in ascending original order.
pub fn channel_mask_cube(x: &HsiCube, seed: u64) -> Result<(HsiCube, Vec<usize>)> {
    let cm = masked_channel_count(x.c)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = channel_mask(x.c, cm, &mut rng)?;
    Ok((select_channels(x, &mask)?, mask))
}

pub(crate) fn conv_block<T: Scalar>(
    g: &mut Graph<T>,
    bound: &Bound,
    name: &str,
    x: TensorId,
    stride: usize,
) -> Result<TensorId> {
    let w = bound.id(&format!("{name}.w"))?;
    let b = bound.id(&format!("{name}.b"))?;
    let k = g.shape(w)[2];
    let y = g.conv2d(x, w, stride, k / 2)?;
    g.add_channel_bias(y, b)
}

/// One scale's quantization bookkeeping plus the running loss sum.
fn accumulate_vq<T: Scalar>(
    g: &mut Graph<T>,
    loss: TensorId,
    q: &QuantizationResult,
    beta: T,
) -> Result<TensorId> {
    let (embed, commit) = q.vq_losses(g)?;
    let scaled = g.scale(commit, beta);
    let term = g.add(embed, scaled)?;
    g.add(loss, term)
}

/// Encoder outputs: the pre-quantization pyramid and the scale-wise loss.
#[derive(Debug, Clone)]
pub struct PyramidOutput {
    /// Pre-quantization features, scale order `1..=S`; level `i` is shaped
    /// `(cm/2^i) × (H/2^i) × (W/2^i)`.
    pub levels: Vec<TensorId>,
    /// Accumulated `embed + β·commit` over all scales.
    pub l1: TensorId,
    pub quants: Vec<QuantizationResult>,
}

/// Multi-scale quantization: walks the scale schedule over a masked cube,
/// producing the feature pyramid and the encoder-side quantization loss.
pub fn multiscale_quantize<T: Scalar>(
    g: &mut Graph<T>,
    bound: &Bound,
    books: &[TensorId],
    beta: T,
    masked: TensorId,
    opts: &QuantizeOpts<T>,
) -> Result<PyramidOutput> {
    let scales = books.len();
    if scales == 0 {
        return Err(Error::Arg("multiscale_quantize needs at least one codebook".into()));
    }
    let shape = g.shape(masked).to_vec();
    if shape.len() != 3 {
        return Err(Error::Dim(format!(
            "masked input must be [C,H,W], got {shape:?}"
        )));
    }
    let (cm, h, w) = (shape[0], shape[1], shape[2]);
    let div = 1usize << scales;
    if cm % div != 0 || cm / div == 0 || h % div != 0 || w % div != 0 {
        return Err(Error::Dim(format!(
            "input {cm}x{h}x{w} does not support {scales} exact halvings"
        )));
    }
    for (idx, &book) in books.iter().enumerate() {
        let want = cm >> (idx + 1);
        let bs = g.shape(book);
        if bs.len() != 2 || bs[1] != want {
            return Err(Error::Dim(format!(
                "scale {} codebook shaped {bs:?} does not match level dim {want}",
                idx + 1
            )));
        }
    }

    let mut f = masked;
    let mut l1 = g.constant_scalar(T::zero());
    let mut levels = Vec::with_capacity(scales);
    let mut quants = Vec::with_capacity(scales);
    for i in 1..=scales {
        let mut d = f;
        for j in 1..=i {
            d = conv_block(g, bound, &format!("enc.down{i}.{j}"), d, 2)?;
        }
        levels.push(d);
        let q = quantize(g, books[i - 1], d, opts)?;
        l1 = accumulate_vq(g, l1, &q, beta)?;
        if i < scales {
            let level_h = g.shape(q.quantized)[1];
            let up = g.upsample_nearest(q.quantized, h / level_h)?;
            f = conv_block(g, bound, &format!("enc.phi{i}"), up, 1)?;
        }
        quants.push(q);
    }
    Ok(PyramidOutput { levels, l1, quants })
}

/// Decoder outputs: the reconstructed cube and the decoder-side loss.
#[derive(Debug, Clone)]
pub struct ReconstructOutput {
    /// Reconstruction shaped `[C, H, W]` at the full target resolution.
    pub xhat: TensorId,
    /// Accumulated `embed + β·commit` over all scales.
    pub l2: TensorId,
    pub quants: Vec<QuantizationResult>,
}

/// Multi-scale reconstruction: consumes the pyramid coarsest-first, pairing
/// each level with its quantized twin, and fuses all levels into a cube with
/// the decoder's output channel count at resolution `out_hw`.
pub fn multiscale_reconstruct<T: Scalar>(
    g: &mut Graph<T>,
    bound: &Bound,
    books: &[TensorId],
    beta: T,
    pyramid: &[TensorId],
    out_hw: (usize, usize),
    opts: &QuantizeOpts<T>,
) -> Result<ReconstructOutput> {
    if pyramid.is_empty() {
        return Err(Error::Arg("multiscale_reconstruct on an empty pyramid".into()));
    }
    if pyramid.len() != books.len() {
        return Err(Error::Dim(format!(
            "pyramid has {} levels but {} codebooks were supplied",
            pyramid.len(),
            books.len()
        )));
    }
    let (out_h, out_w) = out_hw;
    let mut l2 = g.constant_scalar(T::zero());
    let mut parts = Vec::with_capacity(pyramid.len());
    let mut quants = Vec::with_capacity(pyramid.len());
    for i in (1..=pyramid.len()).rev() {
        let feat = pyramid[i - 1];
        let fs = g.shape(feat).to_vec();
        if fs.len() != 3 {
            return Err(Error::Dim(format!(
                "pyramid level {i} must be [C,H,W], got {fs:?}"
            )));
        }
        let (lh, lw) = (fs[1], fs[2]);
        if out_h % lh != 0 || out_w % lw != 0 || out_h / lh != out_w / lw {
            return Err(Error::Dim(format!(
                "level {i} at {lh}x{lw} cannot be upsampled uniformly to {out_h}x{out_w}"
            )));
        }
        let q = quantize(g, books[i - 1], feat, opts)?;
        l2 = accumulate_vq(g, l2, &q, beta)?;
        let cat = g.concat_channels(&[feat, q.quantized])?;
        let up = g.upsample_nearest(cat, out_h / lh)?;
        parts.push(conv_block(g, bound, &format!("dec.phi_r{i}"), up, 1)?);
        quants.push(q);
    }
    let fused = g.concat_channels(&parts)?;
    let xhat = conv_block(g, bound, "dec.out", fused, 1)?;
    Ok(ReconstructOutput { xhat, l2, quants })
}

/// Full stage-1 forward pass with every loss term kept on the tape.
#[derive(Debug, Clone)]
pub struct Stage1Forward {
    pub xhat: TensorId,
    /// Charbonnier reconstruction loss against the full (unmasked) cube.
    pub rec: TensorId,
    pub l1: TensorId,
    pub l2: TensorId,
    /// `rec + β·(l1 + l2)`.
    pub total: TensorId,
    pub pyramid: Vec<TensorId>,
}

/// Encode `x_masked`, reconstruct, and assemble the total training loss
/// against the full cube `x_full`.
pub fn stage1_forward<T: Scalar>(
    g: &mut Graph<T>,
    bound: &Bound,
    books: &[TensorId],
    beta: T,
    x_full: TensorId,
    x_masked: TensorId,
) -> Result<Stage1Forward> {
    let full_shape = g.shape(x_full).to_vec();
    if full_shape.len() != 3 {
        return Err(Error::Dim(format!(
            "full input must be [C,H,W], got {full_shape:?}"
        )));
    }
    let opts = QuantizeOpts {
        with_probabilities: false,
        ..QuantizeOpts::default()
    };
    let enc = multiscale_quantize(g, bound, books, beta, x_masked, &opts)?;
    let dec = multiscale_reconstruct(
        g,
        bound,
        books,
        beta,
        &enc.levels,
        (full_shape[1], full_shape[2]),
        &opts,
    )?;
    let rec = g.charbonnier(x_full, dec.xhat, T::from_f64(CHARBONNIER_EPS))?;
    let vq = g.add(enc.l1, dec.l2)?;
    let scaled = g.scale(vq, beta);
    let total = g.add(rec, scaled)?;
    Ok(Stage1Forward {
        xhat: dec.xhat,
        rec,
        l1: enc.l1,
        l2: dec.l2,
        total,
        pyramid: enc.levels,
    })
}

// ---------------------------------------------------------------------------
// Training

/// Losses of one optimizer step (means over the batch).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub total: f64,
    pub rec: f64,
    pub l1: f64,
    pub l2: f64,
    pub lr: f64,
}

/// One AdamW step over a batch of cubes; masks are drawn from `rng` per
/// sample. Returns the batch-mean losses.
pub fn stage1_step(
    model: &mut Stage1Model,
    opt: &mut AdamW<f32>,
    batch: &[&HsiCube],
    lr: f64,
    step: usize,
    rng: &mut ChaCha8Rng,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::Arg("stage1_step on an empty batch".into()));
    }
    let mut g: Graph<f32> = Graph::new();
    let bound = model.params.bind(&mut g)?;
    let books = model.book_ids(&bound)?;
    let beta = model.config.beta as f32;

    let mut totals = Vec::with_capacity(batch.len());
    let mut recs = Vec::with_capacity(batch.len());
    let mut l1s = Vec::with_capacity(batch.len());
    let mut l2s = Vec::with_capacity(batch.len());
    for cube in batch {
        let mask = channel_mask(cube.c, model.schedule.cm, rng)?;
        let masked = select_channels(cube, &mask)?;
        let x_full = cube_constant(&mut g, cube)?;
        let x_masked = cube_constant(&mut g, &masked)?;
        let fwd = stage1_forward(&mut g, &bound, &books, beta, x_full, x_masked)?;
        totals.push(fwd.total);
        recs.push(fwd.rec);
        l1s.push(fwd.l1);
        l2s.push(fwd.l2);
    }
    let mean = |g: &mut Graph<f32>, ids: &[TensorId]| -> Result<TensorId> {
        let mut s = ids[0];
        for &id in &ids[1..] {
            s = g.add(s, id)?;
        }
        Ok(g.scale(s, 1.0 / ids.len() as f32))
    };
    let total = mean(&mut g, &totals)?;
    let stats = StepStats {
        step,
        total: g.scalar_value(total).into_f64(),
        rec: mean(&mut g, &recs).map(|id| g.scalar_value(id).into_f64())?,
        l1: mean(&mut g, &l1s).map(|id| g.scalar_value(id).into_f64())?,
        l2: mean(&mut g, &l2s).map(|id| g.scalar_value(id).into_f64())?,
        lr,
    };
    if !stats.total.is_finite() {
        return Err(Error::Training {
            step,
            message: format!(
                "non-finite total loss (rec={}, l1={}, l2={}, lr={lr})",
                stats.rec, stats.l1, stats.l2
            ),
        });
    }
    g.backward(total)?;
    opt.step(&mut model.params, &g, &bound, lr)?;
    Ok(stats)
}

/// Re-seed every codebook with feature rows observed on real data, one scale
/// at a time so deeper scales see the final shallow-scale quantization. This
/// keeps the initial quantization error close to the data manifold instead of
/// starting from random entries far away from any feature.
fn bootstrap_codebooks(
    model: &mut Stage1Model,
    cubes: &[&HsiCube],
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    for scale in 1..=model.config.scales {
        let mut rows: Vec<Vec<f32>> = Vec::new();
        for cube in cubes {
            let mask = channel_mask(cube.c, model.schedule.cm, rng)?;
            let masked = select_channels(cube, &mask)?;
            let mut g: Graph<f32> = Graph::new();
            let bound = model.params.bind(&mut g)?;
            let books = model.book_ids(&bound)?;
            let x_masked = cube_constant(&mut g, &masked)?;
            let opts = QuantizeOpts {
                with_probabilities: false,
                ..QuantizeOpts::default()
            };
            let enc = multiscale_quantize(&mut g, &bound, &books, 0.0, x_masked, &opts)?;
            let level = enc.levels[scale - 1];
            let data = g.data(level);
            let s = g.shape(level);
            let (dim, plane) = (s[0], s[1] * s[2]);
            for p in 0..plane {
                rows.push((0..dim).map(|ch| data[ch * plane + p]).collect());
            }
        }
        let entry = model.params.get_mut(&book_name(scale))?;
        let n = entry.shape[0];
        let take = n.min(rows.len());
        let mut data = Vec::with_capacity(entry.data.len());
        for idx in rand::seq::index::sample(rng, rows.len(), take) {
            data.extend_from_slice(&rows[idx]);
        }
        for _ in take..n {
            data.extend_from_slice(&rows[rng.gen_range(0..rows.len())]);
        }
        entry.data = data;
    }
    Ok(())
}

/// Train a fresh stage-1 model on `dataset`. The loss history (one entry per
/// optimizer step) is fully determined by the config seed.
pub fn train_stage1(
    dataset: &[HsiCube],
    cfg: &Stage1Config,
    source_tag: &str,
) -> Result<(Stage1Model, Vec<StepStats>)> {
    let first = dataset
        .first()
        .ok_or_else(|| Error::Arg("train_stage1 needs a non-empty dataset".into()))?;
    for (idx, cube) in dataset.iter().enumerate() {
        if (cube.c, cube.h, cube.w) != (first.c, first.h, first.w) {
            return Err(Error::Dim(format!(
                "dataset cube {idx} is {}x{}x{} but cube 0 is {}x{}x{}",
                cube.c, cube.h, cube.w, first.c, first.h, first.w
            )));
        }
    }
    let mut model = Stage1Model::new(cfg.clone(), first.c, first.h, first.w, source_tag)?;
    if cfg.epochs == 0 {
        return Ok((model, Vec::new()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let boot: Vec<&HsiCube> = dataset.iter().take(cfg.batch_size.max(4)).collect();
    bootstrap_codebooks(&mut model, &boot, &mut rng)?;

    let steps_per_epoch = dataset.len().div_ceil(cfg.batch_size);
    let sched = CycleScheduler::new(cfg.learning_rate, cfg.epochs * steps_per_epoch);
    let mut opt = AdamW::new(&model.params, WEIGHT_DECAY);
    let mut history = Vec::with_capacity(cfg.epochs * steps_per_epoch);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step = 0;
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&HsiCube> = chunk.iter().map(|&i| &dataset[i]).collect();
            let lr = sched.lr_at(step);
            history.push(stage1_step(&mut model, &mut opt, &batch, lr, step, &mut rng)?);
            step += 1;
        }
    }
    Ok((model, history))
}
