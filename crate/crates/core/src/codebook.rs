//! Codebooks, vector quantization, and the mixture-of-codebooks machinery.
//!
//! A codebook is a learned `[n_entries, dim]` matrix. Quantization replaces
//! each spectral feature vector (the channel column at one spatial position)
//! by its nearest entry under squared L2. The forward output follows the
//! straight-through convention — adjoints pass to the features unchanged —
//! while a separate gathered path carries gradients into the selected
//! codebook rows for the commitment objective.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, TensorId};

/// Default number of entries for a single-source codebook.
pub const DEFAULT_ENTRIES: usize = 512;

/// A single-scale codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// 1-based scale index this book quantizes.
    pub scale_index: u32,
    pub n_entries: usize,
    pub dim: usize,
    /// Row-major `[n_entries, dim]`.
    pub vectors: Vec<f32>,
    /// Identifier of the dataset the book was trained on.
    pub source_tag: String,
}

impl Codebook {
    /// Insert the codebook matrix as a graph leaf (`[n_entries, dim]`).
    pub fn leaf<T: Scalar>(&self, g: &mut Graph<T>, trainable: bool) -> Result<TensorId> {
        let data: Vec<T> = self.vectors.iter().map(|&v| T::from_f64(v as f64)).collect();
        if trainable {
            g.param(vec![self.n_entries, self.dim], data)
        } else {
            g.constant(vec![self.n_entries, self.dim], data)
        }
    }
}

/// Seed-deterministic standard-normal initialization.
pub fn init_codebook(
    n_entries: usize,
    dim: usize,
    seed: u64,
    scale_index: u32,
    source_tag: &str,
) -> Result<Codebook> {
    if n_entries == 0 || dim == 0 {
        return Err(Error::Arg(format!(
            "codebook needs positive extents, got {n_entries}x{dim}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let vectors = (0..n_entries * dim)
        .map(|_| {
            let v: f64 = normal.sample(&mut rng);
            v as f32
        })
        .collect();
    Ok(Codebook {
        scale_index,
        n_entries,
        dim,
        vectors,
        source_tag: source_tag.to_string(),
    })
}

/// One scale slice of a mixture: the row-wise concatenation of the source
/// codebooks for that scale, with the originating tag kept per row range.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedCodebook {
    pub scale_index: u32,
    pub dim: usize,
    /// Row-major `[n_entries, dim]` where `n_entries = Σ source entries`.
    pub vectors: Vec<f32>,
    /// `(source_tag, row_count)` in concatenation order.
    pub sources: Vec<(String, usize)>,
}

impl MixedCodebook {
    pub fn n_entries(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn leaf<T: Scalar>(&self, g: &mut Graph<T>, trainable: bool) -> Result<TensorId> {
        let data: Vec<T> = self.vectors.iter().map(|&v| T::from_f64(v as f64)).collect();
        if trainable {
            g.param(vec![self.n_entries(), self.dim], data)
        } else {
            g.constant(vec![self.n_entries(), self.dim], data)
        }
    }
}

/// Concatenate same-scale codebooks from N sources into one mixed book.
/// Row order follows argument order, so entry `i` of source `s` lands at row
/// `Σ_{t<s} n_t + i`.
pub fn mix_codebooks(books: &[&Codebook]) -> Result<MixedCodebook> {
    let first = books
        .first()
        .ok_or_else(|| Error::Arg("mix_codebooks needs at least one book".into()))?;
    let mut vectors = Vec::new();
    let mut sources = Vec::new();
    for b in books {
        if b.scale_index != first.scale_index || b.dim != first.dim {
            return Err(Error::Dim(format!(
                "cannot mix codebook (scale {}, dim {}) with (scale {}, dim {})",
                b.scale_index, b.dim, first.scale_index, first.dim
            )));
        }
        vectors.extend_from_slice(&b.vectors);
        sources.push((b.source_tag.clone(), b.n_entries));
    }
    Ok(MixedCodebook {
        scale_index: first.scale_index,
        dim: first.dim,
        vectors,
        sources,
    })
}

/// Per-scale mixture used by the stage-2 network; `scales[i]` serves scale `i+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureOfCodebooks {
    pub scales: Vec<MixedCodebook>,
}

impl MixtureOfCodebooks {
    /// Mix one codebook stack per source dataset. Every stack must cover the
    /// same scales in the same order.
    pub fn mix(sources: &[&[Codebook]]) -> Result<Self> {
        let first = sources
            .first()
            .ok_or_else(|| Error::Arg("mixture needs at least one source".into()))?;
        for s in sources {
            if s.len() != first.len() {
                return Err(Error::Dim(format!(
                    "source stacks cover {} vs {} scales",
                    s.len(),
                    first.len()
                )));
            }
        }
        let mut scales = Vec::with_capacity(first.len());
        for i in 0..first.len() {
            let slice: Vec<&Codebook> = sources.iter().map(|s| &s[i]).collect();
            scales.push(mix_codebooks(&slice)?);
        }
        Ok(MixtureOfCodebooks { scales })
    }

    /// Wrap a single source (N = 1).
    pub fn from_single(books: &[Codebook]) -> Result<Self> {
        Self::mix(&[books])
    }

    /// Concatenate already-assembled mixtures scale by scale, keeping the
    /// source ranges of every part in argument order.
    pub fn concat(parts: &[&MixtureOfCodebooks]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Arg("mixture concat needs at least one part".into()))?;
        for p in parts {
            if p.scales.len() != first.scales.len() {
                return Err(Error::Dim(format!(
                    "mixtures cover {} vs {} scales",
                    p.scales.len(),
                    first.scales.len()
                )));
            }
        }
        let mut scales = Vec::with_capacity(first.scales.len());
        for i in 0..first.scales.len() {
            let lead = &first.scales[i];
            let mut vectors = Vec::new();
            let mut sources = Vec::new();
            for p in parts {
                let s = &p.scales[i];
                if s.scale_index != lead.scale_index || s.dim != lead.dim {
                    return Err(Error::Dim(format!(
                        "scale {} mismatch: (scale {}, dim {}) vs (scale {}, dim {})",
                        i + 1,
                        s.scale_index,
                        s.dim,
                        lead.scale_index,
                        lead.dim
                    )));
                }
                vectors.extend_from_slice(&s.vectors);
                sources.extend(s.sources.iter().cloned());
            }
            scales.push(MixedCodebook {
                scale_index: lead.scale_index,
                dim: lead.dim,
                vectors,
                sources,
            });
        }
        Ok(MixtureOfCodebooks { scales })
    }

    pub fn scale(&self, scale_index: usize) -> Result<&MixedCodebook> {
        self.scales.get(scale_index - 1).ok_or_else(|| {
            Error::Arg(format!(
                "mixture has {} scales, requested scale {scale_index}",
                self.scales.len()
            ))
        })
    }
}

/// Options for [`quantize`].
#[derive(Debug, Clone, Copy)]
pub struct QuantizeOpts<T> {
    /// Softmax temperature for the probability matrix.
    pub temperature: T,
    /// Skip building the probability matrix when the caller only needs the
    /// quantized values (saves the softmax on hot training paths).
    pub with_probabilities: bool,
}

impl<T: Scalar> Default for QuantizeOpts<T> {
    fn default() -> Self {
        QuantizeOpts {
            temperature: T::one(),
            with_probabilities: true,
        }
    }
}

/// Everything a quantization call produces.
///
/// `quantized` is the straight-through output shaped like the input features;
/// `gathered` holds the same values as `[positions, dim]` rows but routes
/// gradients into the codebook instead, which is what the commitment loss
/// differentiates through. `distances` (and `probabilities` when requested)
/// stay on the tape so entropy objectives can reach the features.
#[derive(Debug, Clone)]
pub struct QuantizationResult {
    /// Winning entry per position (ties resolve to the lowest index).
    pub indices: Vec<usize>,
    /// Straight-through quantized features, original shape.
    pub quantized: TensorId,
    /// Features flattened to `[positions, dim]`.
    pub rows: TensorId,
    /// Selected codebook rows `[positions, dim]`, gradient path into the book.
    pub gathered: TensorId,
    /// Squared-L2 distance matrix `[positions, n_entries]`.
    pub distances: TensorId,
    /// Row softmax of `-distances / temperature`, if requested.
    pub probabilities: Option<TensorId>,
}

impl QuantizationResult {
    /// The embed/commit pair for this call, wired so the embed gradient
    /// reaches the features and the commit gradient reaches the codebook.
    pub fn vq_losses<T: Scalar>(&self, g: &mut Graph<T>) -> Result<(TensorId, TensorId)> {
        Ok((
            embed_loss(g, self.gathered, self.rows)?,
            commit_loss(g, self.gathered, self.rows)?,
        ))
    }
}

/// Nearest-entry quantization of `features` (`[dim, ...]`, channel-major)
/// against `book` (`[n_entries, dim]`).
pub fn quantize<T: Scalar>(
    g: &mut Graph<T>,
    book: TensorId,
    features: TensorId,
    opts: &QuantizeOpts<T>,
) -> Result<QuantizationResult> {
    let bshape = g.shape(book);
    if bshape.len() != 2 {
        return Err(Error::Dim(format!(
            "codebook must be [n_entries, dim], got {bshape:?}"
        )));
    }
    let (n, d) = (bshape[0], bshape[1]);
    let fshape = g.shape(features).to_vec();
    if fshape.is_empty() || fshape[0] != d {
        return Err(Error::Dim(format!(
            "feature channel dim {:?} does not match codebook dim {d}",
            fshape.first()
        )));
    }
    let positions = g.value(features).rest();
    if positions == 0 {
        return Err(Error::Dim("quantize on empty feature map".into()));
    }
    if n == 0 {
        return Err(Error::Arg("quantize against an empty codebook".into()));
    }

    // [d, P] -> [P, d]
    let flat = g.reshape(features, vec![d, positions])?;
    let rows = g.transpose2d(flat)?;
    let distances = g.pairwise_sqdist(rows, book)?;

    let ddata = g.data(distances);
    let mut indices = Vec::with_capacity(positions);
    for p in 0..positions {
        let row = &ddata[p * n..(p + 1) * n];
        let mut best = 0usize;
        for (e, &v) in row.iter().enumerate() {
            if v < row[best] {
                best = e;
            }
        }
        indices.push(best);
    }

    let gathered = g.gather_rows(book, indices.clone())?;
    let st = g.straight_through(rows, gathered)?;
    let st_t = g.transpose2d(st)?;
    let quantized = g.reshape(st_t, fshape)?;

    let probabilities = if opts.with_probabilities {
        Some(distances_to_probabilities(g, distances, opts.temperature)?)
    } else {
        None
    };

    Ok(QuantizationResult {
        indices,
        quantized,
        rows,
        gathered,
        distances,
        probabilities,
    })
}

/// Row softmax of `-distances / temperature`.
pub fn distances_to_probabilities<T: Scalar>(
    g: &mut Graph<T>,
    distances: TensorId,
    temperature: T,
) -> Result<TensorId> {
    if temperature <= T::zero() {
        return Err(Error::Arg("temperature must be positive".into()));
    }
    let scaled = g.scale(distances, -T::one() / temperature);
    g.softmax(scaled, 1)
}

/// `‖sg[quantized] − features‖²` (mean over elements): trains the features,
/// leaves the codebook untouched.
pub fn embed_loss<T: Scalar>(
    g: &mut Graph<T>,
    quantized: TensorId,
    features: TensorId,
) -> Result<TensorId> {
    let sgq = g.stop_gradient(quantized);
    let diff = g.sub(sgq, features)?;
    let sq = g.mul(diff, diff)?;
    g.mean_all(sq)
}

/// `‖quantized − sg[features]‖²` (mean over elements): trains the codebook
/// entries selected by the call, leaves the features untouched.
pub fn commit_loss<T: Scalar>(
    g: &mut Graph<T>,
    quantized: TensorId,
    features: TensorId,
) -> Result<TensorId> {
    let sgf = g.stop_gradient(features);
    let diff = g.sub(quantized, sgf)?;
    let sq = g.mul(diff, diff)?;
    g.mean_all(sq)
}

/// Result of [`quantize_topk`].
#[derive(Debug, Clone)]
pub struct TopKResult {
    /// Selected entry vectors as columns: `[dim, k]`.
    pub selected: TensorId,
    /// Codebook rows backing each column, in rank order.
    pub entry_indices: Vec<usize>,
    /// The underlying quantization call (distances/probabilities included).
    pub quant: QuantizationResult,
}

/// Quantize `features`, rank codebook entries by assignment count (ties to
/// the lower index), and return the `k` highest-ranked entry vectors as the
/// columns of a `[dim, k]` matrix. When fewer than `k` entries are used the
/// ranking simply continues through the unused entries, so the result always
/// has exactly `k` columns.
pub fn quantize_topk<T: Scalar>(
    g: &mut Graph<T>,
    book: TensorId,
    features: TensorId,
    k: usize,
    opts: &QuantizeOpts<T>,
) -> Result<TopKResult> {
    let n = g.shape(book)[0];
    if k == 0 {
        return Err(Error::Arg("top-k selection needs k >= 1".into()));
    }
    if k > n {
        return Err(Error::Arg(format!(
            "top-k selection of {k} exceeds the {n} codebook entries"
        )));
    }
    let quant = quantize(g, book, features, opts)?;
    let mut counts = vec![0usize; n];
    for &i in &quant.indices {
        counts[i] += 1;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&e| (std::cmp::Reverse(counts[e]), e));
    order.truncate(k);

    let picked = g.gather_rows(book, order.clone())?; // [k, dim]
    let selected = g.transpose2d(picked)?; // [dim, k]
    Ok(TopKResult {
        selected,
        entry_indices: order,
        quant,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::FiniteDiff;
    use rand::Rng;

    /// Exhaustive nearest-neighbour scan over channel-major features,
    /// independent of the tape kernels.
    fn nearest_oracle(features: &[f64], d: usize, positions: usize, book: &[f64], n: usize) -> Vec<usize> {
        (0..positions)
            .map(|p| {
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for e in 0..n {
                    let mut acc = 0.0;
                    for k in 0..d {
                        let diff = features[k * positions + p] - book[e * d + k];
                        acc += diff * diff;
                    }
                    if acc < best_d {
                        best_d = acc;
                        best = e;
                    }
                }
                best
            })
            .collect()
    }

    #[test]
    fn quantize_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(d, n, positions) in &[(2usize, 7usize, 13usize), (4, 16, 25), (8, 32, 9)] {
            let features: Vec<f64> = (0..d * positions).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let book: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut g: Graph<f64> = Graph::new();
            let b = g.constant(vec![n, d], book.clone()).unwrap();
            let f = g.constant(vec![d, positions], features.clone()).unwrap();
            let q = quantize(&mut g, b, f, &QuantizeOpts::default()).unwrap();
            let expect = nearest_oracle(&features, d, positions, &book, n);
            assert_eq!(q.indices, expect, "d={d} n={n}");
            // Quantized values equal the winning codebook rows exactly.
            let qd = g.data(q.quantized);
            for p in 0..positions {
                for kk in 0..d {
                    assert_eq!(
                        qd[kk * positions + p].to_bits(),
                        book[expect[p] * d + kk].to_bits(),
                        "quantized value is a verbatim codebook entry"
                    );
                }
            }
        }
    }

    #[test]
    fn quantize_tie_breaks_to_lower_index() {
        let mut g: Graph<f64> = Graph::new();
        // Entries 0 and 1 are identical; entry 2 is closer to nothing.
        let b = g
            .constant(vec![3, 2], vec![1.0, 0.0, 1.0, 0.0, 5.0, 5.0])
            .unwrap();
        let f = g.constant(vec![2, 1], vec![1.1, 0.0]).unwrap();
        let q = quantize(&mut g, b, f, &QuantizeOpts::default()).unwrap();
        assert_eq!(q.indices, vec![0], "exact tie resolves to the lowest entry index");
    }

    #[test]
    fn quantize_rejects_dim_mismatch() {
        let mut g: Graph<f64> = Graph::new();
        let b = g.constant(vec![4, 3], vec![0.0; 12]).unwrap();
        let f = g.constant(vec![2, 5], vec![0.0; 10]).unwrap();
        assert!(quantize(&mut g, b, f, &QuantizeOpts::default()).is_err());
    }

    #[test]
    fn straight_through_identity_gradient_through_quantize() {
        let mut g: Graph<f64> = Graph::new();
        let b = g.constant(vec![4, 2], vec![0.0, 0.0, 1.0, 1.0, -1.0, 0.5, 2.0, -2.0]).unwrap();
        let f = g.param(vec![2, 3], vec![0.3, -0.8, 1.2, 0.9, 0.1, -1.5]).unwrap();
        let q = quantize(&mut g, b, f, &QuantizeOpts::default()).unwrap();
        let l = g.sum_all(q.quantized);
        g.backward(l).unwrap();
        assert_eq!(
            g.grad(f).unwrap(),
            &[1.0; 6],
            "gradient of sum(quantized) w.r.t. features is all-ones"
        );
    }

    #[test]
    fn embed_and_commit_known_value() {
        // One position, one entry: feature 0.5 vs entry 0.0 gives 0.25.
        let mut g: Graph<f64> = Graph::new();
        let b = g.constant(vec![1, 1], vec![0.0]).unwrap();
        let f = g.constant(vec![1, 1], vec![0.5]).unwrap();
        let q = quantize(&mut g, b, f, &QuantizeOpts::default()).unwrap();
        let (embed, commit) = q.vq_losses(&mut g).unwrap();
        assert_eq!(g.scalar_value(embed), 0.25);
        assert_eq!(g.scalar_value(commit), 0.25);
    }

    #[test]
    fn embed_gradient_reaches_features_only() {
        let fd = FiniteDiff::default();
        // Entries well separated from features so a 1e-5 nudge cannot flip
        // any assignment. Only the features enter the probe: the codebook is
        // behind a stop-gradient, so its numeric sensitivity is intentionally
        // not matched by the (zero) analytic gradient.
        let features = vec![0.3, -0.8, 1.2, 0.9, 0.1, -1.5];
        let book = vec![0.0, 0.0, 1.0, 1.0, -1.0, 0.5, 2.0, -2.0];
        let rep = fd
            .check(&[(vec![2, 3], features.clone())], |g, ids| {
                let b = g.constant(vec![4, 2], book.clone())?;
                let q = quantize(g, b, ids[0], &QuantizeOpts::default())?;
                embed_loss(g, q.gathered, q.rows)
            })
            .unwrap();
        assert!(rep.pass(), "embed gradcheck: {:?}", rep.failures);

        // Direct zero-sensitivity statement for the codebook.
        let mut g: Graph<f64> = Graph::new();
        let b = g.param(vec![4, 2], book).unwrap();
        let f = g.param(vec![2, 3], features).unwrap();
        let q = quantize(&mut g, b, f, &QuantizeOpts::default()).unwrap();
        let l = embed_loss(&mut g, q.gathered, q.rows).unwrap();
        g.backward(l).unwrap();
        assert!(
            g.grad(b).map_or(true, |gb| gb.iter().all(|&v| v == 0.0)),
            "embed loss does not move codebook entries"
        );
        assert!(
            g.grad(f).unwrap().iter().any(|&v| v != 0.0),
            "embed loss moves the features"
        );
    }

    #[test]
    fn commit_gradient_reaches_codebook_only() {
        let features = vec![0.3, -0.8, 1.2, 0.9, 0.1, -1.5];
        let book = vec![0.0, 0.0, 1.0, 1.0, -1.0, 0.5, 2.0, -2.0];
        // Mirror image of the embed check: probe the codebook only, since the
        // features sit behind the stop-gradient here.
        let fd = FiniteDiff::default();
        let rep = fd
            .check(&[(vec![4, 2], book.clone())], |g, ids| {
                let f = g.constant(vec![2, 3], features.clone())?;
                let q = quantize(g, ids[0], f, &QuantizeOpts::default())?;
                commit_loss(g, q.gathered, q.rows)
            })
            .unwrap();
        assert!(rep.pass(), "commit gradcheck: {:?}", rep.failures);

        let mut g: Graph<f64> = Graph::new();
        let b = g.param(vec![4, 2], book).unwrap();
        let f = g.param(vec![2, 3], features).unwrap();
        let q = quantize(&mut g, b, f, &QuantizeOpts::default()).unwrap();
        let l = commit_loss(&mut g, q.gathered, q.rows).unwrap();
        g.backward(l).unwrap();
        assert!(
            g.grad(f).map_or(true, |gf| gf.iter().all(|&v| v == 0.0)),
            "commit loss does not move the features"
        );
        assert!(
            g.grad(b).unwrap().iter().any(|&v| v != 0.0),
            "commit loss moves the selected codebook entries"
        );
    }

    #[test]
    fn probabilities_are_row_stochastic_and_sharpen_with_temperature() {
        let mut g: Graph<f64> = Graph::new();
        let d = g
            .constant(vec![2, 3], vec![0.1, 0.5, 2.0, 1.0, 1.0, 1.0])
            .unwrap();
        let p_hot = distances_to_probabilities(&mut g, d, 1.0).unwrap();
        let p_cold = distances_to_probabilities(&mut g, d, 0.05).unwrap();
        let hot = g.data(p_hot).to_vec();
        let cold = g.data(p_cold).to_vec();
        for row in 0..2 {
            let s: f64 = hot[row * 3..(row + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row sums to one");
        }
        assert!(
            cold[0] > hot[0],
            "lower temperature concentrates mass on the nearest entry"
        );
        // Uniform distances give exactly uniform probabilities.
        assert!((hot[3] - 1.0 / 3.0).abs() < 1e-12 && (hot[5] - 1.0 / 3.0).abs() < 1e-12);
        assert!(distances_to_probabilities(&mut g, d, 0.0).is_err());
        assert!(distances_to_probabilities(&mut g, d, -1.0).is_err());
    }

    #[test]
    fn mix_preserves_rows_and_never_hurts_distance() {
        let a = init_codebook(16, 4, 1, 1, "set_a").unwrap();
        let b = init_codebook(16, 4, 2, 1, "set_b").unwrap();
        let mixed = mix_codebooks(&[&a, &b]).unwrap();
        assert_eq!(mixed.n_entries(), 32);
        assert_eq!(mixed.vectors[..a.vectors.len()], a.vectors[..]);
        assert_eq!(mixed.vectors[a.vectors.len()..], b.vectors[..]);
        assert_eq!(mixed.sources, vec![("set_a".into(), 16), ("set_b".into(), 16)]);

        // Quantizing against the mixture reaches entries at least as close
        // as either constituent alone.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let features: Vec<f64> = (0..4 * 10).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let min_d = |book: &[f32], n: usize| -> Vec<f64> {
            (0..10)
                .map(|p| {
                    (0..n)
                        .map(|e| {
                            (0..4)
                                .map(|k| {
                                    let diff = features[k * 10 + p] - book[e * 4 + k] as f64;
                                    diff * diff
                                })
                                .sum::<f64>()
                        })
                        .fold(f64::INFINITY, f64::min)
                })
                .collect()
        };
        let da = min_d(&a.vectors, 16);
        let db = min_d(&b.vectors, 16);
        let dm = min_d(&mixed.vectors, 32);
        for p in 0..10 {
            assert!(
                dm[p] <= da[p] + 1e-12 && dm[p] <= db[p] + 1e-12,
                "mixture distance never exceeds a constituent's"
            );
        }

        let wrong_scale = init_codebook(8, 4, 3, 2, "set_c").unwrap();
        assert!(mix_codebooks(&[&a, &wrong_scale]).is_err(), "scale mismatch rejected");
    }

    #[test]
    fn topk_ranking_and_padding_rules() {
        let mut g: Graph<f64> = Graph::new();
        // 8 entries in 1-D so assignments are easy to control.
        let book_rows: Vec<f64> = (0..8).map(|e| e as f64).collect();
        let b = g.constant(vec![8, 1], book_rows).unwrap();
        // Features: three near 5.0, two near 2.0, one near 7.0.
        let f = g
            .constant(vec![1, 6], vec![5.1, 4.9, 5.0, 2.1, 1.9, 7.1])
            .unwrap();
        let top = quantize_topk(&mut g, b, f, 5, &QuantizeOpts::default()).unwrap();
        // Counts: entry5=3, entry2=2, entry7=1, rest 0. Ranking continues
        // through unused entries by ascending index: 0 then 1.
        assert_eq!(top.entry_indices, vec![5, 2, 7, 0, 1]);
        assert_eq!(g.shape(top.selected), &[1, 5]);
        let sel = g.data(top.selected);
        assert_eq!(sel, &[5.0, 2.0, 7.0, 0.0, 1.0], "columns are codebook entries in rank order");

        assert!(quantize_topk(&mut g, b, f, 0, &QuantizeOpts::default()).is_err());
        assert!(quantize_topk(&mut g, b, f, 9, &QuantizeOpts::default()).is_err());
    }

    #[test]
    fn topk_count_ties_prefer_lower_entry_index() {
        let mut g: Graph<f64> = Graph::new();
        let b = g.constant(vec![4, 1], vec![0.0, 10.0, 20.0, 30.0]).unwrap();
        // One assignment each to entries 3 and 1.
        let f = g.constant(vec![1, 2], vec![29.0, 11.0]).unwrap();
        let top = quantize_topk(&mut g, b, f, 3, &QuantizeOpts::default()).unwrap();
        assert_eq!(top.entry_indices, vec![1, 3, 0], "count ties fall back to index order");
    }

    #[test]
    fn init_codebook_is_seed_deterministic_with_sane_moments() {
        let a = init_codebook(512, 8, 42, 1, "bench").unwrap();
        let b = init_codebook(512, 8, 42, 1, "bench").unwrap();
        assert_eq!(a.vectors, b.vectors, "same seed reproduces the same book");
        let c = init_codebook(512, 8, 43, 1, "bench").unwrap();
        assert_ne!(a.vectors, c.vectors, "different seed differs");
        let mean: f64 = a.vectors.iter().map(|&v| v as f64).sum::<f64>() / a.vectors.len() as f64;
        assert!(mean.abs() < 0.1, "sample mean {mean} within 0.1 of zero");
        let var: f64 = a.vectors.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>()
            / a.vectors.len() as f64;
        assert!((var - 1.0).abs() < 0.15, "sample variance {var} near one");
    }
}
