use super::{checked_numel, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Base clamp used when differentiating `x^a` near `x = 0` so adjoints stay
/// finite on the closed interval the gamma correction operates on.
const POW_BASE_CLAMP: f64 = 1e-6;

/// Probabilities below this are treated as zero inside the entropy sum
/// (`0·ln 0 := 0`), and the logarithm is clamped to match.
const ENTROPY_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, T),
    AddScalar(TensorId, T),
    MatMul {
        a: TensorId,
        b: TensorId,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose2d(TensorId),
    Reshape(TensorId),
    Conv2d {
        input: TensorId,
        kernel: TensorId,
        stride: usize,
        padding: usize,
    },
    AddChannelBias {
        x: TensorId,
        bias: TensorId,
    },
    MulChannel {
        x: TensorId,
        scale: TensorId,
    },
    PowChannel {
        x: TensorId,
        exponent: TensorId,
    },
    AvgPoolSpatial(TensorId),
    UpsampleNearest {
        x: TensorId,
        factor: usize,
    },
    Softmax {
        x: TensorId,
        axis: usize,
    },
    Gelu(TensorId),
    Log1p(TensorId),
    MeanAll(TensorId),
    SumAll(TensorId),
    StopGradient(#[allow(dead_code)] TensorId),
    StraightThrough {
        features: TensorId,
        /// Kept for graph diagnostics; the backward pass ignores the values.
        #[allow(dead_code)]
        values: TensorId,
    },
    GatherRows {
        matrix: TensorId,
        indices: Vec<usize>,
    },
    PairwiseSqDist {
        rows: TensorId,
        book: TensorId,
    },
    RowEntropySum(TensorId),
    ConcatChannels(Vec<TensorId>),
    SliceChannels {
        x: TensorId,
        start: usize,
        /// Kept for graph diagnostics; the output shape already carries it.
        #[allow(dead_code)]
        len: usize,
    },
    MinMaxNormalize(TensorId),
    Charbonnier {
        a: TensorId,
        b: TensorId,
        eps: T,
    },
}

struct Node<T> {
    t: Tensor<T>,
    op: Op<T>,
}

/// Dynamic reverse-mode tape.
///
/// Operations execute eagerly (shapes are validated and values computed when
/// an op is recorded) and [`Graph::backward`] replays the tape in reverse,
/// accumulating adjoints into every node that requires gradients. A fresh
/// graph is built per training step; persistent parameters live outside the
/// tape and re-enter as leaves each step.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    macs: u64,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            macs: 0,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Multiply-accumulate operations executed by forward matmul, convolution
    /// and pairwise-distance kernels since the graph was created.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    fn push(&mut self, t: Tensor<T>, op: Op<T>) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { t, op });
        id
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].t.requires_grad
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id.0].t
    }

    pub fn data(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].t.data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].t.shape
    }

    /// Gradient of the most recent `backward` target with respect to `id`,
    /// if the node participates in gradient computation.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.nodes[id.0].t.grad.as_deref()
    }

    /// Value of a scalar (single-element) node.
    pub fn scalar_value(&self, id: TensorId) -> T {
        debug_assert_eq!(self.nodes[id.0].t.len(), 1);
        self.nodes[id.0].t.data[0]
    }

    /// Insert a trainable leaf.
    pub fn param(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<TensorId> {
        let mut t = Tensor::new(shape, data)?;
        t.requires_grad = true;
        Ok(self.push(t, Op::Leaf))
    }

    /// Insert a non-trainable leaf.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<TensorId> {
        Ok(self.push(Tensor::new(shape, data)?, Op::Leaf))
    }

    pub fn constant_scalar(&mut self, v: T) -> TensorId {
        self.push(Tensor::scalar(v), Op::Leaf)
    }

    // ---- elementwise ----

    fn check_same_shape(&self, a: TensorId, b: TensorId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape(a, b, "add")?;
        let data = self.data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let mut t = Tensor::new(self.shape(a).to_vec(), data)?;
        t.requires_grad = self.requires(a) || self.requires(b);
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape(a, b, "sub")?;
        let data = self.data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let mut t = Tensor::new(self.shape(a).to_vec(), data)?;
        t.requires_grad = self.requires(a) || self.requires(b);
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape(a, b, "mul")?;
        let data = self.data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let mut t = Tensor::new(self.shape(a).to_vec(), data)?;
        t.requires_grad = self.requires(a) || self.requires(b);
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: TensorId, c: T) -> TensorId {
        let data = self.data(a).iter().map(|&x| x * c).collect();
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data,
            requires_grad: self.requires(a),
            grad: None,
        };
        self.push(t, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: TensorId, c: T) -> TensorId {
        let data = self.data(a).iter().map(|&x| x + c).collect();
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data,
            requires_grad: self.requires(a),
            grad: None,
        };
        self.push(t, Op::AddScalar(a, c))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Dim(format!(
                "matmul expects two matrices, got {sa:?} and {sb:?}"
            )));
        }
        let (m, k, k2, n) = (sa[0], sa[1], sb[0], sb[1]);
        if k != k2 {
            return Err(Error::Dim(format!(
                "matmul inner dimensions differ: {sa:?} vs {sb:?}"
            )));
        }
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for kk in 0..k {
                let aik = da[i * k + kk];
                let brow = &db[kk * n..(kk + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] = orow[j] + aik * brow[j];
                }
            }
        }
        self.macs += (m * k * n) as u64;
        let mut t = Tensor::new(vec![m, n], out)?;
        t.requires_grad = self.requires(a) || self.requires(b);
        Ok(self.push(t, Op::MatMul { a, b, m, k, n }))
    }

    pub fn transpose2d(&mut self, a: TensorId) -> Result<TensorId> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Dim(format!("transpose2d expects a matrix, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let d = self.data(a);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let mut t = Tensor::new(vec![n, m], out)?;
        t.requires_grad = self.requires(a);
        Ok(self.push(t, Op::Transpose2d(a)))
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let n = checked_numel(&shape)?;
        if n != self.data(a).len() {
            return Err(Error::Dim(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(a),
                shape
            )));
        }
        let mut t = Tensor::new(shape, self.data(a).to_vec())?;
        t.requires_grad = self.requires(a);
        Ok(self.push(t, Op::Reshape(a)))
    }

    // ---- convolution and spatial ops ----

    /// 2-D convolution with zero padding: input `[C_in,H,W]`, kernel
    /// `[C_out,C_in,k,k]`, `k ∈ {1,3}`.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let (si, sk) = (self.shape(input), self.shape(kernel));
        if si.len() != 3 || sk.len() != 4 {
            return Err(Error::Dim(format!(
                "conv2d expects [C,H,W] input and [Co,Ci,k,k] kernel, got {si:?} and {sk:?}"
            )));
        }
        let (ci, h, w) = (si[0], si[1], si[2]);
        let (co, cik, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        if ci != cik {
            return Err(Error::Dim(format!(
                "conv2d input channels {ci} do not match kernel channels {cik}"
            )));
        }
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(Error::Dim(format!(
                "conv2d kernel must be square with k in {{1,3}}, got {kh}x{kw}"
            )));
        }
        if stride == 0 {
            return Err(Error::Arg("conv2d stride must be >= 1".into()));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::Dim(format!(
                "conv2d input {h}x{w} with padding {padding} smaller than kernel {kh}"
            )));
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        let (di, dk) = (self.data(input), self.data(kernel));
        let mut out = vec![T::zero(); co * ho * wo];
        for oc in 0..co {
            let oplane = &mut out[oc * ho * wo..(oc + 1) * ho * wo];
            for icc in 0..ci {
                let iplane = &di[icc * h * w..(icc + 1) * h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wgt = dk[((oc * ci + icc) * kh + ky) * kw + kx];
                        conv_taps(h, w, ho, wo, stride, padding, ky, kx, |o, i| {
                            oplane[o] = oplane[o] + wgt * iplane[i];
                        });
                    }
                }
            }
        }
        self.macs += (co * ho * wo * ci * kh * kw) as u64;
        let mut t = Tensor::new(vec![co, ho, wo], out)?;
        t.requires_grad = self.requires(input) || self.requires(kernel);
        Ok(self.push(t, Op::Conv2d { input, kernel, stride, padding }))
    }

    /// Mean over the spatial extent of each channel: `[C,H,W] -> [C,1,1]`.
    pub fn avg_pool_spatial(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(Error::Dim(format!("avg_pool_spatial expects [C,H,W], got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if h * w == 0 {
            return Err(Error::Dim("avg_pool_spatial on empty spatial extent".into()));
        }
        let d = self.data(x);
        let inv = T::from_f64(1.0 / (h * w) as f64);
        let out: Vec<T> = (0..c)
            .map(|cc| {
                let mut s = T::zero();
                for &v in &d[cc * h * w..(cc + 1) * h * w] {
                    s = s + v;
                }
                s * inv
            })
            .collect();
        let mut t = Tensor::new(vec![c, 1, 1], out)?;
        t.requires_grad = self.requires(x);
        Ok(self.push(t, Op::AvgPoolSpatial(x)))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: TensorId, factor: usize) -> Result<TensorId> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(Error::Dim(format!("upsample_nearest expects [C,H,W], got {s:?}")));
        }
        if factor == 0 {
            return Err(Error::Arg("upsample factor must be >= 1".into()));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h * factor, w * factor);
        let d = self.data(x);
        let mut out = vec![T::zero(); c * ho * wo];
        for cc in 0..c {
            for oy in 0..ho {
                let irow = cc * h * w + (oy / factor) * w;
                let orow = cc * ho * wo + oy * wo;
                for ox in 0..wo {
                    out[orow + ox] = d[irow + ox / factor];
                }
            }
        }
        let mut t = Tensor::new(vec![c, ho, wo], out)?;
        t.requires_grad = self.requires(x);
        Ok(self.push(t, Op::UpsampleNearest { x, factor }))
    }

    // ---- nonlinearities and normalization ----

    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::Dim(format!("softmax axis {axis} out of range for {s:?}")));
        }
        if s[axis] == 0 {
            return Err(Error::Dim("softmax over an empty axis".into()));
        }
        let n = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let outer: usize = s[..axis].iter().product();
        let d = self.data(x);
        let mut out = vec![T::zero(); d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut mx = d[base];
                for j in 1..n {
                    let v = d[base + j * inner];
                    if v > mx {
                        mx = v;
                    }
                }
                let mut sum = T::zero();
                for j in 0..n {
                    let e = (d[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    sum = sum + e;
                }
                let inv = T::one() / sum;
                for j in 0..n {
                    out[base + j * inner] = out[base + j * inner] * inv;
                }
            }
        }
        let mut t = Tensor::new(s, out)?;
        t.requires_grad = self.requires(x);
        Ok(self.push(t, Op::Softmax { x, axis }))
    }

    /// Exact GELU: `0.5·x·(1 + erf(x/√2))`.
    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let half = T::from_f64(0.5);
        let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let data = self.data(x)
            .iter()
            .map(|&v| half * v * (T::one() + (v * inv_sqrt2).erf()))
            .collect();
        let t = Tensor {
            shape: self.shape(x).to_vec(),
            data,
            requires_grad: self.requires(x),
            grad: None,
        };
        self.push(t, Op::Gelu(x))
    }

    /// `ln(1 + x)`; domain `x > -1`.
    pub fn log1p(&mut self, x: TensorId) -> Result<TensorId> {
        let neg_one = -T::one();
        if self.data(x).iter().any(|&v| v <= neg_one) {
            return Err(Error::Domain("log1p requires x > -1".into()));
        }
        let data = self.data(x).iter().map(|&v| v.ln_1p()).collect();
        let t = Tensor {
            shape: self.shape(x).to_vec(),
            data,
            requires_grad: self.requires(x),
            grad: None,
        };
        Ok(self.push(t, Op::Log1p(x)))
    }

    /// Min-max normalize the whole tensor to `[0,1]`. A constant tensor
    /// (max == min) maps to all zeros with zero gradient.
    pub fn minmax_normalize(&mut self, x: TensorId) -> Result<TensorId> {
        let d = self.data(x);
        if d.is_empty() {
            return Err(Error::Dim("minmax_normalize on an empty tensor".into()));
        }
        let mut mn = d[0];
        let mut mx = d[0];
        for &v in d {
            if v < mn {
                mn = v;
            }
            if v > mx {
                mx = v;
            }
        }
        let data = if mx == mn {
            vec![T::zero(); d.len()]
        } else {
            let inv = T::one() / (mx - mn);
            d.iter().map(|&v| (v - mn) * inv).collect()
        };
        let t = Tensor {
            shape: self.shape(x).to_vec(),
            data,
            requires_grad: self.requires(x),
            grad: None,
        };
        Ok(self.push(t, Op::MinMaxNormalize(x)))
    }

    // ---- per-channel broadcasts (leading axis) ----

    fn check_channel_vec(&self, x: TensorId, v: TensorId, what: &str) -> Result<(usize, usize)> {
        let sx = self.shape(x);
        let sv = self.shape(v);
        if sx.is_empty() {
            return Err(Error::Dim(format!("{what}: scalar input has no channel axis")));
        }
        if sv.len() != 1 || sv[0] != sx[0] {
            return Err(Error::Dim(format!(
                "{what}: expected channel vector [{}], got {sv:?}",
                sx[0]
            )));
        }
        Ok((sx[0], self.value(x).rest()))
    }

    pub fn add_channel_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (c, rest) = self.check_channel_vec(x, bias, "add_channel_bias")?;
        let (dx, db) = (self.data(x), self.data(bias));
        let mut out = vec![T::zero(); dx.len()];
        for cc in 0..c {
            let b = db[cc];
            for r in 0..rest {
                out[cc * rest + r] = dx[cc * rest + r] + b;
            }
        }
        let mut t = Tensor::new(self.shape(x).to_vec(), out)?;
        t.requires_grad = self.requires(x) || self.requires(bias);
        Ok(self.push(t, Op::AddChannelBias { x, bias }))
    }

    pub fn mul_channel(&mut self, x: TensorId, scale: TensorId) -> Result<TensorId> {
        let (c, rest) = self.check_channel_vec(x, scale, "mul_channel")?;
        let (dx, ds) = (self.data(x), self.data(scale));
        let mut out = vec![T::zero(); dx.len()];
        for cc in 0..c {
            let s = ds[cc];
            for r in 0..rest {
                out[cc * rest + r] = dx[cc * rest + r] * s;
            }
        }
        let mut t = Tensor::new(self.shape(x).to_vec(), out)?;
        t.requires_grad = self.requires(x) || self.requires(scale);
        Ok(self.push(t, Op::MulChannel { x, scale }))
    }

    /// Per-channel power `x ^ e_c` for non-negative `x`. Backward clamps the
    /// base at 1e-6 so adjoints stay finite at `x = 0`.
    pub fn pow_channel(&mut self, x: TensorId, exponent: TensorId) -> Result<TensorId> {
        let (c, rest) = self.check_channel_vec(x, exponent, "pow_channel")?;
        if self.data(x).iter().any(|&v| v < T::zero()) {
            return Err(Error::Domain("pow_channel requires non-negative base".into()));
        }
        let (dx, de) = (self.data(x), self.data(exponent));
        let mut out = vec![T::zero(); dx.len()];
        for cc in 0..c {
            let e = de[cc];
            for r in 0..rest {
                out[cc * rest + r] = dx[cc * rest + r].powf(e);
            }
        }
        let mut t = Tensor::new(self.shape(x).to_vec(), out)?;
        t.requires_grad = self.requires(x) || self.requires(exponent);
        Ok(self.push(t, Op::PowChannel { x, exponent }))
    }

    // ---- reductions and losses ----

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let mut s = T::zero();
        for &v in self.data(x) {
            s = s + v;
        }
        let t = Tensor {
            shape: vec![],
            data: vec![s],
            requires_grad: self.requires(x),
            grad: None,
        };
        self.push(t, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: TensorId) -> Result<TensorId> {
        let n = self.data(x).len();
        if n == 0 {
            return Err(Error::Dim("mean_all on an empty tensor".into()));
        }
        let mut s = T::zero();
        for &v in self.data(x) {
            s = s + v;
        }
        let t = Tensor {
            shape: vec![],
            data: vec![s / T::from_f64(n as f64)],
            requires_grad: self.requires(x),
            grad: None,
        };
        Ok(self.push(t, Op::MeanAll(x)))
    }

    /// Charbonnier penalty `mean(sqrt((a-b)^2 + eps))`.
    pub fn charbonnier(&mut self, a: TensorId, b: TensorId, eps: T) -> Result<TensorId> {
        self.check_same_shape(a, b, "charbonnier")?;
        if eps <= T::zero() {
            return Err(Error::Arg("charbonnier eps must be positive".into()));
        }
        let n = self.data(a).len();
        if n == 0 {
            return Err(Error::Dim("charbonnier on empty tensors".into()));
        }
        let mut s = T::zero();
        for (&x, &y) in self.data(a).iter().zip(self.data(b)) {
            let d = x - y;
            s = s + (d * d + eps).sqrt();
        }
        let t = Tensor {
            shape: vec![],
            data: vec![s / T::from_f64(n as f64)],
            requires_grad: self.requires(a) || self.requires(b),
            grad: None,
        };
        Ok(self.push(t, Op::Charbonnier { a, b, eps }))
    }

    /// Sum of Shannon entropies of the rows of a probability matrix,
    /// `-Σ_ij P_ij ln P_ij`, with `0·ln 0 := 0` via a 1e-12 clamp.
    pub fn row_entropy_sum(&mut self, probs: TensorId) -> Result<TensorId> {
        let s = self.shape(probs);
        if s.len() != 2 {
            return Err(Error::Dim(format!("row_entropy_sum expects a matrix, got {s:?}")));
        }
        let clamp = T::from_f64(ENTROPY_CLAMP);
        let mut total = T::zero();
        for &p in self.data(probs) {
            let lp = if p < clamp { clamp.ln() } else { p.ln() };
            total = total - p * lp;
        }
        let t = Tensor {
            shape: vec![],
            data: vec![total],
            requires_grad: self.requires(probs),
            grad: None,
        };
        Ok(self.push(t, Op::RowEntropySum(probs)))
    }

    // ---- graph rewiring ops ----

    /// Detach: same values, no gradient flow.
    pub fn stop_gradient(&mut self, x: TensorId) -> TensorId {
        let t = Tensor {
            shape: self.shape(x).to_vec(),
            data: self.data(x).to_vec(),
            requires_grad: false,
            grad: None,
        };
        self.push(t, Op::StopGradient(x))
    }

    /// Straight-through estimator: forward takes `values`, backward routes
    /// adjoints to `features` unchanged. `values` receives no gradient.
    pub fn straight_through(&mut self, features: TensorId, values: TensorId) -> Result<TensorId> {
        self.check_same_shape(features, values, "straight_through")?;
        let t = Tensor {
            shape: self.shape(values).to_vec(),
            data: self.data(values).to_vec(),
            requires_grad: self.requires(features),
            grad: None,
        };
        Ok(self.push(t, Op::StraightThrough { features, values }))
    }

    /// Gather rows of a matrix: output row `p` is `matrix[indices[p]]`.
    /// Backward scatter-adds adjoints into the gathered rows.
    pub fn gather_rows(&mut self, matrix: TensorId, indices: Vec<usize>) -> Result<TensorId> {
        let s = self.shape(matrix);
        if s.len() != 2 {
            return Err(Error::Dim(format!("gather_rows expects a matrix, got {s:?}")));
        }
        let (n, d) = (s[0], s[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Arg(format!("gather_rows index {bad} out of range 0..{n}")));
        }
        let dm = self.data(matrix);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in &indices {
            out.extend_from_slice(&dm[i * d..(i + 1) * d]);
        }
        let mut t = Tensor::new(vec![indices.len(), d], out)?;
        t.requires_grad = self.requires(matrix);
        Ok(self.push(t, Op::GatherRows { matrix, indices }))
    }

    /// Squared-L2 distance between every row of `rows` `[P,d]` and every row
    /// of `book` `[n,d]`, giving `[P,n]`.
    pub fn pairwise_sqdist(&mut self, rows: TensorId, book: TensorId) -> Result<TensorId> {
        let (sr, sb) = (self.shape(rows), self.shape(book));
        if sr.len() != 2 || sb.len() != 2 {
            return Err(Error::Dim(format!(
                "pairwise_sqdist expects matrices, got {sr:?} and {sb:?}"
            )));
        }
        if sr[1] != sb[1] {
            return Err(Error::Dim(format!(
                "pairwise_sqdist dims differ: {} vs {}",
                sr[1], sb[1]
            )));
        }
        let (p, d, n) = (sr[0], sr[1], sb[0]);
        let (dr, db) = (self.data(rows), self.data(book));
        let mut out = vec![T::zero(); p * n];
        for i in 0..p {
            let r = &dr[i * d..(i + 1) * d];
            let orow = &mut out[i * n..(i + 1) * n];
            for e in 0..n {
                let b = &db[e * d..(e + 1) * d];
                let mut s = T::zero();
                for k in 0..d {
                    let diff = r[k] - b[k];
                    s = s + diff * diff;
                }
                orow[e] = s;
            }
        }
        self.macs += (p * n * d) as u64;
        let mut t = Tensor::new(vec![p, n], out)?;
        t.requires_grad = self.requires(rows) || self.requires(book);
        Ok(self.push(t, Op::PairwiseSqDist { rows, book }))
    }

    // ---- channel-axis concat and slice ----

    /// Concatenate along the leading (channel) axis. All inputs must share
    /// trailing extents; zero-channel inputs are allowed.
    pub fn concat_channels(&mut self, inputs: &[TensorId]) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(Error::Arg("concat_channels needs at least one input".into()));
        }
        let tail = self.shape(inputs[0])[1..].to_vec();
        let mut channels = 0usize;
        for &id in inputs {
            let s = self.shape(id);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::Dim(format!(
                    "concat_channels trailing dims differ: {:?} vs [.., {:?}]",
                    s, tail
                )));
            }
            channels += s[0];
        }
        let mut data = Vec::with_capacity(channels * tail.iter().product::<usize>());
        for &id in inputs {
            data.extend_from_slice(self.data(id));
        }
        let mut shape = vec![channels];
        shape.extend_from_slice(&tail);
        let mut t = Tensor::new(shape, data)?;
        t.requires_grad = inputs.iter().any(|&id| self.requires(id));
        Ok(self.push(t, Op::ConcatChannels(inputs.to_vec())))
    }

    /// Slice `len` channels starting at `start` along the leading axis.
    pub fn slice_channels(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let s = self.shape(x);
        if s.is_empty() {
            return Err(Error::Dim("slice_channels on a scalar".into()));
        }
        if start + len > s[0] {
            return Err(Error::Dim(format!(
                "slice_channels {start}..{} out of range for {} channels",
                start + len,
                s[0]
            )));
        }
        let rest = self.value(x).rest();
        let data = self.data(x)[start * rest..(start + len) * rest].to_vec();
        let mut shape = s.to_vec();
        shape[0] = len;
        let mut t = Tensor::new(shape, data)?;
        t.requires_grad = self.requires(x);
        Ok(self.push(t, Op::SliceChannels { x, start, len }))
    }

    // ---- backward ----

    /// Reverse-mode sweep from a scalar loss. Visits each recorded op at most
    /// once in reverse execution order; populates `grad` on every node that
    /// requires gradients and lies on a path to the loss.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].t.len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward target must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires(loss) {
            return Err(Error::Autodiff(
                "backward target is not connected to any gradient-requiring leaf".into(),
            ));
        }
        for node in &mut self.nodes {
            node.t.grad = None;
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads);
            self.nodes[i].t.grad = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        // Lazily materialize a parent's adjoint buffer, skipping parents that
        // do not require gradients.
        macro_rules! sink {
            ($id:expr) => {{
                let id: TensorId = $id;
                if self.requires(id) {
                    Some(
                        grads[id.0]
                            .get_or_insert_with(|| vec![T::zero(); self.nodes[id.0].t.len()]),
                    )
                } else {
                    None
                }
            }};
        }

        let out = &self.nodes[i].t;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = sink!(*a) {
                    for (s, &gv) in ga.iter_mut().zip(g) {
                        *s = *s + gv;
                    }
                }
                if let Some(gb) = sink!(*b) {
                    for (s, &gv) in gb.iter_mut().zip(g) {
                        *s = *s + gv;
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = sink!(*a) {
                    for (s, &gv) in ga.iter_mut().zip(g) {
                        *s = *s + gv;
                    }
                }
                if let Some(gb) = sink!(*b) {
                    for (s, &gv) in gb.iter_mut().zip(g) {
                        *s = *s - gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (&self.nodes[a.0].t.data, &self.nodes[b.0].t.data);
                if let Some(ga) = sink!(*a) {
                    for k in 0..g.len() {
                        ga[k] = ga[k] + g[k] * db[k];
                    }
                }
                if let Some(gb) = sink!(*b) {
                    for k in 0..g.len() {
                        gb[k] = gb[k] + g[k] * da[k];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = sink!(*a) {
                    for k in 0..g.len() {
                        ga[k] = ga[k] + g[k] * *c;
                    }
                }
            }
            Op::AddScalar(a, _) => {
                if let Some(ga) = sink!(*a) {
                    for (s, &gv) in ga.iter_mut().zip(g) {
                        *s = *s + gv;
                    }
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, kk, n) = (*m, *k, *n);
                let (da, db) = (&self.nodes[a.0].t.data, &self.nodes[b.0].t.data);
                if let Some(ga) = sink!(*a) {
                    // dA = g · Bᵀ
                    for i2 in 0..m {
                        for k2 in 0..kk {
                            let mut s = T::zero();
                            let grow = &g[i2 * n..(i2 + 1) * n];
                            let brow = &db[k2 * n..(k2 + 1) * n];
                            for j in 0..n {
                                s = s + grow[j] * brow[j];
                            }
                            ga[i2 * kk + k2] = ga[i2 * kk + k2] + s;
                        }
                    }
                }
                if let Some(gb) = sink!(*b) {
                    // dB = Aᵀ · g
                    for i2 in 0..m {
                        let grow = &g[i2 * n..(i2 + 1) * n];
                        for k2 in 0..kk {
                            let aik = da[i2 * kk + k2];
                            let brow = &mut gb[k2 * n..(k2 + 1) * n];
                            for j in 0..n {
                                brow[j] = brow[j] + aik * grow[j];
                            }
                        }
                    }
                }
            }
            Op::Transpose2d(a) => {
                if let Some(ga) = sink!(*a) {
                    let (n, m) = (out.shape[0], out.shape[1]);
                    for i2 in 0..n {
                        for j in 0..m {
                            ga[j * n + i2] = ga[j * n + i2] + g[i2 * m + j];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = sink!(*a) {
                    for (s, &gv) in ga.iter_mut().zip(g) {
                        *s = *s + gv;
                    }
                }
            }
            Op::Conv2d { input, kernel, stride, padding } => {
                let si = &self.nodes[input.0].t.shape;
                let sk = &self.nodes[kernel.0].t.shape;
                let (ci, h, w) = (si[0], si[1], si[2]);
                let (co, kh, kw) = (sk[0], sk[2], sk[3]);
                let (ho, wo) = (out.shape[1], out.shape[2]);
                let di = &self.nodes[input.0].t.data;
                let dk = &self.nodes[kernel.0].t.data;
                let want_in = self.requires(*input);
                let want_k = self.requires(*kernel);
                if want_in {
                    let gi = grads[input.0]
                        .get_or_insert_with(|| vec![T::zero(); ci * h * w]);
                    for oc in 0..co {
                        let gout = &g[oc * ho * wo..(oc + 1) * ho * wo];
                        for icc in 0..ci {
                            let gplane = &mut gi[icc * h * w..(icc + 1) * h * w];
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let wgt = dk[((oc * ci + icc) * kh + ky) * kw + kx];
                                    conv_taps(h, w, ho, wo, *stride, *padding, ky, kx, |o, i| {
                                        gplane[i] = gplane[i] + gout[o] * wgt;
                                    });
                                }
                            }
                        }
                    }
                }
                if want_k {
                    let gk = grads[kernel.0]
                        .get_or_insert_with(|| vec![T::zero(); co * ci * kh * kw]);
                    for oc in 0..co {
                        let gout = &g[oc * ho * wo..(oc + 1) * ho * wo];
                        for icc in 0..ci {
                            let iplane = &di[icc * h * w..(icc + 1) * h * w];
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let mut s = T::zero();
                                    conv_taps(h, w, ho, wo, *stride, *padding, ky, kx, |o, i| {
                                        s = s + gout[o] * iplane[i];
                                    });
                                    let idx = ((oc * ci + icc) * kh + ky) * kw + kx;
                                    gk[idx] = gk[idx] + s;
                                }
                            }
                        }
                    }
                }
            }
            Op::AddChannelBias { x, bias } => {
                let rest = self.nodes[x.0].t.rest();
                let c = self.nodes[x.0].t.shape[0];
                if let Some(gx) = sink!(*x) {
                    for (s, &gv) in gx.iter_mut().zip(g) {
                        *s = *s + gv;
                    }
                }
                if let Some(gb) = sink!(*bias) {
                    for cc in 0..c {
                        let mut s = T::zero();
                        for r in 0..rest {
                            s = s + g[cc * rest + r];
                        }
                        gb[cc] = gb[cc] + s;
                    }
                }
            }
            Op::MulChannel { x, scale } => {
                let rest = self.nodes[x.0].t.rest();
                let c = self.nodes[x.0].t.shape[0];
                let dx = &self.nodes[x.0].t.data;
                let ds = &self.nodes[scale.0].t.data;
                if let Some(gx) = sink!(*x) {
                    for cc in 0..c {
                        let s = ds[cc];
                        for r in 0..rest {
                            gx[cc * rest + r] = gx[cc * rest + r] + g[cc * rest + r] * s;
                        }
                    }
                }
                if let Some(gs) = sink!(*scale) {
                    for cc in 0..c {
                        let mut s = T::zero();
                        for r in 0..rest {
                            s = s + g[cc * rest + r] * dx[cc * rest + r];
                        }
                        gs[cc] = gs[cc] + s;
                    }
                }
            }
            Op::PowChannel { x, exponent } => {
                let rest = self.nodes[x.0].t.rest();
                let c = self.nodes[x.0].t.shape[0];
                let dx = &self.nodes[x.0].t.data;
                let de = &self.nodes[exponent.0].t.data;
                let clamp = T::from_f64(POW_BASE_CLAMP);
                if let Some(gx) = sink!(*x) {
                    for cc in 0..c {
                        let e = de[cc];
                        for r in 0..rest {
                            let idx = cc * rest + r;
                            let xc = dx[idx].max(clamp);
                            gx[idx] = gx[idx] + g[idx] * e * out.data[idx] / xc;
                        }
                    }
                }
                if let Some(ge) = sink!(*exponent) {
                    for cc in 0..c {
                        let mut s = T::zero();
                        for r in 0..rest {
                            let idx = cc * rest + r;
                            let xc = dx[idx].max(clamp);
                            s = s + g[idx] * out.data[idx] * xc.ln();
                        }
                        ge[cc] = ge[cc] + s;
                    }
                }
            }
            Op::AvgPoolSpatial(x) => {
                if let Some(gx) = sink!(*x) {
                    let s = &self.nodes[x.0].t.shape;
                    let (c, hw) = (s[0], s[1] * s[2]);
                    let inv = T::from_f64(1.0 / hw as f64);
                    for cc in 0..c {
                        let gv = g[cc] * inv;
                        for r in 0..hw {
                            gx[cc * hw + r] = gx[cc * hw + r] + gv;
                        }
                    }
                }
            }
            Op::UpsampleNearest { x, factor } => {
                if let Some(gx) = sink!(*x) {
                    let s = &self.nodes[x.0].t.shape;
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let f = *factor;
                    let (ho, wo) = (h * f, w * f);
                    for cc in 0..c {
                        for oy in 0..ho {
                            let irow = cc * h * w + (oy / f) * w;
                            let grow = cc * ho * wo + oy * wo;
                            for ox in 0..wo {
                                gx[irow + ox / f] = gx[irow + ox / f] + g[grow + ox];
                            }
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if let Some(gx) = sink!(*x) {
                    let s = &out.shape;
                    let n = s[*axis];
                    let inner: usize = s[*axis + 1..].iter().product();
                    let outer: usize = s[..*axis].iter().product();
                    for o in 0..outer {
                        for i2 in 0..inner {
                            let base = o * n * inner + i2;
                            let mut dot = T::zero();
                            for j in 0..n {
                                let idx = base + j * inner;
                                dot = dot + g[idx] * out.data[idx];
                            }
                            for j in 0..n {
                                let idx = base + j * inner;
                                gx[idx] = gx[idx] + out.data[idx] * (g[idx] - dot);
                            }
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if let Some(gx) = sink!(*x) {
                    let dx = &self.nodes[x.0].t.data;
                    let half = T::from_f64(0.5);
                    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
                    let inv_sqrt_2pi = T::from_f64(0.3989422804014327);
                    for k in 0..g.len() {
                        let v = dx[k];
                        let cdf = half * (T::one() + (v * inv_sqrt2).erf());
                        let pdf = inv_sqrt_2pi * (-(v * v) * half).exp();
                        gx[k] = gx[k] + g[k] * (cdf + v * pdf);
                    }
                }
            }
            Op::Log1p(x) => {
                if let Some(gx) = sink!(*x) {
                    let dx = &self.nodes[x.0].t.data;
                    for k in 0..g.len() {
                        gx[k] = gx[k] + g[k] / (T::one() + dx[k]);
                    }
                }
            }
            Op::MinMaxNormalize(x) => {
                if let Some(gx) = sink!(*x) {
                    let dx = &self.nodes[x.0].t.data;
                    let mut amin = 0usize;
                    let mut amax = 0usize;
                    for (k, &v) in dx.iter().enumerate() {
                        if v < dx[amin] {
                            amin = k;
                        }
                        if v > dx[amax] {
                            amax = k;
                        }
                    }
                    let range = dx[amax] - dx[amin];
                    if range > T::zero() {
                        let inv = T::one() / range;
                        let mut gsum = T::zero();
                        let mut gy = T::zero();
                        for k in 0..g.len() {
                            gsum = gsum + g[k];
                            gy = gy + g[k] * out.data[k];
                        }
                        for k in 0..g.len() {
                            gx[k] = gx[k] + g[k] * inv;
                        }
                        gx[amin] = gx[amin] + (gy - gsum) * inv;
                        gx[amax] = gx[amax] - gy * inv;
                    }
                    // Degenerate (constant) input: output is identically zero
                    // with zero derivative.
                }
            }
            Op::SumAll(x) => {
                if let Some(gx) = sink!(*x) {
                    let gv = g[0];
                    for s in gx.iter_mut() {
                        *s = *s + gv;
                    }
                }
            }
            Op::MeanAll(x) => {
                if let Some(gx) = sink!(*x) {
                    let gv = g[0] * T::from_f64(1.0 / self.nodes[x.0].t.len() as f64);
                    for s in gx.iter_mut() {
                        *s = *s + gv;
                    }
                }
            }
            Op::Charbonnier { a, b, eps } => {
                let da = &self.nodes[a.0].t.data;
                let db = &self.nodes[b.0].t.data;
                let n = da.len();
                let gn = g[0] * T::from_f64(1.0 / n as f64);
                let want_a = self.requires(*a);
                let want_b = self.requires(*b);
                if want_a || want_b {
                    for k in 0..n {
                        let d = da[k] - db[k];
                        let dv = gn * d / (d * d + *eps).sqrt();
                        if want_a {
                            let ga = grads[a.0].get_or_insert_with(|| vec![T::zero(); n]);
                            ga[k] = ga[k] + dv;
                        }
                        if want_b {
                            let gb = grads[b.0].get_or_insert_with(|| vec![T::zero(); n]);
                            gb[k] = gb[k] - dv;
                        }
                    }
                }
            }
            Op::RowEntropySum(p) => {
                if let Some(gp) = sink!(*p) {
                    let dp = &self.nodes[p.0].t.data;
                    let clamp = T::from_f64(ENTROPY_CLAMP);
                    let g0 = g[0];
                    for k in 0..dp.len() {
                        let (lp, active) = if dp[k] < clamp {
                            (clamp.ln(), T::zero())
                        } else {
                            (dp[k].ln(), T::one())
                        };
                        gp[k] = gp[k] - g0 * (lp + active);
                    }
                }
            }
            Op::StopGradient(_) => {}
            Op::StraightThrough { features, .. } => {
                if let Some(gf) = sink!(*features) {
                    for (s, &gv) in gf.iter_mut().zip(g) {
                        *s = *s + gv;
                    }
                }
            }
            Op::GatherRows { matrix, indices } => {
                if let Some(gm) = sink!(*matrix) {
                    let d = self.nodes[matrix.0].t.shape[1];
                    for (p, &row) in indices.iter().enumerate() {
                        for k in 0..d {
                            gm[row * d + k] = gm[row * d + k] + g[p * d + k];
                        }
                    }
                }
            }
            Op::PairwiseSqDist { rows, book } => {
                let (p, d) = {
                    let s = &self.nodes[rows.0].t.shape;
                    (s[0], s[1])
                };
                let n = self.nodes[book.0].t.shape[0];
                let dr = &self.nodes[rows.0].t.data;
                let db = &self.nodes[book.0].t.data;
                let two = T::from_f64(2.0);
                let want_r = self.requires(*rows);
                let want_b = self.requires(*book);
                if want_r {
                    let gr = grads[rows.0].get_or_insert_with(|| vec![T::zero(); p * d]);
                    for i2 in 0..p {
                        for e in 0..n {
                            let gv = g[i2 * n + e];
                            if gv == T::zero() {
                                continue;
                            }
                            for k in 0..d {
                                let diff = dr[i2 * d + k] - db[e * d + k];
                                gr[i2 * d + k] = gr[i2 * d + k] + gv * two * diff;
                            }
                        }
                    }
                }
                if want_b {
                    let gb = grads[book.0].get_or_insert_with(|| vec![T::zero(); n * d]);
                    for i2 in 0..p {
                        for e in 0..n {
                            let gv = g[i2 * n + e];
                            if gv == T::zero() {
                                continue;
                            }
                            for k in 0..d {
                                let diff = dr[i2 * d + k] - db[e * d + k];
                                gb[e * d + k] = gb[e * d + k] - gv * two * diff;
                            }
                        }
                    }
                }
            }
            Op::ConcatChannels(inputs) => {
                let mut offset = 0usize;
                for &id in inputs {
                    let len = self.nodes[id.0].t.len();
                    if let Some(gi) = sink!(id) {
                        for k in 0..len {
                            gi[k] = gi[k] + g[offset + k];
                        }
                    }
                    offset += len;
                }
            }
            Op::SliceChannels { x, start, .. } => {
                if let Some(gx) = sink!(*x) {
                    let rest = self.nodes[x.0].t.rest();
                    let base = start * rest;
                    for k in 0..g.len() {
                        gx[base + k] = gx[base + k] + g[k];
                    }
                }
            }
        }
    }
}

/// Visit every valid (output index, input index) pair of one (ky,kx) kernel
/// tap within a single channel plane. The forward kernel, the input-gradient
/// kernel and the weight-gradient kernel all walk this same index set.
#[inline]
#[allow(clippy::too_many_arguments)]
fn conv_taps(
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
    ky: usize,
    kx: usize,
    mut f: impl FnMut(usize, usize),
) {
    let (lo, hi) = tap_range(wo, w, stride, padding, kx);
    if lo > hi {
        return;
    }
    for oy in 0..ho {
        let iy = (oy * stride + ky) as isize - padding as isize;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let irow = iy as usize * w;
        let orow = oy * wo;
        for ox in lo..=hi {
            f(orow + ox, irow + ox * stride + kx - padding);
        }
    }
}

/// Valid `ox` range such that `ox*stride + kx - padding ∈ [0, w)`. Returns an
/// inverted pair when the range is empty.
#[inline]
fn tap_range(wo: usize, w: usize, stride: usize, padding: usize, kx: usize) -> (usize, usize) {
    if wo == 0 || w + padding < kx + 1 {
        return (1, 0);
    }
    let lo = if kx >= padding {
        0
    } else {
        (padding - kx).div_ceil(stride)
    };
    let hi = ((w - 1 + padding - kx) / stride).min(wo - 1);
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::FiniteDiff;

    fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
        assert!(
            (a - b).abs() <= tol,
            "{what}: {a} vs {b} differ by {}",
            (a - b).abs()
        );
    }

    /// Brute-force zero-padded convolution, independent of the tape kernel.
    fn conv_oracle(
        input: &[f64],
        (ci, h, w): (usize, usize, usize),
        kernel: &[f64],
        (co, k): (usize, usize),
        stride: usize,
        padding: usize,
    ) -> Vec<f64> {
        let ho = (h + 2 * padding - k) / stride + 1;
        let wo = (w + 2 * padding - k) / stride + 1;
        let mut out = vec![0.0; co * ho * wo];
        for oc in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ic in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    acc += input[(ic * h + iy as usize) * w + ix as usize]
                                        * kernel[((oc * ci + ic) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                    out[(oc * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_ones_kernel_counts_neighbourhood() {
        // Constant-1 input under an all-ones 3x3 kernel (pad 1, stride 1)
        // counts valid neighbours: 9 interior, 6 edge, 4 corner.
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(vec![1, 4, 4], vec![1.0; 16]).unwrap();
        let k = g.constant(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let y = g.conv2d(x, k, 1, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 4, 4]);
        let d = g.data(y);
        assert_close(d[0], 4.0, 1e-12, "corner");
        assert_close(d[1], 6.0, 1e-12, "edge");
        assert_close(d[5], 9.0, 1e-12, "interior");
    }

    #[test]
    fn conv2d_matches_bruteforce_oracle() {
        let mut vals = Vec::new();
        let mut s = 1u64;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        for _ in 0..(2 * 5 * 6) {
            vals.push(next());
        }
        let kern: Vec<f64> = (0..(3 * 2 * 3 * 3)).map(|_| next()).collect();
        for &(stride, padding) in &[(1usize, 1usize), (2, 1), (1, 0), (2, 0)] {
            let mut g: Graph<f64> = Graph::new();
            let x = g.constant(vec![2, 5, 6], vals.clone()).unwrap();
            let k = g.constant(vec![3, 2, 3, 3], kern.clone()).unwrap();
            let y = g.conv2d(x, k, stride, padding).unwrap();
            let expect = conv_oracle(&vals, (2, 5, 6), &kern, (3, 3), stride, padding);
            assert_eq!(g.data(y).len(), expect.len(), "stride {stride} pad {padding}");
            for (i, (a, b)) in g.data(y).iter().zip(&expect).enumerate() {
                assert_close(*a, *b, 1e-12, &format!("s{stride} p{padding} elem {i}"));
            }
        }
    }

    #[test]
    fn conv2d_rejects_channel_mismatch_and_bad_kernel() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(vec![2, 4, 4], vec![0.0; 32]).unwrap();
        let k = g.constant(vec![1, 3, 3, 3], vec![0.0; 27]).unwrap();
        assert!(g.conv2d(x, k, 1, 1).is_err(), "channel mismatch must fail");
        let k5 = g.constant(vec![1, 2, 5, 5], vec![0.0; 50]).unwrap();
        assert!(g.conv2d(x, k5, 1, 2).is_err(), "kernel size 5 rejected");
    }

    #[test]
    fn avg_pool_value_and_gradient() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.param(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = g.avg_pool_spatial(x).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1]);
        assert_close(g.data(y)[0], 1.5, 1e-12, "pool mean");
        let l = g.sum_all(y);
        g.backward(l).unwrap();
        for &gv in g.grad(x).unwrap() {
            assert_close(gv, 0.25, 1e-12, "pool gradient is 1/(H*W)");
        }
    }

    #[test]
    fn softmax_known_values_and_shift_invariance() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(vec![2], vec![0.0, 3.0f64.ln()]).unwrap();
        let y = g.softmax(x, 0).unwrap();
        assert_close(g.data(y)[0], 0.25, 1e-12, "softmax[0]");
        assert_close(g.data(y)[1], 0.75, 1e-12, "softmax[1]");

        let x2 = g.constant(vec![2], vec![100.0, 100.0 + 3.0f64.ln()]).unwrap();
        let y2 = g.softmax(x2, 0).unwrap();
        assert_close(g.data(y2)[0], 0.25, 1e-9, "shifted softmax[0]");
        let sum: f64 = g.data(y2).iter().sum();
        assert_close(sum, 1.0, 1e-12, "softmax sums to one");
    }

    #[test]
    fn softmax_rows_of_matrix() {
        let mut g: Graph<f64> = Graph::new();
        let x = g
            .constant(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0])
            .unwrap();
        let y = g.softmax(x, 1).unwrap();
        let d = g.data(y);
        assert_close(d[0] + d[1] + d[2], 1.0, 1e-12, "row 0 sums to 1");
        assert_close(d[3] + d[4] + d[5], 1.0, 1e-12, "row 1 sums to 1");
        assert!(d[0] < d[1] && d[1] < d[2], "monotone in logits");
    }

    #[test]
    fn gelu_reference_points() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(vec![4], vec![0.0, 1.0, 10.0, -10.0]).unwrap();
        let y = g.gelu(x);
        let d = g.data(y);
        assert_close(d[0], 0.0, 1e-15, "gelu(0)");
        assert_close(d[1], 0.8413447460685429, 1e-12, "gelu(1) = Phi(1)");
        assert_close(d[2], 10.0, 1e-6, "gelu(10) ~ 10");
        assert!(d[3].abs() < 1e-6, "gelu(-10) ~ 0");
    }

    #[test]
    fn upsample_then_block_average_recovers_input() {
        let mut g: Graph<f64> = Graph::new();
        let vals = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let x = g.constant(vec![2, 2, 2], vals.clone()).unwrap();
        let y = g.upsample_nearest(x, 2).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 4]);
        // Block-average oracle.
        let d = g.data(y);
        for c in 0..2 {
            for by in 0..2 {
                for bx in 0..2 {
                    let mut acc = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            acc += d[c * 16 + (by * 2 + dy) * 4 + (bx * 2 + dx)];
                        }
                    }
                    assert_close(
                        acc / 4.0,
                        vals[c * 4 + by * 2 + bx],
                        1e-12,
                        "block average",
                    );
                }
            }
        }
    }

    #[test]
    fn matmul_matches_naive_and_known_product() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = g.constant(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), &[19.0, 22.0, 43.0, 50.0]);
        assert_eq!(g.macs(), 8, "2x2x2 matmul performs 8 multiply-accumulates");
    }

    #[test]
    fn minmax_normalize_range_and_degenerate() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(vec![3], vec![2.0, 3.0, 4.0]).unwrap();
        let y = g.minmax_normalize(x).unwrap();
        assert_eq!(g.data(y), &[0.0, 0.5, 1.0]);
        let c = g.constant(vec![3], vec![7.0, 7.0, 7.0]).unwrap();
        let yc = g.minmax_normalize(c).unwrap();
        assert_eq!(g.data(yc), &[0.0, 0.0, 0.0], "constant input maps to zeros");
    }

    #[test]
    fn charbonnier_equal_inputs_hits_sqrt_eps() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(vec![2, 3], vec![0.4; 6]).unwrap();
        let b = g.constant(vec![2, 3], vec![0.4; 6]).unwrap();
        let l = g.charbonnier(a, b, 1e-6).unwrap();
        assert_close(g.scalar_value(l), 1e-3, 1e-9, "charbonnier at X = X^");
    }

    #[test]
    fn entropy_of_known_row() {
        let mut g: Graph<f64> = Graph::new();
        let p = g.constant(vec![1, 2], vec![0.75, 0.25]).unwrap();
        let h = g.row_entropy_sum(p).unwrap();
        assert_close(
            g.scalar_value(h),
            0.5623351446188083,
            1e-12,
            "entropy of [0.75, 0.25]",
        );
    }

    #[test]
    fn entropy_treats_zero_as_zero() {
        let mut g: Graph<f64> = Graph::new();
        let p = g.constant(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let h = g.row_entropy_sum(p).unwrap();
        assert_close(g.scalar_value(h), 0.0, 1e-12, "0*ln 0 contributes nothing");
    }

    #[test]
    fn straight_through_passes_identity_gradient_to_features() {
        let mut g: Graph<f64> = Graph::new();
        let f = g.param(vec![3, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let v = g.param(vec![3, 2], vec![9.0; 6]).unwrap();
        let st = g.straight_through(f, v).unwrap();
        assert_eq!(g.data(st), &[9.0; 6], "forward takes the quantized values");
        let l = g.sum_all(st);
        g.backward(l).unwrap();
        assert_eq!(g.grad(f).unwrap(), &[1.0; 6], "adjoint reaches features unchanged");
        assert!(
            g.grad(v).is_none(),
            "quantized values receive no gradient through the straight-through path"
        );
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.param(vec![2], vec![1.0, 2.0]).unwrap();
        let d = g.stop_gradient(x);
        let l = g.sum_all(d);
        let err = g.backward(l);
        assert!(err.is_err(), "a fully detached loss is not connected to the tape");
    }

    #[test]
    fn backward_rejects_non_scalar_target() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.param(vec![2], vec![1.0, 2.0]).unwrap();
        let y = g.scale(x, 2.0);
        assert!(g.backward(y).is_err(), "backward target must be scalar");
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut g: Graph<f64> = Graph::new();
            let x = g
                .param(vec![2, 3, 3], (0..18).map(|i| (i as f64) * 0.37 - 2.0).collect())
                .unwrap();
            let k = g
                .param(vec![2, 2, 3, 3], (0..36).map(|i| ((i * 7 % 13) as f64) * 0.11).collect())
                .unwrap();
            let y = g.conv2d(x, k, 1, 1).unwrap();
            let z = g.gelu(y);
            let l = g.mean_all(z).unwrap();
            g.backward(l).unwrap();
            (g.grad(x).unwrap().to_vec(), g.grad(k).unwrap().to_vec())
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert!(
            a1.iter().zip(&a2).all(|(x, y)| x.to_bits() == y.to_bits())
                && b1.iter().zip(&b2).all(|(x, y)| x.to_bits() == y.to_bits()),
            "gradients are bit-identical across runs"
        );
    }

    #[test]
    fn gather_rows_forward_and_scatter_backward() {
        let mut g: Graph<f64> = Graph::new();
        let m = g.param(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let picked = g.gather_rows(m, vec![2, 0, 2]).unwrap();
        assert_eq!(g.data(picked), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let l = g.sum_all(picked);
        g.backward(l).unwrap();
        assert_eq!(
            g.grad(m).unwrap(),
            &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0],
            "row 2 picked twice accumulates twice"
        );
        let mut g2: Graph<f64> = Graph::new();
        let m2 = g2.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(g2.gather_rows(m2, vec![5]).is_err(), "out-of-range row index");
    }

    #[test]
    fn pairwise_sqdist_matches_bruteforce() {
        let rows = vec![0.0, 0.0, 1.0, 1.0, -1.0, 2.0];
        let book = vec![0.5, 0.5, 2.0, -1.0];
        let mut g: Graph<f64> = Graph::new();
        let r = g.constant(vec![3, 2], rows.clone()).unwrap();
        let b = g.constant(vec![2, 2], book.clone()).unwrap();
        let d = g.pairwise_sqdist(r, b).unwrap();
        for p in 0..3 {
            for e in 0..2 {
                let mut acc = 0.0;
                for k in 0..2 {
                    let diff = rows[p * 2 + k] - book[e * 2 + k];
                    acc += diff * diff;
                }
                assert_close(g.data(d)[p * 2 + e], acc, 1e-12, "distance entry");
            }
        }
    }

    #[test]
    fn concat_then_slice_roundtrips() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.param(vec![2, 2, 2], (0..8).map(|i| i as f64).collect()).unwrap();
        let b = g.param(vec![1, 2, 2], vec![8.0, 9.0, 10.0, 11.0]).unwrap();
        let z = g.constant(vec![0, 2, 2], vec![]).unwrap();
        let cat = g.concat_channels(&[z, a, b]).unwrap();
        assert_eq!(g.shape(cat), &[3, 2, 2]);
        let back_a = g.slice_channels(cat, 0, 2).unwrap();
        let back_b = g.slice_channels(cat, 2, 1).unwrap();
        assert_eq!(g.data(back_a), g.data(a));
        assert_eq!(g.data(back_b), g.data(b));
        // Gradient routing: a weighted sum of the slices reaches the inputs.
        let sa = g.sum_all(back_a);
        let sb = g.sum_all(back_b);
        let sb2 = g.scale(sb, 3.0);
        let l = g.add(sa, sb2).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0; 8]);
        assert_eq!(g.grad(b).unwrap(), &[3.0; 4]);
    }

    #[test]
    fn gradcheck_core_ops_smoke() {
        // Small deterministic instances of the heavier kernels; the full
        // multi-instance sweep lives in the acceptance suite.
        let mut s = 7u64;
        let mut next = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) as f64 / (1u64 << 32) as f64) - 0.5
        };
        let fd = FiniteDiff::default();

        // conv2d + gelu + mean
        let x: Vec<f64> = (0..18).map(|_| next()).collect();
        let k: Vec<f64> = (0..36).map(|_| next()).collect();
        let rep = fd
            .check(
                &[(vec![2, 3, 3], x), (vec![2, 2, 3, 3], k)],
                |g, ids| {
                    let y = g.conv2d(ids[0], ids[1], 1, 1)?;
                    let z = g.gelu(y);
                    g.mean_all(z)
                },
            )
            .unwrap();
        assert!(rep.pass(), "conv/gelu gradcheck: {:?}", rep.failures);

        // softmax + entropy
        let x: Vec<f64> = (0..12).map(|_| next() * 2.0).collect();
        let rep = fd
            .check(&[(vec![3, 4], x)], |g, ids| {
                let p = g.softmax(ids[0], 1)?;
                g.row_entropy_sum(p)
            })
            .unwrap();
        assert!(rep.pass(), "softmax/entropy gradcheck: {:?}", rep.failures);

        // minmax normalize + log1p + mean (ties avoided by construction)
        let x: Vec<f64> = (0..9).map(|i| i as f64 * 0.13 + next() * 0.01).collect();
        let rep = fd
            .check(&[(vec![9], x)], |g, ids| {
                let n = g.minmax_normalize(ids[0])?;
                let l = g.log1p(n)?;
                g.mean_all(l)
            })
            .unwrap();
        assert!(rep.pass(), "minmax/log1p gradcheck: {:?}", rep.failures);

        // pow_channel away from the clamped region
        let x: Vec<f64> = (0..8).map(|_| 0.1 + (next() + 0.5) * 0.8).collect();
        let e = vec![0.3, 0.7];
        let rep = fd
            .check(&[(vec![2, 4], x), (vec![2], e)], |g, ids| {
                let y = g.pow_channel(ids[0], ids[1])?;
                g.mean_all(y)
            })
            .unwrap();
        assert!(rep.pass(), "pow_channel gradcheck: {:?}", rep.failures);

        // pairwise distances feeding a smooth reduction
        let r: Vec<f64> = (0..6).map(|_| next()).collect();
        let b: Vec<f64> = (0..8).map(|_| next()).collect();
        let rep = fd
            .check(&[(vec![3, 2], r), (vec![4, 2], b)], |g, ids| {
                let d = g.pairwise_sqdist(ids[0], ids[1])?;
                let nd = g.scale(d, -1.0);
                let p = g.softmax(nd, 1)?;
                g.row_entropy_sum(p)
            })
            .unwrap();
        assert!(rep.pass(), "pairwise/softmax gradcheck: {:?}", rep.failures);

        // upsample + avg pool + charbonnier against a constant
        let x: Vec<f64> = (0..8).map(|_| next()).collect();
        let rep = fd
            .check(&[(vec![2, 2, 2], x)], |g, ids| {
                let u = g.upsample_nearest(ids[0], 2)?;
                let p = g.avg_pool_spatial(u)?;
                let c = g.constant(vec![2, 1, 1], vec![0.2, -0.1])?;
                g.charbonnier(p, c, 1e-6)
            })
            .unwrap();
        assert!(rep.pass(), "upsample/pool/charbonnier gradcheck: {:?}", rep.failures);
    }
}
