//! A small reverse-mode autodiff tape specialised for the operations this
//! network needs (NHWC convolutions, temporal shift, batch norm, memory
//! reads and the training losses).
//!
//! Every node owns its forward value. `backward` walks the tape in reverse and
//! returns gradients for leaf nodes only; intermediate gradients are dropped
//! as soon as they have been propagated.

use crate::error::{Error, Result};
use crate::losses::HingeRow;
use crate::memory;
use crate::tensor::{gemm, Tensor};

pub(crate) const NORM_EPS: f64 = 1e-12;
pub(crate) const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub const SAME3: ConvGeom = ConvGeom {
        kernel: 3,
        stride: 1,
        pad: 1,
    };
    pub const DOWN3: ConvGeom = ConvGeom {
        kernel: 3,
        stride: 2,
        pad: 1,
    };
    pub const POINTWISE: ConvGeom = ConvGeom {
        kernel: 1,
        stride: 1,
        pad: 0,
    };

    fn out_dim(&self, d: usize) -> usize {
        (d + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// Direction(s) of the temporal channel shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ShiftMode {
    /// First group from frame t−1, second group from frame t+1.
    Bidirectional,
    /// Only the first group, from frame t−1.
    PastOnly,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    ConvTranspose2x2 {
        x: Var,
        w: Var,
        b: Var,
    },
    LinComb(Vec<(Var, f64)>),
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Sigmoid(Var),
    Tanh {
        x: Var,
        scale: f64,
    },
    TemporalShift {
        x: Var,
        frames: usize,
        groups: usize,
        mode: ShiftMode,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormFrozen {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GlobalAvgPool(Var),
    ChannelScale {
        x: Var,
        s: Var,
    },
    MergeTime {
        x: Var,
        frames: usize,
    },
    ConcatChannels(Var, Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    MemoryRead {
        q: Var,
        bank: Var,
        qn: Vec<f64>,
        norms: Vec<f64>,
        weights: Vec<f64>,
    },
    Mse {
        a: Var,
        b: Var,
        mean: bool,
    },
    Discretization {
        q: Var,
        bank: Tensor,
        rows: Vec<HingeRow>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-channel statistics of one training-mode batch-norm application.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of the leaves of a graph, indexed by `Var`.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Result<Var> {
        let [n, h, wd, cin] = self.value(x).dims4()?;
        let [kdim, cout] = self.value(w).dims2()?;
        if kdim != geom.kernel * geom.kernel * cin {
            return Err(Error::Shape(format!(
                "conv weight rows {kdim} != {}x{}x{cin}",
                geom.kernel, geom.kernel
            )));
        }
        if self.value(b).len() != cout {
            return Err(Error::Shape(format!(
                "conv bias has {} entries, expected {cout}",
                self.value(b).len()
            )));
        }
        if h + 2 * geom.pad < geom.kernel || wd + 2 * geom.pad < geom.kernel {
            return Err(Error::Shape(format!("conv input {h}x{wd} smaller than kernel")));
        }
        let (ho, wo) = (geom.out_dim(h), geom.out_dim(wd));
        let rows = n * ho * wo;
        let mut out = vec![0.0; rows * cout];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let cols = im2col(xv, [n, h, wd, cin], geom, ho, wo);
            let lhs: &[f64] = cols.as_deref().unwrap_or(xv);
            gemm(rows, kdim, cout, 1.0, lhs, false, wv, false, 0.0, &mut out);
            let bv = self.value(b).data();
            for row in out.chunks_exact_mut(cout) {
                for (o, bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let value = Tensor::new(vec![n, ho, wo, cout], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Transposed convolution with a 2×2 kernel and stride 2 (exact 2× upsampling).
    /// Weight layout: `[cin, 2·2·cout]` with columns ordered `(dy, dx, cout)`.
    pub fn conv_transpose2x2(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [n, h, wd, cin] = self.value(x).dims4()?;
        let [wcin, wcols] = self.value(w).dims2()?;
        if wcin != cin || wcols % 4 != 0 {
            return Err(Error::Shape(format!(
                "transposed conv weight [{wcin}, {wcols}] does not fit {cin} input channels"
            )));
        }
        let cout = wcols / 4;
        if self.value(b).len() != cout {
            return Err(Error::Shape("transposed conv bias size".into()));
        }
        let rows = n * h * wd;
        let mut y = vec![0.0; rows * wcols];
        gemm(
            rows,
            cin,
            wcols,
            1.0,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            0.0,
            &mut y,
        );
        let bv = self.value(b).data();
        let (ho, wo) = (2 * h, 2 * wd);
        let mut out = vec![0.0; n * ho * wo * cout];
        for ni in 0..n {
            for i in 0..h {
                for j in 0..wd {
                    let src = &y[((ni * h + i) * wd + j) * wcols..][..wcols];
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let dst = ((ni * ho + 2 * i + dy) * wo + 2 * j + dx) * cout;
                            let s = &src[(dy * 2 + dx) * cout..][..cout];
                            for c in 0..cout {
                                out[dst + c] = s[c] + bv[c];
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, ho, wo, cout], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(value, Op::ConvTranspose2x2 { x, w, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.lin_comb(&[(a, 1.0), (b, 1.0)])
    }

    /// `Σ cᵢ·xᵢ` over equally shaped inputs.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let (first, _) = *terms
            .first()
            .ok_or_else(|| Error::Shape("empty linear combination".into()))?;
        let mut acc = Tensor::zeros(self.value(first).shape());
        for &(v, c) in terms {
            let t = self.value(v);
            acc.expect_same_shape(t)?;
            for (a, x) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += c * x;
            }
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        Ok(self.push(acc, Op::LinComb(terms.to_vec()), rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self
            .value(x)
            .map(|v| if v >= 0.0 { v } else { slope * v });
        let rg = self.rg(&[x]);
        self.push(value, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(value, Op::Sigmoid(x), rg)
    }

    /// `scale · tanh(x)`.
    pub fn tanh(&mut self, x: Var, scale: f64) -> Var {
        let value = self.value(x).map(|v| scale * v.tanh());
        let rg = self.rg(&[x]);
        self.push(value, Op::Tanh { x, scale }, rg)
    }

    /// Shifts `groups` channels along the time axis of a `[B·frames, H, W, C]` tensor.
    pub fn temporal_shift(
        &mut self,
        x: Var,
        frames: usize,
        groups: usize,
        mode: ShiftMode,
    ) -> Result<Var> {
        let dims = self.value(x).dims4()?;
        if frames == 0 || dims[0] % frames != 0 {
            return Err(Error::Shape(format!(
                "batch axis {} is not a multiple of {frames} frames",
                dims[0]
            )));
        }
        let needed = match mode {
            ShiftMode::Bidirectional => 2 * groups,
            ShiftMode::PastOnly => groups,
        };
        if needed > dims[3] {
            return Err(Error::Shape(format!(
                "cannot shift {needed} of {} channels",
                dims[3]
            )));
        }
        let value = Tensor::new(
            dims.to_vec(),
            shift_channels(self.value(x).data(), dims, frames, groups, mode, false),
        )?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::TemporalShift {
                x,
                frames,
                groups,
                mode,
            },
            rg,
        ))
    }

    /// Training-mode batch norm over the `N·H·W` positions of each channel.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let [n, h, w, c] = self.value(x).dims4()?;
        self.check_channel_vec(gamma, c)?;
        self.check_channel_vec(beta, c)?;
        let count = (n * h * w) as f64;
        let xv = self.value(x).data();
        let mut mean = vec![0.0; c];
        for row in xv.chunks_exact(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; c];
        for row in xv.chunks_exact(c) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= count);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        for (dst, src) in xhat.chunks_exact_mut(c).zip(xv.chunks_exact(c)) {
            for ch in 0..c {
                dst[ch] = (src[ch] - mean[ch]) * inv_std[ch];
            }
        }
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![0.0; xv.len()];
        for (dst, src) in out.chunks_exact_mut(c).zip(xhat.chunks_exact(c)) {
            for ch in 0..c {
                dst[ch] = g[ch] * src[ch] + bt[ch];
            }
        }
        let value = Tensor::new(vec![n, h, w, c], out)?;
        let rg = self.rg(&[x, gamma, beta]);
        let stats = BatchStats {
            mean,
            var: var.clone(),
        };
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((v, stats))
    }

    /// Inference-mode batch norm with fixed statistics.
    pub fn batch_norm_frozen(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
    ) -> Result<Var> {
        let [n, h, w, c] = self.value(x).dims4()?;
        self.check_channel_vec(gamma, c)?;
        self.check_channel_vec(beta, c)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::Shape("batch-norm statistics size".into()));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(c) {
            for ch in 0..c {
                row[ch] = g[ch] * (row[ch] - mean[ch]) * inv_std[ch] + bt[ch];
            }
        }
        let value = Tensor::new(vec![n, h, w, c], out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::BatchNormFrozen {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
            rg,
        ))
    }

    fn check_channel_vec(&self, v: Var, c: usize) -> Result<()> {
        if self.value(v).len() != c {
            return Err(Error::Shape(format!(
                "per-channel parameter has {} entries, expected {c}",
                self.value(v).len()
            )));
        }
        Ok(())
    }

    /// Spatial mean per channel: `[N, H, W, C] -> [N, 1, 1, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, h, w, c] = self.value(x).dims4()?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c];
        for ni in 0..n {
            let dst = &mut out[ni * c..(ni + 1) * c];
            for row in xv[ni * hw * c..(ni + 1) * hw * c].chunks_exact(c) {
                for (d, v) in dst.iter_mut().zip(row) {
                    *d += v;
                }
            }
            dst.iter_mut().for_each(|d| *d /= hw as f64);
        }
        let value = Tensor::new(vec![n, 1, 1, c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::GlobalAvgPool(x), rg))
    }

    /// Broadcast multiply of `[N, H, W, C]` by per-sample channel weights `[N, 1, 1, C]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let [n, h, w, c] = self.value(x).dims4()?;
        if self.value(s).shape() != [n, 1, 1, c] {
            return Err(Error::Shape(format!(
                "channel weights {:?} do not match [{n}, 1, 1, {c}]",
                self.value(s).shape()
            )));
        }
        let sv = self.value(s).data();
        let mut out = self.value(x).data().to_vec();
        for (i, row) in out.chunks_exact_mut(c).enumerate() {
            let ni = i / (h * w);
            for (o, sc) in row.iter_mut().zip(&sv[ni * c..(ni + 1) * c]) {
                *o *= sc;
            }
        }
        let value = Tensor::new(vec![n, h, w, c], out)?;
        let rg = self.rg(&[x, s]);
        Ok(self.push(value, Op::ChannelScale { x, s }, rg))
    }

    /// `[B·T, H, W, C] -> [B, H, W, T·C]`, time steps laid out consecutively on channels.
    pub fn merge_time(&mut self, x: Var, frames: usize) -> Result<Var> {
        let [bt, h, w, c] = self.value(x).dims4()?;
        if frames == 0 || bt % frames != 0 {
            return Err(Error::Shape(format!(
                "batch axis {bt} is not a multiple of {frames} frames"
            )));
        }
        let b = bt / frames;
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for bi in 0..b {
            for t in 0..frames {
                for p in 0..h * w {
                    let src = &xv[((bi * frames + t) * h * w + p) * c..][..c];
                    out[((bi * h * w + p) * frames + t) * c..][..c].copy_from_slice(src);
                }
            }
        }
        let value = Tensor::new(vec![b, h, w, frames * c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MergeTime { x, frames }, rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, h, w, ca] = self.value(a).dims4()?;
        let [nb, hb, wb, cb] = self.value(b).dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::Shape(format!(
                "cannot concatenate {:?} with {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let c = ca + cb;
        let mut out = vec![0.0; n * h * w * c];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for (i, dst) in out.chunks_exact_mut(c).enumerate() {
            dst[..ca].copy_from_slice(&av[i * ca..(i + 1) * ca]);
            dst[ca..].copy_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        let value = Tensor::new(vec![n, h, w, c], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::ConcatChannels(a, b), rg))
    }

    /// L2-normalizes each vector along the last axis.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = *t.shape().last().expect("tensor has a last axis");
        let mut out = t.data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / c);
        for row in out.chunks_exact_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::L2NormalizeRows { x, norms }, rg)
    }

    /// Softmax-weighted memory read of every feature vector (last axis) of `q`
    /// against the `[M, C]` item matrix `bank`. Output has the shape of `q`.
    pub fn memory_read(&mut self, q: Var, bank: Var) -> Result<Var> {
        let [m, c] = self.value(bank).dims2()?;
        let qt = self.value(q);
        if qt.shape().last() != Some(&c) {
            return Err(Error::Shape(format!(
                "features {:?} do not match bank dimension {c}",
                qt.shape()
            )));
        }
        let k = qt.len() / c;
        let kernel = memory::read_kernel(qt.data(), self.value(bank).data(), k, m, c);
        let value = Tensor::new(qt.shape().to_vec(), kernel.read)?;
        let rg = self.rg(&[q, bank]);
        Ok(self.push(
            value,
            Op::MemoryRead {
                q,
                bank,
                qn: kernel.normalized,
                norms: kernel.norms,
                weights: kernel.weights,
            },
            rg,
        ))
    }

    /// Squared error between equally shaped tensors, averaged (`mean`) or summed.
    pub fn mse(&mut self, a: Var, b: Var, mean: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        av.expect_same_shape(bv)?;
        let mut s: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        if mean {
            s /= av.len() as f64;
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::Mse { a, b, mean }, rg))
    }

    /// Scalar node for the feature discretization loss. `rows` carries the
    /// per-feature nearest-item indices and hinge activity computed in
    /// [`crate::losses`]; gradients flow to `q` only.
    pub(crate) fn discretization(
        &mut self,
        q: Var,
        bank: &Tensor,
        loss: f64,
        rows: Vec<HingeRow>,
    ) -> Var {
        let rg = self.rg(&[q]);
        self.push(
            Tensor::scalar(loss),
            Op::Discretization {
                q,
                bank: bank.clone(),
                rows,
            },
            rg,
        )
    }

    /// Reverse pass from a scalar node. Returns gradients for every leaf that
    /// requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape("backward needs a scalar output".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Tensor,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let xt = self.value(*x);
                let dims = xt.dims4()?;
                let [_, ho, wo, cout] = out.dims4()?;
                let rows = dims[0] * ho * wo;
                let kdim = geom.kernel * geom.kernel * dims[3];
                let gd = g.data();
                if self.wants(*w) || self.wants(*b) {
                    if self.wants(*w) {
                        let cols = im2col(xt.data(), dims, *geom, ho, wo);
                        let lhs: &[f64] = cols.as_deref().unwrap_or(xt.data());
                        let mut dw = vec![0.0; kdim * cout];
                        gemm(kdim, rows, cout, 1.0, lhs, true, gd, false, 0.0, &mut dw);
                        self.accumulate(grads, *w, Tensor::new(vec![kdim, cout], dw)?);
                    }
                    if self.wants(*b) {
                        let mut db = vec![0.0; cout];
                        for row in gd.chunks_exact(cout) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::new(vec![cout], db)?);
                    }
                }
                if self.wants(*x) {
                    let mut dcols = vec![0.0; rows * kdim];
                    gemm(
                        rows,
                        cout,
                        kdim,
                        1.0,
                        gd,
                        false,
                        self.value(*w).data(),
                        true,
                        0.0,
                        &mut dcols,
                    );
                    let dx = col2im(dcols, dims, *geom, ho, wo);
                    self.accumulate(grads, *x, Tensor::new(dims.to_vec(), dx)?);
                }
            }
            Op::ConvTranspose2x2 { x, w, b } => {
                let xt = self.value(*x);
                let [n, h, wd, cin] = xt.dims4()?;
                let cout = out.dims4()?[3];
                let wcols = 4 * cout;
                let rows = n * h * wd;
                let (ho, wo) = (2 * h, 2 * wd);
                let gd = g.data();
                let mut gy = vec![0.0; rows * wcols];
                for ni in 0..n {
                    for i in 0..h {
                        for j in 0..wd {
                            let dst = &mut gy[((ni * h + i) * wd + j) * wcols..][..wcols];
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let src = ((ni * ho + 2 * i + dy) * wo + 2 * j + dx) * cout;
                                    dst[(dy * 2 + dx) * cout..][..cout]
                                        .copy_from_slice(&gd[src..src + cout]);
                                }
                            }
                        }
                    }
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; cin * wcols];
                    gemm(cin, rows, wcols, 1.0, xt.data(), true, &gy, false, 0.0, &mut dw);
                    self.accumulate(grads, *w, Tensor::new(vec![cin, wcols], dw)?);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; cout];
                    for row in gd.chunks_exact(cout) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![cout], db)?);
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; rows * cin];
                    gemm(
                        rows,
                        wcols,
                        cin,
                        1.0,
                        &gy,
                        false,
                        self.value(*w).data(),
                        true,
                        0.0,
                        &mut dx,
                    );
                    self.accumulate(grads, *x, Tensor::new(vec![n, h, wd, cin], dx)?);
                }
            }
            Op::LinComb(terms) => {
                for &(v, c) in terms {
                    if self.wants(v) {
                        self.accumulate(grads, v, g.map(|x| c * x));
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                let d = self
                    .value(*x)
                    .zip_map(g, |xv, gv| if xv >= 0.0 { gv } else { slope * gv })?;
                self.accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = out.zip_map(g, |y, gv| gv * y * (1.0 - y))?;
                self.accumulate(grads, *x, d);
            }
            Op::Tanh { x, scale } => {
                let d = self.value(*x).zip_map(g, |xv, gv| {
                    let t = xv.tanh();
                    gv * scale * (1.0 - t * t)
                })?;
                self.accumulate(grads, *x, d);
            }
            Op::TemporalShift {
                x,
                frames,
                groups,
                mode,
            } => {
                let dims = g.dims4()?;
                let d = shift_channels(g.data(), dims, *frames, *groups, *mode, true);
                self.accumulate(grads, *x, Tensor::new(dims.to_vec(), d)?);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let [n, h, w, c] = g.dims4()?;
                let count = (n * h * w) as f64;
                let gd = g.data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (grow, xrow) in gd.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for ch in 0..c {
                        sum_g[ch] += grow[ch];
                        sum_gx[ch] += grow[ch] * xrow[ch];
                    }
                }
                if self.wants(*gamma) {
                    self.accumulate(grads, *gamma, Tensor::new(vec![c], sum_gx.clone())?);
                }
                if self.wants(*beta) {
                    self.accumulate(grads, *beta, Tensor::new(vec![c], sum_g.clone())?);
                }
                if self.wants(*x) {
                    let gam = self.value(*gamma).data();
                    let mut dx = vec![0.0; gd.len()];
                    for ((drow, grow), xrow) in dx
                        .chunks_exact_mut(c)
                        .zip(gd.chunks_exact(c))
                        .zip(xhat.chunks_exact(c))
                    {
                        for ch in 0..c {
                            drow[ch] = gam[ch] * inv_std[ch] / count
                                * (count * grow[ch] - sum_g[ch] - xrow[ch] * sum_gx[ch]);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(vec![n, h, w, c], dx)?);
                }
            }
            Op::BatchNormFrozen {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let dims = g.dims4()?;
                let c = dims[3];
                let gd = g.data();
                let xv = self.value(*x).data();
                let gam = self.value(*gamma).data();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for (grow, xrow) in gd.chunks_exact(c).zip(xv.chunks_exact(c)) {
                        for ch in 0..c {
                            dg[ch] += grow[ch] * (xrow[ch] - mean[ch]) * inv_std[ch];
                            db[ch] += grow[ch];
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::new(vec![c], dg)?);
                    self.accumulate(grads, *beta, Tensor::new(vec![c], db)?);
                }
                if self.wants(*x) {
                    let mut dx = gd.to_vec();
                    for row in dx.chunks_exact_mut(c) {
                        for ch in 0..c {
                            row[ch] *= gam[ch] * inv_std[ch];
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(dims.to_vec(), dx)?);
                }
            }
            Op::GlobalAvgPool(x) => {
                let dims = self.value(*x).dims4()?;
                let [_, h, w, c] = dims;
                let hw = h * w;
                let gd = g.data();
                let mut dx = vec![0.0; dims.iter().product()];
                for (i, row) in dx.chunks_exact_mut(c).enumerate() {
                    let ni = i / hw;
                    for (d, gv) in row.iter_mut().zip(&gd[ni * c..(ni + 1) * c]) {
                        *d = gv / hw as f64;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(dims.to_vec(), dx)?);
            }
            Op::ChannelScale { x, s } => {
                let dims = g.dims4()?;
                let [n, h, w, c] = dims;
                let gd = g.data();
                let xv = self.value(*x).data();
                let sv = self.value(*s).data();
                if self.wants(*x) {
                    let mut dx = gd.to_vec();
                    for (i, row) in dx.chunks_exact_mut(c).enumerate() {
                        let ni = i / (h * w);
                        for (d, sc) in row.iter_mut().zip(&sv[ni * c..(ni + 1) * c]) {
                            *d *= sc;
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(dims.to_vec(), dx)?);
                }
                if self.wants(*s) {
                    let mut ds = vec![0.0; n * c];
                    for (i, (grow, xrow)) in gd.chunks_exact(c).zip(xv.chunks_exact(c)).enumerate()
                    {
                        let ni = i / (h * w);
                        for ch in 0..c {
                            ds[ni * c + ch] += grow[ch] * xrow[ch];
                        }
                    }
                    self.accumulate(grads, *s, Tensor::new(vec![n, 1, 1, c], ds)?);
                }
            }
            Op::MergeTime { x, frames } => {
                let dims = self.value(*x).dims4()?;
                let [bt, h, w, c] = dims;
                let b = bt / frames;
                let gd = g.data();
                let mut dx = vec![0.0; gd.len()];
                for bi in 0..b {
                    for t in 0..*frames {
                        for p in 0..h * w {
                            let src = &gd[((bi * h * w + p) * frames + t) * c..][..c];
                            dx[((bi * frames + t) * h * w + p) * c..][..c].copy_from_slice(src);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(dims.to_vec(), dx)?);
            }
            Op::ConcatChannels(a, b) => {
                let da = self.value(*a).dims4()?;
                let db = self.value(*b).dims4()?;
                let (ca, cb) = (da[3], db[3]);
                let gd = g.data();
                if self.wants(*a) {
                    let mut ga = Vec::with_capacity(da.iter().product());
                    for row in gd.chunks_exact(ca + cb) {
                        ga.extend_from_slice(&row[..ca]);
                    }
                    self.accumulate(grads, *a, Tensor::new(da.to_vec(), ga)?);
                }
                if self.wants(*b) {
                    let mut gb = Vec::with_capacity(db.iter().product());
                    for row in gd.chunks_exact(ca + cb) {
                        gb.extend_from_slice(&row[ca..]);
                    }
                    self.accumulate(grads, *b, Tensor::new(db.to_vec(), gb)?);
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let c = *g.shape().last().expect("rank >= 1");
                let mut dx = g.data().to_vec();
                for ((drow, yrow), n) in dx
                    .chunks_exact_mut(c)
                    .zip(out.data().chunks_exact(c))
                    .zip(norms)
                {
                    let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (d, y) in drow.iter_mut().zip(yrow) {
                        *d = (*d - y * dot) / n;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
            }
            Op::MemoryRead {
                q,
                bank,
                qn,
                norms,
                weights,
            } => {
                let [m, c] = self.value(*bank).dims2()?;
                let k = norms.len();
                let p = self.value(*bank).data();
                let gd = g.data();
                // dW = dOut · Pᵀ
                let mut dw = vec![0.0; k * m];
                gemm(k, c, m, 1.0, gd, false, p, true, 0.0, &mut dw);
                // softmax backward, in place: dS = W ⊙ (dW − rowsum(dW ⊙ W))
                for (drow, wrow) in dw.chunks_exact_mut(m).zip(weights.chunks_exact(m)) {
                    let dot: f64 = drow.iter().zip(wrow).map(|(a, b)| a * b).sum();
                    for (d, w) in drow.iter_mut().zip(wrow) {
                        *d = w * (*d - dot);
                    }
                }
                let ds = dw;
                if self.wants(*bank) {
                    let mut dp = vec![0.0; m * c];
                    gemm(m, k, c, 1.0, weights, true, gd, false, 0.0, &mut dp);
                    gemm(m, k, c, 1.0, &ds, true, qn, false, 1.0, &mut dp);
                    self.accumulate(grads, *bank, Tensor::new(vec![m, c], dp)?);
                }
                if self.wants(*q) {
                    let mut dqn = vec![0.0; k * c];
                    gemm(k, m, c, 1.0, &ds, false, p, false, 0.0, &mut dqn);
                    for ((drow, yrow), n) in dqn
                        .chunks_exact_mut(c)
                        .zip(qn.chunks_exact(c))
                        .zip(norms)
                    {
                        let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for (d, y) in drow.iter_mut().zip(yrow) {
                            *d = (*d - y * dot) / n;
                        }
                    }
                    self.accumulate(grads, *q, Tensor::new(g.shape().to_vec(), dqn)?);
                }
            }
            Op::Mse { a, b, mean } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut scale = 2.0 * g.data()[0];
                if *mean {
                    scale /= av.len() as f64;
                }
                let d = av.zip_map(bv, |x, y| scale * (x - y))?;
                if self.wants(*b) {
                    self.accumulate(grads, *b, d.map(|v| -v));
                }
                self.accumulate(grads, *a, d);
            }
            Op::Discretization { q, bank, rows } => {
                let qt = self.value(*q);
                let c = bank.dims2()?[1];
                let p = bank.data();
                let scale = g.data()[0] / rows.len().max(1) as f64;
                let mut dq = vec![0.0; qt.len()];
                for ((drow, qrow), r) in dq
                    .chunks_exact_mut(c)
                    .zip(qt.data().chunks_exact(c))
                    .zip(rows)
                {
                    let pp = &p[r.nearest * c..][..c];
                    let pn1 = &p[r.second * c..][..c];
                    for j in 0..c {
                        let mut d = 0.0;
                        if r.margin_active {
                            d += 2.0 * (pn1[j] - pp[j]);
                        }
                        if r.separation_active {
                            d += 2.0 * (qrow[j] - pp[j]);
                        }
                        drow[j] = scale * d;
                    }
                }
                self.accumulate(grads, *q, Tensor::new(qt.shape().to_vec(), dq)?);
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Patch matrix `[N·Ho·Wo, k·k·C]` (columns ordered `(ky, kx, c)`), or `None`
/// for a pointwise convolution whose patch matrix is the input itself.
fn im2col(x: &[f64], dims: [usize; 4], geom: ConvGeom, ho: usize, wo: usize) -> Option<Vec<f64>> {
    let [n, h, w, c] = dims;
    if geom == ConvGeom::POINTWISE {
        return None;
    }
    let k = geom.kernel;
    let kdim = k * k * c;
    let mut cols = vec![0.0; n * ho * wo * kdim];
    for ni in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = &mut cols[((ni * ho + oy) * wo + ox) * kdim..][..kdim];
                for ky in 0..k {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((ni * h + iy as usize) * w + ix as usize) * c;
                        row[(ky * k + kx) * c..][..c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    Some(cols)
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients back onto the input grid.
fn col2im(cols: Vec<f64>, dims: [usize; 4], geom: ConvGeom, ho: usize, wo: usize) -> Vec<f64> {
    let [n, h, w, c] = dims;
    if geom == ConvGeom::POINTWISE {
        return cols;
    }
    let k = geom.kernel;
    let kdim = k * k * c;
    let mut x = vec![0.0; n * h * w * c];
    for ni in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = &cols[((ni * ho + oy) * wo + ox) * kdim..][..kdim];
                for ky in 0..k {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = ((ni * h + iy as usize) * w + ix as usize) * c;
                        for (d, s) in x[dst..dst + c].iter_mut().zip(&row[(ky * k + kx) * c..][..c])
                        {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    x
}

/// Moves channel groups between neighbouring frames of each clip. `adjoint`
/// swaps the directions, which is the exact transpose of the forward shift.
pub(crate) fn shift_channels(
    src: &[f64],
    dims: [usize; 4],
    frames: usize,
    groups: usize,
    mode: ShiftMode,
    adjoint: bool,
) -> Vec<f64> {
    let [bt, h, w, c] = dims;
    let plane = h * w * c;
    let mut out = src.to_vec();
    if groups == 0 {
        return out;
    }
    // (channel range, offset of the source frame)
    let past: isize = if adjoint { 1 } else { -1 };
    let mut moves = vec![(0..groups, past)];
    if mode == ShiftMode::Bidirectional {
        moves.push((groups..2 * groups, -past));
    }
    for b in 0..bt / frames {
        for t in 0..frames {
            let dst_frame = b * frames + t;
            for (range, off) in &moves {
                let s = t as isize + off;
                let src_frame = (s >= 0 && (s as usize) < frames).then(|| b * frames + s as usize);
                for p in 0..h * w {
                    let d = dst_frame * plane + p * c;
                    match src_frame {
                        Some(sf) => {
                            let so = sf * plane + p * c;
                            out[d + range.start..d + range.end]
                                .copy_from_slice(&src[so + range.start..so + range.end]);
                        }
                        None => out[d + range.start..d + range.end].fill(0.0),
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of d(sum(out · probe))/d(input) for a graph
    /// built by `build` from one input leaf.
    fn check_input_grad(
        input: Tensor,
        build: impl Fn(&mut Graph, Var) -> Var,
    ) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut g = Graph::new();
        let x = g.leaf(input.clone(), true);
        let y = build(&mut g, x);
        let probe = rand_tensor(&mut rng, g.value(y).shape());
        let pv = g.constant(probe.clone());
        let zero = g.constant(Tensor::zeros(probe.shape()));
        // sum(y·probe) expressed through available ops: ‖y + probe‖² − ‖y‖² − ‖probe‖² = 2 y·probe
        let a = g.add(y, pv).unwrap();
        let l1 = g.mse(a, zero, false).unwrap();
        let l2 = g.mse(y, zero, false).unwrap();
        let loss = g.lin_comb(&[(l1, 0.5), (l2, -0.5)]).unwrap();
        let grads = g.backward(loss).unwrap();
        let analytic = grads.get(x).unwrap().clone();

        let f = |t: Tensor| -> f64 {
            let mut g = Graph::new();
            let x = g.leaf(t, false);
            let y = build(&mut g, x);
            g.value(y)
                .data()
                .iter()
                .zip(probe.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..input.len() {
            let mut p = input.clone();
            p.data_mut()[i] += h;
            let mut m = input.clone();
            m.data_mut()[i] -= h;
            let num = (f(p) - f(m)) / (2.0 * h);
            let an = analytic.data()[i];
            let err = (num - an).abs() / num.abs().max(an.abs()).max(1e-6);
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn conv_strided_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = rand_tensor(&mut rng, &[9 * 3, 4]);
        let b = rand_tensor(&mut rng, &[4]);
        let x = rand_tensor(&mut rng, &[2, 6, 6, 3]);
        let err = check_input_grad(x, |g, x| {
            let w = g.constant(w.clone());
            let b = g.constant(b.clone());
            g.conv2d(x, w, b, ConvGeom::DOWN3).unwrap()
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn conv_transpose_and_merge_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = rand_tensor(&mut rng, &[6, 4 * 2]);
        let b = rand_tensor(&mut rng, &[2]);
        let x = rand_tensor(&mut rng, &[4, 3, 3, 3]);
        let err = check_input_grad(x, |g, x| {
            let m = g.merge_time(x, 2).unwrap();
            let w = g.constant(w.clone());
            let b = g.constant(b.clone());
            g.conv_transpose2x2(m, w, b).unwrap()
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn batch_norm_and_channel_ops_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gamma = rand_tensor(&mut rng, &[4]);
        let beta = rand_tensor(&mut rng, &[4]);
        let x = rand_tensor(&mut rng, &[2, 3, 3, 4]);
        let err = check_input_grad(x, |g, x| {
            let ga = g.constant(gamma.clone());
            let be = g.constant(beta.clone());
            let (y, _) = g.batch_norm(x, ga, be).unwrap();
            let pooled = g.global_avg_pool(y).unwrap();
            let s = g.sigmoid(pooled);
            let z = g.channel_scale(y, s).unwrap();
            let t = g.tanh(z, 2.0);
            let c = g.concat_channels(t, x).unwrap();
            g.l2_normalize_rows(c)
        });
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn memory_read_gradient_wrt_features_and_bank() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bank = rand_tensor(&mut rng, &[5, 4]);
        let q = rand_tensor(&mut rng, &[1, 2, 3, 4]);
        let err = check_input_grad(q, |g, x| {
            let b = g.constant(bank.clone());
            g.memory_read(x, b).unwrap()
        });
        assert!(err < 1e-5, "{err}");
        let q = rand_tensor(&mut rng, &[6, 4]);
        let err = check_input_grad(bank.clone(), |g, b| {
            let x = g.constant(q.clone());
            g.memory_read(x, b).unwrap()
        });
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn temporal_shift_is_adjoint_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[6, 2, 2, 8]);
        for mode in [ShiftMode::Bidirectional, ShiftMode::PastOnly] {
            let err = check_input_grad(x.clone(), |g, x| g.temporal_shift(x, 3, 2, mode).unwrap());
            assert!(err < 1e-6, "{err}");
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]), true);
        assert!(g.backward(x).is_err());
    }
}
