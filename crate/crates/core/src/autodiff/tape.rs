//! Wengert tape: ops record themselves during the forward pass and replay in
//! reverse for gradients. Buffers are immutable after creation except the
//! gradient accumulators; a tape is single-owner and single-threaded.
//! Parameter buffers can be borrowed, so independent tapes on worker threads
//! share one read-only weight set.

use super::kernels::{self, ConvGeom};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

enum Data<'p, S> {
    Owned(Vec<S>),
    Shared(&'p [S]),
}

struct Buf<'p, S> {
    dims: Vec<usize>,
    data: Data<'p, S>,
    from_op: bool,
}

impl<S> Buf<'_, S> {
    fn values(&self) -> &[S] {
        match &self.data {
            Data::Owned(v) => v,
            Data::Shared(v) => v,
        }
    }
    fn numel(&self) -> usize {
        self.values().len()
    }
}

enum Op<S> {
    Matmul {
        a: ValueId,
        b: ValueId,
        out: ValueId,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: ValueId,
        w: ValueId,
        out: ValueId,
        geom: ConvGeom,
        col: Vec<S>,
    },
    MaxPool {
        x: ValueId,
        out: ValueId,
        argmax: Vec<u32>,
    },
    Relu {
        x: ValueId,
        out: ValueId,
    },
    Tanh {
        x: ValueId,
        out: ValueId,
    },
    Sigmoid {
        x: ValueId,
        out: ValueId,
    },
    Add {
        a: ValueId,
        b: ValueId,
        out: ValueId,
    },
    Mul {
        a: ValueId,
        b: ValueId,
        out: ValueId,
    },
    Scale {
        x: ValueId,
        out: ValueId,
        c: f64,
    },
    Clip {
        x: ValueId,
        out: ValueId,
        lo: f64,
        hi: f64,
    },
    AddChannelBias {
        x: ValueId,
        b: ValueId,
        out: ValueId,
        ch: usize,
    },
    AddRowBroadcast {
        x: ValueId,
        v: ValueId,
        out: ValueId,
        cols: usize,
    },
    Softmax {
        x: ValueId,
        out: ValueId,
        /// One group id per element; `None` means the whole tensor is one group.
        gid: Option<Vec<u32>>,
        n_groups: usize,
    },
    SmoothedCe {
        logits: ValueId,
        out: ValueId,
        target: usize,
        smoothing: f64,
        probs: Vec<S>,
    },
    Sum {
        x: ValueId,
        out: ValueId,
    },
    AddN {
        xs: Vec<ValueId>,
        out: ValueId,
    },
    SelectColumn {
        w: ValueId,
        out: ValueId,
        col: usize,
        rows: usize,
        cols: usize,
    },
    SelectElement {
        x: ValueId,
        out: ValueId,
        idx: usize,
    },
    Slice {
        x: ValueId,
        out: ValueId,
        start: usize,
    },
    ConcatWidth {
        xs: Vec<ValueId>,
        out: ValueId,
        h: usize,
        ch: usize,
        widths: Vec<usize>,
    },
    CoordBias {
        wi: ValueId,
        wj: ValueId,
        out: ValueId,
        gi: usize,
        gj: usize,
        ad: usize,
    },
    Reshape {
        x: ValueId,
        out: ValueId,
    },
}

pub struct Tape<'p, S> {
    bufs: Vec<Buf<'p, S>>,
    ops: Vec<Op<S>>,
    grads: Vec<Option<Vec<S>>>,
    recording: bool,
    sig: u64,
}

const SIG_SEED: u64 = 0xcbf2_9ce4_8422_2325;

impl<'p, S: Scalar> Default for Tape<'p, S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, S: Scalar> Tape<'p, S> {
    /// Recording tape: supports `backward`.
    pub fn new() -> Self {
        Tape {
            bufs: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
            recording: true,
            sig: SIG_SEED,
        }
    }

    /// Forward-only tape: same numerics, no op records, no backward.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Hash over every branch decision taken this forward pass (pooling
    /// argmaxes, relu/clip region counts). Two passes through the same graph
    /// with different signatures crossed a non-differentiable boundary.
    pub fn signature(&self) -> u64 {
        self.sig
    }

    // -- buffers ---------------------------------------------------------

    fn push(&mut self, dims: Vec<usize>, data: Data<'p, S>, from_op: bool) -> ValueId {
        debug_assert_eq!(
            dims.iter().product::<usize>(),
            match &data {
                Data::Owned(v) => v.len(),
                Data::Shared(v) => v.len(),
            }
        );
        let id = ValueId(self.bufs.len() as u32);
        self.bufs.push(Buf {
            dims,
            data,
            from_op,
        });
        self.grads.push(None);
        id
    }

    fn out(&mut self, dims: Vec<usize>, values: Vec<S>) -> ValueId {
        self.push(dims, Data::Owned(values), true)
    }

    /// Copy a tensor onto the tape as a leaf.
    pub fn leaf(&mut self, t: &Tensor<S>) -> ValueId {
        self.push(t.dims.clone(), Data::Owned(t.values.clone()), false)
    }

    /// Borrow a tensor as a leaf; zero-copy, read-only for the tape lifetime.
    pub fn shared(&mut self, t: &'p Tensor<S>) -> ValueId {
        self.push(t.dims.clone(), Data::Shared(&t.values), false)
    }

    pub fn literal(&mut self, dims: &[usize], values: Vec<S>) -> Result<ValueId> {
        if dims.iter().product::<usize>() != values.len() {
            return Err(Error::invalid(format!(
                "literal dims {:?} need {} values, got {}",
                dims,
                dims.iter().product::<usize>(),
                values.len()
            )));
        }
        Ok(self.push(dims.to_vec(), Data::Owned(values), false))
    }

    pub fn values(&self, id: ValueId) -> &[S] {
        self.bufs[id.0 as usize].values()
    }

    pub fn dims(&self, id: ValueId) -> &[usize] {
        &self.bufs[id.0 as usize].dims
    }

    /// Gradient accumulated for `id`, if any reached it.
    pub fn grad(&self, id: ValueId) -> Option<&[S]> {
        self.grads[id.0 as usize].as_deref()
    }

    /// Value + gradient as a tensor (zero gradient if none flowed).
    pub fn tensor(&self, id: ValueId) -> Tensor<S> {
        let b = &self.bufs[id.0 as usize];
        Tensor {
            dims: b.dims.clone(),
            values: b.values().to_vec(),
            grad: Some(match self.grad(id) {
                Some(g) => g.to_vec(),
                None => vec![S::zero(); b.numel()],
            }),
        }
    }

    fn sig_mix(&mut self, v: u64) {
        self.sig = (self.sig ^ v).wrapping_mul(0x0000_0100_0000_01b3);
    }

    // -- forward ops -----------------------------------------------------

    /// Matrix product; accepts [m,k]x[k,n], [m,k]x[k] and [k]x[k,n].
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let da = self.dims(a).to_vec();
        let db = self.dims(b).to_vec();
        let (m, k, n, out_dims) = match (da.len(), db.len()) {
            (2, 2) if da[1] == db[0] => (da[0], da[1], db[1], vec![da[0], db[1]]),
            (2, 1) if da[1] == db[0] => (da[0], da[1], 1, vec![da[0]]),
            (1, 2) if da[0] == db[0] => (1, da[0], db[1], vec![db[1]]),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: da,
                    rhs: db,
                })
            }
        };
        let mut values = vec![S::zero(); m * n];
        kernels::mm_acc(self.values(a), self.values(b), &mut values, m, k, n);
        let out = self.out(out_dims, values);
        if self.recording {
            self.ops.push(Op::Matmul { a, b, out, m, k, n });
        }
        Ok(out)
    }

    /// Cross-correlation of x[h,w,c_in] with kernel[kh,kw,c_in,c_out].
    pub fn conv2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        stride: usize,
        pad: Padding,
    ) -> Result<ValueId> {
        let dx = self.dims(x).to_vec();
        let dw = self.dims(w).to_vec();
        if dx.len() != 3 || dw.len() != 4 || dx[2] != dw[2] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: dx,
                rhs: dw,
            });
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be positive"));
        }
        let (h, wd, c_in) = (dx[0], dx[1], dx[2]);
        let (kh, kw, c_out) = (dw[0], dw[1], dw[3]);
        let geom = match pad {
            Padding::Valid => {
                if kh > h || kw > wd {
                    return Err(Error::ShapeMismatch {
                        op: "conv2d(valid): kernel exceeds input",
                        lhs: dx,
                        rhs: dw,
                    });
                }
                ConvGeom {
                    h,
                    w: wd,
                    c_in,
                    kh,
                    kw,
                    c_out,
                    stride,
                    pad_top: 0,
                    pad_left: 0,
                    out_h: (h - kh) / stride + 1,
                    out_w: (wd - kw) / stride + 1,
                }
            }
            Padding::Same => {
                let out_h = h.div_ceil(stride);
                let out_w = wd.div_ceil(stride);
                let pad_h = ((out_h - 1) * stride + kh).saturating_sub(h);
                let pad_w = ((out_w - 1) * stride + kw).saturating_sub(wd);
                ConvGeom {
                    h,
                    w: wd,
                    c_in,
                    kh,
                    kw,
                    c_out,
                    stride,
                    pad_top: pad_h / 2,
                    pad_left: pad_w / 2,
                    out_h,
                    out_w,
                }
            }
        };
        let mut col = vec![S::zero(); geom.out_positions() * geom.patch_len()];
        kernels::im2col(self.values(x), &geom, &mut col);
        let mut values = vec![S::zero(); geom.out_positions() * c_out];
        kernels::mm_acc(
            &col,
            self.values(w),
            &mut values,
            geom.out_positions(),
            geom.patch_len(),
            c_out,
        );
        let out = self.out(vec![geom.out_h, geom.out_w, c_out], values);
        if self.recording {
            self.ops.push(Op::Conv2d {
                x,
                w,
                out,
                geom,
                col,
            });
        }
        Ok(out)
    }

    /// Per-channel window max; gradient goes to the first argmax in
    /// row-major scan order.
    pub fn maxpool2d(&mut self, x: ValueId, window: usize, stride: usize) -> Result<ValueId> {
        let dx = self.dims(x).to_vec();
        if dx.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "maxpool2d",
                lhs: dx,
                rhs: vec![window, window],
            });
        }
        let (h, w, c) = (dx[0], dx[1], dx[2]);
        if window == 0 || stride == 0 || window > h || window > w {
            return Err(Error::ShapeMismatch {
                op: "maxpool2d: window exceeds input",
                lhs: dx,
                rhs: vec![window, window],
            });
        }
        let out_h = (h - window) / stride + 1;
        let out_w = (w - window) / stride + 1;
        let xs = self.values(x);
        let mut values = vec![S::zero(); out_h * out_w * c];
        let mut argmax = vec![0u32; out_h * out_w * c];
        for oy in 0..out_h {
            for ox in 0..out_w {
                for ch in 0..c {
                    let mut best = S::neg_infinity();
                    let mut best_at = 0u32;
                    for ky in 0..window {
                        for kx in 0..window {
                            let src = ((oy * stride + ky) * w + (ox * stride + kx)) * c + ch;
                            if xs[src] > best {
                                best = xs[src];
                                best_at = src as u32;
                            }
                        }
                    }
                    let o = (oy * out_w + ox) * c + ch;
                    values[o] = best;
                    argmax[o] = best_at;
                }
            }
        }
        for &a in &argmax {
            self.sig_mix(a as u64);
        }
        let out = self.out(vec![out_h, out_w, c], values);
        if self.recording {
            self.ops.push(Op::MaxPool { x, out, argmax });
        }
        Ok(out)
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let mut positives = 0u64;
        let values: Vec<S> = self
            .values(x)
            .iter()
            .map(|&v| {
                if v > S::zero() {
                    positives += 1;
                    v
                } else {
                    S::zero()
                }
            })
            .collect();
        self.sig_mix(positives);
        let dims = self.dims(x).to_vec();
        let out = self.out(dims, values);
        if self.recording {
            self.ops.push(Op::Relu { x, out });
        }
        out
    }

    pub fn tanh_act(&mut self, x: ValueId) -> ValueId {
        let values: Vec<S> = self.values(x).iter().map(|v| v.tanh()).collect();
        let dims = self.dims(x).to_vec();
        let out = self.out(dims, values);
        if self.recording {
            self.ops.push(Op::Tanh { x, out });
        }
        out
    }

    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        let one = S::one();
        let values: Vec<S> = self
            .values(x)
            .iter()
            .map(|&v| one / (one + (-v).exp()))
            .collect();
        let dims = self.dims(x).to_vec();
        let out = self.out(dims, values);
        if self.recording {
            self.ops.push(Op::Sigmoid { x, out });
        }
        out
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, |a, b, out| Op::Add { a, b, out })
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, |a, b, out| Op::Mul { a, b, out })
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: ValueId,
        b: ValueId,
        f: impl Fn(S, S) -> S,
        mk: impl FnOnce(ValueId, ValueId, ValueId) -> Op<S>,
    ) -> Result<ValueId> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: self.dims(a).to_vec(),
                rhs: self.dims(b).to_vec(),
            });
        }
        let values: Vec<S> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let dims = self.dims(a).to_vec();
        let out = self.out(dims, values);
        if self.recording {
            self.ops.push(mk(a, b, out));
        }
        Ok(out)
    }

    pub fn scale(&mut self, x: ValueId, c: f64) -> ValueId {
        let cs = S::from_f64(c);
        let values: Vec<S> = self.values(x).iter().map(|&v| v * cs).collect();
        let dims = self.dims(x).to_vec();
        let out = self.out(dims, values);
        if self.recording {
            self.ops.push(Op::Scale { x, out, c });
        }
        out
    }

    /// Clamp to [lo, hi]; gradient is 1 strictly inside, 0 outside.
    pub fn clip(&mut self, x: ValueId, lo: f64, hi: f64) -> ValueId {
        assert!(lo < hi, "clip: empty range");
        let (ls, hs) = (S::from_f64(lo), S::from_f64(hi));
        let mut inside = 0u64;
        let values: Vec<S> = self
            .values(x)
            .iter()
            .map(|&v| {
                if v < ls {
                    ls
                } else if v > hs {
                    hs
                } else {
                    inside += 1;
                    v
                }
            })
            .collect();
        self.sig_mix(inside);
        let dims = self.dims(x).to_vec();
        let out = self.out(dims, values);
        if self.recording {
            self.ops.push(Op::Clip { x, out, lo, hi });
        }
        out
    }

    /// x[h,w,c] + b[c] broadcast over the spatial grid.
    pub fn add_channel_bias(&mut self, x: ValueId, b: ValueId) -> Result<ValueId> {
        let dx = self.dims(x).to_vec();
        let db = self.dims(b).to_vec();
        if dx.len() != 3 || db.len() != 1 || dx[2] != db[0] {
            return Err(Error::ShapeMismatch {
                op: "add_channel_bias",
                lhs: dx,
                rhs: db,
            });
        }
        let ch = dx[2];
        let bs = self.values(b).to_vec();
        let mut values = self.values(x).to_vec();
        for row in values.chunks_exact_mut(ch) {
            for (v, &bv) in row.iter_mut().zip(&bs) {
                *v += bv;
            }
        }
        let out = self.out(dx, values);
        if self.recording {
            self.ops.push(Op::AddChannelBias { x, b, out, ch });
        }
        Ok(out)
    }

    /// x[rows,cols] + v[cols] broadcast down the rows.
    pub fn add_row_broadcast(&mut self, x: ValueId, v: ValueId) -> Result<ValueId> {
        let dx = self.dims(x).to_vec();
        let dv = self.dims(v).to_vec();
        if dx.len() != 2 || dv.len() != 1 || dx[1] != dv[0] {
            return Err(Error::ShapeMismatch {
                op: "add_row_broadcast",
                lhs: dx,
                rhs: dv,
            });
        }
        let cols = dx[1];
        let vs = self.values(v).to_vec();
        let mut values = self.values(x).to_vec();
        for row in values.chunks_exact_mut(cols) {
            for (o, &bv) in row.iter_mut().zip(&vs) {
                *o += bv;
            }
        }
        let out = self.out(dx, values);
        if self.recording {
            self.ops.push(Op::AddRowBroadcast { x, v, out, cols });
        }
        Ok(out)
    }

    /// Exp-normalize over the named axes (max-subtracted). Entries in one
    /// group share every coordinate on the axes *not* named.
    pub fn softmax(&mut self, x: ValueId, axes: &[usize]) -> Result<ValueId> {
        let dims = self.dims(x).to_vec();
        let rank = dims.len();
        let mut ax: Vec<usize> = axes.to_vec();
        ax.sort_unstable();
        ax.dedup();
        if ax.is_empty() || ax.iter().any(|&a| a >= rank) {
            return Err(Error::invalid(format!(
                "softmax: invalid axis set {:?} for rank {}",
                axes, rank
            )));
        }
        let n = self.bufs[x.0 as usize].numel();
        let (gid, n_groups) = if ax.len() == rank {
            (None, 1usize)
        } else {
            // strides for the input, group strides over complement axes
            let mut strides = vec![1usize; rank];
            for d in (0..rank - 1).rev() {
                strides[d] = strides[d + 1] * dims[d + 1];
            }
            let comp: Vec<usize> = (0..rank).filter(|d| !ax.contains(d)).collect();
            let mut n_groups = 1usize;
            let mut gstride = vec![0usize; rank];
            for &d in comp.iter().rev() {
                gstride[d] = n_groups;
                n_groups *= dims[d];
            }
            let mut gid = vec![0u32; n];
            for (p, g) in gid.iter_mut().enumerate() {
                let mut acc = 0usize;
                for &d in &comp {
                    acc += ((p / strides[d]) % dims[d]) * gstride[d];
                }
                *g = acc as u32;
            }
            (Some(gid), n_groups)
        };
        let xs = self.values(x);
        let mut values = vec![S::zero(); n];
        match &gid {
            None => softmax_group(xs, &mut values),
            Some(g) => {
                let mut maxes = vec![S::neg_infinity(); n_groups];
                for (p, &v) in xs.iter().enumerate() {
                    let gi = g[p] as usize;
                    if v > maxes[gi] {
                        maxes[gi] = v;
                    }
                }
                let mut sums = vec![S::zero(); n_groups];
                for (p, &v) in xs.iter().enumerate() {
                    let gi = g[p] as usize;
                    let e = (v - maxes[gi]).exp();
                    values[p] = e;
                    sums[gi] += e;
                }
                for (p, v) in values.iter_mut().enumerate() {
                    *v = *v / sums[g[p] as usize];
                }
            }
        }
        let out = self.out(dims, values);
        if self.recording {
            self.ops.push(Op::Softmax {
                x,
                out,
                gid,
                n_groups,
            });
        }
        Ok(out)
    }

    /// Cross entropy against the smoothed target distribution
    /// q = smoothing*onehot(target) + (1-smoothing)/V.
    pub fn smoothed_cross_entropy(
        &mut self,
        logits: ValueId,
        target: usize,
        smoothing: f64,
    ) -> Result<ValueId> {
        let dims = self.dims(logits).to_vec();
        if dims.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "smoothed_cross_entropy",
                lhs: dims,
                rhs: vec![0],
            });
        }
        let v = dims[0];
        if target >= v {
            return Err(Error::IndexOutOfRange {
                what: "smoothed_cross_entropy target",
                index: target,
                len: v,
            });
        }
        if !(smoothing > 0.0 && smoothing <= 1.0) {
            return Err(Error::invalid(format!(
                "smoothed_cross_entropy: smoothing {} outside (0,1]",
                smoothing
            )));
        }
        let xs = self.values(logits);
        let mut probs = vec![S::zero(); v];
        softmax_group(xs, &mut probs);
        let uniform = (1.0 - smoothing) / v as f64;
        let mut loss = 0.0f64;
        for (i, p) in probs.iter().enumerate() {
            let q = uniform + if i == target { smoothing } else { 0.0 };
            if q > 0.0 {
                loss -= q * p.as_f64().max(f64::MIN_POSITIVE).ln();
            }
        }
        let out = self.out(vec![1], vec![S::from_f64(loss)]);
        if self.recording {
            self.ops.push(Op::SmoothedCe {
                logits,
                out,
                target,
                smoothing,
                probs,
            });
        }
        Ok(out)
    }

    pub fn sum(&mut self, x: ValueId) -> ValueId {
        let mut acc = S::zero();
        for &v in self.values(x) {
            acc += v;
        }
        let out = self.out(vec![1], vec![acc]);
        if self.recording {
            self.ops.push(Op::Sum { x, out });
        }
        out
    }

    /// Elementwise sum of >=1 same-shape tensors.
    pub fn add_n(&mut self, xs: &[ValueId]) -> Result<ValueId> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::invalid("add_n: empty input list"))?;
        let dims = self.dims(first).to_vec();
        for &x in &xs[1..] {
            if self.dims(x) != dims {
                return Err(Error::ShapeMismatch {
                    op: "add_n",
                    lhs: dims,
                    rhs: self.dims(x).to_vec(),
                });
            }
        }
        let mut values = self.values(first).to_vec();
        for &x in &xs[1..] {
            for (o, &v) in values.iter_mut().zip(self.values(x)) {
                *o += v;
            }
        }
        let out = self.out(dims, values);
        if self.recording {
            self.ops.push(Op::AddN {
                xs: xs.to_vec(),
                out,
            });
        }
        Ok(out)
    }

    /// Column `col` of w[rows,cols] as a vector; the one-hot matrix product.
    pub fn select_column(&mut self, w: ValueId, col: usize) -> Result<ValueId> {
        let dw = self.dims(w).to_vec();
        if dw.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "select_column",
                lhs: dw,
                rhs: vec![col],
            });
        }
        let (rows, cols) = (dw[0], dw[1]);
        if col >= cols {
            return Err(Error::IndexOutOfRange {
                what: "select_column",
                index: col,
                len: cols,
            });
        }
        let ws = self.values(w);
        let values: Vec<S> = (0..rows).map(|r| ws[r * cols + col]).collect();
        let out = self.out(vec![rows], values);
        if self.recording {
            self.ops.push(Op::SelectColumn {
                w,
                out,
                col,
                rows,
                cols,
            });
        }
        Ok(out)
    }

    /// One element by flat index, as a scalar.
    pub fn select_element(&mut self, x: ValueId, idx: usize) -> Result<ValueId> {
        let n = self.bufs[x.0 as usize].numel();
        if idx >= n {
            return Err(Error::IndexOutOfRange {
                what: "select_element",
                index: idx,
                len: n,
            });
        }
        let v = self.values(x)[idx];
        let out = self.out(vec![1], vec![v]);
        if self.recording {
            self.ops.push(Op::SelectElement { x, out, idx });
        }
        Ok(out)
    }

    /// Contiguous 1-D slice [start, start+len).
    pub fn slice(&mut self, x: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let dx = self.dims(x).to_vec();
        let n = self.bufs[x.0 as usize].numel();
        if dx.len() != 1 || start + len > n {
            return Err(Error::IndexOutOfRange {
                what: "slice",
                index: start + len,
                len: n,
            });
        }
        let values = self.values(x)[start..start + len].to_vec();
        let out = self.out(vec![len], values);
        if self.recording {
            self.ops.push(Op::Slice { x, out, start });
        }
        Ok(out)
    }

    /// Stack [h, w_k, c] maps side by side along the width axis.
    pub fn concat_width(&mut self, xs: &[ValueId]) -> Result<ValueId> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::invalid("concat_width: empty input list"))?;
        let d0 = self.dims(first).to_vec();
        if d0.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "concat_width",
                lhs: d0,
                rhs: vec![],
            });
        }
        let (h, ch) = (d0[0], d0[2]);
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let d = self.dims(x).to_vec();
            if d.len() != 3 || d[0] != h || d[2] != ch {
                return Err(Error::ShapeMismatch {
                    op: "concat_width",
                    lhs: d0,
                    rhs: d,
                });
            }
            widths.push(d[1]);
        }
        let w_total: usize = widths.iter().sum();
        let mut values = vec![S::zero(); h * w_total * ch];
        let mut off = 0usize;
        for (&x, &wk) in xs.iter().zip(&widths) {
            let src = self.values(x);
            for row in 0..h {
                let dst_start = (row * w_total + off) * ch;
                values[dst_start..dst_start + wk * ch]
                    .copy_from_slice(&src[row * wk * ch..(row + 1) * wk * ch]);
            }
            off += wk;
        }
        let out = self.out(vec![h, w_total, ch], values);
        if self.recording {
            self.ops.push(Op::ConcatWidth {
                xs: xs.to_vec(),
                out,
                h,
                ch,
                widths,
            });
        }
        Ok(out)
    }

    /// Per-cell coordinate bias: row (i*gj + j) of the output is
    /// column i of wi plus column j of wj. This *is* the one-hot coordinate
    /// encoding: wi[:,i] = wi . e_i.
    pub fn coord_bias(&mut self, wi: ValueId, wj: ValueId, gi: usize, gj: usize) -> Result<ValueId> {
        let di = self.dims(wi).to_vec();
        let dj = self.dims(wj).to_vec();
        if di.len() != 2 || dj.len() != 2 || di[0] != dj[0] || di[1] != gi || dj[1] != gj {
            return Err(Error::ShapeMismatch {
                op: "coord_bias",
                lhs: di,
                rhs: dj,
            });
        }
        let ad = di[0];
        let wis = self.values(wi);
        let wjs = self.values(wj);
        let mut values = vec![S::zero(); gi * gj * ad];
        for i in 0..gi {
            for j in 0..gj {
                let row = &mut values[(i * gj + j) * ad..(i * gj + j + 1) * ad];
                for (a, rv) in row.iter_mut().enumerate() {
                    *rv = wis[a * gi + i] + wjs[a * gj + j];
                }
            }
        }
        let out = self.out(vec![gi * gj, ad], values);
        if self.recording {
            self.ops.push(Op::CoordBias {
                wi,
                wj,
                out,
                gi,
                gj,
                ad,
            });
        }
        Ok(out)
    }

    /// Same flat data, new dims.
    pub fn reshape(&mut self, x: ValueId, dims: &[usize]) -> Result<ValueId> {
        let n = self.bufs[x.0 as usize].numel();
        if dims.iter().product::<usize>() != n {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.dims(x).to_vec(),
                rhs: dims.to_vec(),
            });
        }
        let values = self.values(x).to_vec();
        let out = self.out(dims.to_vec(), values);
        if self.recording {
            self.ops.push(Op::Reshape { x, out });
        }
        Ok(out)
    }

    // -- backward --------------------------------------------------------

    /// Reverse sweep from a scalar loss. Leaf gradients accumulate across
    /// repeated calls; op-output gradients are recomputed each call.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if !self.recording {
            return Err(Error::invalid("backward: tape was built in inference mode"));
        }
        if self.bufs[loss.0 as usize].numel() != 1 {
            return Err(Error::invalid(format!(
                "backward: loss must be scalar, got dims {:?}",
                self.dims(loss)
            )));
        }
        let Tape {
            bufs, ops, grads, ..
        } = self;
        // reset non-leaf accumulators so a second call does not feed the
        // previous sweep's intermediates back into the graph
        for (b, g) in bufs.iter().zip(grads.iter_mut()) {
            if b.from_op {
                *g = None;
            }
        }
        acc_at(grads, bufs, loss, 0, S::one());
        for op in ops.iter().rev() {
            match op {
                Op::Matmul { a, b, out, m, k, n } => {
                    let Some(dout) = grads[out.0 as usize].clone() else {
                        continue;
                    };
                    let (m, k, n) = (*m, *k, *n);
                    let bv = bufs[b.0 as usize].values();
                    let da = grad_buf(grads, bufs, *a);
                    kernels::mm_bt_acc(&dout, bv, da, m, k, n);
                    let av = bufs[a.0 as usize].values();
                    let db = grad_buf(grads, bufs, *b);
                    kernels::mm_at_acc(av, &dout, db, m, k, n);
                }
                Op::Conv2d {
                    x,
                    w,
                    out,
                    geom,
                    col,
                } => {
                    let Some(dout) = grads[out.0 as usize].clone() else {
                        continue;
                    };
                    let p = geom.out_positions();
                    let pl = geom.patch_len();
                    let dw = grad_buf(grads, bufs, *w);
                    kernels::mm_at_acc(col, &dout, dw, p, pl, geom.c_out);
                    let wv = bufs[w.0 as usize].values();
                    let mut dcol = vec![S::zero(); p * pl];
                    kernels::mm_bt_acc(&dout, wv, &mut dcol, p, pl, geom.c_out);
                    let dx = grad_buf(grads, bufs, *x);
                    kernels::col2im_acc(&dcol, geom, dx);
                }
                Op::MaxPool { x, out, argmax } => {
                    let Some(dout) = grads[out.0 as usize].clone() else {
                        continue;
                    };
                    let dx = grad_buf(grads, bufs, *x);
                    for (&src, &g) in argmax.iter().zip(&dout) {
                        dx[src as usize] += g;
                    }
                }
                Op::Relu { x, out } => {
                    let Some(dout) = grads[out.0 as usize].clone() else {
                        continue;
                    };
                    let xv: Vec<S> = bufs[x.0 as usize].values().to_vec();
                    let dx = grad_buf(grads, bufs, *x);
                    for ((d, &g), &v) in dx.iter_mut().zip(&dout).zip(&xv) {
                        if v > S::zero() {
                            *d += g;
                        }
                    }
                }
                Op::Tanh { x, out } => {
                    let Some(dout) = grads[out.0 as usize].clone() else {
                        continue;
                    };
                    let yv: Vec<S> = bufs[out.0 as usize].values().to_vec();
                    let dx = grad_buf(grads, bufs, *x);
                    for ((d, &g), &y) in dx.iter_mut().zip(&dout).zip(&yv) {
                        *d += g * (S::one() - y * y);
                    }
                }
                Op::Sigmoid { x, out } => {
                    let Some(dout) = grads[out.0 as usize].clone() else {
                        continue;
                    };
                    let yv: Vec<S> = bufs[out.0 as usize].values().to_vec();
                    let dx = grad_buf(grads, bufs, *x);
                    for ((d, &g), &y) in dx.iter_mut().zip(&dout).zip(&yv) {
                        *d += g * y * (S::one() - y);
                    }
                }
                Op::Add { a, b, out } => {
                    let Some(dout) = grads[out.0 as usize].clone() else {
                        continue;
                    };
                    let da = grad_buf(grads, bufs, *a);
                    for (d, &g) in da.iter_mut().zip(&dout) {
                        *d += g;
                    }
                    let db = grad_buf(grads, bufs, *b);
                    for (d, &g) in db.iter_mut().zip(&dout) {
                        *d += g;
                    }
                }
                Op::Mul { a, b, out } => {
                    let Some(dout) = grads[out.0 as usize].clone() else {
                        continue;
                    };
                    let bv: Vec<S> = bufs[b.0 as usize].values().to_vec();
                    let da = grad_buf(grads, bufs, *a);
                    for ((d, &g), &v) in da.iter_mut().zip(&dout).zip(&bv) {
                        *d += g * v;
                    }
                    let av: Vec<S> = bufs[a.0 as usize].values().to_vec();
                    let db = grad_buf(grads, bufs, *b);
                    for ((d, &g), &v) in db.iter_mut().zip(&dout).zip(&av) {
                        *d += g * v;
                    }
                }
                Op::Scale { x, out, c } => {
                    let Some(dout) = grads[out.0 as usize].clone() else {
                        continue;
                    };
                    let cs = S::from_f64(*c);
                    let dx = grad_buf(grads, bufs, *x);
                    for (d, &g) in dx.iter_mut().zip(&dout) {
                        *d += g * cs;
                    }
                }
                Op::Clip { x, out, lo, hi } => {
                    let Some(dout) = grads[out.0 as usize].clone() else {
                        continue;
                    };
                    let (ls, hs) = (S::from_f64(*lo), S::from_f64(*hi));
                    let xv: Vec<S> = bufs[x.0 as usize].values().to_vec();
                    let dx = grad_buf(grads, bufs, *x);
                    for ((d, &g), &v) in dx.iter_mut().zip(&dout).zip(&xv) {
                        if v > ls && v < hs {
                            *d += g;
                        }
                    }
                }
                Op::AddChannelBias { x, b, out, ch, .. } => {
                    let Some(dout) = grads[out.0 as usize].clone() else {
                        continue;
                    };
                    let dx = grad_buf(grads, bufs, *x);
                    for (d, &g) in dx.iter_mut().zip(&dout) {
                        *d += g;
                    }
                    let db = grad_buf(grads, bufs, *b);
                    for row in dout.chunks_exact(*ch) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                }
                Op::AddRowBroadcast { x, v, out, cols } => {
                    let Some(dout) = grads[out.0 as usize].clone() else {
                        continue;
                    };
                    let dx = grad_buf(grads, bufs, *x);
                    for (d, &g) in dx.iter_mut().zip(&dout) {
                        *d += g;
                    }
                    let dv = grad_buf(grads, bufs, *v);
                    for row in dout.chunks_exact(*cols) {
                        for (d, &g) in dv.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                }
                Op::Softmax {
                    x,
                    out,
                    gid,
                    n_groups,
                } => {
                    let Some(dout) = grads[out.0 as usize].clone() else {
                        continue;
                    };
                    let yv: Vec<S> = bufs[out.0 as usize].values().to_vec();
                    let mut inner = vec![S::zero(); *n_groups];
                    match gid {
                        None => {
                            for (&y, &g) in yv.iter().zip(&dout) {
                                inner[0] += y * g;
                            }
                        }
                        Some(gids) => {
                            for ((&y, &g), &gi) in yv.iter().zip(&dout).zip(gids) {
                                inner[gi as usize] += y * g;
                            }
                        }
                    }
                    let dx = grad_buf(grads, bufs, *x);
                    match gid {
                        None => {
                            for ((d, &y), &g) in dx.iter_mut().zip(&yv).zip(&dout) {
                                *d += y * (g - inner[0]);
                            }
                        }
                        Some(gids) => {
                            for (((d, &y), &g), &gi) in
                                dx.iter_mut().zip(&yv).zip(&dout).zip(gids)
                            {
                                *d += y * (g - inner[gi as usize]);
                            }
                        }
                    }
                }
                Op::SmoothedCe {
                    logits,
                    out,
                    target,
                    smoothing,
                    probs,
                } => {
                    let Some(dout) = grads[out.0 as usize].clone() else {
                        continue;
                    };
                    let g = dout[0];
                    let v = probs.len();
                    let uniform = S::from_f64((1.0 - smoothing) / v as f64);
                    let sm = S::from_f64(*smoothing);
                    let dl = grad_buf(grads, bufs, *logits);
                    for (i, (d, &p)) in dl.iter_mut().zip(probs).enumerate() {
                        let q = uniform + if i == *target { sm } else { S::zero() };
                        *d += g * (p - q);
                    }
                }
                Op::Sum { x, out } => {
                    let Some(dout) = grads[out.0 as usize].clone() else {
                        continue;
                    };
                    let g = dout[0];
                    let dx = grad_buf(grads, bufs, *x);
                    for d in dx.iter_mut() {
                        *d += g;
                    }
                }
                Op::AddN { xs, out } => {
                    let Some(dout) = grads[out.0 as usize].clone() else {
                        continue;
                    };
                    for &x in xs {
                        let dx = grad_buf(grads, bufs, x);
                        for (d, &g) in dx.iter_mut().zip(&dout) {
                            *d += g;
                        }
                    }
                }
                Op::SelectColumn {
                    w,
                    out,
                    col,
                    rows,
                    cols,
                } => {
                    let Some(dout) = grads[out.0 as usize].clone() else {
                        continue;
                    };
                    let dw = grad_buf(grads, bufs, *w);
                    for r in 0..*rows {
                        dw[r * cols + col] += dout[r];
                    }
                }
                Op::SelectElement { x, out, idx } => {
                    let Some(dout) = grads[out.0 as usize].clone() else {
                        continue;
                    };
                    let dx = grad_buf(grads, bufs, *x);
                    dx[*idx] += dout[0];
                }
                Op::Slice { x, out, start } => {
                    let Some(dout) = grads[out.0 as usize].clone() else {
                        continue;
                    };
                    let dx = grad_buf(grads, bufs, *x);
                    for (d, &g) in dx[*start..start + dout.len()].iter_mut().zip(&dout) {
                        *d += g;
                    }
                }
                Op::ConcatWidth {
                    xs,
                    out,
                    h,
                    ch,
                    widths,
                } => {
                    let Some(dout) = grads[out.0 as usize].clone() else {
                        continue;
                    };
                    let w_total: usize = widths.iter().sum();
                    let mut off = 0usize;
                    for (&x, &wk) in xs.iter().zip(widths) {
                        let dx = grad_buf(grads, bufs, x);
                        for row in 0..*h {
                            let src = (row * w_total + off) * ch;
                            for (d, &g) in dx[row * wk * ch..(row + 1) * wk * ch]
                                .iter_mut()
                                .zip(&dout[src..src + wk * ch])
                            {
                                *d += g;
                            }
                        }
                        off += wk;
                    }
                }
                Op::CoordBias {
                    wi,
                    wj,
                    out,
                    gi,
                    gj,
                    ad,
                } => {
                    let Some(dout) = grads[out.0 as usize].clone() else {
                        continue;
                    };
                    let dwi = grad_buf(grads, bufs, *wi);
                    for i in 0..*gi {
                        for j in 0..*gj {
                            let row = &dout[(i * gj + j) * ad..(i * gj + j + 1) * ad];
                            for (a, &g) in row.iter().enumerate() {
                                dwi[a * gi + i] += g;
                            }
                        }
                    }
                    let dwj = grad_buf(grads, bufs, *wj);
                    for i in 0..*gi {
                        for j in 0..*gj {
                            let row = &dout[(i * gj + j) * ad..(i * gj + j + 1) * ad];
                            for (a, &g) in row.iter().enumerate() {
                                dwj[a * gj + j] += g;
                            }
                        }
                    }
                }
                Op::Reshape { x, out } => {
                    let Some(dout) = grads[out.0 as usize].clone() else {
                        continue;
                    };
                    let dx = grad_buf(grads, bufs, *x);
                    for (d, &g) in dx.iter_mut().zip(&dout) {
                        *d += g;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Whole-slice softmax with max subtraction.
fn softmax_group<S: Scalar>(xs: &[S], out: &mut [S]) {
    let mut m = S::neg_infinity();
    for &v in xs {
        if v > m {
            m = v;
        }
    }
    let mut sum = S::zero();
    for (o, &v) in out.iter_mut().zip(xs) {
        let e = (v - m).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

fn grad_buf<'g, S: Scalar>(
    grads: &'g mut [Option<Vec<S>>],
    bufs: &[Buf<'_, S>],
    id: ValueId,
) -> &'g mut Vec<S> {
    let slot = &mut grads[id.0 as usize];
    if slot.is_none() {
        *slot = Some(vec![S::zero(); bufs[id.0 as usize].numel()]);
    }
    slot.as_mut().unwrap()
}

fn acc_at<S: Scalar>(
    grads: &mut [Option<Vec<S>>],
    bufs: &[Buf<'_, S>],
    id: ValueId,
    idx: usize,
    v: S,
) {
    grad_buf(grads, bufs, id)[idx] += v;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn lit(t: &mut Tape<f64>, dims: &[usize], v: &[f64]) -> ValueId {
        t.literal(dims, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_row_by_column() {
        let mut t = Tape::<f64>::new();
        let a = lit(&mut t, &[1, 2], &[1.0, 2.0]);
        let b = lit(&mut t, &[2, 1], &[3.0, 4.0]);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.dims(c), &[1, 1]);
        assert_eq!(t.values(c), &[11.0]);
    }

    #[test]
    fn matmul_identity_leaves_input_unchanged() {
        let mut t = Tape::<f64>::new();
        let a = lit(&mut t, &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = lit(&mut t, &[2, 3], &[5.0, -1.0, 2.0, 0.5, 3.0, 7.0]);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.values(c), t.values(b));
    }

    #[test]
    fn matmul_vector_forms() {
        let mut t = Tape::<f64>::new();
        let m = lit(&mut t, &[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let v = lit(&mut t, &[3], &[1.0, 0.0, -1.0]);
        let mv = t.matmul(m, v).unwrap();
        assert_eq!(t.dims(mv), &[2]);
        assert_eq!(t.values(mv), &[-2.0, -2.0]);
        let r = lit(&mut t, &[2], &[1.0, 1.0]);
        let rm = t.matmul(r, m).unwrap();
        assert_eq!(t.dims(rm), &[3]);
        assert_eq!(t.values(rm), &[5.0, 7.0, 9.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut t = Tape::<f64>::new();
        let a = lit(&mut t, &[2, 3], &[0.0; 6]);
        let b = lit(&mut t, &[2, 2], &[0.0; 4]);
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn conv_identity_kernel() {
        let mut t = Tape::<f64>::new();
        let x = lit(&mut t, &[3, 3, 1], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let w = lit(&mut t, &[1, 1, 1, 1], &[1.0]);
        let y = t.conv2d(x, w, 1, Padding::Same).unwrap();
        assert_eq!(t.values(y), t.values(x));
    }

    #[test]
    fn conv_ones_kernel_counts_hot_pixel_coverage() {
        let mut t = Tape::<f64>::new();
        let mut img = vec![0.0; 25];
        img[6] = 1.0; // (1,1)
        let x = lit(&mut t, &[5, 5, 1], &img);
        let w = lit(&mut t, &[3, 3, 1, 1], &[1.0; 9]);
        let y = t.conv2d(x, w, 1, Padding::Valid).unwrap();
        assert_eq!(t.dims(y), &[3, 3, 1]);
        let expect = [1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(t.values(y), &expect);
    }

    #[test]
    fn conv_same_padding_output_grid() {
        // 64x64 stride 1 stays 64x64; stride 2 gives 32x32
        let mut t = Tape::<f64>::new();
        let x = lit(&mut t, &[64, 64, 1], &vec![0.0; 64 * 64]);
        let w = lit(&mut t, &[3, 3, 1, 2], &vec![0.0; 18]);
        let y1 = t.conv2d(x, w, 1, Padding::Same).unwrap();
        assert_eq!(t.dims(y1), &[64, 64, 2]);
        let y2 = t.conv2d(x, w, 2, Padding::Same).unwrap();
        assert_eq!(t.dims(y2), &[32, 32, 2]);
    }

    #[test]
    fn maxpool_picks_window_max() {
        let mut t = Tape::<f64>::new();
        let x = lit(&mut t, &[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
        let y = t.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(t.dims(y), &[1, 1, 1]);
        assert_eq!(t.values(y), &[4.0]);
    }

    #[test]
    fn maxpool_constant_input_routes_gradient_to_first_cell() {
        let mut t = Tape::<f64>::new();
        let x = lit(&mut t, &[2, 2, 1], &[7.0; 4]);
        let y = t.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(t.values(y), &[7.0]);
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_window_larger_than_input_is_an_error() {
        let mut t = Tape::<f64>::new();
        let x = lit(&mut t, &[2, 2, 1], &[0.0; 4]);
        assert!(t.maxpool2d(x, 3, 1).is_err());
    }

    #[test]
    fn activation_fixed_points() {
        let mut t = Tape::<f64>::new();
        let x = lit(&mut t, &[3], &[0.0, 12.3, -5.0]);
        let th = t.tanh_act(x);
        assert_eq!(t.values(th)[0], 0.0);
        let sg = t.sigmoid(x);
        assert_eq!(t.values(sg)[0], 0.5);
        let cl = t.clip(x, -10.0, 10.0);
        assert_eq!(t.values(cl), &[0.0, 10.0, -5.0]);
        let rl = t.relu(x);
        assert_eq!(t.values(rl), &[0.0, 12.3, 0.0]);
    }

    #[test]
    fn softmax_uniform_and_two_logit_values() {
        let mut t = Tape::<f64>::new();
        let u = lit(&mut t, &[5], &[0.7; 5]);
        let su = t.softmax(u, &[0]).unwrap();
        for &p in t.values(su) {
            assert!((p - 0.2).abs() < 1e-15);
        }
        let x = lit(&mut t, &[2], &[0.0, 3.0f64.ln()]);
        let sx = t.softmax(x, &[0]).unwrap();
        let p = t.values(sx);
        assert!((p[0] - 0.25).abs() < 1e-12 && (p[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_joint_over_grid_sums_to_one() {
        let mut rng = Rng::new(11);
        let vals: Vec<f64> = (0..12).map(|_| rng.gaussian() * 3.0).collect();
        let mut t = Tape::<f64>::new();
        let x = lit(&mut t, &[4, 3], &vals);
        let y = t.softmax(x, &[0, 1]).unwrap();
        let total: f64 = t.values(y).iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_per_row_groups() {
        let mut t = Tape::<f64>::new();
        let x = lit(&mut t, &[2, 2], &[0.0, 3.0f64.ln(), 100.0, 100.0]);
        let y = t.softmax(x, &[1]).unwrap();
        let p = t.values(y);
        assert!((p[0] - 0.25).abs() < 1e-12 && (p[1] - 0.75).abs() < 1e-12);
        assert!((p[2] - 0.5).abs() < 1e-12 && (p[3] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_overflow_safe() {
        let mut t = Tape::<f64>::new();
        let x = lit(&mut t, &[2], &[1000.0, 1000.0]);
        let y = t.softmax(x, &[0]).unwrap();
        let p = t.values(y);
        assert!((p[0] - 0.5).abs() < 1e-15 && p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn cross_entropy_peaked_target_is_neg_log_prob() {
        let mut t = Tape::<f64>::new();
        let x = lit(&mut t, &[3], &[0.2, 1.3, -0.4]);
        let sm = t.softmax(x, &[0]).unwrap();
        let p1 = t.values(sm)[1];
        let ce = t.smoothed_cross_entropy(x, 1, 1.0).unwrap();
        assert!((t.values(ce)[0] + p1.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_vocab() {
        let mut t = Tape::<f64>::new();
        let x = lit(&mut t, &[134], &[0.3; 134]);
        let want = (134.0f64).ln();
        for smoothing in [0.9, 0.3] {
            let ce = t.smoothed_cross_entropy(x, 7, smoothing).unwrap();
            assert!(
                (t.values(ce)[0] - want).abs() < 1e-12,
                "smoothing {smoothing}"
            );
        }
    }

    #[test]
    fn cross_entropy_rejects_bad_target_and_smoothing() {
        let mut t = Tape::<f64>::new();
        let x = lit(&mut t, &[3], &[0.0; 3]);
        assert!(t.smoothed_cross_entropy(x, 3, 0.9).is_err());
        assert!(t.smoothed_cross_entropy(x, 0, 0.0).is_err());
        assert!(t.smoothed_cross_entropy(x, 0, 1.5).is_err());
    }

    #[test]
    fn sum_of_leaf_gives_unit_gradients() {
        let mut t = Tape::<f64>::new();
        let x = lit(&mut t, &[4], &[1.0, -2.0, 0.5, 3.0]);
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn half_square_norm_gradient_is_the_input() {
        let mut t = Tape::<f64>::new();
        let xs = [0.3, -1.2, 2.5];
        let x = lit(&mut t, &[3], &xs);
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        let half = t.scale(s, 0.5);
        t.backward(half).unwrap();
        let g = t.grad(x).unwrap();
        for (gi, xi) in g.iter().zip(&xs) {
            assert!((gi - xi).abs() < 1e-15);
        }
    }

    #[test]
    fn unused_parameter_has_no_gradient() {
        let mut t = Tape::<f64>::new();
        let x = lit(&mut t, &[2], &[1.0, 2.0]);
        let unused = lit(&mut t, &[2], &[5.0, 6.0]);
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert!(t.grad(unused).is_none());
        assert_eq!(t.tensor(unused).grad.unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn repeated_backward_accumulates_leaf_gradients() {
        let mut t = Tape::<f64>::new();
        let x = lit(&mut t, &[2], &[1.0, 2.0]);
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        // d/dx sum(x^2) = 2x, accumulated twice
        assert_eq!(t.grad(x).unwrap(), &[4.0, 8.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::<f64>::new();
        let x = lit(&mut t, &[2], &[1.0, 2.0]);
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn inference_tape_computes_but_rejects_backward() {
        let mut t = Tape::<f64>::inference();
        let x = lit(&mut t, &[2], &[1.0, 2.0]);
        let s = t.sum(x);
        assert_eq!(t.values(s), &[3.0]);
        assert!(t.backward(s).is_err());
    }

    #[test]
    fn select_column_reads_one_hot_product() {
        let mut t = Tape::<f64>::new();
        let w = lit(&mut t, &[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let c = t.select_column(w, 1).unwrap();
        assert_eq!(t.values(c), &[2.0, 5.0]);
        let s = t.sum(c);
        t.backward(s).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn concat_width_stacks_maps_side_by_side() {
        let mut t = Tape::<f64>::new();
        let a = lit(&mut t, &[2, 1, 1], &[1.0, 3.0]);
        let b = lit(&mut t, &[2, 2, 1], &[10.0, 20.0, 30.0, 40.0]);
        let y = t.concat_width(&[a, b]).unwrap();
        assert_eq!(t.dims(y), &[2, 3, 1]);
        assert_eq!(t.values(y), &[1.0, 10.0, 20.0, 3.0, 30.0, 40.0]);
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(t.grad(b).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn concat_width_shapes_add_along_width() {
        let mut t = Tape::<f64>::new();
        let a = lit(&mut t, &[5, 3, 8], &vec![0.0; 120]);
        let b = lit(&mut t, &[5, 3, 8], &vec![0.0; 120]);
        let y = t.concat_width(&[a, b]).unwrap();
        assert_eq!(t.dims(y), &[5, 6, 8]);
        let c = lit(&mut t, &[4, 3, 8], &vec![0.0; 96]);
        assert!(t.concat_width(&[a, c]).is_err());
    }

    #[test]
    fn coord_bias_row_is_column_sum() {
        let mut t = Tape::<f64>::new();
        // attn dim 2, grid 2x3
        let wi = lit(&mut t, &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let wj = lit(&mut t, &[2, 3], &[10.0, 20.0, 30.0, 40.0, 50.0, 60.0]);
        let y = t.coord_bias(wi, wj, 2, 3).unwrap();
        assert_eq!(t.dims(y), &[6, 2]);
        // cell (i=1, j=2): wi[:,1] + wj[:,2] = [2+30, 4+60]
        let row = &t.values(y)[(1 * 3 + 2) * 2..(1 * 3 + 2) * 2 + 2];
        assert_eq!(row, &[32.0, 64.0]);
        let s = t.sum(y);
        t.backward(s).unwrap();
        // each wi column appears in gj rows, each wj column in gi rows
        assert_eq!(t.grad(wi).unwrap(), &[3.0; 4]);
        assert_eq!(t.grad(wj).unwrap(), &[2.0; 6]);
    }

    #[test]
    fn broadcast_adds_reduce_back_to_bias() {
        let mut t = Tape::<f64>::new();
        let x = lit(&mut t, &[2, 1, 2], &[0.0; 4]);
        let b = lit(&mut t, &[2], &[1.0, -1.0]);
        let y = t.add_channel_bias(x, b).unwrap();
        assert_eq!(t.values(y), &[1.0, -1.0, 1.0, -1.0]);
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(b).unwrap(), &[2.0, 2.0]);

        let m = lit(&mut t, &[3, 2], &[0.0; 6]);
        let v = lit(&mut t, &[2], &[5.0, 7.0]);
        let z = t.add_row_broadcast(m, v).unwrap();
        assert_eq!(t.values(z), &[5.0, 7.0, 5.0, 7.0, 5.0, 7.0]);
        let sz = t.sum(z);
        t.backward(sz).unwrap();
        assert_eq!(t.grad(v).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn identical_graphs_are_bit_identical() {
        let run = || {
            let mut rng = Rng::new(99);
            let vals: Vec<f64> = (0..24).map(|_| rng.gaussian()).collect();
            let mut t = Tape::<f64>::new();
            let x = t.literal(&[4, 3, 2], vals.clone()).unwrap();
            let w = t
                .literal(&[2, 2, 2, 2], (0..16).map(|i| (i as f64) * 0.1 - 0.8).collect())
                .unwrap();
            let c = t.conv2d(x, w, 1, Padding::Same).unwrap();
            let r = t.relu(c);
            let p = t.maxpool2d(r, 2, 2).unwrap();
            let s = t.sum(p);
            t.backward(s).unwrap();
            (
                t.values(s).to_vec(),
                t.grad(x).unwrap().to_vec(),
                t.signature(),
            )
        };
        let (a, ga, siga) = run();
        let (b, gb, sigb) = run();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        assert_eq!(siga, sigb);
        for (x, y) in ga.iter().zip(&gb) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn shared_leaves_read_parameter_storage() {
        let w = Tensor::<f64>::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        let mut t = Tape::new();
        let wid = t.shared(&w);
        let s = t.sum(wid);
        assert_eq!(t.values(s), &[7.0]);
        t.backward(s).unwrap();
        assert_eq!(t.grad(wid).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn signature_flips_when_a_branch_flips() {
        let build = |v: f64| {
            let mut t = Tape::<f64>::new();
            let x = t.literal(&[2, 2, 1], vec![v, 2.0, 2.0, 2.0]).unwrap();
            let _ = t.maxpool2d(x, 2, 2).unwrap();
            t.signature()
        };
        assert_eq!(build(1.0), build(1.5));
        assert_ne!(build(1.0), build(3.0));
    }
}
