//! Forward and backward rules for every tape primitive.

use super::kernels::{self, segment_coverage, segment_layout};
use super::scalar::{cast, gemm, Float, Layout};
use super::tape::{Node, Op, Padding, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn slot<'a, F: Float>(
    nodes: &[Node<F>],
    grads: &'a mut [Option<Vec<F>>],
    v: Var,
) -> Option<&'a mut Vec<F>> {
    let node = &nodes[v.0];
    if !node.needs_grad {
        return None;
    }
    let len = node.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); len]))
}

impl<F: Float> Tape<F> {
    fn suffix_reps(&self, a: Var, b: Var, op: &str) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || !sa.ends_with(sb) {
            return Err(Error::invalid(format!(
                "{op}: shape {sb:?} does not broadcast against {sa:?}"
            )));
        }
        Ok(self.value(a).len() / self.value(b).len().max(1))
    }

    /// Elementwise sum; `b` may broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.suffix_reps(a, b, "add")?;
        let (av, bv) = (self.value(a), self.value(b));
        let bl = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv.data()[i % bl])
            .collect();
        let value = Tensor::new(av.shape(), data)?;
        self.push(value, Op::Add { a, b })
    }

    /// Elementwise product; `b` may broadcast over the leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.suffix_reps(a, b, "mul")?;
        let (av, bv) = (self.value(a), self.value(b));
        let bl = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bv.data()[i % bl])
            .collect();
        let value = Tensor::new(av.shape(), data)?;
        self.push(value, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let factor = cast::<F>(factor);
        let av = self.value(a);
        let value = Tensor::new(av.shape(), av.data().iter().map(|&x| x * factor).collect())?;
        self.push(value, Op::Scale { a, factor })
    }

    fn unary(&mut self, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Result<Var> {
        let av = self.value(a);
        let value = Tensor::new(av.shape(), av.data().iter().map(|&x| f(x)).collect())?;
        self.push(value, op)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(F::zero()), Op::Relu { a })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.tanh(), Op::Tanh { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| F::one() / (F::one() + (-x).exp()), Op::Sigmoid { a })
    }

    /// Repeats `a` over new leading axes `lead`.
    pub fn broadcast(&mut self, a: Var, lead: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let reps: usize = lead.iter().product();
        let mut shape = lead.to_vec();
        shape.extend_from_slice(av.shape());
        let mut data = Vec::with_capacity(reps * av.len());
        for _ in 0..reps {
            data.extend_from_slice(av.data());
        }
        let value = Tensor::new(&shape, data)?;
        self.push(value, Op::Broadcast { a })
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let lead = {
            let s = self.shape(first);
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::invalid(format!(
                    "concat: leading shape {:?} differs from {lead:?}",
                    s
                )));
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in inputs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(v).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(&shape, data)?;
        self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
        )
    }

    /// `a[..., start..start + width]`.
    pub fn slice_last(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let av = self.value(a);
        let w = av.last_dim();
        if av.ndim() == 0 || start + width > w {
            return Err(Error::invalid(format!(
                "slice {start}..{} out of range for last axis {w}",
                start + width
            )));
        }
        let rows = av.len() / w;
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&av.data()[r * w + start..r * w + start + width]);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = width;
        let value = Tensor::new(&shape, data)?;
        self.push(value, Op::SliceLast { a, start })
    }

    /// Global mean over the last (time) axis: `[..., T] -> [...]`.
    pub fn avg_pool_time(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let t = av.last_dim();
        if av.ndim() == 0 || t == 0 {
            return Err(Error::invalid("avg_pool_time needs a non-empty last axis"));
        }
        let inv = cast::<F>(1.0 / t as f64);
        let data = av
            .data()
            .chunks(t)
            .map(|row| row.iter().copied().sum::<F>() * inv)
            .collect();
        let shape = av.shape()[..av.ndim() - 1].to_vec();
        let value = Tensor::new(&shape, data)?;
        self.push(value, Op::MeanLast { a })
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let w = av.last_dim();
        if w == 0 {
            return Err(Error::invalid("softmax over an empty axis"));
        }
        let mut value = av.clone();
        kernels::softmax_rows(value.data_mut(), w);
        self.push(value, Op::Softmax { a })
    }

    /// Layer normalization over the last axis with learnable gain and offset.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if xv.ndim() == 0 || d == 0 {
            return Err(Error::invalid("layer_norm over an axis of extent 0"));
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::invalid(format!(
                "layer_norm: gain/offset must have shape [{d}]"
            )));
        }
        let mut out = vec![F::zero(); xv.len()];
        let (means, rstds) = kernels::layer_norm_forward(
            xv.data(),
            self.value(gain).data(),
            self.value(bias).data(),
            d,
            &mut out,
        );
        let value = Tensor::new(xv.shape(), out)?;
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                means,
                rstds,
            },
        )
    }

    /// Affine map on the last axis: `x W^T + b` with `W: [d_out, d_in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let din = xv.last_dim();
        if wv.ndim() != 2 || wv.shape()[1] != din || xv.ndim() == 0 {
            return Err(Error::invalid(format!(
                "linear: weight {:?} incompatible with input {:?}",
                wv.shape(),
                xv.shape()
            )));
        }
        let dout = wv.shape()[0];
        let rows = xv.len() / din.max(1);
        let mut out = vec![F::zero(); rows * dout];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [dout] {
                return Err(Error::invalid(format!(
                    "linear: bias {:?} should be [{dout}]",
                    bv.shape()
                )));
            }
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(
            rows,
            din,
            dout,
            F::one(),
            xv.data(),
            Layout::rows(0, din),
            wv.data(),
            Layout::transposed(0, din),
            F::one(),
            &mut out,
            Layout::rows(0, dout),
        );
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let value = Tensor::new(&shape, out)?;
        self.push(value, Op::Linear { x, w, b })
    }

    /// 1-D convolution of `x: [C_in, T]` with `w: [C_out, C_in, k]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.ndim() != 2 || wv.ndim() != 3 || wv.shape()[1] != xv.shape()[0] {
            return Err(Error::invalid(format!(
                "conv1d: kernels {:?} incompatible with input {:?}",
                wv.shape(),
                xv.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv1d: stride must be >= 1"));
        }
        let (cin, t) = (xv.shape()[0], xv.shape()[1]);
        let (cout, k) = (wv.shape()[0], wv.shape()[2]);
        let (pad_left, pad_total) = match padding {
            Padding::Valid => (0, 0),
            Padding::Same => {
                if stride != 1 {
                    return Err(Error::invalid("conv1d: same padding requires stride 1"));
                }
                ((k - 1) / 2, k - 1)
            }
        };
        if k == 0 || k > t + pad_total {
            return Err(Error::invalid(format!(
                "conv1d: kernel {k} longer than padded input {}",
                t + pad_total
            )));
        }
        let l = (t + pad_total - k) / stride + 1;
        let cols = kernels::im2col(xv.data(), cin, t, k, stride, pad_left, l);
        let mut out = vec![F::zero(); cout * l];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [cout] {
                return Err(Error::invalid(format!(
                    "conv1d: bias {:?} should be [{cout}]",
                    bv.shape()
                )));
            }
            for (row, &bias) in out.chunks_mut(l).zip(bv.data()) {
                row.fill(bias);
            }
        }
        gemm(
            cout,
            cin * k,
            l,
            F::one(),
            wv.data(),
            Layout::rows(0, cin * k),
            &cols,
            Layout::rows(0, l),
            F::one(),
            &mut out,
            Layout::rows(0, l),
        );
        let value = Tensor::new(&[cout, l], out)?;
        self.push(
            value,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad_left,
                cols,
            },
        )
    }

    /// Transposed convolution of `y: [C_in, L]` with `w: [C_in, C_out, k]`,
    /// producing `[C_out, (L - 1) * stride + k]`.
    pub fn conv1d_transpose(&mut self, y: Var, w: Var, stride: usize) -> Result<Var> {
        let (yv, wv) = (self.value(y), self.value(w));
        if yv.ndim() != 2 || wv.ndim() != 3 || wv.shape()[0] != yv.shape()[0] {
            return Err(Error::invalid(format!(
                "conv1d_transpose: kernels {:?} incompatible with input {:?}",
                wv.shape(),
                yv.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv1d_transpose: stride must be >= 1"));
        }
        let (cin, l) = (yv.shape()[0], yv.shape()[1]);
        let (cout, k) = (wv.shape()[1], wv.shape()[2]);
        if l == 0 || k == 0 {
            return Err(Error::invalid("conv1d_transpose: empty input or kernel"));
        }
        let t = (l - 1) * stride + k;
        let mut cols = vec![F::zero(); cout * k * l];
        gemm(
            cout * k,
            cin,
            l,
            F::one(),
            wv.data(),
            Layout::transposed(0, cout * k),
            yv.data(),
            Layout::rows(0, l),
            F::zero(),
            &mut cols,
            Layout::rows(0, l),
        );
        let mut out = vec![F::zero(); cout * t];
        kernels::col2im(&cols, cout, t, k, stride, 0, l, &mut out);
        let value = Tensor::new(&[cout, t], out)?;
        self.push(value, Op::ConvTranspose1d { y, w, stride })
    }

    /// Multi-head scaled dot-product attention, `softmax(Q K^T / sqrt(d_head)) V`
    /// per head, heads concatenated. Inputs are `[seq, dim]` or
    /// `[batch, seq, dim]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() {
            return Err(Error::invalid("attention: Q, K and V shapes differ"));
        }
        let (batch, seq, dim) = match shape.as_slice() {
            [s, d] => (1, *s, *d),
            [b, s, d] => (*b, *s, *d),
            _ => {
                return Err(Error::invalid(
                    "attention expects [seq, dim] or [batch, seq, dim]",
                ))
            }
        };
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(format!(
                "attention: {heads} heads do not divide width {dim}"
            )));
        }
        let (out, probs) = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            batch,
            seq,
            dim,
            heads,
        );
        let value = Tensor::new(&shape, out)?;
        self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let [r, c] = *av.shape() else {
            return Err(Error::invalid("transpose expects a 2-D tensor"));
        };
        let src = av.data();
        let mut data = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(&[c, r], data)?;
        self.push(value, Op::Transpose2d { a })
    }

    /// `[a, b, ...] -> [b, a, ...]`.
    pub fn swap_leading(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.ndim() < 2 {
            return Err(Error::invalid("swap_leading expects at least 2 axes"));
        }
        let (d0, d1) = (av.shape()[0], av.shape()[1]);
        let inner: usize = av.shape()[2..].iter().product();
        let src = av.data();
        let mut data = vec![F::zero(); av.len()];
        for i in 0..d0 {
            for j in 0..d1 {
                let from = (i * d1 + j) * inner;
                let to = (j * d0 + i) * inner;
                data[to..to + inner].copy_from_slice(&src[from..from + inner]);
            }
        }
        let mut shape = av.shape().to_vec();
        shape.swap(0, 1);
        let value = Tensor::new(&shape, data)?;
        self.push(value, Op::SwapLeading { a })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push(value, Op::Reshape { a })
    }

    /// Splits `[L, N]` into 50%-overlapping segments `[S, chunk, N]`,
    /// zero-padding on the right.
    pub fn chunk(&mut self, a: Var, chunk: usize) -> Result<Var> {
        if chunk < 2 || chunk % 2 != 0 {
            return Err(Error::invalid(format!(
                "chunk length must be even and >= 2, got {chunk}"
            )));
        }
        let av = self.value(a);
        let [len, n] = *av.shape() else {
            return Err(Error::invalid("chunk expects [frames, features]"));
        };
        let hop = chunk / 2;
        let (segments, _) = segment_layout(len, chunk);
        let mut data = vec![F::zero(); segments * chunk * n];
        for s in 0..segments {
            for c in 0..chunk {
                let t = s * hop + c;
                if t < len {
                    let to = (s * chunk + c) * n;
                    data[to..to + n].copy_from_slice(&av.data()[t * n..(t + 1) * n]);
                }
            }
        }
        let value = Tensor::new(&[segments, chunk, n], data)?;
        self.push(value, Op::Chunk { a, chunk })
    }

    /// Inverse of [`Tape::chunk`]: sums overlapping segments back onto `len`
    /// frames and divides each frame by the number of segments covering it.
    pub fn overlap_add(&mut self, a: Var, len: usize) -> Result<Var> {
        let av = self.value(a);
        let [segments, chunk, n] = *av.shape() else {
            return Err(Error::invalid(
                "overlap_add expects [segments, chunk, features]",
            ));
        };
        if chunk < 2 || chunk % 2 != 0 || len == 0 || segment_layout(len, chunk).0 != segments {
            return Err(Error::invalid(format!(
                "overlap_add: {segments} segments of {chunk} do not tile {len} frames"
            )));
        }
        let hop = chunk / 2;
        let coverage = segment_coverage(len, chunk, segments);
        let mut data = vec![F::zero(); len * n];
        for s in 0..segments {
            for c in 0..chunk {
                let t = s * hop + c;
                if t < len {
                    let from = (s * chunk + c) * n;
                    for (d, &v) in data[t * n..(t + 1) * n]
                        .iter_mut()
                        .zip(&av.data()[from..from + n])
                    {
                        *d += v;
                    }
                }
            }
        }
        for (t, row) in data.chunks_mut(n).enumerate() {
            let inv = cast::<F>(1.0 / coverage[t] as f64);
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let value = Tensor::new(&[len, n], data)?;
        self.push(value, Op::OverlapAdd { a, coverage })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().copied().sum::<F>();
        self.push(Tensor::scalar(total), Op::Sum { a })
    }

    pub(super) fn backward_node(
        &self,
        i: usize,
        g: &[F],
        grads: &mut [Option<Vec<F>>],
    ) -> Result<()> {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    let bl = gb.len();
                    for (idx, &v) in g.iter().enumerate() {
                        gb[idx % bl] += v;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let bl = bv.len();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (idx, d) in ga.iter_mut().enumerate() {
                        *d += g[idx] * bv[idx % bl];
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for (idx, &v) in g.iter().enumerate() {
                        gb[idx % bl] += v * av[idx];
                    }
                }
            }
            Op::Scale { a, factor } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *factor);
                }
            }
            Op::Relu { a } => {
                let av = nodes[a.0].value.data();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((d, &v), &x) in ga.iter_mut().zip(g).zip(av) {
                        if x > F::zero() {
                            *d += v;
                        }
                    }
                }
            }
            Op::Tanh { a } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((d, &v), &y) in ga.iter_mut().zip(g).zip(out.data()) {
                        *d += v * (F::one() - y * y);
                    }
                }
            }
            Op::Sigmoid { a } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((d, &v), &y) in ga.iter_mut().zip(g).zip(out.data()) {
                        *d += v * y * (F::one() - y);
                    }
                }
            }
            Op::Broadcast { a } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    let al = ga.len();
                    for (idx, &v) in g.iter().enumerate() {
                        ga[idx % al] += v;
                    }
                }
            }
            Op::Concat { inputs } => {
                let total = out.last_dim();
                let rows = out.len() / total;
                let mut offset = 0;
                for &v in inputs {
                    let w = nodes[v.0].value.last_dim();
                    if let Some(gv) = slot(nodes, grads, v) {
                        for r in 0..rows {
                            for j in 0..w {
                                gv[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceLast { a, start } => {
                let w = nodes[a.0].value.last_dim();
                let width = out.last_dim();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (r, grow) in g.chunks(width).enumerate() {
                        for (j, &v) in grow.iter().enumerate() {
                            ga[r * w + start + j] += v;
                        }
                    }
                }
            }
            Op::MeanLast { a } => {
                let t = nodes[a.0].value.last_dim();
                let inv = cast::<F>(1.0 / t as f64);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (row, &v) in ga.chunks_mut(t).zip(g) {
                        row.iter_mut().for_each(|d| *d += v * inv);
                    }
                }
            }
            Op::Softmax { a } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    let mut local = g.to_vec();
                    kernels::softmax_rows_backward(out.data(), &mut local, out.last_dim());
                    ga.iter_mut().zip(&local).for_each(|(d, &v)| *d += v);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                means,
                rstds,
            } => {
                let xv = nodes[x.0].value.data();
                let gv = nodes[gain.0].value.data();
                let d = gv.len();
                let inv_d = cast::<F>(1.0 / d as f64);
                let mut dgain = vec![F::zero(); d];
                let mut dbias = vec![F::zero(); d];
                let mut dx = nodes[x.0].needs_grad.then(|| vec![F::zero(); xv.len()]);
                let mut xhat = vec![F::zero(); d];
                let mut dxhat = vec![F::zero(); d];
                for (r, (xr, gr)) in xv.chunks(d).zip(g.chunks(d)).enumerate() {
                    let (mean, rstd) = (means[r], rstds[r]);
                    for j in 0..d {
                        xhat[j] = (xr[j] - mean) * rstd;
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                        dxhat[j] = gr[j] * gv[j];
                    }
                    if let Some(dx) = dx.as_mut() {
                        let m1 = dxhat.iter().copied().sum::<F>() * inv_d;
                        let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<F>() * inv_d;
                        for j in 0..d {
                            dx[r * d + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                }
                if let (Some(dx), Some(gx)) = (dx, slot(nodes, grads, *x)) {
                    gx.iter_mut().zip(&dx).for_each(|(a, &b)| *a += b);
                }
                if let Some(gg) = slot(nodes, grads, *gain) {
                    gg.iter_mut().zip(&dgain).for_each(|(a, &b)| *a += b);
                }
                if let Some(gb) = slot(nodes, grads, *bias) {
                    gb.iter_mut().zip(&dbias).for_each(|(a, &b)| *a += b);
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (nodes[x.0].value.data(), &nodes[w.0].value);
                let (dout, din) = (wv.shape()[0], wv.shape()[1]);
                let rows = out.len() / dout;
                if let Some(gx) = slot(nodes, grads, *x) {
                    gemm(
                        rows,
                        dout,
                        din,
                        F::one(),
                        g,
                        Layout::rows(0, dout),
                        wv.data(),
                        Layout::rows(0, din),
                        F::one(),
                        gx,
                        Layout::rows(0, din),
                    );
                }
                if let Some(gw) = slot(nodes, grads, *w) {
                    gemm(
                        dout,
                        rows,
                        din,
                        F::one(),
                        g,
                        Layout::transposed(0, dout),
                        xv,
                        Layout::rows(0, din),
                        F::one(),
                        gw,
                        Layout::rows(0, din),
                    );
                }
                if let Some(gb) = b.and_then(|b| slot(nodes, grads, b)) {
                    for row in g.chunks(dout) {
                        gb.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad_left,
                cols,
            } => {
                let wv = &nodes[w.0].value;
                let (cout, cin, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
                let t = nodes[x.0].value.shape()[1];
                let l = out.shape()[1];
                if let Some(gw) = slot(nodes, grads, *w) {
                    gemm(
                        cout,
                        l,
                        cin * k,
                        F::one(),
                        g,
                        Layout::rows(0, l),
                        cols,
                        Layout::transposed(0, l),
                        F::one(),
                        gw,
                        Layout::rows(0, cin * k),
                    );
                }
                if let Some(gb) = b.and_then(|b| slot(nodes, grads, b)) {
                    for (d, row) in gb.iter_mut().zip(g.chunks(l)) {
                        *d += row.iter().copied().sum::<F>();
                    }
                }
                if nodes[x.0].needs_grad {
                    let mut dcols = vec![F::zero(); cin * k * l];
                    gemm(
                        cin * k,
                        cout,
                        l,
                        F::one(),
                        wv.data(),
                        Layout::transposed(0, cin * k),
                        g,
                        Layout::rows(0, l),
                        F::zero(),
                        &mut dcols,
                        Layout::rows(0, l),
                    );
                    let gx = slot(nodes, grads, *x).expect("needs_grad checked");
                    kernels::col2im(&dcols, cin, t, k, *stride, *pad_left, l, gx);
                }
            }
            Op::ConvTranspose1d { y, w, stride } => {
                let (yv, wv) = (&nodes[y.0].value, &nodes[w.0].value);
                let (cin, l) = (yv.shape()[0], yv.shape()[1]);
                let (cout, k) = (wv.shape()[1], wv.shape()[2]);
                let t = out.shape()[1];
                let dcols = kernels::im2col(g, cout, t, k, *stride, 0, l);
                if let Some(gy) = slot(nodes, grads, *y) {
                    gemm(
                        cin,
                        cout * k,
                        l,
                        F::one(),
                        wv.data(),
                        Layout::rows(0, cout * k),
                        &dcols,
                        Layout::rows(0, l),
                        F::one(),
                        gy,
                        Layout::rows(0, l),
                    );
                }
                if let Some(gw) = slot(nodes, grads, *w) {
                    gemm(
                        cin,
                        l,
                        cout * k,
                        F::one(),
                        yv.data(),
                        Layout::rows(0, l),
                        &dcols,
                        Layout::transposed(0, l),
                        F::one(),
                        gw,
                        Layout::rows(0, cout * k),
                    );
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let shape = out.shape();
                let (batch, seq, dim) = match *shape {
                    [s, d] => (1, s, d),
                    [b, s, d] => (b, s, d),
                    _ => unreachable!("attention shape validated in forward"),
                };
                let mut dq = nodes[q.0].needs_grad.then(|| vec![F::zero(); out.len()]);
                let mut dk = nodes[k.0].needs_grad.then(|| vec![F::zero(); out.len()]);
                let mut dv = nodes[v.0].needs_grad.then(|| vec![F::zero(); out.len()]);
                kernels::attention_backward(
                    nodes[q.0].value.data(),
                    nodes[k.0].value.data(),
                    nodes[v.0].value.data(),
                    probs,
                    g,
                    batch,
                    seq,
                    dim,
                    *heads,
                    dq.as_deref_mut(),
                    dk.as_deref_mut(),
                    dv.as_deref_mut(),
                );
                for (var, local) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let (Some(local), Some(gs)) = (local, slot(nodes, grads, var)) {
                        gs.iter_mut().zip(&local).for_each(|(d, &x)| *d += x);
                    }
                }
            }
            Op::Transpose2d { a } => {
                let (r, c) = (out.shape()[1], out.shape()[0]);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::SwapLeading { a } => {
                let s = nodes[a.0].value.shape();
                let (d0, d1) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for i in 0..d0 {
                        for j in 0..d1 {
                            let to = (i * d1 + j) * inner;
                            let from = (j * d0 + i) * inner;
                            for (d, &v) in ga[to..to + inner].iter_mut().zip(&g[from..from + inner])
                            {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Chunk { a, chunk } => {
                let n = out.shape()[2];
                let len = nodes[a.0].value.shape()[0];
                let hop = chunk / 2;
                if let Some(ga) = slot(nodes, grads, *a) {
                    for s in 0..out.shape()[0] {
                        for c in 0..*chunk {
                            let t = s * hop + c;
                            if t < len {
                                let from = (s * chunk + c) * n;
                                for (d, &v) in
                                    ga[t * n..(t + 1) * n].iter_mut().zip(&g[from..from + n])
                                {
                                    *d += v;
                                }
                            }
                        }
                    }
                }
            }
            Op::OverlapAdd { a, coverage } => {
                let s = nodes[a.0].value.shape();
                let (segments, chunk, n) = (s[0], s[1], s[2]);
                let hop = chunk / 2;
                let len = coverage.len();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for seg in 0..segments {
                        for c in 0..chunk {
                            let t = seg * hop + c;
                            if t < len {
                                let inv = cast::<F>(1.0 / coverage[t] as f64);
                                let to = (seg * chunk + c) * n;
                                for (d, &v) in ga[to..to + n].iter_mut().zip(&g[t * n..(t + 1) * n])
                                {
                                    *d += v * inv;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
