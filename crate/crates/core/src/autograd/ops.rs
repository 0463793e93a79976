//! Differentiable operations on [`Var`].
//!
//! Every op computes its forward value eagerly and registers a backward
//! closure. Shapes are checked with `assert!`: a mismatch is a programming
//! error in model code, not a recoverable condition.

use std::rc::Rc;

use super::graph::{GradSink, Var};
use super::tensor::{gemm, Tensor};

fn same_graph(a: &Var<'_>, b: &Var<'_>) {
    assert!(std::ptr::eq(a.graph, b.graph), "variables from different graphs");
}

impl<'g> Var<'g> {
    /// `[n, k] · [k, m] -> [n, m]`.
    pub fn matmul(self, rhs: Var<'g>) -> Var<'g> {
        same_graph(&self, &rhs);
        let a = self.value();
        let b = rhs.value();
        assert!(a.rank() == 2 && b.rank() == 2, "matmul expects rank-2 operands");
        let (n, k) = (a.shape()[0], a.shape()[1]);
        let (k2, m) = (b.shape()[0], b.shape()[1]);
        assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", a.shape(), b.shape());
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, a.data(), false, b.data(), false, &mut out, false);
        let (ia, ib) = (self.id, rhs.id);
        self.graph.push(
            Tensor::new(vec![n, m], out),
            Some(Box::new(move |g: &Tensor, sink: &mut GradSink| {
                let mut ga = vec![0.0; n * k];
                gemm(n, m, k, g.data(), false, b.data(), true, &mut ga, false);
                sink.add(ia, Tensor::new(vec![n, k], ga));
                let mut gb = vec![0.0; k * m];
                gemm(k, n, m, a.data(), true, g.data(), false, &mut gb, false);
                sink.add(ib, Tensor::new(vec![k, m], gb));
            })),
        )
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(self, bias: Var<'g>) -> Var<'g> {
        same_graph(&self, &bias);
        let x = self.value();
        let b = bias.value();
        let m = *x.shape().last().expect("add_bias on scalar");
        assert_eq!(b.shape(), &[m], "bias shape {:?} vs width {m}", b.shape());
        let mut out = x.as_ref().clone();
        for row in out.data_mut().chunks_mut(m) {
            for (o, bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let (ix, ib) = (self.id, bias.id);
        self.graph.push(
            out,
            Some(Box::new(move |g: &Tensor, sink: &mut GradSink| {
                let mut gb = vec![0.0; m];
                for row in g.data().chunks(m) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                sink.add(ib, Tensor::new(vec![m], gb));
                sink.add(ix, g.clone());
            })),
        )
    }

    pub fn relu(self) -> Var<'g> {
        let x = self.value();
        let out = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().map(|&v| v.max(0.0)).collect(),
        );
        let ix = self.id;
        self.graph.push(
            out,
            Some(Box::new(move |g: &Tensor, sink: &mut GradSink| {
                let gx = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                sink.add(ix, Tensor::new(x.shape().to_vec(), gx));
            })),
        )
    }

    pub fn add(self, rhs: Var<'g>) -> Var<'g> {
        same_graph(&self, &rhs);
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        let mut out = a.as_ref().clone();
        out.add_assign(&b);
        let (ia, ib) = (self.id, rhs.id);
        self.graph.push(
            out,
            Some(Box::new(move |g: &Tensor, sink: &mut GradSink| {
                sink.add(ia, g.clone());
                sink.add(ib, g.clone());
            })),
        )
    }

    pub fn sub(self, rhs: Var<'g>) -> Var<'g> {
        self.add(rhs.scale(-1.0))
    }

    /// Elementwise product.
    pub fn mul(self, rhs: Var<'g>) -> Var<'g> {
        same_graph(&self, &rhs);
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
        let out = Tensor::new(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect(),
        );
        let (ia, ib) = (self.id, rhs.id);
        self.graph.push(
            out,
            Some(Box::new(move |g: &Tensor, sink: &mut GradSink| {
                let ga = g.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
                let gb = g.data().iter().zip(a.data()).map(|(x, y)| x * y).collect();
                sink.add(ia, Tensor::new(a.shape().to_vec(), ga));
                sink.add(ib, Tensor::new(b.shape().to_vec(), gb));
            })),
        )
    }

    pub fn scale(self, factor: f64) -> Var<'g> {
        let x = self.value();
        let ix = self.id;
        self.graph.push(
            x.scaled(factor),
            Some(Box::new(move |g: &Tensor, sink: &mut GradSink| {
                sink.add(ix, g.scaled(factor));
            })),
        )
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let ix = self.id;
        self.graph.push(
            Tensor::scalar(x.sum()),
            Some(Box::new(move |g: &Tensor, sink: &mut GradSink| {
                sink.add(ix, Tensor::full(&shape, g.item()));
            })),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let x = self.value();
        let old = x.shape().to_vec();
        let ix = self.id;
        self.graph.push(
            x.as_ref().clone().reshaped(shape),
            Some(Box::new(move |g: &Tensor, sink: &mut GradSink| {
                sink.add(ix, g.clone().reshaped(&old));
            })),
        )
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Var<'g> {
        let x = self.value();
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let ix = self.id;
        self.graph.push(
            x.permuted(axes),
            Some(Box::new(move |g: &Tensor, sink: &mut GradSink| {
                sink.add(ix, g.permuted(&inverse));
            })),
        )
    }

    /// Selects rows of a rank-2 tensor; `None` yields a zero row.
    pub fn gather_rows(self, index: &[Option<usize>]) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.rank(), 2, "gather_rows expects a rank-2 tensor");
        let (rows, d) = (x.shape()[0], x.shape()[1]);
        let mut out = vec![0.0; index.len() * d];
        for (o, src) in out.chunks_mut(d).zip(index) {
            if let Some(r) = *src {
                assert!(r < rows, "gather index {r} out of {rows}");
                o.copy_from_slice(&x.data()[r * d..(r + 1) * d]);
            }
        }
        let index: Vec<Option<usize>> = index.to_vec();
        let ix = self.id;
        self.graph.push(
            Tensor::new(vec![index.len(), d], out),
            Some(Box::new(move |g: &Tensor, sink: &mut GradSink| {
                let mut gx = vec![0.0; rows * d];
                for (gr, src) in g.data().chunks(d).zip(&index) {
                    if let Some(r) = *src {
                        for (acc, v) in gx[r * d..(r + 1) * d].iter_mut().zip(gr) {
                            *acc += v;
                        }
                    }
                }
                sink.add(ix, Tensor::new(vec![rows, d], gx));
            })),
        )
    }

    /// Set pooling: `[G, S, D] -> [G, 2D]` with the per-set mean in the first
    /// `D` columns and the population standard deviation in the last `D`.
    /// The derivative of the standard deviation at zero spread is taken as 0.
    pub fn mean_std_pool(self) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.rank(), 3, "mean_std_pool expects [G, S, D]");
        let (groups, s, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut out = vec![0.0; groups * 2 * d];
        let mut mean = vec![0.0; groups * d];
        let mut std = vec![0.0; groups * d];
        let inv = 1.0 / s as f64;
        for gi in 0..groups {
            let block = &x.data()[gi * s * d..(gi + 1) * s * d];
            let mu = &mut mean[gi * d..(gi + 1) * d];
            for row in block.chunks(d) {
                for (m, v) in mu.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mu.iter_mut().for_each(|m| *m *= inv);
            let sd = &mut std[gi * d..(gi + 1) * d];
            for row in block.chunks(d) {
                for ((acc, v), m) in sd.iter_mut().zip(row).zip(mu.iter()) {
                    *acc += (v - m) * (v - m);
                }
            }
            sd.iter_mut().for_each(|v| *v = (*v * inv).sqrt());
            out[gi * 2 * d..gi * 2 * d + d].copy_from_slice(mu);
            out[gi * 2 * d + d..(gi + 1) * 2 * d].copy_from_slice(sd);
        }
        let ix = self.id;
        let shape = x.shape().to_vec();
        self.graph.push(
            Tensor::new(vec![groups, 2 * d], out),
            Some(Box::new(move |g: &Tensor, sink: &mut GradSink| {
                let mut gx = vec![0.0; groups * s * d];
                for gi in 0..groups {
                    let gm = &g.data()[gi * 2 * d..gi * 2 * d + d];
                    let gs = &g.data()[gi * 2 * d + d..(gi + 1) * 2 * d];
                    let mu = &mean[gi * d..(gi + 1) * d];
                    let sd = &std[gi * d..(gi + 1) * d];
                    let src = &x.data()[gi * s * d..(gi + 1) * s * d];
                    let dst = &mut gx[gi * s * d..(gi + 1) * s * d];
                    for (drow, srow) in dst.chunks_mut(d).zip(src.chunks(d)) {
                        for c in 0..d {
                            let mut v = gm[c] * inv;
                            if sd[c] > 1e-12 {
                                v += gs[c] * (srow[c] - mu[c]) * inv / sd[c];
                            }
                            drow[c] = v;
                        }
                    }
                }
                sink.add(ix, Tensor::new(shape.clone(), gx));
            })),
        )
    }

    /// Per-head key/query compatibilities.
    ///
    /// `keys: [N, T, G*dk]`, `query: [G, dk]` -> `[N, G, T]`, scaled by
    /// `1/sqrt(dk)`.
    pub fn head_scores(self, query: Var<'g>) -> Var<'g> {
        same_graph(&self, &query);
        let k = self.value();
        let q = query.value();
        assert_eq!(k.rank(), 3, "head_scores keys must be [N, T, G*dk]");
        assert_eq!(q.rank(), 2, "head_scores query must be [G, dk]");
        let (n, t, gdk) = (k.shape()[0], k.shape()[1], k.shape()[2]);
        let (heads, dk) = (q.shape()[0], q.shape()[1]);
        assert_eq!(gdk, heads * dk, "key width {gdk} != {heads}x{dk}");
        let scale = 1.0 / (dk as f64).sqrt();
        let mut out = vec![0.0; n * heads * t];
        for ni in 0..n {
            for ti in 0..t {
                let krow = &k.data()[(ni * t + ti) * gdk..(ni * t + ti + 1) * gdk];
                for h in 0..heads {
                    let s: f64 = krow[h * dk..(h + 1) * dk]
                        .iter()
                        .zip(&q.data()[h * dk..(h + 1) * dk])
                        .map(|(a, b)| a * b)
                        .sum();
                    out[(ni * heads + h) * t + ti] = s * scale;
                }
            }
        }
        let (ik, iq) = (self.id, query.id);
        self.graph.push(
            Tensor::new(vec![n, heads, t], out),
            Some(Box::new(move |g: &Tensor, sink: &mut GradSink| {
                let mut gk = vec![0.0; n * t * gdk];
                let mut gq = vec![0.0; heads * dk];
                for ni in 0..n {
                    for ti in 0..t {
                        let base = (ni * t + ti) * gdk;
                        for h in 0..heads {
                            let gv = g.data()[(ni * heads + h) * t + ti] * scale;
                            if gv == 0.0 {
                                continue;
                            }
                            for j in 0..dk {
                                gk[base + h * dk + j] += gv * q.data()[h * dk + j];
                                gq[h * dk + j] += gv * k.data()[base + h * dk + j];
                            }
                        }
                    }
                }
                sink.add(ik, Tensor::new(vec![n, t, gdk], gk));
                sink.add(iq, Tensor::new(vec![heads, dk], gq));
            })),
        )
    }

    /// Softmax over the last axis of `[N, G, T]` scores, restricted to steps
    /// where `mask[n*T + t]` is true. Masked steps get weight exactly 0 and
    /// receive zero gradient. Every row must have at least one unmasked step.
    pub fn masked_softmax(self, mask: &[bool]) -> Var<'g> {
        let z = self.value();
        assert_eq!(z.rank(), 3, "masked_softmax expects [N, G, T]");
        let (n, heads, t) = (z.shape()[0], z.shape()[1], z.shape()[2]);
        assert_eq!(mask.len(), n * t, "mask length {} != {n}x{t}", mask.len());
        let mut out = vec![0.0; n * heads * t];
        for ni in 0..n {
            let m = &mask[ni * t..(ni + 1) * t];
            assert!(m.iter().any(|&b| b), "fully masked sequence {ni}");
            for h in 0..heads {
                let row = &z.data()[(ni * heads + h) * t..(ni * heads + h + 1) * t];
                let max = row
                    .iter()
                    .zip(m)
                    .filter(|(_, &b)| b)
                    .map(|(v, _)| *v)
                    .fold(f64::NEG_INFINITY, f64::max);
                let o = &mut out[(ni * heads + h) * t..(ni * heads + h + 1) * t];
                let mut total = 0.0;
                for ((ov, zv), &b) in o.iter_mut().zip(row).zip(m) {
                    if b {
                        *ov = (zv - max).exp();
                        total += *ov;
                    }
                }
                o.iter_mut().for_each(|v| *v /= total);
            }
        }
        let out = Tensor::new(vec![n, heads, t], out);
        let probs = Rc::new(out.clone());
        let iz = self.id;
        self.graph.push(
            out,
            Some(Box::new(move |g: &Tensor, sink: &mut GradSink| {
                let mut gz = vec![0.0; n * heads * t];
                for (r, (grow, prow)) in g.data().chunks(t).zip(probs.data().chunks(t)).enumerate() {
                    let dot: f64 = grow.iter().zip(prow).map(|(a, b)| a * b).sum();
                    for ti in 0..t {
                        gz[r * t + ti] = prow[ti] * (grow[ti] - dot);
                    }
                }
                sink.add(iz, Tensor::new(vec![n, heads, t], gz));
            })),
        )
    }

    /// Attention-weighted temporal average with channel grouping.
    ///
    /// `self: [N, G, T]` weights, `values: [N, T, E]` with `E` divisible by
    /// `G`; head `g` averages channels `[g*E/G, (g+1)*E/G)`. Output `[N, E]`.
    pub fn grouped_attend(self, values: Var<'g>) -> Var<'g> {
        same_graph(&self, &values);
        let a = self.value();
        let x = values.value();
        assert_eq!(a.rank(), 3, "grouped_attend weights must be [N, G, T]");
        assert_eq!(x.rank(), 3, "grouped_attend values must be [N, T, E]");
        let (n, heads, t) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let e = x.shape()[2];
        assert_eq!(x.shape()[..2], [n, t], "grouped_attend N/T mismatch");
        assert_eq!(e % heads, 0, "width {e} not divisible by {heads} heads");
        let cg = e / heads;
        let mut out = vec![0.0; n * e];
        for ni in 0..n {
            for h in 0..heads {
                let o = &mut out[ni * e + h * cg..ni * e + (h + 1) * cg];
                for ti in 0..t {
                    let w = a.data()[(ni * heads + h) * t + ti];
                    if w == 0.0 {
                        continue;
                    }
                    let src = &x.data()[(ni * t + ti) * e + h * cg..(ni * t + ti) * e + (h + 1) * cg];
                    for (ov, sv) in o.iter_mut().zip(src) {
                        *ov += w * sv;
                    }
                }
            }
        }
        let (ia, ix) = (self.id, values.id);
        self.graph.push(
            Tensor::new(vec![n, e], out),
            Some(Box::new(move |g: &Tensor, sink: &mut GradSink| {
                let mut ga = vec![0.0; n * heads * t];
                let mut gx = vec![0.0; n * t * e];
                for ni in 0..n {
                    for h in 0..heads {
                        let go = &g.data()[ni * e + h * cg..ni * e + (h + 1) * cg];
                        for ti in 0..t {
                            let off = (ni * t + ti) * e + h * cg;
                            let src = &x.data()[off..off + cg];
                            ga[(ni * heads + h) * t + ti] =
                                go.iter().zip(src).map(|(p, q)| p * q).sum();
                            let w = a.data()[(ni * heads + h) * t + ti];
                            for (dst, gv) in gx[off..off + cg].iter_mut().zip(go) {
                                *dst += w * gv;
                            }
                        }
                    }
                }
                sink.add(ia, Tensor::new(vec![n, heads, t], ga));
                sink.add(ix, Tensor::new(vec![n, t, e], gx));
            })),
        )
    }

    /// Patch extraction for convolution: `[B, C, H, W] -> [B*Ho*Wo, C*k*k]`
    /// with zero padding.
    pub fn im2col(self, kernel: usize, stride: usize, pad: usize) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.rank(), 4, "im2col expects [B, C, H, W]");
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let ho = (h + 2 * pad - kernel) / stride + 1;
        let wo = (w + 2 * pad - kernel) / stride + 1;
        let cols = c * kernel * kernel;
        // source offset per (output row, column); None for padding.
        let mut index: Vec<Option<usize>> = Vec::with_capacity(b * ho * wo * cols);
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    for ci in 0..c {
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    index.push(Some(
                                        ((bi * c + ci) * h + iy as usize) * w + ix as usize,
                                    ));
                                } else {
                                    index.push(None);
                                }
                            }
                        }
                    }
                }
            }
        }
        let out: Vec<f64> = index
            .iter()
            .map(|s| s.map_or(0.0, |i| x.data()[i]))
            .collect();
        let ix = self.id;
        let in_len = x.len();
        let in_shape = x.shape().to_vec();
        self.graph.push(
            Tensor::new(vec![b * ho * wo, cols], out),
            Some(Box::new(move |g: &Tensor, sink: &mut GradSink| {
                let mut gx = vec![0.0; in_len];
                for (gv, src) in g.data().iter().zip(&index) {
                    if let Some(i) = *src {
                        gx[i] += gv;
                    }
                }
                sink.add(ix, Tensor::new(in_shape.clone(), gx));
            })),
        )
    }

    /// Bilinear resize of the two trailing axes of a rank-4 tensor
    /// (half-pixel centers, edge clamping). Interpolation weights at every
    /// output pixel are nonnegative and sum to one.
    pub fn upsample_bilinear(self, out_h: usize, out_w: usize) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.rank(), 4, "upsample_bilinear expects a rank-4 tensor");
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let ys = bilinear_taps(h, out_h);
        let xs = bilinear_taps(w, out_w);
        let planes = b * c;
        let mut out = vec![0.0; planes * out_h * out_w];
        for p in 0..planes {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    dst[oy * out_w + ox] = (1.0 - fy) * ((1.0 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1])
                        + fy * ((1.0 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1]);
                }
            }
        }
        let ix = self.id;
        self.graph.push(
            Tensor::new(vec![b, c, out_h, out_w], out),
            Some(Box::new(move |g: &Tensor, sink: &mut GradSink| {
                let mut gx = vec![0.0; planes * h * w];
                for p in 0..planes {
                    let gsrc = &g.data()[p * out_h * out_w..(p + 1) * out_h * out_w];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                            let v = gsrc[oy * out_w + ox];
                            dst[y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * v;
                            dst[y0 * w + x1] += (1.0 - fy) * fx * v;
                            dst[y1 * w + x0] += fy * (1.0 - fx) * v;
                            dst[y1 * w + x1] += fy * fx * v;
                        }
                    }
                }
                sink.add(ix, Tensor::new(vec![b, c, h, w], gx));
            })),
        )
    }

    /// Row-wise log-softmax of `[N, K]`.
    pub fn log_softmax(self) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.rank(), 2, "log_softmax expects [N, K]");
        let k = x.shape()[1];
        let mut out = x.as_ref().clone();
        for row in out.data_mut().chunks_mut(k) {
            let lse = logsumexp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let logp = Rc::new(out.clone());
        let ix = self.id;
        self.graph.push(
            out,
            Some(Box::new(move |g: &Tensor, sink: &mut GradSink| {
                let mut gx = vec![0.0; logp.len()];
                for ((dst, grow), lrow) in gx.chunks_mut(k).zip(g.data().chunks(k)).zip(logp.data().chunks(k)) {
                    let total: f64 = grow.iter().sum();
                    for j in 0..k {
                        dst[j] = grow[j] - lrow[j].exp() * total;
                    }
                }
                sink.add(ix, Tensor::new(logp.shape().to_vec(), gx));
            })),
        )
    }

    /// `log(mean_m exp(x[m, r]))` for `x: [M, R]`, giving `[R]`.
    pub fn log_mean_exp(self) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.rank(), 2, "log_mean_exp expects [M, R]");
        let (m, r) = (x.shape()[0], x.shape()[1]);
        let log_m = (m as f64).ln();
        let mut out = vec![0.0; r];
        let mut col = vec![0.0; m];
        for (ri, o) in out.iter_mut().enumerate() {
            for mi in 0..m {
                col[mi] = x.data()[mi * r + ri];
            }
            *o = logsumexp(&col) - log_m;
        }
        let y = Rc::new(out.clone());
        let ix = self.id;
        self.graph.push(
            Tensor::new(vec![r], out),
            Some(Box::new(move |g: &Tensor, sink: &mut GradSink| {
                let mut gx = vec![0.0; m * r];
                for mi in 0..m {
                    for ri in 0..r {
                        let w = (x.data()[mi * r + ri] - y[ri] - log_m).exp();
                        gx[mi * r + ri] = g.data()[ri] * w;
                    }
                }
                sink.add(ix, Tensor::new(vec![m, r], gx));
            })),
        )
    }

    /// Mean cross-entropy of `[N, K]` logits against class targets; `None`
    /// targets are ignored. Returns 0 when no target is valid.
    pub fn cross_entropy(self, targets: &[Option<usize>]) -> Var<'g> {
        let x = self.value();
        assert_eq!(x.rank(), 2, "cross_entropy expects [N, K]");
        let (n, k) = (x.shape()[0], x.shape()[1]);
        assert_eq!(targets.len(), n, "target count {} != {n}", targets.len());
        let valid = targets.iter().filter(|t| t.is_some()).count();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for (i, (row, t)) in x.data().chunks(k).zip(targets).enumerate() {
            let Some(t) = *t else { continue };
            assert!(t < k, "target {t} out of {k} classes");
            let lse = logsumexp(row);
            loss += lse - row[t];
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
        }
        let denom = valid.max(1) as f64;
        let targets: Vec<Option<usize>> = targets.to_vec();
        let ix = self.id;
        self.graph.push(
            Tensor::scalar(loss / denom),
            Some(Box::new(move |g: &Tensor, sink: &mut GradSink| {
                let scale = g.item() / denom;
                let mut gx = vec![0.0; n * k];
                for (i, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for j in 0..k {
                        gx[i * k + j] = scale * (probs[i * k + j] - if j == t { 1.0 } else { 0.0 });
                    }
                }
                sink.add(ix, Tensor::new(vec![n, k], gx));
            })),
        )
    }
}

/// Concatenates along `axis`. All other extents must agree.
pub fn concat<'g>(parts: &[Var<'g>], axis: usize) -> Var<'g> {
    assert!(!parts.is_empty(), "concat of nothing");
    let graph = parts[0].graph;
    let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let rank = values[0].rank();
    assert!(axis < rank, "concat axis {axis} out of rank {rank}");
    for v in &values {
        assert_eq!(v.rank(), rank, "concat rank mismatch");
        for d in 0..rank {
            if d != axis {
                assert_eq!(v.shape()[d], values[0].shape()[d], "concat extent mismatch on axis {d}");
            }
        }
    }
    let outer: usize = values[0].shape()[..axis].iter().product();
    let inner: usize = values[0].shape()[axis + 1..].iter().product();
    let widths: Vec<usize> = values.iter().map(|v| v.shape()[axis] * inner).collect();
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(outer * total);
    for o in 0..outer {
        for (v, &wd) in values.iter().zip(&widths) {
            out.extend_from_slice(&v.data()[o * wd..(o + 1) * wd]);
        }
    }
    let mut shape = values[0].shape().to_vec();
    shape[axis] = values.iter().map(|v| v.shape()[axis]).sum();
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    graph.push(
        Tensor::new(shape, out),
        Some(Box::new(move |g: &Tensor, sink: &mut GradSink| {
            let mut offset = 0;
            for ((id, &wd), shp) in ids.iter().zip(&widths).zip(&shapes) {
                let mut part = Vec::with_capacity(outer * wd);
                for o in 0..outer {
                    let start = o * total + offset;
                    part.extend_from_slice(&g.data()[start..start + wd]);
                }
                sink.add(*id, Tensor::new(shp.clone(), part));
                offset += wd;
            }
        })),
    )
}

/// Weighted sum of scalar variables.
pub fn weighted_sum<'g>(terms: &[(f64, Var<'g>)]) -> Var<'g> {
    assert!(!terms.is_empty(), "weighted_sum of nothing");
    let graph = terms[0].1.graph;
    let value: f64 = terms.iter().map(|(w, v)| w * v.value().item()).sum();
    let parts: Vec<(f64, usize, Vec<usize>)> = terms
        .iter()
        .map(|(w, v)| (*w, v.id, v.shape()))
        .collect();
    graph.push(
        Tensor::scalar(value),
        Some(Box::new(move |g: &Tensor, sink: &mut GradSink| {
            for (w, id, shape) in &parts {
                sink.add(*id, Tensor::full(shape, w * g.item()));
            }
        })),
    )
}

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Source taps `(lo, hi, frac)` for each output coordinate.
pub(crate) fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}
