//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every op appends a node holding its output value,
//! and [`Graph::backward`] walks the tape in reverse. Only the operations the
//! U-Net, the codec and the feature extractors need are provided. All
//! kernels run single-threaded so results are bit-reproducible.

use std::sync::Arc;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddChannel(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Silu(Var),
    Gelu(Var),
    Relu(Var),
    Reshape(Var),
    Permute(Var, [usize; 4]),
    ConcatChannels(Vec<Var>),
    NarrowLast {
        x: Var,
        start: usize,
    },
    Upsample2x(Var),
    AvgPool {
        x: Var,
        factor: usize,
    },
    MeanSpatial(Var),
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    SoftmaxLast(Var),
    Loss {
        x: Var,
        grad: Tensor,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Tape of recorded operations.
pub struct Graph {
    nodes: Vec<Node>,
    params: IndexMap<String, Var>,
    round_f32: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths checked above; strides describe the row-major
    // (or transposed) layouts of exactly those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn conv_out_dim(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [f64],
) {
    let hw = ho * wo;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        dst[oy * wo + ox] =
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                0.0
                            } else {
                                x[(ci * h + iy as usize) * w + ix as usize]
                            };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [f64],
) {
    let hw = ho * wo;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[(ci * h + iy as usize) * w + ix as usize] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
}

fn erf(x: f64) -> f64 {
    libm::erf(x)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn permuted_shape(shape: &[usize], perm: [usize; 4]) -> [usize; 4] {
    [shape[perm[0]], shape[perm[1]], shape[perm[2]], shape[perm[3]]]
}

fn permute4(t: &Tensor, perm: [usize; 4]) -> Tensor {
    let s = t.shape();
    let out_shape = permuted_shape(s, perm);
    let in_strides = [s[1] * s[2] * s[3], s[2] * s[3], s[3], 1];
    let st = [
        in_strides[perm[0]],
        in_strides[perm[1]],
        in_strides[perm[2]],
        in_strides[perm[3]],
    ];
    let src = t.data();
    let mut out = Vec::with_capacity(t.len());
    for a in 0..out_shape[0] {
        for b in 0..out_shape[1] {
            for c in 0..out_shape[2] {
                let base = a * st[0] + b * st[1] + c * st[2];
                for d in 0..out_shape[3] {
                    out.push(src[base + d * st[3]]);
                }
            }
        }
    }
    Tensor::from_parts(out_shape.to_vec(), out)
}

fn inverse_perm(perm: [usize; 4]) -> [usize; 4] {
    let mut inv = [0; 4];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// `[N, C, rest...]` split into (N, C, product(rest)).
fn ncs(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2..].iter().product())
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: IndexMap::new(),
            round_f32: false,
        }
    }

    /// Rounds every recorded activation to `f32` precision (mixed-precision
    /// emulation). Parameters and gradients stay `f64`.
    pub fn with_f32_activations(mut self, on: bool) -> Self {
        self.round_f32 = on;
        self
    }

    fn push(&mut self, mut value: Tensor, op: Op, needs_grad: bool) -> Var {
        if self.round_f32 && !matches!(op, Op::Leaf) {
            for v in value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient (used by finite-difference tests and
    /// for differentiating w.r.t. inputs).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Looks up parameter `name` in `store`. Repeated lookups share a node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get_arc(name)
            .ok_or_else(|| Error::Validation(format!("missing parameter `{name}`")))?;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: store.is_trainable(),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Names of every parameter read so far, in first-use order.
    pub fn used_params(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b)).expect("add: shape mismatch");
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b)).expect("sub: shape mismatch");
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self
            .value(a)
            .zip_map(self.value(b), |x, y| x * y)
            .expect("mul: shape mismatch");
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    /// `x [N, C, ...] + c [N, C]` broadcast over trailing positions.
    pub fn add_channel(&mut self, x: Var, c: Var) -> Var {
        let xt = self.value(x);
        let (n, ch, s) = ncs(xt.shape());
        assert_eq!(self.shape(c), &[n, ch], "add_channel: bias shape");
        let ct = self.value(c).data();
        let mut out = xt.data().to_vec();
        for i in 0..n * ch {
            let bias = ct[i];
            for v in &mut out[i * s..(i + 1) * s] {
                *v += bias;
            }
        }
        let shape = xt.shape().to_vec();
        let ng = self.ng(x) || self.ng(c);
        self.push(Tensor::from_parts(shape, out), Op::AddChannel(x, c), ng)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xt = self.value(x);
        let wt = self.value(w);
        let (n, ci, h, wd) = (xt.dim(0), xt.dim(1), xt.dim(2), xt.dim(3));
        let (co, wci, k) = (wt.dim(0), wt.dim(1), wt.dim(2));
        assert_eq!(ci, wci, "conv2d: input channels {ci} vs weight {wci}");
        let ho = conv_out_dim(h, k, stride, pad);
        let wo = conv_out_dim(wd, k, stride, pad);
        let hw = ho * wo;
        let kk = ci * k * k;
        let direct = k == 1 && stride == 1 && pad == 0;
        let mut out = vec![0.0; n * co * hw];
        let mut cols = if direct { Vec::new() } else { vec![0.0; kk * hw] };
        for s in 0..n {
            let xs = &xt.data()[s * ci * h * wd..(s + 1) * ci * h * wd];
            let src: &[f64] = if direct {
                xs
            } else {
                im2col(xs, ci, h, wd, k, stride, pad, ho, wo, &mut cols);
                &cols
            };
            let dst = &mut out[s * co * hw..(s + 1) * co * hw];
            if let Some(b) = b {
                let bt = self.value(b).data();
                for c in 0..co {
                    dst[c * hw..(c + 1) * hw].fill(bt[c]);
                }
            }
            gemm(co, kk, hw, wt.data(), false, src, false, dst, 1.0);
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(
            Tensor::from_parts(vec![n, co, ho, wo], out),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            ng,
        )
    }

    /// `y = x W^T + b` over the last axis of `x`; `W` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xt = self.value(x);
        let wt = self.value(w);
        let inp = *xt.shape().last().unwrap();
        let (out_dim, win) = (wt.dim(0), wt.dim(1));
        assert_eq!(inp, win, "linear: input dim {inp} vs weight {win}");
        let m = xt.len() / inp;
        let mut out = vec![0.0; m * out_dim];
        if let Some(b) = b {
            let bt = self.value(b).data();
            for row in out.chunks_mut(out_dim) {
                row.copy_from_slice(bt);
            }
        }
        gemm(m, inp, out_dim, xt.data(), false, wt.data(), true, &mut out, 1.0);
        let mut shape = xt.shape().to_vec();
        *shape.last_mut().unwrap() = out_dim;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(Tensor::from_parts(shape, out), Op::Linear { x, w, b }, ng)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let xt = self.value(x);
        let (n, c, s) = ncs(xt.shape());
        assert!(c % groups == 0, "group_norm: {c} channels, {groups} groups");
        let gc = c / groups;
        let g = self.value(gamma).data();
        let bta = self.value(beta).data();
        let xd = xt.data();
        let mut out = vec![0.0; xd.len()];
        let mut means = Vec::with_capacity(n * groups);
        let mut rstds = Vec::with_capacity(n * groups);
        let m = (gc * s) as f64;
        for i in 0..n {
            for grp in 0..groups {
                let lo = (i * c + grp * gc) * s;
                let hi = lo + gc * s;
                let slice = &xd[lo..hi];
                let mean = slice.iter().sum::<f64>() / m;
                let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
                let rstd = 1.0 / (var + eps).sqrt();
                for cc in 0..gc {
                    let ch = grp * gc + cc;
                    for p in 0..s {
                        let idx = lo + cc * s + p;
                        out[idx] = (xd[idx] - mean) * rstd * g[ch] + bta[ch];
                    }
                }
                means.push(mean);
                rstds.push(rstd);
            }
        }
        let shape = xt.shape().to_vec();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            Tensor::from_parts(shape, out),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean: means,
                rstd: rstds,
            },
            ng,
        )
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xt = self.value(x);
        let d = *xt.shape().last().unwrap();
        let g = self.value(gamma).data();
        let bta = self.value(beta).data();
        let xd = xt.data();
        let rows = xd.len() / d;
        let mut out = vec![0.0; xd.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * rstd * g[j] + bta[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let shape = xt.shape().to_vec();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
            ng,
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * sigmoid(a));
        let ng = self.ng(x);
        self.push(v, Op::Silu(x), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu);
        let ng = self.ng(x);
        self.push(v, Op::Gelu(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        let ng = self.ng(x);
        self.push(v, Op::Relu(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = (*self.nodes[x.0].value)
            .clone()
            .reshape(shape)
            .expect("reshape: element count");
        let ng = self.ng(x);
        self.push(v, Op::Reshape(x), ng)
    }

    pub fn permute(&mut self, x: Var, perm: [usize; 4]) -> Var {
        let v = permute4(self.value(x), perm);
        let ng = self.ng(x);
        self.push(v, Op::Permute(x, perm), ng)
    }

    /// Concatenates `[N, C_i, ...]` tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        let first = self.shape(xs[0]).to_vec();
        let n = first[0];
        let s: usize = first[2..].iter().product();
        let total_c: usize = xs.iter().map(|&v| self.shape(v)[1]).sum();
        let mut out = vec![0.0; n * total_c * s];
        let mut offset = 0;
        for &v in xs {
            let t = self.value(v);
            assert_eq!(&t.shape()[2..], &first[2..], "concat: spatial mismatch");
            let c = t.dim(1);
            for i in 0..n {
                let src = &t.data()[i * c * s..(i + 1) * c * s];
                let dst = (i * total_c + offset) * s;
                out[dst..dst + c * s].copy_from_slice(src);
            }
            offset += c;
        }
        let mut shape = first;
        shape[1] = total_c;
        let ng = xs.iter().any(|&v| self.ng(v));
        self.push(
            Tensor::from_parts(shape, out),
            Op::ConcatChannels(xs.to_vec()),
            ng,
        )
    }

    /// Slice `[start, start + len)` of the last axis.
    pub fn narrow_last(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        let d = *t.shape().last().unwrap();
        assert!(start + len <= d);
        let rows = t.len() / d;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&t.data()[r * d + start..r * d + start + len]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let ng = self.ng(x);
        self.push(Tensor::from_parts(shape, out), Op::NarrowLast { x, start }, ng)
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (n, c, h, w) = (t.dim(0), t.dim(1), t.dim(2), t.dim(3));
        let mut out = vec![0.0; n * c * 4 * h * w];
        for p in 0..n * c {
            let src = &t.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let ng = self.ng(x);
        self.push(
            Tensor::from_parts(vec![n, c, 2 * h, 2 * w], out),
            Op::Upsample2x(x),
            ng,
        )
    }

    /// Non-overlapping `factor x factor` average pooling.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Var {
        let t = self.value(x);
        let (n, c, h, w) = (t.dim(0), t.dim(1), t.dim(2), t.dim(3));
        let (ho, wo) = (h / factor, w / factor);
        let inv = 1.0 / (factor * factor) as f64;
        let mut out = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            let src = &t.data()[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc += src[(oy * factor + dy) * w + ox * factor + dx];
                        }
                    }
                    out[(p * ho + oy) * wo + ox] = acc * inv;
                }
            }
        }
        let ng = self.ng(x);
        self.push(
            Tensor::from_parts(vec![n, c, ho, wo], out),
            Op::AvgPool { x, factor },
            ng,
        )
    }

    /// `[N, C, ...]` → `[N, C]` mean over trailing positions.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (n, c, s) = ncs(t.shape());
        let out: Vec<f64> = t
            .data()
            .chunks(s)
            .map(|ch| ch.iter().sum::<f64>() / s as f64)
            .collect();
        let ng = self.ng(x);
        self.push(Tensor::from_parts(vec![n, c], out), Op::MeanSpatial(x), ng)
    }

    /// Batched matmul: `a [B, M, K] · b [B, K, N]`, or `b [B, N, K]` transposed.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let at = self.value(a);
        let bt = self.value(b);
        let (bs, m, k) = (at.dim(0), at.dim(1), at.dim(2));
        let n = if trans_b { bt.dim(1) } else { bt.dim(2) };
        let bk = if trans_b { bt.dim(2) } else { bt.dim(1) };
        assert_eq!(k, bk, "bmm: inner dims");
        assert_eq!(bs, bt.dim(0), "bmm: batch dims");
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &at.data()[i * m * k..(i + 1) * m * k],
                false,
                &bt.data()[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(
            Tensor::from_parts(vec![bs, m, n], out),
            Op::Bmm { a, b, trans_b },
            ng,
        )
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = *t.shape().last().unwrap();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let shape = t.shape().to_vec();
        let ng = self.ng(x);
        self.push(Tensor::from_parts(shape, out), Op::SoftmaxLast(x), ng)
    }

    /// Records a scalar loss whose value and gradient w.r.t. `x` were computed
    /// externally.
    pub fn loss(&mut self, x: Var, value: f64, grad: Tensor) -> Var {
        assert_eq!(grad.shape(), self.shape(x), "loss: gradient shape");
        let ng = self.ng(x);
        self.push(Tensor::scalar(value), Op::Loss { x, grad }, ng)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }

    fn send(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if self.nodes[v.0].needs_grad {
            accumulate(&mut grads[v.0], g);
        }
    }

    fn backward_node(&self, idx: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.send(grads, *a, gout.clone());
                self.send(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, gout.clone());
                self.send(grads, *b, gout.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let g = gout.zip_map(self.value(*b), |g, y| g * y).unwrap();
                    self.send(grads, *a, g);
                }
                if self.ng(*b) {
                    let g = gout.zip_map(self.value(*a), |g, y| g * y).unwrap();
                    self.send(grads, *b, g);
                }
            }
            Op::Scale(a, s) => self.send(grads, *a, gout.scale(*s)),
            Op::AddChannel(x, c) => {
                self.send(grads, *x, gout.clone());
                if self.ng(*c) {
                    let (n, ch, s) = ncs(gout.shape());
                    let data: Vec<f64> = gout.data().chunks(s).map(|r| r.iter().sum()).collect();
                    self.send(grads, *c, Tensor::from_parts(vec![n, ch], data));
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => self.conv_backward(*x, *w, *b, *stride, *pad, gout, grads),
            Op::Linear { x, w, b } => {
                let xt = self.value(*x);
                let wt = self.value(*w);
                let (out_dim, inp) = (wt.dim(0), wt.dim(1));
                let m = xt.len() / inp;
                if self.ng(*x) {
                    let mut dx = vec![0.0; m * inp];
                    gemm(m, out_dim, inp, gout.data(), false, wt.data(), false, &mut dx, 0.0);
                    self.send(grads, *x, Tensor::from_parts(xt.shape().to_vec(), dx));
                }
                if self.ng(*w) {
                    let mut dw = vec![0.0; out_dim * inp];
                    gemm(out_dim, m, inp, gout.data(), true, xt.data(), false, &mut dw, 0.0);
                    self.send(grads, *w, Tensor::from_parts(vec![out_dim, inp], dw));
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let mut db = vec![0.0; out_dim];
                        for row in gout.data().chunks(out_dim) {
                            for (d, g) in db.iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                        self.send(grads, *b, Tensor::from_parts(vec![out_dim], db));
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let xt = self.value(*x);
                let (n, c, s) = ncs(xt.shape());
                let gc = c / groups;
                let g = self.value(*gamma).data();
                let xd = xt.data();
                let gd = gout.data();
                let mut dx = vec![0.0; xd.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let m = (gc * s) as f64;
                for i in 0..n {
                    for grp in 0..*groups {
                        let gi = i * groups + grp;
                        let (mu, rs) = (mean[gi], rstd[gi]);
                        let lo = (i * c + grp * gc) * s;
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for cc in 0..gc {
                            let ch = grp * gc + cc;
                            for p in 0..s {
                                let idx = lo + cc * s + p;
                                let xhat = (xd[idx] - mu) * rs;
                                let dxhat = gd[idx] * g[ch];
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * xhat;
                                dgamma[ch] += gd[idx] * xhat;
                                dbeta[ch] += gd[idx];
                            }
                        }
                        let a = sum_dxhat / m;
                        let bb = sum_dxhat_xhat / m;
                        for cc in 0..gc {
                            let ch = grp * gc + cc;
                            for p in 0..s {
                                let idx = lo + cc * s + p;
                                let xhat = (xd[idx] - mu) * rs;
                                dx[idx] = rs * (gd[idx] * g[ch] - a - xhat * bb);
                            }
                        }
                    }
                }
                self.send(grads, *x, Tensor::from_parts(xt.shape().to_vec(), dx));
                self.send(grads, *gamma, Tensor::from_parts(vec![c], dgamma));
                self.send(grads, *beta, Tensor::from_parts(vec![c], dbeta));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xt = self.value(*x);
                let d = *xt.shape().last().unwrap();
                let g = self.value(*gamma).data();
                let xd = xt.data();
                let gd = gout.data();
                let mut dx = vec![0.0; xd.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..xd.len() / d {
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut sa = 0.0;
                    let mut sb = 0.0;
                    for j in 0..d {
                        let xhat = (xd[r * d + j] - mu) * rs;
                        let dxhat = gd[r * d + j] * g[j];
                        sa += dxhat;
                        sb += dxhat * xhat;
                        dgamma[j] += gd[r * d + j] * xhat;
                        dbeta[j] += gd[r * d + j];
                    }
                    sa /= d as f64;
                    sb /= d as f64;
                    for j in 0..d {
                        let xhat = (xd[r * d + j] - mu) * rs;
                        dx[r * d + j] = rs * (gd[r * d + j] * g[j] - sa - xhat * sb);
                    }
                }
                self.send(grads, *x, Tensor::from_parts(xt.shape().to_vec(), dx));
                self.send(grads, *gamma, Tensor::from_parts(vec![d], dgamma));
                self.send(grads, *beta, Tensor::from_parts(vec![d], dbeta));
            }
            Op::Silu(x) => {
                let g = gout
                    .zip_map(self.value(*x), |g, a| {
                        let s = sigmoid(a);
                        g * (s + a * s * (1.0 - s))
                    })
                    .unwrap();
                self.send(grads, *x, g);
            }
            Op::Gelu(x) => {
                let g = gout.zip_map(self.value(*x), |g, a| g * gelu_grad(a)).unwrap();
                self.send(grads, *x, g);
            }
            Op::Relu(x) => {
                let g = gout
                    .zip_map(self.value(*x), |g, a| if a > 0.0 { g } else { 0.0 })
                    .unwrap();
                self.send(grads, *x, g);
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.send(grads, *x, gout.clone().reshape(&shape).unwrap());
            }
            Op::Permute(x, perm) => {
                self.send(grads, *x, permute4(gout, inverse_perm(*perm)));
            }
            Op::ConcatChannels(xs) => {
                let (n, total_c, s) = ncs(gout.shape());
                let mut offset = 0;
                for &v in xs {
                    let shape = self.shape(v).to_vec();
                    let c = shape[1];
                    if self.ng(v) {
                        let mut d = Vec::with_capacity(n * c * s);
                        for i in 0..n {
                            let lo = (i * total_c + offset) * s;
                            d.extend_from_slice(&gout.data()[lo..lo + c * s]);
                        }
                        self.send(grads, v, Tensor::from_parts(shape, d));
                    }
                    offset += c;
                }
            }
            Op::NarrowLast { x, start } => {
                let shape = self.shape(*x).to_vec();
                let d = *shape.last().unwrap();
                let len = *gout.shape().last().unwrap();
                let mut dx = vec![0.0; shape.iter().product()];
                for (r, row) in gout.data().chunks(len).enumerate() {
                    dx[r * d + start..r * d + start + len].copy_from_slice(row);
                }
                self.send(grads, *x, Tensor::from_parts(shape, dx));
            }
            Op::Upsample2x(x) => {
                let shape = self.shape(*x).to_vec();
                let (h, w) = (shape[2], shape[3]);
                let planes = shape[0] * shape[1];
                let mut dx = vec![0.0; planes * h * w];
                for p in 0..planes {
                    let src = &gout.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dx[p * h * w + (y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                        }
                    }
                }
                self.send(grads, *x, Tensor::from_parts(shape, dx));
            }
            Op::AvgPool { x, factor } => {
                let shape = self.shape(*x).to_vec();
                let (h, w) = (shape[2], shape[3]);
                let (ho, wo) = (h / factor, w / factor);
                let inv = 1.0 / (factor * factor) as f64;
                let planes = shape[0] * shape[1];
                let mut dx = vec![0.0; planes * h * w];
                for p in 0..planes {
                    for y in 0..ho * factor {
                        for xx in 0..wo * factor {
                            dx[p * h * w + y * w + xx] =
                                gout.data()[(p * ho + y / factor) * wo + xx / factor] * inv;
                        }
                    }
                }
                self.send(grads, *x, Tensor::from_parts(shape, dx));
            }
            Op::MeanSpatial(x) => {
                let shape = self.shape(*x).to_vec();
                let s: usize = shape[2..].iter().product();
                let mut dx = Vec::with_capacity(shape.iter().product());
                for &g in gout.data() {
                    dx.extend(std::iter::repeat_n(g / s as f64, s));
                }
                self.send(grads, *x, Tensor::from_parts(shape, dx));
            }
            Op::Bmm { a, b, trans_b } => {
                let at = self.value(*a);
                let bt = self.value(*b);
                let (bs, m, k) = (at.dim(0), at.dim(1), at.dim(2));
                let n = gout.dim(2);
                if self.ng(*a) {
                    let mut da = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &gout.data()[i * m * n..(i + 1) * m * n],
                            false,
                            &bt.data()[i * k * n..(i + 1) * k * n],
                            !trans_b,
                            &mut da[i * m * k..(i + 1) * m * k],
                            0.0,
                        );
                    }
                    self.send(grads, *a, Tensor::from_parts(at.shape().to_vec(), da));
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        let ga = &gout.data()[i * m * n..(i + 1) * m * n];
                        let aa = &at.data()[i * m * k..(i + 1) * m * k];
                        let dst = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm(n, m, k, ga, true, aa, false, dst, 0.0);
                        } else {
                            gemm(k, m, n, aa, true, ga, false, dst, 0.0);
                        }
                    }
                    self.send(grads, *b, Tensor::from_parts(bt.shape().to_vec(), db));
                }
            }
            Op::SoftmaxLast(x) => {
                let y = &node.value;
                let d = *y.shape().last().unwrap();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y
                    .data()
                    .chunks(d)
                    .zip(gout.data().chunks(d))
                    .zip(dx.chunks_mut(d))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.send(grads, *x, Tensor::from_parts(y.shape().to_vec(), dx));
            }
            Op::Loss { x, grad } => {
                let s = gout.data()[0];
                self.send(grads, *x, grad.scale(s));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        gout: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let xt = self.value(x);
        let wt = self.value(w);
        let (n, ci, h, wd) = (xt.dim(0), xt.dim(1), xt.dim(2), xt.dim(3));
        let (co, k) = (wt.dim(0), wt.dim(2));
        let (ho, wo) = (gout.dim(2), gout.dim(3));
        let hw = ho * wo;
        let kk = ci * k * k;
        let direct = k == 1 && stride == 1 && pad == 0;
        let need_x = self.ng(x);
        let need_w = self.ng(w);
        let mut dw = if need_w { vec![0.0; co * kk] } else { Vec::new() };
        let mut dx = if need_x { vec![0.0; xt.len()] } else { Vec::new() };
        let mut cols = vec![0.0; kk * hw];
        let mut dcols = vec![0.0; kk * hw];
        for s in 0..n {
            let xs = &xt.data()[s * ci * h * wd..(s + 1) * ci * h * wd];
            let gs = &gout.data()[s * co * hw..(s + 1) * co * hw];
            if need_w {
                let src: &[f64] = if direct {
                    xs
                } else {
                    im2col(xs, ci, h, wd, k, stride, pad, ho, wo, &mut cols);
                    &cols
                };
                gemm(co, hw, kk, gs, false, src, true, &mut dw, 1.0);
            }
            if need_x {
                let dxs = &mut dx[s * ci * h * wd..(s + 1) * ci * h * wd];
                if direct {
                    gemm(kk, co, hw, wt.data(), true, gs, false, dxs, 0.0);
                } else {
                    gemm(kk, co, hw, wt.data(), true, gs, false, &mut dcols, 0.0);
                    col2im(&dcols, ci, h, wd, k, stride, pad, ho, wo, dxs);
                }
            }
        }
        if need_x {
            self.send(grads, x, Tensor::from_parts(xt.shape().to_vec(), dx));
        }
        if need_w {
            self.send(grads, w, Tensor::from_parts(wt.shape().to_vec(), dw));
        }
        if let Some(b) = b {
            if self.ng(b) {
                let db: Vec<f64> = (0..co)
                    .map(|c| {
                        (0..n)
                            .map(|s| {
                                gout.data()[(s * co + c) * hw..(s * co + c + 1) * hw]
                                    .iter()
                                    .sum::<f64>()
                            })
                            .sum()
                    })
                    .collect();
                self.send(grads, b, Tensor::from_parts(vec![co], db));
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: IndexMap<String, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|v| self.get(*v))
    }

    /// Gradients of every parameter read during the forward pass.
    pub fn into_param_grads(mut self) -> IndexMap<String, Tensor> {
        let mut out = IndexMap::new();
        for (name, v) in &self.params {
            if let Some(g) = self.grads[v.0].take() {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    /// Central finite differences of `f` w.r.t. every entry of `x`, compared
    /// against the tape gradient.
    fn check_grad(x: Tensor, f: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let xv = g.variable(x.clone());
        let y = f(&mut g, xv);
        // Reduce with a fixed random projection so every output matters.
        let proj = Tensor::randn(g.shape(y), 1.0, &mut rng::stream(3, "proj", 0));
        let val: f64 = g
            .value(y)
            .data()
            .iter()
            .zip(proj.data())
            .map(|(a, b)| a * b)
            .sum();
        let l = g.loss(y, val, proj.clone());
        let grads = g.backward(l);
        let analytic = grads.get(xv).unwrap().clone();
        let eval = |t: Tensor| {
            let mut g = Graph::new();
            let v = g.input(t);
            let y = f(&mut g, v);
            g.value(y)
                .data()
                .iter()
                .zip(proj.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let h = 1e-6;
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            let num = (eval(p) - eval(m)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
            assert!(err < 1e-5, "entry {i}: analytic {a} numeric {num}");
        }
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut rng::stream(seed, "t", 0))
    }

    #[test]
    fn conv_grads() {
        let w = rand(&[3, 2, 3, 3], 1);
        let b = rand(&[3], 2);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            check_grad(rand(&[2, 2, 5, 4], 3), |g, x| {
                let w = g.input(w.clone());
                let b = g.input(b.clone());
                g.conv2d(x, w, Some(b), stride, pad)
            });
            check_grad(w.clone(), |g, w| {
                let x = g.input(rand(&[2, 2, 5, 4], 3));
                g.conv2d(x, w, None, stride, pad)
            });
        }
    }

    #[test]
    fn norm_grads() {
        let gamma = rand(&[4], 5);
        let beta = rand(&[4], 6);
        check_grad(rand(&[2, 4, 3, 3], 4), |g, x| {
            let ga = g.input(gamma.clone());
            let be = g.input(beta.clone());
            g.group_norm(x, ga, be, 2, 1e-5)
        });
        check_grad(rand(&[2, 3, 4], 7), |g, x| {
            let ga = g.input(gamma.clone());
            let be = g.input(beta.clone());
            g.layer_norm(x, ga, be, 1e-5)
        });
        check_grad(gamma.clone(), |g, ga| {
            let x = g.input(rand(&[2, 4, 3, 3], 4));
            let be = g.input(beta.clone());
            g.group_norm(x, ga, be, 2, 1e-5)
        });
    }

    #[test]
    fn attention_path_grads() {
        check_grad(rand(&[2, 3, 4], 8), |g, x| {
            let k = g.input(rand(&[2, 5, 4], 9));
            let s = g.bmm(x, k, true);
            let p = g.softmax_last(s);
            let v = g.input(rand(&[2, 5, 3], 10));
            g.bmm(p, v, false)
        });
        check_grad(rand(&[2, 5, 4], 11), |g, k| {
            let q = g.input(rand(&[2, 3, 4], 8));
            let s = g.bmm(q, k, true);
            g.softmax_last(s)
        });
        check_grad(rand(&[2, 4, 3], 12), |g, b| {
            let a = g.input(rand(&[2, 5, 4], 13));
            g.bmm(a, b, false)
        });
    }

    #[test]
    fn elementwise_and_layout_grads() {
        check_grad(rand(&[2, 3, 2, 2], 14), |g, x| {
            let a = g.silu(x);
            let b = g.gelu(a);
            let c = g.upsample2x(b);
            let d = g.permute(c, [0, 2, 3, 1]);
            let e = g.narrow_last(d, 1, 2);
            g.reshape(e, &[2, 16, 2])
        });
        check_grad(rand(&[2, 3, 4, 4], 15), |g, x| {
            let other = g.input(rand(&[2, 2, 4, 4], 16));
            let cat = g.concat_channels(&[x, other, x]);
            let p = g.avg_pool(cat, 2);
            let m = g.mean_spatial(cat);
            let pp = g.mean_spatial(p);
            let s = g.mul(m, pp);
            let t = g.input(rand(&[2, 8], 17));
            let lw = g.input(rand(&[3, 8], 18));
            let lb = g.input(rand(&[3], 19));
            let u = g.sub(s, t);
            g.linear(u, lw, Some(lb))
        });
        check_grad(rand(&[2, 3], 20), |g, c| {
            let x = g.input(rand(&[2, 3, 2, 2], 21));
            let y = g.add_channel(x, c);
            g.scale(y, 0.5)
        });
    }

    #[test]
    fn conv_matches_naive_loop() {
        let x = rand(&[1, 2, 4, 4], 30);
        let w = rand(&[3, 2, 3, 3], 31);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let wv = g.input(w.clone());
        let y = g.conv2d(xv, wv, None, 2, 1);
        assert_eq!(g.shape(y), &[1, 3, 2, 2]);
        for co in 0..3 {
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut acc = 0.0;
                    for ci in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let iy = (oy * 2 + ki) as isize - 1;
                                let ix = (ox * 2 + kj) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= 4 || ix >= 4 {
                                    continue;
                                }
                                acc += x.data()[(ci * 4 + iy as usize) * 4 + ix as usize]
                                    * w.data()[((co * 2 + ci) * 3 + ki) * 3 + kj];
                            }
                        }
                    }
                    let got = g.value(y).data()[(co * 2 + oy) * 2 + ox];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }
}
