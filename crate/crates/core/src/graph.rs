//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes. Nodes created
//! with `requires_grad = false` are constants: no gradient is ever computed
//! for them or for anything that depends only on them, which is how frozen
//! networks participate in a forward pass without receiving updates.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::float::Float;
use crate::resample::{resize_matrix, Filter};
use crate::tensor::{matmul, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    LeakyRelu(Var, F),
    Clamp(Var, F, F),
    Reshape(Var),
    Concat(Vec<Var>),
    Row(Var, usize),
    BroadcastBatch(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    InstanceNorm {
        x: Var,
        rstd: Vec<F>,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    Resize {
        x: Var,
        rows: Rc<Vec<F>>,
        cols: Rc<Vec<F>>,
    },
    GlobalAvgPool(Var),
    Rms {
        x: Var,
        divisor: F,
    },
    CosineRows(Var, Var),
    ChannelUnitNorm {
        x: Var,
        eps: F,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    Mean(Var),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Graph<F: Float> {
    nodes: Vec<Node<F>>,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

pub(crate) fn conv_out(size: usize, k: usize, spec: ConvSpec) -> usize {
    (size + 2 * spec.pad - k) / spec.stride + 1
}

/// Unfold `x [B, C, H, W]` into `cols [C*k*k, B*Ho*Wo]`.
#[allow(clippy::too_many_arguments)]
fn im2col<F: Float>(
    x: &[F],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    spec: ConvSpec,
    ho: usize,
    wo: usize,
) -> Vec<F> {
    let n = b * ho * wo;
    let mut cols = vec![F::zero(); c * k * k * n];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                let (lo, hi) = valid_range(kx, spec, w, wo);
                for bi in 0..b {
                    let plane = &x[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                    for oy in 0..ho {
                        let Some(iy) = source_index(oy, ky, spec, h) else {
                            continue;
                        };
                        let src_row = &plane[iy * w..(iy + 1) * w];
                        let out_row = &mut dst[(bi * ho + oy) * wo..(bi * ho + oy + 1) * wo];
                        if lo >= hi {
                            continue;
                        }
                        let ix0 = lo * spec.stride + kx - spec.pad;
                        if spec.stride == 1 {
                            out_row[lo..hi].copy_from_slice(&src_row[ix0..ix0 + (hi - lo)]);
                        } else {
                            for (o, &s) in out_row[lo..hi]
                                .iter_mut()
                                .zip(src_row[ix0..].iter().step_by(spec.stride))
                            {
                                *o = s;
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Output columns `[lo, hi)` whose tap `kx` lands inside a row of width `w`.
fn valid_range(kx: usize, spec: ConvSpec, w: usize, wo: usize) -> (usize, usize) {
    let lo = if kx >= spec.pad {
        0
    } else {
        (spec.pad - kx).div_ceil(spec.stride)
    };
    let hi = if w + spec.pad > kx {
        ((w + spec.pad - kx - 1) / spec.stride + 1).min(wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn source_index(o: usize, kk: usize, spec: ConvSpec, size: usize) -> Option<usize> {
    let i = (o * spec.stride + kk).checked_sub(spec.pad)?;
    (i < size).then_some(i)
}

/// Adjoint of [`im2col`]: scatter-add columns back into `dx`.
#[allow(clippy::too_many_arguments)]
fn col2im<F: Float>(
    cols: &[F],
    dx: &mut [F],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    spec: ConvSpec,
    ho: usize,
    wo: usize,
) {
    let n = b * ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                let (lo, hi) = valid_range(kx, spec, w, wo);
                if lo >= hi {
                    continue;
                }
                let ix0 = lo * spec.stride + kx - spec.pad;
                for bi in 0..b {
                    let plane = &mut dx[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                    for oy in 0..ho {
                        let Some(iy) = source_index(oy, ky, spec, h) else {
                            continue;
                        };
                        let in_row = &src[(bi * ho + oy) * wo + lo..(bi * ho + oy) * wo + hi];
                        let dst_row = &mut plane[iy * w..(iy + 1) * w];
                        if spec.stride == 1 {
                            for (d, &g) in dst_row[ix0..ix0 + (hi - lo)].iter_mut().zip(in_row) {
                                *d += g;
                            }
                        } else {
                            for (d, &g) in dst_row[ix0..].iter_mut().step_by(spec.stride).zip(in_row) {
                                *d += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Apply `rows [ho, hi]` and `cols [wo, wi]` to every plane: `Y = R X C^T`.
#[allow(clippy::too_many_arguments)]
fn resize_apply<F: Float>(
    x: &[F],
    planes: usize,
    hi: usize,
    wi: usize,
    ho: usize,
    wo: usize,
    rows: &[F],
    cols: &[F],
) -> Vec<F> {
    let mut tmp = vec![F::zero(); planes * hi * wo];
    matmul(x, false, cols, true, &mut tmp, planes * hi, wi, wo, false);
    let mut out = vec![F::zero(); planes * ho * wo];
    for p in 0..planes {
        matmul(
            rows,
            false,
            &tmp[p * hi * wo..(p + 1) * hi * wo],
            false,
            &mut out[p * ho * wo..(p + 1) * ho * wo],
            ho,
            hi,
            wo,
            false,
        );
    }
    out
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Float> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>) -> Result<Var> {
        check_same(name, self.shape(a), self.shape(b))?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Var {
        let t = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(t, Op::AddScalar(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: F) -> Var {
        let t = self.value(a).map(|x| if x > F::zero() { x } else { x * slope });
        let rg = self.rg(a);
        self.push(t, Op::LeakyRelu(a, slope), rg)
    }

    pub fn clamp(&mut self, a: Var, lo: F, hi: F) -> Var {
        let t = self.value(a).map(|x| x.max(lo).min(hi));
        let rg = self.rg(a);
        self.push(t, Op::Clamp(a, lo, hi), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Concatenate along axis 1; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat"))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() < 2 {
            return Err(Error::shape("concat", "rank < 2"));
        }
        let b = s0[0];
        let inner: usize = s0[2..].iter().product();
        let mut total_c = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != s0.len() || s[0] != b || s[2..] != s0[2..] {
                return Err(Error::shape("concat", format!("{s:?} vs {s0:?}")));
            }
            total_c += s[1];
        }
        let mut data = Vec::with_capacity(b * total_c * inner);
        for bi in 0..b {
            for &p in parts {
                let v = self.value(p);
                let c = v.shape()[1];
                data.extend_from_slice(&v.data()[bi * c * inner..(bi + 1) * c * inner]);
            }
        }
        let mut shape = s0;
        shape[1] = total_c;
        let t = Tensor::new(&shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::Concat(parts.to_vec()), rg))
    }

    /// Row `index` of `x [B, L, D]` as `[B, D]`.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [b, l, d] = s[..] else {
            return Err(Error::shape("row", format!("expected rank 3, got {s:?}")));
        };
        if index >= l {
            return Err(Error::OutOfRange {
                what: "row",
                index,
                len: l,
            });
        }
        let v = self.value(x).data();
        let mut data = Vec::with_capacity(b * d);
        for bi in 0..b {
            data.extend_from_slice(&v[(bi * l + index) * d..(bi * l + index + 1) * d]);
        }
        let t = Tensor::new(&[b, d], data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Row(x, index), rg))
    }

    /// Repeat a `[1, ...]` tensor `n` times along axis 0.
    pub fn broadcast_batch(&mut self, x: Var, n: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.first() != Some(&1) {
            return Err(Error::shape("broadcast_batch", format!("{s:?}")));
        }
        let v = self.value(x).data();
        let mut data = Vec::with_capacity(v.len() * n);
        for _ in 0..n {
            data.extend_from_slice(v);
        }
        let mut shape = s;
        shape[0] = n;
        let t = Tensor::new(&shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::BroadcastBatch(x), rg))
    }

    /// 2-D convolution, `x [B, Ci, H, W]`, `w [Co, Ci, k, k]`, `b [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (bn, ci, h, wd) = self.value(x).dims4()?;
        let (co, wci, k, k2) = self.value(w).dims4()?;
        if wci != ci || k != k2 {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} vs weight {:?}", self.shape(x), self.shape(w)),
            ));
        }
        if let Some(b) = b {
            check_same("conv2d bias", self.shape(b), &[co])?;
        }
        if h + 2 * spec.pad < k || wd + 2 * spec.pad < k {
            return Err(Error::shape("conv2d", "kernel larger than padded input"));
        }
        let ho = conv_out(h, k, spec);
        let wo = conv_out(wd, k, spec);
        let cols = im2col(self.value(x).data(), bn, ci, h, wd, k, spec, ho, wo);
        let n = bn * ho * wo;
        let kk = ci * k * k;
        let mut out_mat = vec![F::zero(); co * n];
        matmul(
            self.value(w).data(),
            false,
            &cols,
            false,
            &mut out_mat,
            co,
            kk,
            n,
            false,
        );
        let hw = ho * wo;
        let mut out = vec![F::zero(); bn * co * hw];
        let bias = b.map(|b| self.value(b).data().to_vec());
        for c in 0..co {
            let bc = bias.as_ref().map_or(F::zero(), |bv| bv[c]);
            for bi in 0..bn {
                let src = &out_mat[c * n + bi * hw..c * n + (bi + 1) * hw];
                let dst = &mut out[(bi * co + c) * hw..(bi * co + c + 1) * hw];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bc;
                }
            }
        }
        let t = Tensor::new(&[bn, co, ho, wo], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(t, Op::Conv2d { x, w, b, spec }, rg))
    }

    /// `y = x w^T + b`, `x [B, I]`, `w [O, I]`, `b [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (&[bn, i], &[o, wi]) = (&xs[..], &ws[..]) else {
            return Err(Error::shape("linear", format!("{xs:?} x {ws:?}")));
        };
        if i != wi {
            return Err(Error::shape("linear", format!("{xs:?} x {ws:?}")));
        }
        if let Some(b) = b {
            check_same("linear bias", self.shape(b), &[o])?;
        }
        let mut out = vec![F::zero(); bn * o];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(o) {
                row.copy_from_slice(bv);
            }
        }
        matmul(
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            bn,
            i,
            o,
            b.is_some(),
        );
        let t = Tensor::new(&[bn, o], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(t, Op::Linear { x, w, b }, rg))
    }

    /// Per-sample, per-channel normalization over the spatial axes.
    pub fn instance_norm(&mut self, x: Var, eps: F) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let n = F::of(hw as f64);
        let src = self.value(x).data();
        let mut out = vec![F::zero(); src.len()];
        let mut rstd = Vec::with_capacity(b * c);
        for p in 0..b * c {
            let plane = &src[p * hw..(p + 1) * hw];
            let mean = plane.iter().copied().sum::<F>() / n;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let r = F::one() / (var + eps).sqrt();
            rstd.push(r);
            for (o, &v) in out[p * hw..(p + 1) * hw].iter_mut().zip(plane) {
                *o = (v - mean) * r;
            }
        }
        let t = Tensor::new(&[b, c, h, w], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::InstanceNorm { x, rstd }, rg))
    }

    /// `y[b,c,:,:] = x[b,c,:,:] * scale[b,c] + shift[b,c]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        check_same("channel_affine scale", self.shape(scale), &[b, c])?;
        check_same("channel_affine shift", self.shape(shift), &[b, c])?;
        let hw = h * w;
        let s = self.value(scale).data();
        let t = self.value(shift).data();
        let src = self.value(x).data();
        let mut out = vec![F::zero(); src.len()];
        for p in 0..b * c {
            for (o, &v) in out[p * hw..(p + 1) * hw].iter_mut().zip(&src[p * hw..(p + 1) * hw]) {
                *o = v * s[p] + t[p];
            }
        }
        let out = Tensor::new(&[b, c, h, w], out)?;
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        Ok(self.push(out, Op::ChannelAffine { x, scale, shift }, rg))
    }

    /// Separable resize of every plane to `ho x wo`.
    pub fn resize(&mut self, x: Var, ho: usize, wo: usize, filter: Filter) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if (h, w) == (ho, wo) {
            return Ok(x);
        }
        let rows: Rc<Vec<F>> = Rc::new(resize_matrix(h, ho, filter).into_iter().map(F::of).collect());
        let cols: Rc<Vec<F>> = Rc::new(resize_matrix(w, wo, filter).into_iter().map(F::of).collect());
        let out = resize_apply(self.value(x).data(), b * c, h, w, ho, wo, &rows, &cols);
        let t = Tensor::new(&[b, c, ho, wo], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Resize { x, rows, cols }, rg))
    }

    /// `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let n = F::of(hw as f64);
        let src = self.value(x).data();
        let out = (0..b * c)
            .map(|p| src[p * hw..(p + 1) * hw].iter().copied().sum::<F>() / n)
            .collect();
        let t = Tensor::new(&[b, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::GlobalAvgPool(x), rg))
    }

    /// Per-sample `sqrt(sum(x^2) / divisor)`; `divisor = None` uses the
    /// per-sample element count (root mean square).
    pub fn rms(&mut self, x: Var, divisor: Option<F>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let b = *s.first().ok_or(Error::shape("rms", "rank 0"))?;
        let per = self.value(x).numel() / b.max(1);
        let divisor = divisor.unwrap_or(F::of(per as f64));
        let src = self.value(x).data();
        let out = (0..b)
            .map(|i| {
                let ss: F = src[i * per..(i + 1) * per].iter().map(|&v| v * v).sum();
                (ss / divisor).sqrt()
            })
            .collect();
        let t = Tensor::new(&[b], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Rms { x, divisor }, rg))
    }

    /// Row-wise cosine similarity of `[B, D]` tensors, giving `[B]`.
    /// Rows with zero norm yield 0.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("cosine_rows", self.shape(a), self.shape(b))?;
        let s = self.shape(a).to_vec();
        let [n, d] = s[..] else {
            return Err(Error::shape("cosine_rows", format!("{s:?}")));
        };
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let out = (0..n)
            .map(|i| {
                let (ra, rb) = (&va[i * d..(i + 1) * d], &vb[i * d..(i + 1) * d]);
                let (dot, na, nb) = cos_parts(ra, rb);
                if na == F::zero() || nb == F::zero() {
                    F::zero()
                } else {
                    dot / (na * nb)
                }
            })
            .collect();
        let t = Tensor::new(&[n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::CosineRows(a, b), rg))
    }

    /// Normalize the channel vector at every spatial site to unit length.
    pub fn channel_unit_norm(&mut self, x: Var, eps: F) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = vec![F::zero(); src.len()];
        for bi in 0..b {
            let base = bi * c * hw;
            for p in 0..hw {
                let mut ss = F::zero();
                for ch in 0..c {
                    let v = src[base + ch * hw + p];
                    ss += v * v;
                }
                let d = ss.sqrt() + eps;
                for ch in 0..c {
                    out[base + ch * hw + p] = src[base + ch * hw + p] / d;
                }
            }
        }
        let t = Tensor::new(&[b, c, h, w], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::ChannelUnitNorm { x, eps }, rg))
    }

    /// Mean softmax cross-entropy of `logits [B, K]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let [b, k] = s[..] else {
            return Err(Error::shape("softmax_cross_entropy", format!("{s:?}")));
        };
        if labels.len() != b || labels.iter().any(|&l| l >= k) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for batch {b}, {k} classes", labels.len()),
            ));
        }
        let v = self.value(logits).data();
        let mut total = F::zero();
        for (i, &l) in labels.iter().enumerate() {
            let row = &v[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<F>().ln();
            total += lse - row[l];
        }
        let t = Tensor::scalar(total / F::of(b as f64));
        let rg = self.rg(logits);
        Ok(self.push(
            t,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over all elements, as a one-element tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data().iter().copied().sum::<F>() / F::of(v.numel() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Reverse pass from a one-element `root`.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        let rv = &self.nodes[root.0].value;
        grads[root.0] = Some(Tensor::full(rv.shape(), F::one()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor<F>>], v: Var, f: impl FnOnce(&mut [F])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn backprop_node(&self, i: usize, gy: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let node = &self.nodes[i];
        let g = gy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, gy.clone());
                self.acc(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, gy.clone());
                self.acc(grads, *b, gy.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc_with(grads, *a, |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(vb) {
                        *d += g * y;
                    }
                });
                self.acc_with(grads, *b, |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(va) {
                        *d += g * x;
                    }
                });
            }
            Op::Scale(a, c) => self.acc(grads, *a, gy.map(|x| x * *c)),
            Op::AddScalar(a) => self.acc(grads, *a, gy.clone()),
            Op::LeakyRelu(a, slope) => {
                let va = self.value(*a).data();
                self.acc_with(grads, *a, |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(va) {
                        *d += if x > F::zero() { g } else { g * *slope };
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let va = self.value(*a).data();
                self.acc_with(grads, *a, |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(va) {
                        if x >= *lo && x <= *hi {
                            *d += g;
                        }
                    }
                });
            }
            Op::Reshape(a) => self.acc_with(grads, *a, |d| {
                for (d, &g) in d.iter_mut().zip(g) {
                    *d += g;
                }
            }),
            Op::Concat(parts) => {
                let s = gy.shape();
                let b = s[0];
                let inner: usize = s[2..].iter().product();
                let total_c = s[1];
                let mut c0 = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    self.acc_with(grads, p, |d| {
                        for bi in 0..b {
                            let src = &g[(bi * total_c + c0) * inner..(bi * total_c + c0 + c) * inner];
                            for (d, &g) in d[bi * c * inner..(bi + 1) * c * inner].iter_mut().zip(src) {
                                *d += g;
                            }
                        }
                    });
                    c0 += c;
                }
            }
            Op::Row(x, index) => {
                let s = self.shape(*x);
                let (b, l, dd) = (s[0], s[1], s[2]);
                self.acc_with(grads, *x, |d| {
                    for bi in 0..b {
                        let dst = &mut d[(bi * l + index) * dd..(bi * l + index + 1) * dd];
                        for (d, &g) in dst.iter_mut().zip(&g[bi * dd..(bi + 1) * dd]) {
                            *d += g;
                        }
                    }
                });
            }
            Op::BroadcastBatch(x) => {
                let per = self.value(*x).numel();
                self.acc_with(grads, *x, |d| {
                    for chunk in g.chunks(per) {
                        for (d, &g) in d.iter_mut().zip(chunk) {
                            *d += g;
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, spec } => self.conv_backward(*x, *w, *b, *spec, gy, grads),
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (bn, inp) = (xs[0], xs[1]);
                let o = self.shape(*w)[0];
                let (vx, vw) = (self.value(*x).data(), self.value(*w).data());
                self.acc_with(grads, *x, |d| matmul(g, false, vw, false, d, bn, o, inp, true));
                self.acc_with(grads, *w, |d| matmul(g, true, vx, false, d, o, bn, inp, true));
                if let Some(b) = b {
                    self.acc_with(grads, *b, |d| {
                        for row in g.chunks(o) {
                            for (d, &g) in d.iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                    });
                }
            }
            Op::InstanceNorm { x, rstd } => {
                let s = node.value.shape();
                let hw = s[2] * s[3];
                let n = F::of(hw as f64);
                let xhat = node.value.data();
                self.acc_with(grads, *x, |d| {
                    for (p, &r) in rstd.iter().enumerate() {
                        let gp = &g[p * hw..(p + 1) * hw];
                        let xp = &xhat[p * hw..(p + 1) * hw];
                        let sg: F = gp.iter().copied().sum();
                        let sgx: F = gp.iter().zip(xp).map(|(&a, &b)| a * b).sum();
                        for ((d, &gi), &xi) in d[p * hw..(p + 1) * hw].iter_mut().zip(gp).zip(xp) {
                            *d += r / n * (n * gi - sg - xi * sgx);
                        }
                    }
                });
            }
            Op::ChannelAffine { x, scale, shift } => {
                let s = node.value.shape();
                let hw = s[2] * s[3];
                let planes = s[0] * s[1];
                let vx = self.value(*x).data();
                let vs = self.value(*scale).data();
                self.acc_with(grads, *x, |d| {
                    for p in 0..planes {
                        for (d, &gi) in d[p * hw..(p + 1) * hw].iter_mut().zip(&g[p * hw..(p + 1) * hw]) {
                            *d += gi * vs[p];
                        }
                    }
                });
                self.acc_with(grads, *scale, |d| {
                    for (p, d) in d.iter_mut().enumerate().take(planes) {
                        *d += g[p * hw..(p + 1) * hw]
                            .iter()
                            .zip(&vx[p * hw..(p + 1) * hw])
                            .map(|(&a, &b)| a * b)
                            .sum::<F>();
                    }
                });
                self.acc_with(grads, *shift, |d| {
                    for (p, d) in d.iter_mut().enumerate().take(planes) {
                        *d += g[p * hw..(p + 1) * hw].iter().copied().sum::<F>();
                    }
                });
            }
            Op::Resize { x, rows, cols } => {
                let (b, c, hi, wi) = self.value(*x).dims4().expect("rank 4");
                let (ho, wo) = (node.value.shape()[2], node.value.shape()[3]);
                self.acc_with(grads, *x, |d| {
                    // dX = R^T dY C
                    let planes = b * c;
                    let mut tmp = vec![F::zero(); planes * hi * wo];
                    for p in 0..planes {
                        matmul(
                            rows,
                            true,
                            &g[p * ho * wo..(p + 1) * ho * wo],
                            false,
                            &mut tmp[p * hi * wo..(p + 1) * hi * wo],
                            hi,
                            ho,
                            wo,
                            false,
                        );
                    }
                    matmul(&tmp, false, cols, false, d, planes * hi, wo, wi, true);
                });
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let n = F::of(hw as f64);
                self.acc_with(grads, *x, |d| {
                    for (p, &gi) in g.iter().enumerate() {
                        for d in &mut d[p * hw..(p + 1) * hw] {
                            *d += gi / n;
                        }
                    }
                });
            }
            Op::Rms { x, divisor } => {
                let vx = self.value(*x).data();
                let y = node.value.data();
                let per = vx.len() / y.len().max(1);
                self.acc_with(grads, *x, |d| {
                    for (bi, (&yi, &gi)) in y.iter().zip(g).enumerate() {
                        if yi == F::zero() {
                            continue;
                        }
                        let k = gi / (*divisor * yi);
                        for (d, &xv) in d[bi * per..(bi + 1) * per]
                            .iter_mut()
                            .zip(&vx[bi * per..(bi + 1) * per])
                        {
                            *d += k * xv;
                        }
                    }
                });
            }
            Op::CosineRows(a, b) => {
                let s = self.shape(*a);
                let dd = s[1];
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let y = node.value.data();
                for (target, this, other) in [(*a, va, vb), (*b, vb, va)] {
                    self.acc_with(grads, target, |d| {
                        for (i, (&c, &gi)) in y.iter().zip(g).enumerate() {
                            let rt = &this[i * dd..(i + 1) * dd];
                            let ro = &other[i * dd..(i + 1) * dd];
                            let (_, nt, no) = cos_parts(rt, ro);
                            if nt == F::zero() || no == F::zero() {
                                continue;
                            }
                            for ((d, &t), &o) in d[i * dd..(i + 1) * dd].iter_mut().zip(rt).zip(ro) {
                                *d += gi * (o / (nt * no) - c * t / (nt * nt));
                            }
                        }
                    });
                }
            }
            Op::ChannelUnitNorm { x, eps } => {
                let (b, c, h, w) = self.value(*x).dims4().expect("rank 4");
                let hw = h * w;
                let vx = self.value(*x).data();
                self.acc_with(grads, *x, |d| {
                    for bi in 0..b {
                        let base = bi * c * hw;
                        for p in 0..hw {
                            let mut ss = F::zero();
                            let mut gx = F::zero();
                            for ch in 0..c {
                                let v = vx[base + ch * hw + p];
                                ss += v * v;
                                gx += g[base + ch * hw + p] * v;
                            }
                            let nrm = ss.sqrt();
                            let den = nrm + *eps;
                            let k = if nrm > F::zero() {
                                gx / (den * den * nrm)
                            } else {
                                F::zero()
                            };
                            for ch in 0..c {
                                let idx = base + ch * hw + p;
                                d[idx] += g[idx] / den - vx[idx] * k;
                            }
                        }
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let s = self.shape(*logits);
                let (b, k) = (s[0], s[1]);
                let v = self.value(*logits).data();
                let scale = g[0] / F::of(b as f64);
                self.acc_with(grads, *logits, |d| {
                    for (i, &l) in labels.iter().enumerate() {
                        let row = &v[i * k..(i + 1) * k];
                        let m = row.iter().copied().fold(F::neg_infinity(), F::max);
                        let z: F = row.iter().map(|&x| (x - m).exp()).sum();
                        for (j, (d, &x)) in d[i * k..(i + 1) * k].iter_mut().zip(row).enumerate() {
                            let p = (x - m).exp() / z;
                            let t = if j == l { F::one() } else { F::zero() };
                            *d += scale * (p - t);
                        }
                    }
                });
            }
            Op::Mean(x) => {
                let n = F::of(self.value(*x).numel() as f64);
                let gi = g[0] / n;
                self.acc_with(grads, *x, |d| {
                    for d in d.iter_mut() {
                        *d += gi;
                    }
                });
            }
        }
    }

    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
        gy: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) {
        let (bn, ci, h, wd) = self.value(x).dims4().expect("rank 4");
        let (co, _, k, _) = self.value(w).dims4().expect("rank 4");
        let (_, _, ho, wo) = gy.dims4().expect("rank 4");
        let hw = ho * wo;
        let n = bn * hw;
        let kk = ci * k * k;
        // [B, Co, HW] -> [Co, B*HW]
        let mut gmat = vec![F::zero(); co * n];
        let g = gy.data();
        for bi in 0..bn {
            for c in 0..co {
                gmat[c * n + bi * hw..c * n + (bi + 1) * hw]
                    .copy_from_slice(&g[(bi * co + c) * hw..(bi * co + c + 1) * hw]);
            }
        }
        if let Some(b) = b {
            self.acc_with(grads, b, |d| {
                for (c, d) in d.iter_mut().enumerate() {
                    *d += gmat[c * n..(c + 1) * n].iter().copied().sum::<F>();
                }
            });
        }
        if self.rg(w) {
            let cols = im2col(self.value(x).data(), bn, ci, h, wd, k, spec, ho, wo);
            self.acc_with(grads, w, |d| matmul(&gmat, false, &cols, true, d, co, n, kk, true));
        }
        if self.rg(x) {
            let mut dcols = vec![F::zero(); kk * n];
            matmul(self.value(w).data(), true, &gmat, false, &mut dcols, kk, co, n, false);
            self.acc_with(grads, x, |d| col2im(&dcols, d, bn, ci, h, wd, k, spec, ho, wo));
        }
    }
}

fn cos_parts<F: Float>(a: &[F], b: &[F]) -> (F, F, F) {
    let mut dot = F::zero();
    let mut na = F::zero();
    let mut nb = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    (dot, na.sqrt(), nb.sqrt())
}
