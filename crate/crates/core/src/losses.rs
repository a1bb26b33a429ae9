//! Pixel, perceptual, identity and style-code regularization losses.
//!
//! Graph versions (`*_var`) return one value per sample `[B]` so callers can
//! average over batch and refinement iterations. Plain versions evaluate a
//! single pair in `f64`.

use alloc::format;

use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::float::Float;
use crate::generator::AverageCode;
use crate::graph::{Graph, Var};
use crate::identity::IdentityEmbedding;
use crate::perceptual::PerceptualNet;
use crate::tensor::Tensor;

pub const TERM_NAMES: [&str; 4] = ["l2", "perceptual", "identity", "wnorm"];

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub l2: f64,
    pub perceptual: f64,
    pub identity: f64,
    pub wnorm: f64,
}

impl LossTerms {
    pub fn as_array(&self) -> [f64; 4] {
        [self.l2, self.perceptual, self.identity, self.wnorm]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub l2: f64,
    pub perceptual: f64,
    pub identity: f64,
    pub wnorm: f64,
    pub total: f64,
    pub lambdas: [f64; 4],
}

impl LossReport {
    pub fn terms(&self) -> LossTerms {
        LossTerms {
            l2: self.l2,
            perceptual: self.perceptual,
            identity: self.identity,
            wnorm: self.wnorm,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.terms().as_array().iter().all(|v| v.is_finite()) && self.total.is_finite()
    }
}

/// `total = l1*l2 + l2*perceptual + l3*identity + l4*wnorm`.
pub fn total_loss(terms: LossTerms, lambdas: [f64; 4]) -> LossReport {
    let total = terms.as_array().iter().zip(&lambdas).map(|(t, l)| t * l).sum();
    LossReport {
        l2: terms.l2,
        perceptual: terms.perceptual,
        identity: terms.identity,
        wnorm: terms.wnorm,
        total,
        lambdas,
    }
}

fn norm_of(sum_sq: f64, count: usize, normalized: bool) -> f64 {
    if normalized {
        (sum_sq / count as f64).sqrt()
    } else {
        sum_sq.sqrt()
    }
}

/// Euclidean pixel distance; divided by the element count under the square
/// root when `normalized`.
pub fn l2_loss(gen: &ImageTensor, gt: &ImageTensor, normalized: bool) -> Result<f64> {
    let dims = |t: &ImageTensor| (t.channels(), t.height(), t.width());
    if dims(gen) != dims(gt) {
        return Err(Error::shape("l2_loss", format!("{:?} vs {:?}", dims(gen), dims(gt))));
    }
    let ss: f64 = gen
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(norm_of(ss, gen.data().len(), normalized))
}

pub fn perceptual_loss(net: &PerceptualNet<f64>, gen: &ImageTensor, gt: &ImageTensor) -> Result<f64> {
    let d = net.distance_values(&gen.to_tensor(), &gt.to_tensor())?;
    Ok(d.item())
}

/// `1 - cos(z_id, z_gen)`, in `[0, 2]`.
pub fn identity_loss(z_id: &IdentityEmbedding, z_gen: &IdentityEmbedding) -> Result<f64> {
    Ok((1.0 - z_id.cosine(z_gen)?).clamp(0.0, 2.0))
}

/// Deviation of a style code `[L, D]` or `[B, L, D]` from the broadcast
/// average code.
pub fn wnorm_loss<F: Float>(w: &Tensor<F>, w_bar: &AverageCode, normalized: bool) -> Result<f64> {
    let d = w_bar.w_bar.len();
    if w.shape().last() != Some(&d) || w.shape().len() < 2 {
        return Err(Error::shape(
            "wnorm_loss",
            format!("code {:?}, average dim {d}", w.shape()),
        ));
    }
    let ss: f64 = w
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let e = v.as_f64() - w_bar.w_bar[i % d];
            e * e
        })
        .sum();
    Ok(norm_of(ss, w.numel(), normalized))
}

fn divisor<F: Float>(normalized: bool) -> Option<F> {
    if normalized {
        None
    } else {
        Some(F::one())
    }
}

pub fn l2_loss_var<F: Float>(g: &mut Graph<F>, gen: Var, gt: Var, normalized: bool) -> Result<Var> {
    let d = g.sub(gen, gt)?;
    g.rms(d, divisor(normalized))
}

/// `1 - cos` per row of `[B, E]` embeddings.
pub fn identity_loss_var<F: Float>(g: &mut Graph<F>, z_id: Var, z_gen: Var) -> Result<Var> {
    for v in [z_id, z_gen] {
        let s = g.shape(v).to_vec();
        let e = s.last().copied().unwrap_or(0);
        if e == 0 || g.value(v).data().chunks(e).any(|r| r.iter().all(|&x| x == F::zero())) {
            return Err(Error::ZeroNorm);
        }
    }
    let c = g.cosine_rows(z_id, z_gen)?;
    let neg = g.scale(c, -F::one());
    Ok(g.add_scalar(neg, F::one()))
}

/// `w [B, L, D]` against `w_bar` already broadcast to the same shape.
pub fn wnorm_loss_var<F: Float>(g: &mut Graph<F>, w: Var, w_bar: Var, normalized: bool) -> Result<Var> {
    let d = g.sub(w, w_bar)?;
    g.rms(d, divisor(normalized))
}

pub fn perceptual_loss_var<F: Float>(
    g: &mut Graph<F>,
    net: &PerceptualNet<F>,
    net_params: &crate::params::Bound,
    gen: Var,
    gt: Var,
) -> Result<Var> {
    net.distance(g, net_params, gen, gt)
}

/// Per-sample terms `[B]` reduced to one weighted scalar plus the batch
/// means of each term.
pub fn weighted_total<F: Float>(g: &mut Graph<F>, terms: [Var; 4], lambdas: [f64; 4]) -> Result<(Var, [Var; 4])> {
    let means = terms.map(|t| g.mean(t));
    let mut total: Option<Var> = None;
    for (&m, &l) in means.iter().zip(&lambdas) {
        let w = g.scale(m, F::of(l));
        total = Some(match total {
            Some(t) => g.add(t, w)?,
            None => w,
        });
    }
    Ok((total.expect("four terms"), means))
}
