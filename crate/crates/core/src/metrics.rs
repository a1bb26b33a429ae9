//! Evaluation metrics: perceptual distance, identity similarity and the
//! Frechet distance between embedding distributions.
//!
//! Per-sample values are sorted before summation and feature rows are sorted
//! before moment accumulation, so every metric is exactly invariant to the
//! order of its inputs.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::float::Float;
use crate::identity::Embedder;
use crate::linalg::{trace, trace_sqrt_product};
use crate::perceptual::PerceptualNet;
use crate::resample::Filter;
use crate::tensor::Tensor;

/// Covariance shrinkage added to both Gaussian fits.
pub const FID_SHRINKAGE: f64 = 1e-6;

const CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub tag: String,
    pub n_samples: usize,
    pub lpips: f64,
    pub idsim: f64,
    pub fid: f64,
}

fn sorted_mean(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    values.into_iter().sum::<f64>() / n
}

fn batch_at<F: Float>(images: &[ImageTensor], res: usize) -> Tensor<F> {
    let items: Vec<Tensor<F>> = images
        .iter()
        .map(|im| {
            if im.height() == res && im.width() == res {
                im.to_tensor()
            } else {
                im.resized(res, res, Filter::Bicubic).to_tensor()
            }
        })
        .collect();
    Tensor::stack_batch(&items).expect("same-size images")
}

fn check_pairs(what: &'static str, a: &[ImageTensor], b: &[ImageTensor]) -> Result<()> {
    if a.is_empty() {
        return Err(Error::Empty(what));
    }
    if a.len() != b.len() {
        return Err(Error::shape(what, format!("{} vs {} images", a.len(), b.len())));
    }
    Ok(())
}

/// Mean perceptual distance between aligned `generated` and `ground_truth`.
pub fn eval_lpips<F: Float>(
    net: &PerceptualNet<F>,
    generated: &[ImageTensor],
    ground_truth: &[ImageTensor],
) -> Result<f64> {
    check_pairs("eval_lpips", generated, ground_truth)?;
    let mut values = Vec::with_capacity(generated.len());
    for (a, b) in generated.chunks(CHUNK).zip(ground_truth.chunks(CHUNK)) {
        let res = b[0].height();
        let d = net.distance_values(&batch_at::<F>(a, res), &batch_at::<F>(b, res))?;
        values.extend(d.data().iter().map(|v| v.as_f64()));
    }
    Ok(sorted_mean(values))
}

/// Embeddings of `images` as `f64` rows.
pub fn embed_all<F: Float>(embedder: &Embedder<F>, images: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
    let res = embedder.input_resolution();
    let d = embedder.dim();
    let mut rows = Vec::with_capacity(images.len());
    for chunk in images.chunks(CHUNK) {
        let e = embedder.embed_batch(&batch_at::<F>(chunk, res))?;
        rows.extend(e.data().chunks(d).map(|r| r.iter().map(|v| v.as_f64()).collect()));
    }
    Ok(rows)
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(dot / (na * nb))
}

/// Mean cosine similarity between embeddings of aligned pairs.
pub fn eval_idsim<F: Float>(
    embedder: &Embedder<F>,
    generated: &[ImageTensor],
    identity: &[ImageTensor],
) -> Result<f64> {
    check_pairs("eval_idsim", generated, identity)?;
    let a = embed_all(embedder, generated)?;
    let b = embed_all(embedder, identity)?;
    let sims = a
        .iter()
        .zip(&b)
        .map(|(x, y)| cosine(x, y))
        .collect::<Result<Vec<_>>>()?;
    Ok(sorted_mean(sims))
}

/// Sample mean and unbiased covariance (row-major `d x d`).
pub fn moments(features: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = features.len();
    let d = features.first().map_or(0, Vec::len);
    if n < 2 || d == 0 {
        return Err(Error::DegenerateCovariance { samples: n, dim: d });
    }
    if features.iter().any(|r| r.len() != d) {
        return Err(Error::shape("moments", "ragged feature rows"));
    }
    let mut rows: Vec<&Vec<f64>> = features.iter().collect();
    rows.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    let mut mu = vec![0.0; d];
    for r in &rows {
        for (m, v) in mu.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    for m in &mut mu {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for r in &rows {
        for i in 0..d {
            let ci = r[i] - mu[i];
            for j in i..d {
                cov[i * d + j] += ci * (r[j] - mu[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / (n - 1) as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    Ok((mu, cov))
}

/// Frechet distance between Gaussian fits of two feature sets, with
/// `FID_SHRINKAGE * I` added to both covariances.
pub fn fid_from_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (mu1, mut s1) = moments(a)?;
    let (mu2, mut s2) = moments(b)?;
    let d = mu1.len();
    if mu2.len() != d {
        return Err(Error::shape("eval_fid", format!("feature dims {d} vs {}", mu2.len())));
    }
    for i in 0..d {
        s1[i * d + i] += FID_SHRINKAGE;
        s2[i * d + i] += FID_SHRINKAGE;
    }
    let mean_term: f64 = mu1.iter().zip(&mu2).map(|(x, y)| (x - y) * (x - y)).sum();
    // The symmetric form is evaluated from both sides and averaged so that
    // swapping the arguments gives the same value.
    let cross = 0.5 * (trace_sqrt_product(&s1, &s2, d) + trace_sqrt_product(&s2, &s1, d));
    let traces = trace(&s1, d) + trace(&s2, d);
    let fid = mean_term + traces - 2.0 * cross;
    Ok(fid.max(0.0))
}

/// FID over frozen-embedder features of two image sets.
pub fn eval_fid<F: Float>(embedder: &Embedder<F>, generated: &[ImageTensor], reference: &[ImageTensor]) -> Result<f64> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::Empty("eval_fid"));
    }
    fid_from_features(&embed_all(embedder, generated)?, &embed_all(embedder, reference)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::toy_profile;

    fn faces(n: usize, seed: u64) -> Vec<ImageTensor> {
        crate::data::procedural_for_profile(&toy_profile(), n, 1, seed)
            .into_iter()
            .map(|r| r.image)
            .collect()
    }

    #[test]
    fn lpips_basics() {
        let net = PerceptualNet::<f64>::new(&toy_profile(), 0);
        let a = faces(3, 0);
        let b = faces(3, 1);
        assert_eq!(eval_lpips(&net, &a, &a).unwrap(), 0.0);
        let one = eval_lpips(&net, &a[..1], &b[..1]).unwrap();
        assert_eq!(one, crate::losses::perceptual_loss(&net, &a[0], &b[0]).unwrap());
        let rev_a: Vec<_> = a.iter().rev().cloned().collect();
        let rev_b: Vec<_> = b.iter().rev().cloned().collect();
        assert_eq!(
            eval_lpips(&net, &a, &b).unwrap(),
            eval_lpips(&net, &rev_a, &rev_b).unwrap()
        );
        assert!(matches!(eval_lpips(&net, &[], &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn idsim_basics() {
        let emb = Embedder::<f32>::new(&toy_profile(), 0);
        let a = faces(4, 0);
        let b = faces(4, 2);
        let same = eval_idsim(&emb, &a, &a).unwrap();
        assert!((same - 1.0).abs() < 1e-9);
        let ids = eval_idsim(&emb, &a, &b).unwrap();
        let losses: Vec<f64> = a
            .iter()
            .zip(&b)
            .map(|(x, y)| {
                crate::losses::identity_loss(&emb.embed_identity(x).unwrap(), &emb.embed_identity(y).unwrap()).unwrap()
            })
            .collect();
        let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        assert!((ids - (1.0 - mean_loss)).abs() < 1e-6);
    }

    #[test]
    fn fid_identical_and_symmetric() {
        let rows = |seed: u64| -> Vec<Vec<f64>> {
            (0..40)
                .map(|i| {
                    (0..5)
                        .map(|j| (((i * 7 + j * 3 + seed as usize) % 11) as f64).sin())
                        .collect()
                })
                .collect()
        };
        let a = rows(0);
        let b = rows(4);
        assert!(fid_from_features(&a, &a).unwrap().abs() < 1e-6);
        let ab = fid_from_features(&a, &b).unwrap();
        assert!(ab > 0.0);
        assert_eq!(ab, fid_from_features(&b, &a).unwrap());
        let mut shuffled = a.clone();
        shuffled.reverse();
        assert_eq!(fid_from_features(&shuffled, &b).unwrap(), ab);
        assert!(matches!(
            fid_from_features(&a[..1], &b),
            Err(Error::DegenerateCovariance { .. })
        ));
    }
}
