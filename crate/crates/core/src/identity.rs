//! Identity feature pyramid encoder and the frozen identity embedder.

use alloc::format;
use alloc::vec::Vec;

use crate::config::ScaleProfile;
use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::float::Float;
use crate::graph::{Graph, Var};
use crate::nn::{lrelu, Conv2d, Linear, ResBlock};
use crate::params::{Bound, ParamBuilder, ParamStore};
use crate::tensor::Tensor;

/// Prefix of every identity-encoder parameter. Recognition pretraining
/// produces containers with the same backbone names plus a `head.` part.
pub const BACKBONE_PREFIX: &str = "backbone.";

/// Multi-level identity features, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<F> {
    pub levels: Vec<Tensor<F>>,
}

impl<F: Float> FeaturePyramid<F> {
    pub fn is_finite(&self) -> bool {
        self.levels.iter().all(Tensor::is_finite)
    }
}

/// Residual identity encoder: stride-4 stem, then one residual stage per
/// pyramid level, halving the spatial size from the second stage on.
#[derive(Clone, Debug)]
pub struct IdentityEncoder<F> {
    stem: [Conv2d; 2],
    stages: Vec<ResBlock>,
    params: ParamStore<F>,
    input_resolution: usize,
    pretrained: bool,
}

pub(crate) fn build_backbone<F: Float>(
    pb: &mut ParamBuilder<F>,
    profile: &ScaleProfile,
) -> ([Conv2d; 2], Vec<ResBlock>) {
    let w = &profile.identity_widths;
    pb.push_scope("backbone");
    let half = (w[0] / 2).max(1);
    let stem = [
        Conv2d::new(pb, "stem0", 3, half, 3, 2, 1.0, 0.0),
        Conv2d::new(pb, "stem1", half, w[0], 3, 2, 1.0, 0.0),
    ];
    let mut stages = Vec::with_capacity(w.len());
    for (i, &width) in w.iter().enumerate() {
        let (cin, stride) = if i == 0 { (w[0], 1) } else { (w[i - 1], 2) };
        stages.push(ResBlock::new(pb, &format!("stage{i}"), cin, width, stride));
    }
    pb.pop_scope();
    (stem, stages)
}

impl<F: Float> IdentityEncoder<F> {
    pub fn new(profile: &ScaleProfile, seed: u64) -> Self {
        let mut pb = ParamBuilder::new(seed, "identity_encoder");
        let (stem, stages) = build_backbone(&mut pb, profile);
        IdentityEncoder {
            stem,
            stages,
            params: pb.finish(),
            input_resolution: profile.contour_input_resolution,
            pretrained: false,
        }
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn level_count(&self) -> usize {
        self.stages.len()
    }

    pub fn is_pretrained(&self) -> bool {
        self.pretrained
    }

    pub fn mark_pretrained(&mut self, pretrained: bool) {
        self.pretrained = pretrained;
    }

    /// Pyramid levels of `x [B, 3, R, R]` as graph variables.
    pub fn forward(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Result<Vec<Var>> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != 3 || s[2] != self.input_resolution || s[3] != self.input_resolution {
            return Err(Error::shape(
                "encode_identity",
                format!("expected [B, 3, {r}, {r}], got {s:?}", r = self.input_resolution),
            ));
        }
        let mut h = x;
        for conv in &self.stem {
            h = conv.forward(g, p, h)?;
            h = lrelu(g, h);
        }
        let mut levels = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            h = stage.forward(g, p, h)?;
            levels.push(h);
        }
        Ok(levels)
    }

    pub fn encode_identity(&self, x: &ImageTensor) -> Result<FeaturePyramid<F>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.to_tensor());
        let levels = self.forward(&mut g, &p, xv)?;
        Ok(FeaturePyramid {
            levels: levels.into_iter().map(|v| g.value(v).clone()).collect(),
        })
    }

    /// Replace backbone parameters from a recognition-pretrained container.
    /// Entries outside the backbone (classifier heads) are ignored.
    pub fn load_pretrained(&mut self, weights: &ParamStore<F>) -> Result<()> {
        let n = self.params.load_matching(weights, BACKBONE_PREFIX)?;
        if n != self.params.len() {
            let missing = self
                .params
                .names()
                .iter()
                .filter(|name| weights.find(name).is_none())
                .map(|name| format!("{name}: missing from pretrained weights"))
                .collect();
            return Err(Error::ParamMismatch(missing));
        }
        self.pretrained = true;
        Ok(())
    }

    pub fn cast<G: Float>(&self) -> IdentityEncoder<G> {
        IdentityEncoder {
            stem: self.stem.clone(),
            stages: self.stages.clone(),
            params: self.params.cast(),
            input_resolution: self.input_resolution,
            pretrained: self.pretrained,
        }
    }
}

/// Recognition-style embedding of a face.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityEmbedding {
    pub vector: Vec<f32>,
}

impl IdentityEmbedding {
    pub fn cosine(&self, other: &IdentityEmbedding) -> Result<f64> {
        let dot: f64 = self
            .vector
            .iter()
            .zip(&other.vector)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let na = libm::sqrt(self.vector.iter().map(|&a| a as f64 * a as f64).sum());
        let nb = libm::sqrt(other.vector.iter().map(|&a| a as f64 * a as f64).sum());
        if na == 0.0 || nb == 0.0 {
            return Err(Error::ZeroNorm);
        }
        Ok(dot / (na * nb))
    }
}

/// Small strided CNN whose final linear layer output is the embedding.
#[derive(Clone, Debug)]
pub struct Embedder<F> {
    convs: Vec<Conv2d>,
    fc: Linear,
    params: ParamStore<F>,
    input_resolution: usize,
}

impl<F: Float> Embedder<F> {
    pub fn new(profile: &ScaleProfile, seed: u64) -> Self {
        let mut pb = ParamBuilder::new(seed, "embedder");
        let res = profile.contour_input_resolution;
        let n_convs = (res / 4).trailing_zeros() as usize;
        let mut convs = Vec::with_capacity(n_convs);
        let mut cin = 3;
        for i in 0..n_convs {
            let cout = (16usize << i).min(profile.embedding_dim);
            convs.push(Conv2d::new(&mut pb, &format!("conv{i}"), cin, cout, 3, 2, 1.0, 0.0));
            cin = cout;
        }
        let fc = Linear::new(&mut pb, "fc", cin, profile.embedding_dim, 1.0, 0.0);
        Embedder {
            convs,
            fc,
            params: pb.finish(),
            input_resolution: res,
        }
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn input_resolution(&self) -> usize {
        self.input_resolution
    }

    pub fn dim(&self) -> usize {
        self.fc.out_dim
    }

    /// Embeddings `[B, D]` of `x [B, 3, R, R]`.
    pub fn forward(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != 3 || s[2] != self.input_resolution || s[3] != self.input_resolution {
            return Err(Error::shape(
                "embed_identity",
                format!("expected [B, 3, {r}, {r}], got {s:?}", r = self.input_resolution),
            ));
        }
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(g, p, h)?;
            h = lrelu(g, h);
        }
        let pooled = g.global_avg_pool(h)?;
        self.fc.forward(g, p, pooled)
    }

    /// Embeddings of a `[B, 3, R, R]` batch as plain tensors.
    pub fn embed_batch(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let e = self.forward(&mut g, &p, xv)?;
        Ok(g.value(e).clone())
    }

    pub fn embed_identity(&self, x: &ImageTensor) -> Result<IdentityEmbedding> {
        let e = self.embed_batch(&x.to_tensor())?;
        Ok(IdentityEmbedding {
            vector: e.data().iter().map(|v| v.as_f32()).collect(),
        })
    }

    pub fn cast<G: Float>(&self) -> Embedder<G> {
        Embedder {
            convs: self.convs.clone(),
            fc: self.fc.clone(),
            params: self.params.cast(),
            input_resolution: self.input_resolution,
        }
    }
}
