//! Main encoder: fuses the contour/feedback stream with identity features
//! through identity-guided feature modulation (IFM) and predicts the latent
//! bundle of the frozen generator.

use alloc::format;
use alloc::vec::Vec;

use crate::config::{AblationFlags, ScaleProfile};
use crate::error::{Error, Result};
use crate::float::Float;
use crate::graph::{Graph, Var};
use crate::identity::FeaturePyramid;
use crate::nn::{lrelu, Conv2d, Linear};
use crate::params::{Bound, ParamBuilder, ParamId, ParamStore};
use crate::resample::Filter;
use crate::tensor::Tensor;

/// Generator inputs: a per-layer style code and a spatial input latent.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBundle<F> {
    /// `[B, style_layer_count, style_dim]`.
    pub style: Tensor<F>,
    /// `[B, input_latent_channels, S, S]`.
    pub input_latent: Tensor<F>,
}

impl<F: Float> LatentBundle<F> {
    pub fn is_finite(&self) -> bool {
        self.style.is_finite() && self.input_latent.is_finite()
    }
}

/// Graph handles of a [`LatentBundle`].
#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub style: Var,
    pub input_latent: Var,
}

/// Per-site affine parameters; same shape as the modulated feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct ModulationParams<F> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
}

/// `out[c,y,x] = gamma[c,y,x] * h[c,y,x] + beta[c,y,x]`.
pub fn ifm_apply<F: Float>(h: &Tensor<F>, params: &ModulationParams<F>) -> Result<Tensor<F>> {
    if h.shape() != params.gamma.shape() || h.shape() != params.beta.shape() {
        return Err(Error::shape(
            "ifm_apply",
            format!(
                "feature {:?}, gamma {:?}, beta {:?}",
                h.shape(),
                params.gamma.shape(),
                params.beta.shape()
            ),
        ));
    }
    let data = h
        .data()
        .iter()
        .zip(params.gamma.data())
        .zip(params.beta.data())
        .map(|((&x, &g), &b)| g * x + b)
        .collect();
    Tensor::new(h.shape(), data)
}

/// Graph form of [`ifm_apply`].
pub fn ifm<F: Float>(g: &mut Graph<F>, h: Var, gamma: Var, beta: Var) -> Result<Var> {
    let scaled = g.mul(h, gamma)?;
    g.add(scaled, beta)
}

/// Two 3x3 convolutions with a leaky ReLU between them.
#[derive(Clone, Debug)]
struct FcnHead {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl FcnHead {
    fn new<F: Float>(pb: &mut ParamBuilder<F>, name: &str, cin: usize, hidden: usize, cout: usize, bias: f64) -> Self {
        pb.push_scope(name);
        let conv1 = Conv2d::new(pb, "conv1", cin, hidden, 3, 1, 1.0, 0.0);
        let conv2 = Conv2d::new(pb, "conv2", hidden, cout, 3, 1, 0.25, bias);
        pb.pop_scope();
        FcnHead { conv1, conv2 }
    }

    fn forward<F: Float>(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, p, x)?;
        let h = lrelu(g, h);
        self.conv2.forward(g, p, h)
    }
}

#[derive(Clone, Debug)]
struct IfBottleneck {
    conv1: Conv2d,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
    /// `(gamma, beta)` heads; absent when IFBlocks are disabled.
    modulation: Option<(FcnHead, FcnHead)>,
}

#[derive(Clone, Debug)]
pub struct MainEncoder<F> {
    head: Vec<Conv2d>,
    blocks: Vec<Vec<IfBottleneck>>,
    style_head: Linear,
    latent_head: Conv2d,
    const_input: Option<ParamId>,
    params: ParamStore<F>,
    flags: AblationFlags,
    input_resolution: usize,
    input_channels: usize,
    style_layers: usize,
    style_dim: usize,
    latent_channels: usize,
    latent_spatial: usize,
}

impl<F: Float> MainEncoder<F> {
    /// `contour_channels` plus 3 feedback channels form the input.
    pub fn new(profile: &ScaleProfile, contour_channels: usize, flags: AblationFlags, seed: u64) -> Self {
        let mut pb = ParamBuilder::new(seed, "main_encoder");
        let widths = &profile.main_widths;
        let n = profile.encoder_block_count;
        let input_channels = contour_channels + 3;

        let head_width = (widths[0] / 2).max(1);
        let mut head = Vec::new();
        let mut cin = input_channels;
        for i in 0..profile.head_downsamples() {
            head.push(Conv2d::new(
                &mut pb,
                &format!("head{i}"),
                cin,
                head_width,
                3,
                2,
                1.0,
                0.0,
            ));
            cin = head_width;
        }

        let mut blocks = Vec::with_capacity(n);
        for (i, &width) in widths.iter().enumerate() {
            let id_ch = profile.identity_widths[i];
            let mut bottlenecks = Vec::with_capacity(profile.bottlenecks_per_block);
            for j in 0..profile.bottlenecks_per_block {
                pb.push_scope(format!("block{i}.bottleneck{j}"));
                let stride = if j == 0 && i + 1 < n { 2 } else { 1 };
                let conv1 = Conv2d::new(&mut pb, "conv1", cin, width, 3, stride, 1.0, 0.0);
                let conv2 = Conv2d::new(&mut pb, "conv2", width, width, 3, 1, 0.5, 0.0);
                let shortcut = (stride != 1 || cin != width)
                    .then(|| Conv2d::new(&mut pb, "shortcut", cin, width, 1, stride, 1.0, 0.0));
                let modulation = flags.use_ifblock.then(|| {
                    (
                        FcnHead::new(&mut pb, "fcn_gamma", id_ch, profile.fcn_hidden, width, 1.0),
                        FcnHead::new(&mut pb, "fcn_beta", id_ch, profile.fcn_hidden, width, 0.0),
                    )
                });
                pb.pop_scope();
                bottlenecks.push(IfBottleneck {
                    conv1,
                    conv2,
                    shortcut,
                    modulation,
                });
                cin = width;
            }
            blocks.push(bottlenecks);
        }

        let style_layers = profile.style_layer_count;
        let style_dim = profile.style_dim;
        let style_head = Linear::new(&mut pb, "style_head", cin, style_layers * style_dim, 1.0, 0.0);
        let latent_head = Conv2d::new(
            &mut pb,
            "latent_head",
            cin,
            profile.input_latent_channels,
            3,
            1,
            1.0,
            0.0,
        );
        let s = profile.input_latent_spatial;
        let const_input =
            (!flags.use_input_latent).then(|| pb.normal("const_input", &[1, profile.input_latent_channels, s, s], 1.0));

        MainEncoder {
            head,
            blocks,
            style_head,
            latent_head,
            const_input,
            params: pb.finish(),
            flags,
            input_resolution: profile.contour_input_resolution,
            input_channels,
            style_layers,
            style_dim,
            latent_channels: profile.input_latent_channels,
            latent_spatial: s,
        }
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn flags(&self) -> AblationFlags {
        self.flags
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn bottleneck_count(&self, block: usize) -> usize {
        self.blocks.get(block).map_or(0, Vec::len)
    }

    /// Initialize the shared constant input (only present when the input
    /// latent is disabled), typically from the generator's own constant.
    pub fn set_constant_input(&mut self, value: &Tensor<F>) -> Result<()> {
        let Some(id) = self.const_input else {
            return Ok(());
        };
        if value.shape() != self.params.get(id).shape() {
            return Err(Error::shape(
                "set_constant_input",
                format!("{:?} vs {:?}", value.shape(), self.params.get(id).shape()),
            ));
        }
        *self.params.get_mut(id) = value.clone();
        Ok(())
    }

    /// Modulation tensors for bottleneck `j` of block `block` from pyramid
    /// level `block`, resized bilinearly to `target_shape`.
    pub fn compute_modulation(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        pyramid: &[Var],
        block: usize,
        j: usize,
        target_shape: &[usize],
    ) -> Result<(Var, Var)> {
        let level = *pyramid.get(block).ok_or(Error::OutOfRange {
            what: "pyramid level",
            index: block,
            len: pyramid.len(),
        })?;
        let bottleneck = self.blocks.get(block).and_then(|b| b.get(j)).ok_or(Error::OutOfRange {
            what: "bottleneck",
            index: j,
            len: self.bottleneck_count(block),
        })?;
        let Some((fg, fb)) = &bottleneck.modulation else {
            return Err(Error::validation("use_ifblock", "modulation heads are disabled"));
        };
        let &[_, _, th, tw] = target_shape else {
            return Err(Error::shape("compute_modulation", format!("{target_shape:?}")));
        };
        let f = g.resize(level, th, tw, Filter::Bilinear)?;
        let gamma = fg.forward(g, p, f)?;
        let beta = fb.forward(g, p, f)?;
        if g.shape(gamma) != target_shape {
            return Err(Error::shape(
                "compute_modulation",
                format!("heads give {:?}, target {target_shape:?}", g.shape(gamma)),
            ));
        }
        Ok((gamma, beta))
    }

    /// One residual bottleneck; its inner activation is modulated by
    /// identity features when IFBlocks are enabled.
    pub fn ifbottleneck_forward(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        block: usize,
        j: usize,
        h: Var,
        pyramid: Option<&[Var]>,
    ) -> Result<Var> {
        let b = self.blocks.get(block).and_then(|b| b.get(j)).ok_or(Error::OutOfRange {
            what: "bottleneck",
            index: j,
            len: self.bottleneck_count(block),
        })?;
        let mut t = b.conv1.forward(g, p, h)?;
        if b.modulation.is_some() {
            let pyramid = pyramid.ok_or(Error::validation("pyramid", "IFBlocks need identity features"))?;
            let target = g.shape(t).to_vec();
            let (gamma, beta) = self.compute_modulation(g, p, pyramid, block, j, &target)?;
            t = ifm(g, t, gamma, beta)?;
        }
        let t = lrelu(g, t);
        let t = b.conv2.forward(g, p, t)?;
        let skip = match &b.shortcut {
            Some(s) => s.forward(g, p, h)?,
            None => h,
        };
        let y = g.add(t, skip)?;
        Ok(lrelu(g, y))
    }

    /// Encode `contour [B, Cc, R, R]` and `feedback [B, 3, R, R]`.
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        contour: Var,
        feedback: Var,
        pyramid: Option<&[Var]>,
    ) -> Result<LatentVars> {
        let r = self.input_resolution;
        let cs = g.shape(contour).to_vec();
        let fs = g.shape(feedback).to_vec();
        let b = cs.first().copied().unwrap_or(0);
        if cs.len() != 4 || cs[2..] != [r, r] || fs != [b, 3, r, r] || cs[1] + 3 != self.input_channels {
            return Err(Error::shape(
                "encode",
                format!(
                    "contour {cs:?} and feedback {fs:?}; expected [B, {}, {r}, {r}] and [B, 3, {r}, {r}]",
                    self.input_channels - 3
                ),
            ));
        }
        let mut h = g.concat(&[contour, feedback])?;
        for conv in &self.head {
            h = conv.forward(g, p, h)?;
            h = lrelu(g, h);
        }
        for block in 0..self.blocks.len() {
            for j in 0..self.blocks[block].len() {
                h = self.ifbottleneck_forward(g, p, block, j, h, pyramid)?;
            }
        }
        let pooled = g.global_avg_pool(h)?;
        let flat = self.style_head.forward(g, p, pooled)?;
        let style = g.reshape(flat, &[b, self.style_layers, self.style_dim])?;
        let input_latent = match self.const_input {
            Some(id) => g.broadcast_batch(p.var(id), b)?,
            None => self.latent_head.forward(g, p, h)?,
        };
        debug_assert_eq!(
            g.shape(input_latent),
            &[b, self.latent_channels, self.latent_spatial, self.latent_spatial]
        );
        Ok(LatentVars { style, input_latent })
    }

    /// Value-level encode with frozen parameters.
    pub fn encode(
        &self,
        contour: &Tensor<F>,
        feedback: &Tensor<F>,
        pyramid: Option<&FeaturePyramid<F>>,
    ) -> Result<LatentBundle<F>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let c = g.constant(contour.clone());
        let f = g.constant(feedback.clone());
        let levels: Option<Vec<Var>> = pyramid.map(|pyr| pyr.levels.iter().map(|t| g.constant(t.clone())).collect());
        let out = self.forward(&mut g, &p, c, f, levels.as_deref())?;
        Ok(LatentBundle {
            style: g.value(out.style).clone(),
            input_latent: g.value(out.input_latent).clone(),
        })
    }

    pub fn cast<G: Float>(&self) -> MainEncoder<G> {
        MainEncoder {
            head: self.head.clone(),
            blocks: self.blocks.clone(),
            style_head: self.style_head.clone(),
            latent_head: self.latent_head.clone(),
            const_input: self.const_input,
            params: self.params.cast(),
            flags: self.flags,
            input_resolution: self.input_resolution,
            input_channels: self.input_channels,
            style_layers: self.style_layers,
            style_dim: self.style_dim,
            latent_channels: self.latent_channels,
            latent_spatial: self.latent_spatial,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::toy_profile;
    use crate::identity::IdentityEncoder;

    #[test]
    fn ifm_examples() {
        let h = Tensor::new(&[1, 1, 2, 2], alloc::vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let p = ModulationParams {
            gamma: Tensor::full(&[1, 1, 2, 2], 2.0),
            beta: Tensor::full(&[1, 1, 2, 2], 1.0),
        };
        assert_eq!(ifm_apply(&h, &p).unwrap().data(), &[2.0, -1.0, 5.0, 1.0]);
        let id = ModulationParams {
            gamma: Tensor::full(&[1, 1, 2, 2], 1.0),
            beta: Tensor::zeros(&[1, 1, 2, 2]),
        };
        assert_eq!(ifm_apply(&h, &id).unwrap(), h);
        let zero = ModulationParams {
            gamma: Tensor::zeros(&[1, 1, 2, 2]),
            beta: Tensor::full(&[1, 1, 2, 2], 0.3),
        };
        assert_eq!(ifm_apply(&h, &zero).unwrap(), zero.beta);
        let bad = ModulationParams {
            gamma: Tensor::zeros(&[1, 1, 2, 1]),
            beta: Tensor::zeros(&[1, 1, 2, 2]),
        };
        assert!(matches!(ifm_apply(&h, &bad), Err(Error::Shape { .. })));
    }

    fn zero_pyramid(p: &ScaleProfile) -> FeaturePyramid<f64> {
        FeaturePyramid {
            levels: (0..p.encoder_block_count)
                .map(|i| {
                    let s = p.identity_level_spatial(i);
                    Tensor::zeros(&[1, p.identity_widths[i], s, s])
                })
                .collect(),
        }
    }

    #[test]
    fn zero_identity_feature_gives_identity_modulation() {
        let p = toy_profile();
        let enc = MainEncoder::<f64>::new(&p, 3, AblationFlags::FULL, 0);
        let pyr = zero_pyramid(&p);
        let mut g = Graph::new();
        let b = enc.params().bind(&mut g, false);
        let levels: Vec<Var> = pyr.levels.iter().map(|t| g.constant(t.clone())).collect();
        for block in 0..4 {
            for j in 0..2 {
                let (gamma, beta) = enc
                    .compute_modulation(&mut g, &b, &levels, block, j, &[1, p.main_widths[block], 5, 7])
                    .unwrap();
                assert_eq!(g.shape(gamma), &[1, p.main_widths[block], 5, 7]);
                assert!(g.value(gamma).data().iter().all(|&v| v == 1.0));
                assert!(g.value(beta).data().iter().all(|&v| v == 0.0));
            }
        }
        assert!(matches!(
            enc.compute_modulation(&mut g, &b, &levels, 4, 0, &[1, 32, 4, 4]),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn modulation_heads_are_independent_per_bottleneck() {
        let p = toy_profile();
        let mut enc = MainEncoder::<f64>::new(&p, 3, AblationFlags::FULL, 0);
        let idenc = IdentityEncoder::<f64>::new(&p, 1);
        let x = crate::data::ImageTensor::from_fn(3, 64, 64, |c, y, x| ((c + y + 2 * x) % 9) as f32 / 9.0);
        let pyr = idenc.encode_identity(&x).unwrap();
        let run = |enc: &MainEncoder<f64>, j: usize| {
            let mut g = Graph::new();
            let b = enc.params().bind(&mut g, false);
            let levels: Vec<Var> = pyr.levels.iter().map(|t| g.constant(t.clone())).collect();
            let (gm, bt) = enc
                .compute_modulation(&mut g, &b, &levels, 0, j, &[1, 32, 16, 16])
                .unwrap();
            (g.value(gm).clone(), g.value(bt).clone())
        };
        let before0 = run(&enc, 0);
        let before1 = run(&enc, 1);
        let id = enc.params().find("block0.bottleneck1.fcn_gamma.conv2.weight").unwrap();
        for v in enc.params_mut().get_mut(id).data_mut() {
            *v += 0.5;
        }
        assert_eq!(run(&enc, 0), before0);
        assert_ne!(run(&enc, 1).0, before1.0);
    }

    #[test]
    fn toy_bundle_shapes_and_determinism() {
        let p = toy_profile();
        let enc = MainEncoder::<f32>::new(&p, 3, AblationFlags::FULL, 0);
        let idenc = IdentityEncoder::<f32>::new(&p, 0);
        let pyr = idenc
            .encode_identity(&crate::data::ImageTensor::filled(3, 64, 64, 0.3))
            .unwrap();
        let c = Tensor::full(&[2, 3, 64, 64], 0.2);
        let f = Tensor::full(&[2, 3, 64, 64], 0.6);
        let pyr2 = FeaturePyramid {
            levels: pyr
                .levels
                .iter()
                .map(|l| Tensor::stack_batch(&[l.clone(), l.clone()]).unwrap())
                .collect(),
        };
        let a = enc.encode(&c, &f, Some(&pyr2)).unwrap();
        assert_eq!(a.style.shape(), &[2, 10, 64]);
        assert_eq!(a.input_latent.shape(), &[2, 64, 4, 4]);
        assert!(a.is_finite());
        assert_eq!(a, enc.encode(&c, &f, Some(&pyr2)).unwrap());
        let bad = Tensor::full(&[2, 3, 32, 32], 0.2);
        assert!(matches!(enc.encode(&bad, &f, Some(&pyr2)), Err(Error::Shape { .. })));
    }

    #[test]
    fn bottleneck_shapes_and_plain_mode() {
        let p = toy_profile();
        let enc = MainEncoder::<f32>::new(&p, 3, AblationFlags::BASELINE, 0);
        let mut g = Graph::new();
        let b = enc.params().bind(&mut g, false);
        let h = g.constant(Tensor::zeros(&[1, 16, 32, 32]));
        let down = enc.ifbottleneck_forward(&mut g, &b, 0, 0, h, None).unwrap();
        assert_eq!(g.shape(down), &[1, 32, 16, 16]);
        let same = enc.ifbottleneck_forward(&mut g, &b, 0, 1, down, None).unwrap();
        assert_eq!(g.shape(same), &[1, 32, 16, 16]);
        assert!(g.value(same).is_finite());
    }
}
