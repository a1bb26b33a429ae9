//! Style-based synthesis network. A mapping MLP turns latent samples into
//! style codes; the synthesis stack starts from a 4x4 block (learned constant
//! or a supplied input latent) and doubles resolution per stage, with every
//! convolution followed by fixed noise, instance norm and a per-channel
//! affine taken from its own style row.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{log2_exact, ScaleProfile};
use crate::data::ImageTensor;
use crate::encoder::LatentBundle;
use crate::error::{Error, Result};
use crate::float::Float;
use crate::graph::{Graph, Var};
use crate::nn::{lrelu, Conv2d, Linear};
use crate::optim::Adam;
use crate::params::{derive_seed, Bound, ParamBuilder, ParamId, ParamStore};
use crate::resample::Filter;
use crate::tensor::Tensor;

const NOISE_STD: f64 = 0.05;
const NORM_EPS: f64 = 1e-5;

/// Mean of mapped style codes, broadcast across all layers.
#[derive(Clone, Debug, PartialEq)]
pub struct AverageCode {
    pub w_bar: Vec<f64>,
    pub samples: usize,
}

impl AverageCode {
    pub fn to_tensor<F: Float>(&self) -> Tensor<F> {
        Tensor::from_fn(&[self.w_bar.len()], |i| F::of(self.w_bar[i]))
    }

    /// `[B, L, D]` with every row equal to `w_bar`.
    pub fn broadcast<F: Float>(&self, batch: usize, layers: usize) -> Tensor<F> {
        let d = self.w_bar.len();
        Tensor::from_fn(&[batch, layers, d], |i| F::of(self.w_bar[i % d]))
    }
}

#[derive(Clone, Debug)]
struct StyledConv {
    conv: Conv2d,
    scale: Linear,
    shift: Linear,
    noise: ParamId,
}

#[derive(Clone, Debug)]
pub struct Generator<F> {
    mapping: Vec<Linear>,
    const_input: ParamId,
    layers: Vec<StyledConv>,
    to_rgb: Conv2d,
    params: ParamStore<F>,
    noise: ParamStore<F>,
    frozen: bool,
    resolution: usize,
    style_layers: usize,
    style_dim: usize,
    latent_channels: usize,
    latent_spatial: usize,
    average: Option<(AverageCode, ImageTensor)>,
}

impl<F: Float> Generator<F> {
    pub fn new(profile: &ScaleProfile, seed: u64) -> Result<Self> {
        let res = profile.generator_resolution;
        let stages = log2_exact(res)
            .filter(|&l| l >= 2)
            .ok_or_else(|| Error::validation("generator_resolution", "must be a power of two >= 4"))?
            as usize
            - 1;
        if profile.generator_channels.len() != stages {
            return Err(Error::validation(
                "generator_channels",
                format!("{} stages need {stages} widths", stages),
            ));
        }
        if profile.generator_channels[0] != profile.input_latent_channels || profile.input_latent_spatial != 4 {
            return Err(Error::validation(
                "input_latent_channels",
                "must match the 4x4 start block of the generator",
            ));
        }
        let d = profile.style_dim;
        let mut pb = ParamBuilder::new(seed, "generator");
        let mut nb = ParamBuilder::<F>::new(seed, "generator.noise");
        let mapping = (0..profile.mapping_layers)
            .map(|i| Linear::new(&mut pb, &format!("mapping{i}"), d, d, 1.0, 0.0))
            .collect();
        let c0 = profile.generator_channels[0];
        let const_input = pb.normal("const_input", &[1, c0, 4, 4], 1.0);
        let mut layers = Vec::with_capacity(2 * stages);
        let mut cin = c0;
        for (s, &width) in profile.generator_channels.iter().enumerate() {
            let r = 4 << s;
            for k in 0..2 {
                let l = 2 * s + k;
                pb.push_scope(format!("layer{l}"));
                let conv = Conv2d::new(&mut pb, "conv", cin, width, 3, 1, 1.0, 0.0);
                let scale = Linear::new(&mut pb, "style_scale", d, width, 0.25, 1.0);
                let shift = Linear::new(&mut pb, "style_shift", d, width, 0.25, 0.0);
                pb.pop_scope();
                let noise = nb.normal(&format!("layer{l}"), &[1, width, r, r], NOISE_STD);
                layers.push(StyledConv {
                    conv,
                    scale,
                    shift,
                    noise,
                });
                cin = width;
            }
        }
        let to_rgb = Conv2d::new(&mut pb, "to_rgb", cin, 3, 1, 1, 0.5, 0.5);
        debug_assert_eq!(layers.len(), profile.style_layer_count);
        Ok(Generator {
            mapping,
            const_input,
            layers,
            to_rgb,
            params: pb.finish(),
            noise: nb.finish(),
            frozen: false,
            resolution: res,
            style_layers: profile.style_layer_count,
            style_dim: d,
            latent_channels: c0,
            latent_spatial: 4,
            average: None,
        })
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    /// Fixed noise buffers; never trained.
    pub fn noise_buffers(&self) -> &ParamStore<F> {
        &self.noise
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn style_layers(&self) -> usize {
        self.style_layers
    }

    pub fn style_dim(&self) -> usize {
        self.style_dim
    }

    /// The learned 4x4 start block.
    pub fn constant_input(&self) -> &Tensor<F> {
        self.params.get(self.const_input)
    }

    /// Replace every parameter and noise buffer, e.g. with externally
    /// converted weights. Names and shapes must match.
    pub fn set_parameters(&mut self, params: &ParamStore<F>, noise: &ParamStore<F>) -> Result<()> {
        self.params.set_all(params)?;
        self.noise.set_all(noise)?;
        self.refresh_average_image()
    }

    /// Mapping network: pixel norm, then leaky-ReLU MLP. `z [B, D]`.
    pub fn map(&self, g: &mut Graph<F>, p: &Bound, z: Var) -> Result<Var> {
        let s = g.shape(z).to_vec();
        let [b, d] = s[..] else {
            return Err(Error::shape("map", format!("expected [B, D], got {s:?}")));
        };
        if d != self.style_dim {
            return Err(Error::shape(
                "map",
                format!("latent dim {d}, expected {}", self.style_dim),
            ));
        }
        let z4 = g.reshape(z, &[b, d, 1, 1])?;
        let n = g.channel_unit_norm(z4, F::of(1e-8))?;
        let n = g.scale(n, F::of((d as f64).sqrt()));
        let mut h = g.reshape(n, &[b, d])?;
        for layer in &self.mapping {
            h = layer.forward(g, p, h)?;
            h = lrelu(g, h);
        }
        Ok(h)
    }

    /// Features after every resolution stage (4x4 first) followed by the
    /// RGB image `[B, 3, R, R]` clamped to `[0, 1]`.
    pub fn forward_stages(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        noise: &Bound,
        style: Var,
        input_latent: Option<Var>,
    ) -> Result<(Vec<Var>, Var)> {
        let s = g.shape(style).to_vec();
        if s.len() != 3 || s[1..] != [self.style_layers, self.style_dim] {
            return Err(Error::shape(
                "synthesize",
                format!("style {s:?}, expected [B, {}, {}]", self.style_layers, self.style_dim),
            ));
        }
        let b = s[0];
        let mut h = match input_latent {
            Some(x) => {
                let want = [b, self.latent_channels, self.latent_spatial, self.latent_spatial];
                if g.shape(x) != want {
                    return Err(Error::shape(
                        "synthesize",
                        format!("input latent {:?}, expected {want:?}", g.shape(x)),
                    ));
                }
                x
            }
            None => g.broadcast_batch(p.var(self.const_input), b)?,
        };
        let mut stages = Vec::with_capacity(self.layers.len() / 2);
        for (l, layer) in self.layers.iter().enumerate() {
            if l % 2 == 0 && l > 0 {
                let r = g.shape(h)[2] * 2;
                h = g.resize(h, r, r, Filter::Bilinear)?;
            }
            h = layer.conv.forward(g, p, h)?;
            let nz = g.broadcast_batch(noise.var(layer.noise), b)?;
            h = g.add(h, nz)?;
            h = lrelu(g, h);
            h = g.instance_norm(h, F::of(NORM_EPS))?;
            let w = g.row(style, l)?;
            let sc = layer.scale.forward(g, p, w)?;
            let sh = layer.shift.forward(g, p, w)?;
            h = g.channel_affine(h, sc, sh)?;
            if l % 2 == 1 {
                stages.push(h);
            }
        }
        let rgb = self.to_rgb.forward(g, p, h)?;
        let img = g.clamp(rgb, F::zero(), F::one());
        Ok((stages, img))
    }

    pub fn forward(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        noise: &Bound,
        style: Var,
        input_latent: Option<Var>,
    ) -> Result<Var> {
        Ok(self.forward_stages(g, p, noise, style, input_latent)?.1)
    }

    /// Render a bundle to `[B, 3, R, R]`.
    pub fn synthesize(&self, bundle: &LatentBundle<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let (p, n) = self.bind_frozen(&mut g);
        let s = g.constant(bundle.style.clone());
        let x = g.constant(bundle.input_latent.clone());
        let y = self.forward(&mut g, &p, &n, s, Some(x))?;
        Ok(g.value(y).clone())
    }

    /// Stage features and the final image for a style code, with the input
    /// latent optional (constant block when absent).
    pub fn synthesize_stages(&self, style: &Tensor<F>, input_latent: Option<&Tensor<F>>) -> Result<Vec<Tensor<F>>> {
        let mut g = Graph::new();
        let (p, n) = self.bind_frozen(&mut g);
        let s = g.constant(style.clone());
        let x = input_latent.map(|t| g.constant(t.clone()));
        let (stages, img) = self.forward_stages(&mut g, &p, &n, s, x)?;
        let mut out: Vec<Tensor<F>> = stages.iter().map(|&v| g.value(v).clone()).collect();
        out.push(g.value(img).clone());
        Ok(out)
    }

    /// Bind parameters and noise as constants.
    pub fn bind_frozen(&self, g: &mut Graph<F>) -> (Bound, Bound) {
        (self.params.bind(g, false), self.noise.bind(g, false))
    }

    /// Mean mapped code of `samples` draws `z ~ N(0, I)`. Draw `i` is the
    /// same for every `samples`, so larger counts extend the same stream.
    pub fn average_code(&self, samples: usize, seed: u64) -> Result<AverageCode> {
        if samples == 0 {
            return Err(Error::Empty("average_code samples"));
        }
        let d = self.style_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "average_code"));
        let mut acc = vec![0.0f64; d];
        let mut done = 0;
        while done < samples {
            let b = (samples - done).min(1024);
            let z: Vec<F> = (0..b * d).map(|_| F::of(StandardNormal.sample(&mut rng))).collect();
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, false);
            let zv = g.constant(Tensor::new(&[b, d], z)?);
            let w = self.map(&mut g, &p, zv)?;
            for row in g.value(w).data().chunks(d) {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v.as_f64();
                }
            }
            done += b;
        }
        for a in &mut acc {
            *a /= samples as f64;
        }
        Ok(AverageCode { w_bar: acc, samples })
    }

    /// Store `w_bar` and render the average image once.
    pub fn set_average_code(&mut self, code: AverageCode) -> Result<()> {
        if code.w_bar.len() != self.style_dim {
            return Err(Error::shape(
                "set_average_code",
                format!("{} values, expected {}", code.w_bar.len(), self.style_dim),
            ));
        }
        self.average = Some((code, ImageTensor::filled(3, 1, 1, 0.0)));
        self.refresh_average_image()
    }

    fn refresh_average_image(&mut self) -> Result<()> {
        let Some((code, _)) = &self.average else {
            return Ok(());
        };
        let style = code.broadcast::<F>(1, self.style_layers);
        let mut g = Graph::new();
        let (p, n) = self.bind_frozen(&mut g);
        let s = g.constant(style);
        let y = self.forward(&mut g, &p, &n, s, None)?;
        let img = ImageTensor::from_tensor(g.value(y), 0)?;
        if let Some((_, slot)) = &mut self.average {
            *slot = img;
        }
        Ok(())
    }

    pub fn average(&self) -> Option<&AverageCode> {
        self.average.as_ref().map(|(c, _)| c)
    }

    /// Image of the average code with the constant input; rendered when the
    /// average code is set and returned from the cache afterwards.
    pub fn average_image(&self) -> Result<&ImageTensor> {
        self.average
            .as_ref()
            .map(|(_, img)| img)
            .ok_or(Error::validation("average_code", "not computed yet"))
    }

    /// Reconstruction pretraining on `images [N, 3, R, R]`: every image owns
    /// a learnable latent `z`, fitted jointly with mapping and synthesis
    /// (all style rows share the mapped code). Returns per-step MSE.
    pub fn pretrain(&mut self, images: &Tensor<F>, opts: &PretrainOptions) -> Result<Vec<f64>> {
        if self.frozen {
            return Err(Error::validation("generator", "frozen networks cannot be pretrained"));
        }
        let (n, c, h, w) = images.dims4()?;
        if n == 0 {
            return Err(Error::Empty("generator pretraining set"));
        }
        if c != 3 || h != self.resolution || w != self.resolution {
            return Err(Error::shape(
                "pretrain",
                format!(
                    "images {:?}, expected [N, 3, {r}, {r}]",
                    images.shape(),
                    r = self.resolution
                ),
            ));
        }
        let d = self.style_dim;
        let mut zb = ParamBuilder::<F>::new(opts.seed, "generator.glo");
        for i in 0..n {
            zb.normal(&format!("z{i}"), &[1, d], 1.0);
        }
        let mut codes = zb.finish();
        let mut adam = Adam::new(&self.params, opts.lr);
        let mut zadam = Adam::new(&codes, opts.lr * opts.code_lr_scale);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, "generator.glo.order"));
        let mut order: Vec<usize> = (0..n).collect();
        let mut cursor = n;
        let bs = opts.batch_size.clamp(1, n);
        let mut losses = Vec::with_capacity(opts.steps);
        for step in 0..opts.steps {
            let mut pick = Vec::with_capacity(bs);
            while pick.len() < bs {
                if cursor == n {
                    rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng);
                    cursor = 0;
                }
                pick.push(order[cursor]);
                cursor += 1;
            }
            let target = Tensor::stack_batch(&pick.iter().map(|&i| images.batch_item(i)).collect::<Vec<_>>())?;
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, true);
            let nz = self.noise.bind(&mut g, false);
            let zs = codes.bind(&mut g, true);
            let parts: Vec<Var> = pick.iter().map(|&i| zs.vars()[i]).collect();
            let z4: Vec<Var> = parts
                .iter()
                .map(|&v| g.reshape(v, &[1, d, 1, 1]))
                .collect::<Result<_>>()?;
            let z = g.concat(&z4)?;
            let z = g.reshape(z, &[bs, d])?;
            let wcode = self.map(&mut g, &p, z)?;
            let w4 = g.reshape(wcode, &[bs, 1, d])?;
            let rows = vec![w4; self.style_layers];
            let style = concat_axis1(&mut g, &rows)?;
            let img = self.forward(&mut g, &p, &nz, style, None)?;
            let t = g.constant(target);
            let diff = g.sub(img, t)?;
            let sq = g.mul(diff, diff)?;
            let loss = g.mean(sq);
            let value = g.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    step: step + 1,
                    what: "generator pretraining loss",
                });
            }
            losses.push(value);
            let mut grads = g.backward(loss);
            let pg = p.take_grads(&mut grads);
            let zg = zs.take_grads(&mut grads);
            adam.update(&mut self.params, &pg);
            zadam.update(&mut codes, &zg);
        }
        self.refresh_average_image()?;
        Ok(losses)
    }

    pub fn cast<G: Float>(&self) -> Generator<G> {
        Generator {
            mapping: self.mapping.clone(),
            const_input: self.const_input,
            layers: self.layers.clone(),
            to_rgb: self.to_rgb.clone(),
            params: self.params.cast(),
            noise: self.noise.cast(),
            frozen: self.frozen,
            resolution: self.resolution,
            style_layers: self.style_layers,
            style_dim: self.style_dim,
            latent_channels: self.latent_channels,
            latent_spatial: self.latent_spatial,
            average: self.average.clone(),
        }
    }
}

/// Stack `[B, 1, D]` pieces into `[B, n, D]`.
fn concat_axis1<F: Float>(g: &mut Graph<F>, rows: &[Var]) -> Result<Var> {
    let s = g.shape(rows[0]).to_vec();
    let [b, 1, d] = s[..] else {
        return Err(Error::shape("concat_axis1", format!("{s:?}")));
    };
    let as4: Vec<Var> = rows
        .iter()
        .map(|&r| g.reshape(r, &[b, 1, d, 1]))
        .collect::<Result<_>>()?;
    let cat = g.concat(&as4)?;
    g.reshape(cat, &[b, rows.len(), d])
}

#[derive(Clone, Debug)]
pub struct PretrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplier on `lr` for the per-image latents.
    pub code_lr_scale: f64,
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            steps: 600,
            batch_size: 16,
            lr: 1e-3,
            code_lr_scale: 10.0,
            seed: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::toy_profile;

    fn bundle<F: Float>(gen: &Generator<F>, b: usize, v: f64) -> LatentBundle<F> {
        LatentBundle {
            style: Tensor::from_fn(&[b, gen.style_layers(), gen.style_dim()], |i| {
                F::of(((i % 7) as f64 - 3.0) * v)
            }),
            input_latent: Tensor::from_fn(&[b, 64, 4, 4], |i| F::of(((i % 5) as f64 - 2.0) * 0.3)),
        }
    }

    #[test]
    fn toy_output_shape_range_and_determinism() {
        let gen = Generator::<f32>::new(&toy_profile(), 0).unwrap();
        let bd = bundle(&gen, 2, 0.2);
        let y = gen.synthesize(&bd).unwrap();
        assert_eq!(y.shape(), &[2, 3, 64, 64]);
        assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(y, gen.synthesize(&bd).unwrap());
        let mut bad = bd.clone();
        bad.style = Tensor::zeros(&[2, 9, 64]);
        assert!(matches!(gen.synthesize(&bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn style_rows_only_affect_later_stages() {
        let gen = Generator::<f64>::new(&toy_profile(), 3).unwrap();
        let bd = bundle(&gen, 1, 0.2);
        let base = gen.synthesize_stages(&bd.style, Some(&bd.input_latent)).unwrap();
        for l in [0, 3, 4, 9] {
            let mut style = bd.style.clone();
            for v in &mut style.data_mut()[l * 64..(l + 1) * 64] {
                *v += 0.5;
            }
            let pert = gen.synthesize_stages(&style, Some(&bd.input_latent)).unwrap();
            let stage = l / 2;
            for (s, (a, b)) in base.iter().zip(&pert).enumerate().take(5) {
                if s < stage {
                    assert_eq!(a, b, "row {l} changed stage {s}");
                } else {
                    assert!(a.max_abs_diff(b) > 0.0, "row {l} left stage {s} unchanged");
                }
            }
        }
    }

    #[test]
    fn average_code_single_sample_and_stream() {
        let gen = Generator::<f64>::new(&toy_profile(), 0).unwrap();
        let one = gen.average_code(1, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(5, "average_code"));
        let z: Vec<f64> = (0..64).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut g = Graph::new();
        let p = gen.params().bind(&mut g, false);
        let zv = g.constant(Tensor::new(&[1, 64], z).unwrap());
        let w = gen.map(&mut g, &p, zv).unwrap();
        assert_eq!(one.w_bar, g.value(w).data());
        assert_eq!(gen.average_code(50, 5).unwrap(), gen.average_code(50, 5).unwrap());
        assert!(matches!(gen.average_code(0, 5), Err(Error::Empty(_))));
    }

    #[test]
    fn average_image_is_cached() {
        let mut gen = Generator::<f32>::new(&toy_profile(), 0).unwrap();
        assert!(gen.average_image().is_err());
        let code = gen.average_code(200, 0).unwrap();
        gen.set_average_code(code).unwrap();
        let a = gen.average_image().unwrap() as *const ImageTensor;
        let b = gen.average_image().unwrap() as *const ImageTensor;
        assert_eq!(a, b);
        let img = gen.average_image().unwrap();
        assert_eq!((img.channels(), img.height(), img.width()), (3, 64, 64));
    }

    #[test]
    fn pretraining_reduces_reconstruction_error() {
        let p = toy_profile();
        let faces = crate::data::procedural_for_profile(&p, 2, 2, 0);
        let imgs: Vec<Tensor<f32>> = faces.iter().map(|f| f.image.to_tensor()).collect();
        let set = Tensor::stack_batch(&imgs).unwrap();
        let mut gen = Generator::<f32>::new(&p, 0).unwrap();
        let opts = PretrainOptions {
            steps: 30,
            batch_size: 4,
            ..Default::default()
        };
        let losses = gen.pretrain(&set, &opts).unwrap();
        assert!(losses[29] < 0.5 * losses[0], "{} -> {}", losses[0], losses[29]);
        let mut again = Generator::<f32>::new(&p, 0).unwrap();
        assert_eq!(again.pretrain(&set, &opts).unwrap(), losses);
        gen.freeze();
        assert!(gen.pretrain(&set, &opts).is_err());
    }
}
