//! Frozen random-feature perceptual extractor. Features are unit-normalized
//! across channels at every site, compared per layer by root mean square,
//! and summed over layers.

use alloc::format;
use alloc::vec::Vec;

use crate::config::ScaleProfile;
use crate::error::{Error, Result};
use crate::float::Float;
use crate::graph::{Graph, Var};
use crate::nn::{lrelu, Conv2d};
use crate::params::{Bound, ParamBuilder, ParamStore};
use crate::tensor::Tensor;

const STRIDES: [usize; 5] = [1, 2, 2, 2, 1];
const UNIT_EPS: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct PerceptualNet<F> {
    convs: Vec<Conv2d>,
    params: ParamStore<F>,
}

impl<F: Float> PerceptualNet<F> {
    pub fn new(profile: &ScaleProfile, seed: u64) -> Self {
        let mut pb = ParamBuilder::new(seed, "perceptual");
        let mut cin = 3;
        let convs = profile
            .perceptual_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let stride = STRIDES.get(i).copied().unwrap_or(1);
                let c = Conv2d::new(&mut pb, &format!("conv{i}"), cin, w, 3, stride, 1.0, 0.0);
                cin = w;
                c
            })
            .collect();
        PerceptualNet {
            convs,
            params: pb.finish(),
        }
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn bind(&self, g: &mut Graph<F>) -> Bound {
        self.params.bind(g, false)
    }

    /// Unit-normalized activations of every layer.
    pub fn features(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Result<Vec<Var>> {
        let mut h = x;
        let mut out = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            h = conv.forward(g, p, h)?;
            h = lrelu(g, h);
            out.push(g.channel_unit_norm(h, F::of(UNIT_EPS))?);
        }
        Ok(out)
    }

    /// Per-sample distance `[B]`.
    pub fn distance(&self, g: &mut Graph<F>, p: &Bound, a: Var, b: Var) -> Result<Var> {
        if g.shape(a) != g.shape(b) {
            return Err(Error::shape(
                "perceptual_loss",
                format!("{:?} vs {:?}", g.shape(a), g.shape(b)),
            ));
        }
        let fa = self.features(g, p, a)?;
        let fb = self.features(g, p, b)?;
        let mut total: Option<Var> = None;
        for (x, y) in fa.into_iter().zip(fb) {
            let d = g.sub(x, y)?;
            let r = g.rms(d, None)?;
            total = Some(match total {
                Some(t) => g.add(t, r)?,
                None => r,
            });
        }
        total.ok_or(Error::Empty("perceptual layers"))
    }

    /// Value-level distance for `[B, 3, H, W]` batches.
    pub fn distance_values(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let va = g.constant(a.clone());
        let vb = g.constant(b.clone());
        let d = self.distance(&mut g, &p, va, vb)?;
        Ok(g.value(d).clone())
    }

    pub fn cast<G: Float>(&self) -> PerceptualNet<G> {
        PerceptualNet {
            convs: self.convs.clone(),
            params: self.params.cast(),
        }
    }
}
