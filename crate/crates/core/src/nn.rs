//! Parameterized layers. Layers hold parameter handles only; values live in
//! the owning network's [`ParamStore`](crate::params::ParamStore).

use crate::error::Result;
use crate::float::Float;
use crate::graph::{ConvSpec, Graph, Var};
use crate::params::{he_std, Bound, ParamBuilder, ParamId, LEAKY_SLOPE};

#[derive(Clone, Debug)]
pub struct Conv2d {
    w: ParamId,
    b: ParamId,
    spec: ConvSpec,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv2d {
    /// Square `k x k` kernel with "same" padding; `gain` scales the He init.
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float>(
        pb: &mut ParamBuilder<F>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        gain: f64,
        bias: f64,
    ) -> Self {
        pb.push_scope(name);
        let w = pb.normal("weight", &[out_ch, in_ch, k, k], gain * he_std(in_ch * k * k));
        let b = pb.constant("bias", &[out_ch], bias);
        pb.pop_scope();
        Conv2d {
            w,
            b,
            spec: ConvSpec { stride, pad: k / 2 },
            in_ch,
            out_ch,
        }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.w), Some(p.var(self.b)), self.spec)
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> ParamId {
        self.b
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Float>(
        pb: &mut ParamBuilder<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
        bias: f64,
    ) -> Self {
        pb.push_scope(name);
        let w = pb.normal("weight", &[out_dim, in_dim], gain * he_std(in_dim));
        let b = pb.constant("bias", &[out_dim], bias);
        pb.pop_scope();
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p.var(self.w), Some(p.var(self.b)))
    }
}

pub fn lrelu<F: Float>(g: &mut Graph<F>, x: Var) -> Var {
    g.leaky_relu(x, F::of(LEAKY_SLOPE))
}

/// Plain residual block: two 3x3 convolutions, projection shortcut when the
/// shape changes.
#[derive(Clone, Debug)]
pub struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl ResBlock {
    pub fn new<F: Float>(pb: &mut ParamBuilder<F>, name: &str, in_ch: usize, out_ch: usize, stride: usize) -> Self {
        pb.push_scope(name);
        let conv1 = Conv2d::new(pb, "conv1", in_ch, out_ch, 3, stride, 1.0, 0.0);
        let conv2 = Conv2d::new(pb, "conv2", out_ch, out_ch, 3, 1, 0.5, 0.0);
        let shortcut =
            (stride != 1 || in_ch != out_ch).then(|| Conv2d::new(pb, "shortcut", in_ch, out_ch, 1, stride, 1.0, 0.0));
        pb.pop_scope();
        ResBlock { conv1, conv2, shortcut }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, p, x)?;
        let h = lrelu(g, h);
        let h = self.conv2.forward(g, p, h)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(g, p, x)?,
            None => x,
        };
        let y = g.add(h, skip)?;
        Ok(lrelu(g, y))
    }
}
