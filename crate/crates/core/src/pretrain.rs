//! Recognition pretraining on identity labels: the frozen embedder used by
//! the identity loss and metrics, and the backbone weights that the identity
//! encoder can be initialized from.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ScaleProfile;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::identity::{Embedder, IdentityEncoder};
use crate::nn::Linear;
use crate::optim::Adam;
use crate::params::{derive_seed, Bound, ParamBuilder, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct ClassifierOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierOptions {
    fn default() -> Self {
        ClassifierOptions {
            steps: 300,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Labelled training images `[N, 3, R, R]`.
pub struct LabelledSet<'a> {
    pub images: &'a Tensor<f32>,
    pub labels: &'a [u32],
}

impl LabelledSet<'_> {
    /// Dense class indices and the class count.
    fn classes(&self) -> Result<(Vec<usize>, usize)> {
        let n = self.images.shape().first().copied().unwrap_or(0);
        if n == 0 {
            return Err(Error::Empty("recognition training set"));
        }
        if self.labels.len() != n {
            return Err(Error::shape(
                "recognition training set",
                alloc::format!("{n} images, {} labels", self.labels.len()),
            ));
        }
        let mut ids = BTreeMap::new();
        for &l in self.labels {
            let next = ids.len();
            ids.entry(l).or_insert(next);
        }
        Ok((self.labels.iter().map(|l| ids[l]).collect(), ids.len()))
    }
}

/// Shared minibatch loop. `logits` builds the classifier output for a batch;
/// `update` receives the gradients of the mean cross-entropy.
fn fit(
    set: &LabelledSet<'_>,
    opts: &ClassifierOptions,
    label: &str,
    mut step_fn: impl FnMut(&Tensor<f32>, &[usize]) -> Result<f64>,
) -> Result<Vec<f64>> {
    let (dense, _) = set.classes()?;
    let n = dense.len();
    let bs = opts.batch_size.clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, label));
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let mut pick = Vec::with_capacity(bs);
        while pick.len() < bs {
            if cursor == n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            pick.push(order[cursor]);
            cursor += 1;
        }
        let x = Tensor::stack_batch(&pick.iter().map(|&i| set.images.batch_item(i)).collect::<Vec<_>>())?;
        let y: Vec<usize> = pick.iter().map(|&i| dense[i]).collect();
        let loss = step_fn(&x, &y)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step: step + 1,
                what: "classification loss",
            });
        }
        losses.push(loss);
    }
    Ok(losses)
}

fn classify_step(
    g: &mut Graph<f32>,
    head: &Linear,
    head_params: &Bound,
    features: Var,
    labels: &[usize],
) -> Result<Var> {
    let logits = head.forward(g, head_params, features)?;
    g.softmax_cross_entropy(logits, labels)
}

/// Train the embedder as an identity classifier; the embedding is the input
/// of the discarded classification head. Returns per-step losses.
pub fn train_embedder(
    embedder: &mut Embedder<f32>,
    set: &LabelledSet<'_>,
    opts: &ClassifierOptions,
) -> Result<Vec<f64>> {
    let (_, classes) = set.classes()?;
    let mut hb = ParamBuilder::<f32>::new(opts.seed, "embedder.head");
    let head = Linear::new(&mut hb, "fc", embedder.dim(), classes, 1.0, 0.0);
    let mut head_params = hb.finish();
    let mut adam = Adam::new(embedder.params(), opts.lr);
    let mut head_adam = Adam::new(&head_params, opts.lr);
    fit(set, opts, "embedder.order", |x, y| {
        let mut g = Graph::new();
        let p = embedder.params().bind(&mut g, true);
        let hp = head_params.bind(&mut g, true);
        let xv = g.constant(x.clone());
        let e = embedder.forward(&mut g, &p, xv)?;
        let loss = classify_step(&mut g, &head, &hp, e, y)?;
        let value = g.value(loss).item() as f64;
        let mut grads = g.backward(loss);
        let pg = p.take_grads(&mut grads);
        let hg = hp.take_grads(&mut grads);
        adam.update(embedder.params_mut(), &pg);
        head_adam.update(&mut head_params, &hg);
        Ok(value)
    })
}

/// Train a fresh identity backbone as a classifier over pooled final-level
/// features. The returned container holds the backbone under its usual
/// names plus `head.` entries, ready for `IdentityEncoder::load_pretrained`.
pub fn pretrain_identity_backbone(
    profile: &ScaleProfile,
    set: &LabelledSet<'_>,
    opts: &ClassifierOptions,
) -> Result<(ParamStore<f32>, Vec<f64>)> {
    let (_, classes) = set.classes()?;
    let mut enc = IdentityEncoder::<f32>::new(profile, derive_seed(opts.seed, "recognition.backbone"));
    let width = *profile.identity_widths.last().ok_or(Error::Empty("identity_widths"))?;
    let mut hb = ParamBuilder::<f32>::new(opts.seed, "recognition.head");
    hb.push_scope("head");
    let head = Linear::new(&mut hb, "fc", width, classes, 1.0, 0.0);
    hb.pop_scope();
    let mut head_params = hb.finish();
    let mut adam = Adam::new(enc.params(), opts.lr);
    let mut head_adam = Adam::new(&head_params, opts.lr);
    let losses = fit(set, opts, "recognition.order", |x, y| {
        let mut g = Graph::new();
        let p = enc.params().bind(&mut g, true);
        let hp = head_params.bind(&mut g, true);
        let xv = g.constant(x.clone());
        let levels = enc.forward(&mut g, &p, xv)?;
        let last = *levels.last().ok_or(Error::Empty("pyramid"))?;
        let pooled = g.global_avg_pool(last)?;
        let loss = classify_step(&mut g, &head, &hp, pooled, y)?;
        let value = g.value(loss).item() as f64;
        let mut grads = g.backward(loss);
        let pg = p.take_grads(&mut grads);
        let hg = hp.take_grads(&mut grads);
        adam.update(enc.params_mut(), &pg);
        head_adam.update(&mut head_params, &hg);
        Ok(value)
    })?;
    let mut out = enc.params().clone();
    for (name, t) in head_params.iter() {
        out.push(name, t.clone());
    }
    Ok((out, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::toy_profile;
    use crate::data::procedural_for_profile;

    fn set() -> (Tensor<f32>, Vec<u32>) {
        let recs = procedural_for_profile(&toy_profile(), 4, 3, 0);
        let imgs: Vec<Tensor<f32>> = recs.iter().map(|r| r.image.to_tensor()).collect();
        (
            Tensor::stack_batch(&imgs).unwrap(),
            recs.iter().map(|r| r.label).collect(),
        )
    }

    #[test]
    fn embedder_classification_loss_drops() {
        let (images, labels) = set();
        let mut emb = Embedder::<f32>::new(&toy_profile(), 0);
        let opts = ClassifierOptions {
            steps: 60,
            batch_size: 12,
            ..Default::default()
        };
        let losses = train_embedder(
            &mut emb,
            &LabelledSet {
                images: &images,
                labels: &labels,
            },
            &opts,
        )
        .unwrap();
        let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = losses[55..].iter().sum::<f64>() / 5.0;
        assert!(tail < 0.5 * head, "{head} -> {tail}");
    }

    #[test]
    fn backbone_weights_load_into_encoder() {
        let (images, labels) = set();
        let p = toy_profile();
        let opts = ClassifierOptions {
            steps: 3,
            batch_size: 4,
            ..Default::default()
        };
        let (weights, _) = pretrain_identity_backbone(
            &p,
            &LabelledSet {
                images: &images,
                labels: &labels,
            },
            &opts,
        )
        .unwrap();
        assert!(weights.find("head.fc.weight").is_some());
        let mut enc = IdentityEncoder::<f32>::new(&p, 9);
        enc.load_pretrained(&weights).unwrap();
        assert!(enc.is_pretrained());
        let name = "backbone.stage2.conv1.weight";
        assert_eq!(
            enc.params().get(enc.params().find(name).unwrap()),
            weights.get(weights.find(name).unwrap())
        );
    }
}
