//! Iterative generate-and-feed-back refinement, training of both encoders
//! against the frozen generator, and batched evaluation.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::data::{make_batch, resize_for_encoder, Batch, ContourCondition, ImageTensor, PairedSample};
use crate::encoder::{LatentBundle, LatentVars, MainEncoder};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::graph::{Graph, Var};
use crate::identity::{Embedder, IdentityEncoder};
use crate::losses::{
    identity_loss_var, l2_loss_var, total_loss, weighted_total, wnorm_loss_var, LossReport, LossTerms,
};
use crate::metrics::{eval_fid, eval_idsim, eval_lpips, MetricsRow};
use crate::optim::Adam;
use crate::params::{derive_seed, Bound, ParamStore};
use crate::perceptual::PerceptualNet;
use crate::resample::{resize_planes, Filter};
use crate::tensor::Tensor;

/// Seed of the perceptual extractor; fixed so distances are comparable
/// across experiments.
pub const PERCEPTUAL_SEED: u64 = 0;

/// A loss above this multiple of the running median raises a warning.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TraceStep {
    pub bundle: LatentBundle<f32>,
    /// Generator output at full generator resolution.
    pub output: ImageTensor,
    /// Encoder input for this iteration, at encoder resolution.
    pub feedback: ImageTensor,
    pub report: Option<LossReport>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinementTrace {
    pub steps: Vec<TraceStep>,
}

impl RefinementTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn final_output(&self) -> Option<&ImageTensor> {
        self.steps.last().map(|s| &s.output)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub step: u64,
    /// The optimized objective: terms averaged over iterations and batch.
    pub report: LossReport,
    /// Terms of the last refinement iteration alone.
    pub final_report: LossReport,
    /// Total exceeded `DIVERGENCE_FACTOR` times the running median.
    pub warning: bool,
}

/// Graph handles of one unrolled iteration.
struct Iteration {
    latents: LatentVars,
    output: Var,
    feedback: Tensor<f32>,
    terms: Option<[Var; 4]>,
}

struct Bindings {
    identity: Bound,
    main: Bound,
    gen: Bound,
    noise: Bound,
    embedder: Bound,
    perceptual: Bound,
}

/// Deterministic batch order: every epoch is a seeded permutation, so the
/// batch of any step can be rebuilt when resuming.
#[derive(Clone, Debug)]
pub struct TrainSchedule<'a> {
    samples: &'a [PairedSample],
    batch_size: usize,
    resolution: usize,
    seed: u64,
}

impl<'a> TrainSchedule<'a> {
    pub fn new(samples: &'a [PairedSample], config: &ExperimentConfig) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("training pairs"));
        }
        Ok(TrainSchedule {
            samples,
            batch_size: config.batch_size,
            resolution: config.scale.contour_input_resolution,
            seed: config.seed,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.samples.len().div_ceil(self.batch_size)
    }

    /// Batch used at zero-based `step`.
    pub fn batch(&self, step: u64) -> Result<Batch> {
        let per = self.batches_per_epoch() as u64;
        let epoch = step / per;
        let k = (step % per) as usize;
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &format!("epoch{epoch}")));
        order.shuffle(&mut rng);
        let end = ((k + 1) * self.batch_size).min(order.len());
        let group: Vec<&PairedSample> = order[k * self.batch_size..end]
            .iter()
            .map(|&i| &self.samples[i])
            .collect();
        make_batch(&group, self.resolution)
    }
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: ExperimentConfig,
    pub identity: IdentityEncoder<f32>,
    pub encoder: MainEncoder<f32>,
    pub generator: Generator<f32>,
    pub embedder: Embedder<f32>,
    pub perceptual: PerceptualNet<f32>,
    pub identity_opt: Adam<f32>,
    pub encoder_opt: Adam<f32>,
    pub step: u64,
    totals: Vec<f64>,
}

impl Trainer {
    /// `generator` must be frozen with its average code set; `backbone` is
    /// required exactly when the config asks for pretrained identity
    /// weights.
    pub fn new(
        config: ExperimentConfig,
        generator: Generator<f32>,
        embedder: Embedder<f32>,
        backbone: Option<&ParamStore<f32>>,
    ) -> Result<Self> {
        config.validate()?;
        let p = &config.scale;
        if !generator.is_frozen() {
            return Err(Error::validation("generator", "must be frozen before encoder training"));
        }
        generator.average_image()?;
        if generator.resolution() != p.generator_resolution || generator.style_layers() != p.style_layer_count {
            return Err(Error::validation(
                "generator",
                format!("does not match the '{}' profile", p.name),
            ));
        }
        if embedder.input_resolution() != p.contour_input_resolution {
            return Err(Error::validation(
                "embedder",
                "input resolution differs from the profile",
            ));
        }
        let flags = config.ablation;
        let mut identity = IdentityEncoder::new(p, derive_seed(config.seed, "identity_encoder"));
        if flags.load_pretrained_id {
            let weights = backbone.ok_or(Error::validation(
                "load_pretrained_id",
                "pretrained identity weights were not supplied",
            ))?;
            identity.load_pretrained(weights)?;
        }
        let mut encoder = MainEncoder::new(
            p,
            config.contour_channels(),
            flags,
            derive_seed(config.seed, "main_encoder"),
        );
        encoder.set_constant_input(generator.constant_input())?;
        let perceptual = PerceptualNet::new(p, PERCEPTUAL_SEED);
        let identity_opt = Adam::new(identity.params(), config.learning_rate);
        let encoder_opt = Adam::new(encoder.params(), config.learning_rate);
        Ok(Trainer {
            config,
            identity,
            encoder,
            generator,
            embedder,
            perceptual,
            identity_opt,
            encoder_opt,
            step: 0,
            totals: Vec::new(),
        })
    }

    fn bind(&self, g: &mut Graph<f32>, trainable: bool) -> Bindings {
        let (gen, noise) = self.generator.bind_frozen(g);
        Bindings {
            identity: self.identity.params().bind(g, trainable),
            main: self.encoder.params().bind(g, trainable),
            gen,
            noise,
            embedder: self.embedder.params().bind(g, false),
            perceptual: self.perceptual.bind(g),
        }
    }

    /// Average image at encoder resolution, repeated over the batch.
    pub fn initial_feedback(&self, batch: usize) -> Result<Tensor<f32>> {
        let r = self.config.scale.contour_input_resolution;
        let img = self
            .generator
            .average_image()?
            .resized(r, r, Filter::Bicubic)
            .to_tensor::<f32>();
        Tensor::stack_batch(&alloc::vec![img; batch])
    }

    fn unroll(
        &self,
        g: &mut Graph<f32>,
        b: &Bindings,
        contour: &Tensor<f32>,
        identity: &Tensor<f32>,
        target: Option<&Tensor<f32>>,
        iterations: usize,
    ) -> Result<Vec<Iteration>> {
        let n = identity.shape()[0];
        let r = self.config.scale.contour_input_resolution;
        let normalized = self.config.normalized_losses;
        let c = g.constant(contour.clone());
        let x_id = g.constant(identity.clone());
        let pyramid = if self.config.ablation.use_ifblock {
            Some(self.identity.forward(g, &b.identity, x_id)?)
        } else {
            None
        };
        let z_id = self.embedder.forward(g, &b.embedder, x_id)?;
        let gt = target.map(|t| g.constant(t.clone()));
        let w_bar = self
            .generator
            .average()
            .ok_or(Error::validation("average_code", "not computed yet"))?
            .broadcast::<f32>(n, self.generator.style_layers());
        let w_bar = g.constant(w_bar);
        let mut feedback = self.initial_feedback(n)?;
        let mut out = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let fb = g.constant(feedback.clone());
            let latents = self.encoder.forward(g, &b.main, c, fb, pyramid.as_deref())?;
            let img = self
                .generator
                .forward(g, &b.gen, &b.noise, latents.style, Some(latents.input_latent))?;
            let at_r = g.resize(img, r, r, Filter::Bicubic)?;
            let terms = match gt {
                Some(gt) => {
                    let l2 = l2_loss_var(g, at_r, gt, normalized)?;
                    let per = self.perceptual.distance(g, &b.perceptual, at_r, gt)?;
                    let z_gen = self.embedder.forward(g, &b.embedder, at_r)?;
                    let id = identity_loss_var(g, z_id, z_gen)?;
                    let wn = wnorm_loss_var(g, latents.style, w_bar, normalized)?;
                    Some([l2, per, id, wn])
                }
                None => None,
            };
            let next = feedback_from(g.value(img), r)?;
            out.push(Iteration {
                latents,
                output: img,
                feedback,
                terms,
            });
            feedback = next;
        }
        Ok(out)
    }

    fn report_of(g: &Graph<f32>, means: &[Var; 4], lambdas: [f64; 4]) -> LossReport {
        let v = means.map(|m| g.value(m).item() as f64);
        total_loss(
            LossTerms {
                l2: v[0],
                perceptual: v[1],
                identity: v[2],
                wnorm: v[3],
            },
            lambdas,
        )
    }

    /// One optimizer step on `batch`; both encoders are updated, the
    /// generator, embedder and perceptual extractor never are.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepOutcome> {
        let step = self.step + 1;
        let t = self.config.refinement_steps;
        let lambdas = self.config.lambdas;
        let mut g = Graph::new();
        let b = self.bind(&mut g, true);
        let iters = self.unroll(&mut g, &b, &batch.contour, &batch.identity, Some(&batch.target), t)?;
        let supervised: &[Iteration] = if self.config.final_only_loss {
            &iters[t - 1..]
        } else {
            &iters
        };
        let mut objective: Option<Var> = None;
        let mut sums = [0.0f64; 4];
        let mut final_means = None;
        for it in supervised {
            let terms = it.terms.expect("targets supplied");
            let (tot, means) = weighted_total(&mut g, terms, lambdas)?;
            for (s, m) in sums.iter_mut().zip(&means) {
                *s += g.value(*m).item() as f64;
            }
            final_means = Some(means);
            objective = Some(match objective {
                Some(o) => g.add(o, tot)?,
                None => tot,
            });
        }
        let k = supervised.len() as f64;
        let objective = g.scale(objective.expect("at least one iteration"), 1.0 / k as f32);
        let report = total_loss(
            LossTerms {
                l2: sums[0] / k,
                perceptual: sums[1] / k,
                identity: sums[2] / k,
                wnorm: sums[3] / k,
            },
            lambdas,
        );
        let final_report = Self::report_of(&g, &final_means.expect("means"), lambdas);
        if !report.is_finite() || !g.value(objective).is_finite() {
            return Err(Error::NonFinite {
                step: step as usize,
                what: "total loss",
            });
        }
        let warning = match running_median(&self.totals) {
            Some(m) => report.total > DIVERGENCE_FACTOR * m,
            None => false,
        };
        let mut grads = g.backward(objective);
        let ig = b.identity.take_grads(&mut grads);
        let mg = b.main.take_grads(&mut grads);
        self.identity_opt.update(self.identity.params_mut(), &ig);
        self.encoder_opt.update(self.encoder.params_mut(), &mg);
        self.step = step;
        self.totals.push(report.total);
        Ok(StepOutcome {
            step,
            report,
            final_report,
            warning,
        })
    }

    /// Train until `self.step == until`, calling `on_step` after every step.
    pub fn run(
        &mut self,
        schedule: &TrainSchedule<'_>,
        until: u64,
        mut on_step: impl FnMut(&Trainer, &StepOutcome) -> Result<()>,
    ) -> Result<()> {
        while self.step < until {
            let batch = schedule.batch(self.step)?;
            let outcome = self.train_step(&batch)?;
            on_step(self, &outcome)?;
        }
        Ok(())
    }

    /// Refine one contour/identity pair for `iterations` passes. With a
    /// ground-truth face every step also carries its loss report.
    pub fn refine(
        &self,
        contour: &ContourCondition,
        identity: &ImageTensor,
        iterations: usize,
        target: Option<&ImageTensor>,
    ) -> Result<RefinementTrace> {
        if iterations == 0 {
            return Err(Error::validation("refinement_steps", "must be at least 1"));
        }
        if contour.modality != self.config.modality {
            return Err(Error::validation(
                "modality",
                format!("model trained for {}, got {}", self.config.modality, contour.modality),
            ));
        }
        let r = self.config.scale.contour_input_resolution;
        let c = resize_for_encoder(&contour.image, Some(contour.modality), r).to_tensor();
        let x = resize_for_encoder(identity, None, r).to_tensor();
        let gt = target.map(|t| resize_for_encoder(t, None, r).to_tensor());
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let iters = self.unroll(&mut g, &b, &c, &x, gt.as_ref(), iterations)?;
        let lambdas = self.config.lambdas;
        let mut steps = Vec::with_capacity(iterations);
        for it in &iters {
            let report = match it.terms {
                Some(terms) => {
                    let (_, means) = weighted_total(&mut g, terms, lambdas)?;
                    Some(Self::report_of(&g, &means, lambdas))
                }
                None => None,
            };
            steps.push(TraceStep {
                bundle: LatentBundle {
                    style: g.value(it.latents.style).clone(),
                    input_latent: g.value(it.latents.input_latent).clone(),
                },
                output: ImageTensor::from_tensor(g.value(it.output), 0)?,
                feedback: ImageTensor::from_tensor(&it.feedback, 0)?,
                report,
            });
        }
        Ok(RefinementTrace { steps })
    }

    /// Final outputs for a batch, `[B, 3, R, R]` at generator resolution.
    pub fn generate(&self, batch: &Batch) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let iters = self.unroll(
            &mut g,
            &b,
            &batch.contour,
            &batch.identity,
            None,
            self.config.refinement_steps,
        )?;
        Ok(g.value(iters.last().expect("iterations").output).clone())
    }

    /// Metrics of the final refinement outputs on `samples`. FID compares the
    /// generated set with `reference` faces.
    pub fn evaluate(
        &self,
        samples: &[PairedSample],
        reference: &[ImageTensor],
        tag: impl Into<String>,
    ) -> Result<MetricsRow> {
        if samples.is_empty() {
            return Err(Error::Empty("evaluation pairs"));
        }
        let r = self.config.scale.contour_input_resolution;
        let mut generated = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(self.config.batch_size) {
            let refs: Vec<&PairedSample> = chunk.iter().collect();
            let batch = make_batch(&refs, r)?;
            let out = self.generate(&batch)?;
            for i in 0..chunk.len() {
                generated.push(ImageTensor::from_tensor(&out, i)?);
            }
        }
        let gts: Vec<ImageTensor> = samples.iter().map(|s| (*s.contour_gt).clone()).collect();
        let ids: Vec<ImageTensor> = samples.iter().map(|s| (*s.identity_image).clone()).collect();
        let at_r: Vec<ImageTensor> = generated.iter().map(|im| resize_for_encoder(im, None, r)).collect();
        let gts_r: Vec<ImageTensor> = gts.iter().map(|im| resize_for_encoder(im, None, r)).collect();
        Ok(MetricsRow {
            tag: tag.into(),
            n_samples: samples.len(),
            lpips: eval_lpips(&self.perceptual, &at_r, &gts_r)?,
            idsim: eval_idsim(&self.embedder, &at_r, &ids)?,
            fid: eval_fid(&self.embedder, &at_r, reference)?,
        })
    }

    /// Totals of every completed step, oldest first.
    pub fn loss_history(&self) -> &[f64] {
        &self.totals
    }

    pub fn set_loss_history(&mut self, totals: Vec<f64>) {
        self.totals = totals;
    }
}

/// Detached next-iteration input: the output resized with the same routine
/// as `ImageTensor::resized`, so the chain is pixel-exact.
fn feedback_from(output: &Tensor<f32>, r: usize) -> Result<Tensor<f32>> {
    let (b, c, h, w) = output.dims4()?;
    if (h, w) == (r, r) {
        return Ok(output.clone());
    }
    Tensor::new(&[b, c, r, r], resize_planes(output.data(), h, w, r, r, Filter::Bicubic))
}

fn running_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}
