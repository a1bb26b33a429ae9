//! Face images, contour conditions, contour-identity pairing and batching.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Modality, ScaleProfile};
use crate::error::{Error, Result};
use crate::float::Float;
use crate::params::derive_seed;
use crate::resample::{resize_planes, Filter};
use crate::tensor::Tensor;

/// Planar `channels x height x width` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    /// Values are clamped into `[0, 1]`; non-finite values are rejected.
    pub fn new(channels: usize, height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "ImageTensor::new",
                format!(
                    "{channels}x{height}x{width} needs {} values, got {}",
                    channels * height * width,
                    data.len()
                ),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("image", "non-finite pixel value"));
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(ImageTensor {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        ImageTensor {
            channels,
            height,
            width,
            data: vec![value.clamp(0.0, 1.0); channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    let v = f(c, y, x);
                    data.push(if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 });
                }
            }
        }
        ImageTensor {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn is_square(&self) -> bool {
        self.height == self.width
    }

    pub fn resized(&self, height: usize, width: usize, filter: Filter) -> ImageTensor {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let data = resize_planes(&self.data, self.height, self.width, height, width, filter);
        ImageTensor::from_fn(self.channels, height, width, |c, y, x| {
            data[(c * height + y) * width + x]
        })
    }

    /// Rec. 601 luma of an RGB image; single-channel images pass through.
    pub fn luminance(&self) -> Vec<f32> {
        let n = self.height * self.width;
        if self.channels < 3 {
            return self.data[..n].to_vec();
        }
        (0..n)
            .map(|i| 0.299 * self.data[i] + 0.587 * self.data[n + i] + 0.114 * self.data[2 * n + i])
            .collect()
    }

    /// `[1, C, H, W]` tensor.
    pub fn to_tensor<F: Float>(&self) -> Tensor<F> {
        Tensor::new(
            &[1, self.channels, self.height, self.width],
            self.data.iter().map(|&v| F::of(v as f64)).collect(),
        )
        .expect("consistent shape")
    }

    /// Sample `b` of a `[B, C, H, W]` tensor, clamped into `[0, 1]`.
    pub fn from_tensor<F: Float>(t: &Tensor<F>, b: usize) -> Result<ImageTensor> {
        let (_, c, h, w) = t.dims4()?;
        let per = c * h * w;
        ImageTensor::new(
            c,
            h,
            w,
            t.data()[b * per..(b + 1) * per].iter().map(|v| v.as_f32()).collect(),
        )
    }
}

/// A contour-bearing image of a declared modality.
#[derive(Clone, Debug, PartialEq)]
pub struct ContourCondition {
    pub modality: Modality,
    pub image: ImageTensor,
    /// Key of the face record the contour was derived from.
    pub source_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FaceRecord {
    pub key: usize,
    pub label: u32,
    pub image: ImageTensor,
}

/// Bicubic downsampling of a square face.
pub fn make_lr_contour(face: &ImageTensor, target_size: usize, source_id: usize) -> Result<ContourCondition> {
    if !face.is_square() {
        return Err(Error::shape(
            "make_lr_contour",
            format!("face must be square, got {}x{}", face.height, face.width),
        ));
    }
    if target_size == 0 || face.height < target_size {
        return Err(Error::shape(
            "make_lr_contour",
            format!("face side {} smaller than target {target_size}", face.height),
        ));
    }
    Ok(ContourCondition {
        modality: Modality::LowRes,
        image: face.resized(target_size, target_size, Filter::Bicubic),
        source_id,
    })
}

/// Luminance gradient magnitude above which a pixel is marked as an edge.
pub const SKETCH_THRESHOLD: f32 = 0.1;

/// Binary single-channel edge map from forward-difference luminance gradients.
pub fn make_sketch_contour(face: &ImageTensor, source_id: usize) -> ContourCondition {
    let (h, w) = (face.height, face.width);
    let lum = face.luminance();
    let image = ImageTensor::from_fn(1, h, w, |_, y, x| {
        let here = lum[y * w + x];
        let gx = if x + 1 < w { lum[y * w + x + 1] - here } else { 0.0 };
        let gy = if y + 1 < h { lum[(y + 1) * w + x] - here } else { 0.0 };
        if libm::sqrtf(gx * gx + gy * gy) > SKETCH_THRESHOLD {
            1.0
        } else {
            0.0
        }
    });
    ContourCondition {
        modality: Modality::Sketch,
        image,
        source_id,
    }
}

/// `k`-channel one-hot label volume from luminance quantized into `k` bins.
pub fn make_mask_contour(face: &ImageTensor, k: usize, source_id: usize) -> Result<ContourCondition> {
    if k < 2 {
        return Err(Error::validation("mask_classes", "need at least 2 classes"));
    }
    let (h, w) = (face.height, face.width);
    let lum = face.luminance();
    let image = ImageTensor::from_fn(k, h, w, |c, y, x| {
        let bin = ((lum[y * w + x] * k as f32) as usize).min(k - 1);
        if bin == c {
            1.0
        } else {
            0.0
        }
    });
    Ok(ContourCondition {
        modality: Modality::Mask,
        image,
        source_id,
    })
}

/// How to derive a contour from a face record.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContourSpec {
    pub modality: Modality,
    pub lr_size: usize,
    pub mask_classes: usize,
}

impl ContourSpec {
    pub fn make(&self, record: &FaceRecord) -> Result<ContourCondition> {
        match self.modality {
            Modality::LowRes => make_lr_contour(&record.image, self.lr_size, record.key),
            Modality::Sketch => Ok(make_sketch_contour(&record.image, record.key)),
            Modality::Mask => make_mask_contour(&record.image, self.mask_classes, record.key),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub contour: Arc<ContourCondition>,
    pub identity_image: Arc<ImageTensor>,
    /// The real face behind the contour.
    pub contour_gt: Arc<ImageTensor>,
    pub identity_label: u32,
    pub identity_source: usize,
}

/// Pair every record's contour with `per_contour` identity images drawn from
/// other identities (any record when only one identity exists).
pub fn build_pairs(
    records: &[FaceRecord],
    contour: ContourSpec,
    per_contour: usize,
    seed: u64,
) -> Result<Vec<PairedSample>> {
    if records.is_empty() {
        return Err(Error::Empty("build_pairs"));
    }
    if per_contour == 0 {
        return Err(Error::validation("per_contour", "must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "pairs"));
    let images: Vec<Arc<ImageTensor>> = records.iter().map(|r| Arc::new(r.image.clone())).collect();
    let mut out = Vec::with_capacity(records.len() * per_contour);
    for (i, rec) in records.iter().enumerate() {
        let cond = Arc::new(contour.make(rec)?);
        let mut candidates: Vec<usize> = (0..records.len()).filter(|&j| records[j].label != rec.label).collect();
        if candidates.is_empty() {
            candidates = (0..records.len()).collect();
        }
        let picks: Vec<usize> = if candidates.len() >= per_contour {
            candidates.partial_shuffle(&mut rng, per_contour).0.to_vec()
        } else {
            (0..per_contour)
                .map(|_| candidates[rng.random_range(0..candidates.len())])
                .collect()
        };
        for j in picks {
            out.push(PairedSample {
                contour: cond.clone(),
                identity_image: images[j].clone(),
                contour_gt: images[i].clone(),
                identity_label: records[j].label,
                identity_source: records[j].key,
            });
        }
    }
    Ok(out)
}

/// Encoder-ready tensors for a group of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B, Cc, R, R]` at the encoder input resolution.
    pub contour: Tensor<f32>,
    /// `[B, 3, R, R]`.
    pub identity: Tensor<f32>,
    /// `[B, 3, R, R]` ground truth at the loss resolution.
    pub target: Tensor<f32>,
    pub identity_labels: Vec<u32>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.identity_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identity_labels.is_empty()
    }
}

/// Bring an image to the encoder resolution; label-like contours use nearest
/// neighbour so they stay binary.
pub fn resize_for_encoder(img: &ImageTensor, modality: Option<Modality>, res: usize) -> ImageTensor {
    let filter = match modality {
        Some(Modality::Sketch | Modality::Mask) => Filter::Nearest,
        _ => Filter::Bicubic,
    };
    img.resized(res, res, filter)
}

fn stack(images: &[ImageTensor]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or(Error::Empty("batch"))?;
    let mut data = Vec::with_capacity(first.data.len() * images.len());
    for im in images {
        if (im.channels, im.height, im.width) != (first.channels, first.height, first.width) {
            return Err(Error::shape("batch", "images of different shapes in one batch"));
        }
        data.extend_from_slice(&im.data);
    }
    Tensor::new(&[images.len(), first.channels, first.height, first.width], data)
}

/// Assemble one batch, resizing every image to `resolution`.
pub fn make_batch(samples: &[&PairedSample], resolution: usize) -> Result<Batch> {
    let contours: Vec<ImageTensor> = samples
        .iter()
        .map(|s| resize_for_encoder(&s.contour.image, Some(s.contour.modality), resolution))
        .collect();
    let ids: Vec<ImageTensor> = samples
        .iter()
        .map(|s| resize_for_encoder(&s.identity_image, None, resolution))
        .collect();
    let gts: Vec<ImageTensor> = samples
        .iter()
        .map(|s| resize_for_encoder(&s.contour_gt, None, resolution))
        .collect();
    Ok(Batch {
        contour: stack(&contours)?,
        identity: stack(&ids)?,
        target: stack(&gts)?,
        identity_labels: samples.iter().map(|s| s.identity_label).collect(),
    })
}

/// Deterministic batch stream over `samples`. With `shuffle_seed` the order
/// is a seeded permutation; the final partial batch is emitted.
pub struct BatchIter<'a> {
    samples: &'a [PairedSample],
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    resolution: usize,
}

pub fn batch_iter(
    samples: &[PairedSample],
    batch_size: usize,
    resolution: usize,
    shuffle_seed: Option<u64>,
) -> Result<BatchIter<'_>> {
    if batch_size == 0 {
        return Err(Error::validation("batch_size", "must be at least 1"));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "epoch")));
    }
    Ok(BatchIter {
        samples,
        order,
        pos: 0,
        batch_size,
        resolution,
    })
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let group: Vec<&PairedSample> = self.order[self.pos..end].iter().map(|&i| &self.samples[i]).collect();
        self.pos = end;
        Some(make_batch(&group, self.resolution))
    }
}

/// Appearance shared by every render of one identity.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityTraits {
    pub skin: [f32; 3],
    pub hair: [f32; 3],
    pub eyes: [f32; 3],
    pub lips: [f32; 3],
    pub eye_spacing: f32,
    pub eye_size: f32,
    pub mouth_width: f32,
    pub face_width: f32,
    pub face_height: f32,
    pub fringe: f32,
    pub brow: f32,
}

/// Per-render pose, framing and lighting.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderVariation {
    pub offset: [f32; 2],
    pub scale: f32,
    pub background: [f32; 3],
    pub light_angle: f32,
    pub light_strength: f32,
    pub mouth_open: f32,
}

fn mix(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

impl IdentityTraits {
    pub fn for_label(label: u32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("identity{label}")));
        let mut u = |lo: f32, hi: f32| lo + (hi - lo) * rng.random::<f32>();
        let skin = mix([0.98, 0.84, 0.72], [0.45, 0.30, 0.20], u(0.0, 1.0));
        let hair = [u(0.05, 0.9), u(0.03, 0.7), u(0.02, 0.5)];
        let eyes = [u(0.05, 0.5), u(0.1, 0.7), u(0.1, 0.9)];
        let lips = mix([0.85, 0.35, 0.40], [0.55, 0.20, 0.25], u(0.0, 1.0));
        IdentityTraits {
            skin,
            hair,
            eyes,
            lips,
            eye_spacing: u(0.17, 0.28),
            eye_size: u(0.8, 1.3),
            mouth_width: u(0.1, 0.24),
            face_width: u(0.82, 1.1),
            face_height: u(0.88, 1.05),
            fringe: u(-0.62, -0.28),
            brow: u(0.015, 0.045),
        }
    }
}

impl RenderVariation {
    pub fn sample(rng: &mut impl Rng) -> Self {
        let mut u = |lo: f32, hi: f32| lo + (hi - lo) * rng.random::<f32>();
        RenderVariation {
            offset: [u(-0.08, 0.08), u(-0.06, 0.06)],
            scale: u(0.9, 1.08),
            background: [u(0.2, 0.9), u(0.2, 0.9), u(0.2, 0.9)],
            light_angle: u(0.0, core::f32::consts::TAU),
            light_strength: u(0.05, 0.25),
            mouth_open: u(0.0, 1.0),
        }
    }
}

fn in_ellipse(x: f32, y: f32, cx: f32, cy: f32, rx: f32, ry: f32) -> bool {
    let dx = (x - cx) / rx;
    let dy = (y - cy) / ry;
    dx * dx + dy * dy <= 1.0
}

fn shade(t: &IdentityTraits, v: &RenderVariation, u: f32, w: f32) -> [f32; 3] {
    let x = (u - v.offset[0]) / v.scale;
    let y = (w - v.offset[1]) / v.scale;
    let fw = 0.55 * t.face_width;
    let fh = 0.68 * t.face_height;
    let mut c = v.background;
    if in_ellipse(x, y, 0.0, -0.12, fw + 0.1, fh + 0.12) {
        c = t.hair;
    }
    if x.abs() < 0.2 && y > 0.45 {
        c = mix(t.skin, [0.0; 3], 0.2);
    }
    let in_face = in_ellipse(x, y, 0.0, 0.05, fw, fh);
    if in_face {
        c = t.skin;
        if y < t.fringe {
            c = t.hair;
        }
    }
    if in_face {
        let es = t.eye_spacing;
        let ez = t.eye_size;
        for side in [-1.0f32, 1.0] {
            let ex = side * es;
            if (x - ex).abs() < 0.11 && (y + 0.21).abs() < t.brow {
                c = mix(t.hair, [0.0; 3], 0.4);
            }
            if in_ellipse(x, y, ex, -0.08, 0.11 * ez, 0.055 * ez) {
                c = [0.95, 0.95, 0.95];
                if in_ellipse(x, y, ex, -0.08, 0.045 * ez, 0.045 * ez) {
                    c = t.eyes;
                }
                if in_ellipse(x, y, ex, -0.08, 0.018 * ez, 0.018 * ez) {
                    c = [0.05, 0.05, 0.05];
                }
            }
        }
        if in_ellipse(x, y, 0.0, 0.12, 0.04, 0.1) {
            c = mix(t.skin, [0.0; 3], 0.15);
        }
        if in_ellipse(x, y, 0.0, 0.36, t.mouth_width, 0.03 + 0.045 * v.mouth_open) {
            c = t.lips;
        }
    }
    let light = 1.0 + v.light_strength * (libm::cosf(v.light_angle) * u + libm::sinf(v.light_angle) * w);
    [c[0] * light, c[1] * light, c[2] * light]
}

/// Render a face with 2x2 supersampling.
pub fn render_face(traits: &IdentityTraits, variation: &RenderVariation, resolution: usize) -> ImageTensor {
    let n = resolution as f32;
    let mut data = vec![0.0f32; 3 * resolution * resolution];
    for py in 0..resolution {
        for px in 0..resolution {
            let mut acc = [0.0f32; 3];
            for sy in 0..2 {
                for sx in 0..2 {
                    let u = ((px as f32 + 0.25 + 0.5 * sx as f32) / n) * 2.0 - 1.0;
                    let w = ((py as f32 + 0.25 + 0.5 * sy as f32) / n) * 2.0 - 1.0;
                    let c = shade(traits, variation, u, w);
                    for k in 0..3 {
                        acc[k] += 0.25 * c[k];
                    }
                }
            }
            for (k, a) in acc.iter().enumerate() {
                data[(k * resolution + py) * resolution + px] = a.clamp(0.0, 1.0);
            }
        }
    }
    ImageTensor {
        channels: 3,
        height: resolution,
        width: resolution,
        data,
    }
}

/// `identities * per_identity` procedural faces; record keys are indices,
/// ordered identity-major.
pub fn procedural_dataset(identities: usize, per_identity: usize, resolution: usize, seed: u64) -> Vec<FaceRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "renders"));
    let mut out = Vec::with_capacity(identities * per_identity);
    for label in 0..identities as u32 {
        let traits = IdentityTraits::for_label(label, seed);
        for _ in 0..per_identity {
            let variation = RenderVariation::sample(&mut rng);
            out.push(FaceRecord {
                key: out.len(),
                label,
                image: render_face(&traits, &variation, resolution),
            });
        }
    }
    out
}

/// Procedural dataset sized for a profile's generator resolution.
pub fn procedural_for_profile(
    profile: &ScaleProfile,
    identities: usize,
    per_identity: usize,
    seed: u64,
) -> Vec<FaceRecord> {
    procedural_dataset(identities, per_identity, profile.generator_resolution, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(side: usize, v: f32) -> ImageTensor {
        ImageTensor::filled(3, side, side, v)
    }

    #[test]
    fn lr_contour_of_constant_is_constant() {
        let c = make_lr_contour(&gray(256, 0.4), 32, 0).unwrap();
        assert_eq!((c.image.height(), c.image.width()), (32, 32));
        assert!(c.image.data().iter().all(|&v| (v - 0.4).abs() < 1e-6));
        assert_eq!(c.modality, Modality::LowRes);
    }

    #[test]
    fn lr_contour_shape_errors() {
        let rect = ImageTensor::filled(3, 8, 16, 0.5);
        assert!(matches!(make_lr_contour(&rect, 4, 0), Err(Error::Shape { .. })));
        assert!(matches!(
            make_lr_contour(&gray(8, 0.5), 16, 0),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn sketch_of_constant_is_empty_and_binary() {
        let s = make_sketch_contour(&gray(16, 0.7), 0);
        assert_eq!(s.image.channels(), 1);
        assert!(s.image.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sketch_marks_vertical_step_with_one_pixel_line() {
        let face = ImageTensor::from_fn(3, 8, 8, |_, _, x| if x < 4 { 0.0 } else { 1.0 });
        let s = make_sketch_contour(&face, 0);
        for y in 0..8 {
            for x in 0..8 {
                let expected = if x == 3 { 1.0 } else { 0.0 };
                assert_eq!(s.image.get(0, y, x), expected, "({y},{x})");
            }
        }
    }

    #[test]
    fn mask_is_one_hot() {
        let traits = IdentityTraits::for_label(3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let face = render_face(&traits, &RenderVariation::sample(&mut rng), 32);
        let m = make_mask_contour(&face, 5, 0).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let hot: f32 = (0..5).map(|c| m.image.get(c, y, x)).sum();
                assert_eq!(hot, 1.0);
            }
        }
        let constant = make_mask_contour(&gray(8, 0.3), 4, 0).unwrap();
        assert!((0..64).all(|i| constant.image.data()[64 + i] == 1.0));
        assert!(make_mask_contour(&face, 1, 0).is_err());
    }

    #[test]
    fn mask_two_bins_on_half_black_half_white() {
        let face = ImageTensor::from_fn(3, 4, 4, |_, _, x| if x < 2 { 0.0 } else { 1.0 });
        let m = make_mask_contour(&face, 2, 0).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let dark = x < 2;
                assert_eq!(m.image.get(0, y, x), if dark { 1.0 } else { 0.0 });
                assert_eq!(m.image.get(1, y, x), if dark { 0.0 } else { 1.0 });
            }
        }
    }

    fn spec() -> ContourSpec {
        ContourSpec {
            modality: Modality::LowRes,
            lr_size: 4,
            mask_classes: 4,
        }
    }

    #[test]
    fn pairs_count_determinism_and_ownership() {
        let records = procedural_dataset(3, 2, 16, 5);
        let a = build_pairs(&records, spec(), 3, 11).unwrap();
        let b = build_pairs(&records, spec(), 3, 11).unwrap();
        assert_eq!(a.len(), 18);
        assert_eq!(a, b);
        for (i, p) in a.iter().enumerate() {
            let src = &records[i / 3];
            assert_eq!(*p.contour_gt, src.image);
            assert_eq!(p.contour.source_id, src.key);
            assert_ne!(p.identity_label, src.label);
        }
        let c = build_pairs(&records, spec(), 3, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_record_degenerate_pairing() {
        let records = procedural_dataset(1, 1, 16, 5);
        let pairs = build_pairs(&records, spec(), 1, 0).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].identity_source, 0);
        assert!(build_pairs(&[], spec(), 1, 0).is_err());
    }

    #[test]
    fn batches_keep_partial_tail_and_order() {
        let records = procedural_dataset(5, 2, 16, 1);
        let pairs = build_pairs(&records, spec(), 1, 0).unwrap();
        let sizes: Vec<usize> = batch_iter(&pairs, 8, 16, None)
            .unwrap()
            .map(|b| b.unwrap().len())
            .collect();
        assert_eq!(sizes, [8, 2]);
        let first: Vec<Batch> = batch_iter(&pairs, 4, 16, Some(3))
            .unwrap()
            .map(|b| b.unwrap())
            .collect();
        let again: Vec<Batch> = batch_iter(&pairs, 4, 16, Some(3))
            .unwrap()
            .map(|b| b.unwrap())
            .collect();
        assert_eq!(first, again);
        assert!(batch_iter(&pairs, 0, 16, None).is_err());
    }

    #[test]
    fn lr_contours_are_upsampled_to_encoder_resolution() {
        let records = procedural_dataset(2, 1, 32, 1);
        let pairs = build_pairs(&records, spec(), 1, 0).unwrap();
        let b = batch_iter(&pairs, 2, 32, None).unwrap().next().unwrap().unwrap();
        assert_eq!(b.contour.shape(), &[2, 3, 32, 32]);
        assert!(b.contour.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn renders_differ_across_identities() {
        let records = procedural_dataset(2, 1, 32, 9);
        assert_ne!(records[0].image, records[1].image);
        let var: f32 = {
            let d = records[0].image.data();
            let m = d.iter().sum::<f32>() / d.len() as f32;
            d.iter().map(|v| (v - m) * (v - m)).sum::<f32>() / d.len() as f32
        };
        assert!(var > 1e-3);
    }
}
