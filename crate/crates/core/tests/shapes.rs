//! Shape contracts of encoders and generator under both profiles.

use idfuse_core::config::{full_profile, toy_profile, AblationFlags, ScaleProfile};
use idfuse_core::encoder::{LatentBundle, MainEncoder};
use idfuse_core::generator::Generator;
use idfuse_core::identity::IdentityEncoder;
use idfuse_core::Tensor;

fn encode_shapes(p: &ScaleProfile) -> (Vec<usize>, Vec<usize>) {
    let r = p.contour_input_resolution;
    let id = IdentityEncoder::<f32>::new(p, 1);
    let x = Tensor::full(&[1, 3, r, r], 0.5f32);
    let mut g = idfuse_core::Graph::new();
    let ip = id.params().bind(&mut g, false);
    let xv = g.constant(x.clone());
    let levels = id.forward(&mut g, &ip, xv).unwrap();
    let pyramid = idfuse_core::identity::FeaturePyramid {
        levels: levels.iter().map(|&v| g.value(v).clone()).collect(),
    };
    let enc = MainEncoder::<f32>::new(p, 3, AblationFlags::INPUT_LATENT, 2);
    let bundle = enc.encode(&x, &x, Some(&pyramid)).unwrap();
    assert!(bundle.is_finite());
    (bundle.style.shape().to_vec(), bundle.input_latent.shape().to_vec())
}

fn generator_shape(p: &ScaleProfile) -> Vec<usize> {
    let gen = Generator::<f32>::new(p, 3).unwrap();
    let bundle = LatentBundle {
        style: Tensor::zeros(&[1, p.style_layer_count, p.style_dim]),
        input_latent: Tensor::zeros(&[1, p.input_latent_channels, 4, 4]),
    };
    let img = gen.synthesize(&bundle).unwrap();
    assert!(img.is_finite());
    img.shape().to_vec()
}

#[test]
fn toy_contracts() {
    let p = toy_profile();
    assert_eq!(encode_shapes(&p), (vec![1, 10, 64], vec![1, 64, 4, 4]));
    assert_eq!(generator_shape(&p), [1, 3, 64, 64]);
}

#[test]
fn full_contracts() {
    let p = full_profile();
    assert_eq!(encode_shapes(&p), (vec![1, 18, 512], vec![1, 512, 4, 4]));
    assert_eq!(generator_shape(&p), [1, 3, 1024, 1024]);
}

#[test]
fn wrong_resolution_is_a_shape_error() {
    let p = toy_profile();
    let enc = MainEncoder::<f32>::new(&p, 3, AblationFlags::BASELINE, 0);
    let x = Tensor::full(&[1, 3, 32, 32], 0.5f32);
    assert!(matches!(
        enc.encode(&x, &x, None),
        Err(idfuse_core::Error::Shape { .. })
    ));
}
