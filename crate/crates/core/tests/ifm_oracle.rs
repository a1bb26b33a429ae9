//! Identity-guided feature modulation against an independent scalar loop.

use idfuse_core::encoder::{ifm, ifm_apply, ModulationParams};
use idfuse_core::{Graph, Tensor};
use proptest::prelude::*;

/// Reference written with explicit 4-d indices.
fn oracle(shape: [usize; 4], h: &[f32], gamma: &[f32], beta: &[f32]) -> Vec<f32> {
    let [b, c, hh, ww] = shape;
    let mut out = vec![0.0; h.len()];
    for n in 0..b {
        for ch in 0..c {
            for y in 0..hh {
                for x in 0..ww {
                    let i = ((n * c + ch) * hh + y) * ww + x;
                    out[i] = gamma[i] * h[i] + beta[i];
                }
            }
        }
    }
    out
}

fn case() -> impl Strategy<Value = ([usize; 4], Vec<f32>, Vec<f32>, Vec<f32>)> {
    (1usize..4, 1usize..6, 1usize..7, 1usize..7).prop_flat_map(|(b, c, h, w)| {
        let n = b * c * h * w;
        let v = || prop::collection::vec(-4.0f32..4.0, n);
        (Just([b, c, h, w]), v(), v(), v())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn ifm_matches_scalar_loop((shape, h, gamma, beta) in case()) {
        let expected = oracle(shape, &h, &gamma, &beta);
        let ht = Tensor::new(&shape, h).unwrap();
        let params = ModulationParams {
            gamma: Tensor::new(&shape, gamma).unwrap(),
            beta: Tensor::new(&shape, beta).unwrap(),
        };
        let got = ifm_apply(&ht, &params).unwrap();
        for (a, e) in got.data().iter().zip(&expected) {
            prop_assert!((a - e).abs() <= 1e-6, "{a} vs {e}");
        }
        let mut g = Graph::new();
        let hv = g.constant(ht);
        let gv = g.constant(params.gamma);
        let bv = g.constant(params.beta);
        let y = ifm(&mut g, hv, gv, bv).unwrap();
        for (a, e) in g.value(y).data().iter().zip(&expected) {
            prop_assert!((a - e).abs() <= 1e-6);
        }
    }
}

#[test]
fn mismatched_shapes_are_rejected() {
    let h = Tensor::<f32>::zeros(&[1, 2, 3, 3]);
    let params = ModulationParams {
        gamma: Tensor::zeros(&[1, 2, 3, 3]),
        beta: Tensor::zeros(&[1, 2, 3, 2]),
    };
    assert!(ifm_apply(&h, &params).is_err());
}
