use convguard::backward::{protected_backward, GradientHook, GradientVerdict};
use convguard::conv::{conv_backward, ConvGeometry, ShapeLimits};
use convguard::{conv_forward, ConvImpl, ConvParams, NoFault, Tensor4, Tolerance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_shapes(count: usize, seed: u64) -> Vec<ConvGeometry> {
    let limits = ShapeLimits {
        max_n: 3,
        max_m: 4,
        max_ch: 3,
        max_h: 7,
        kernel_sizes: vec![1, 2, 3],
        strides: vec![1, 2],
        groups: vec![1],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| ConvGeometry::sample(&mut rng, &limits).unwrap())
        .collect()
}

/// Loss `Σ O ⊙ G`, whose gradient w.r.t. `O` is `G`.
fn loss(d: &Tensor4<f64>, w: &Tensor4<f64>, g: &Tensor4<f64>, params: &ConvParams) -> f64 {
    let o = conv_forward(d, w, None, params, ConvImpl::Direct).unwrap();
    o.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
}

fn central_difference(f: impl Fn(&Tensor4<f64>) -> f64, x: &Tensor4<f64>, idx: usize) -> f64 {
    let h = 1e-5;
    let (mut plus, mut minus) = (x.clone(), x.clone());
    plus.data_mut()[idx] += h;
    minus.data_mut()[idx] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

#[test]
fn backward_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for (k, geo) in small_shapes(24, 5).into_iter().enumerate() {
        let params = ConvParams {
            bias_enabled: false,
            ..geo.params
        };
        let seed = k as u64 * 3;
        let d = Tensor4::<f64>::random(geo.fmap_dims(), seed);
        let w = Tensor4::<f64>::random(geo.kernel_dims(), seed + 1);
        let g = Tensor4::<f64>::random(geo.output_dims(), seed + 2);
        let (dw, dd) = conv_backward(&d, &w, &g, &params).unwrap();
        for _ in 0..8 {
            let i = rng.gen_range(0..w.len());
            let fd = central_difference(|w| loss(&d, w, &g, &params), &w, i);
            assert!((fd - dw.data()[i]).abs() <= 1e-4 * fd.abs().max(1.0), "{geo:?} dW[{i}]");
            let i = rng.gen_range(0..d.len());
            let fd = central_difference(|d| loss(d, &w, &g, &params), &d, i);
            assert!((fd - dd.data()[i]).abs() <= 1e-4 * fd.abs().max(1.0), "{geo:?} dD[{i}]");
        }
    }
}

struct Flip {
    weight: Option<(usize, usize, f64)>,
    data: Option<(usize, usize, f64)>,
}

impl GradientHook<f64> for Flip {
    fn on_weight_grad(&mut self, dw: &mut Tensor4<f64>) {
        if let Some((b, q, v)) = self.weight {
            dw.block_mut(b)[q] += v;
        }
    }
    fn on_data_grad(&mut self, dd: &mut Tensor4<f64>) {
        if let Some((b, q, v)) = self.data {
            dd.block_mut(b)[q] += v;
        }
    }
}

#[test]
fn protected_backward_detects_and_corrects_gradient_faults() {
    let tol = Tolerance::for_element::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (k, geo) in small_shapes(24, 6).into_iter().enumerate() {
        let params = ConvParams {
            bias_enabled: false,
            ..geo.params
        };
        let seed = 100 + k as u64;
        let d = Tensor4::<f64>::random(geo.fmap_dims(), seed);
        let w = Tensor4::<f64>::random(geo.kernel_dims(), seed + 1);
        let g = Tensor4::<f64>::random(geo.output_dims(), seed + 2);
        let (rw, rd) = conv_backward(&d, &w, &g, &params).unwrap();

        let (_, _, clean) = protected_backward(&d, &w, &g, &params, &tol, &mut NoFault).unwrap();
        assert_eq!(
            (clean.weight, clean.data),
            (GradientVerdict::Clean, GradientVerdict::Clean)
        );

        let bw = rng.gen_range(0..geo.m);
        let bd = rng.gen_range(0..geo.n);
        let mut hook = Flip {
            weight: Some((bw, rng.gen_range(0..rw.block_len()), 3.5)),
            data: Some((bd, rng.gen_range(0..rd.block_len()), -2.25)),
        };
        let (dw, dd, rep) = protected_backward(&d, &w, &g, &params, &tol, &mut hook).unwrap();
        assert_eq!(rep.weight, GradientVerdict::Corrected { block: bw }, "{geo:?}");
        assert_eq!(rep.data, GradientVerdict::Corrected { block: bd }, "{geo:?}");
        for (a, b) in dw.data().iter().zip(rw.data()).chain(dd.data().iter().zip(rd.data())) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }
}
