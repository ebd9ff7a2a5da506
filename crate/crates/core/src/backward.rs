//! Checksum-protected backward convolutions.
//!
//! The kernel gradient `∇W` is checked block-wise along `M` with
//! `D ⊗ Σ_m ∇O_·m` and `D ⊗ Σ_m m·∇O_·m`; the fmap gradient `∇D` along `N`
//! with `Wᵀ ⊗ Σ_n ∇O_n` and `Wᵀ ⊗ Σ_n n·∇O_n`. A single corrupted block is
//! located from the weighted pair and corrected, and a third probe-weighted
//! checksum confirms the correction; anything else triggers a recomputation.

use serde::{Deserialize, Serialize};

use crate::cache::{probe_weight, PROBE_SALT_M};
use crate::checksum::Tolerance;
use crate::conv::{conv_backward, conv_backward_data, conv_backward_weight, ConvParams};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::scheme::{locate, LOCATE_BAND};
use crate::tensor::Tensor4;
use crate::workflow::NoFault;

/// Injection points of the backward pass.
pub trait GradientHook<T: Element> {
    fn on_weight_grad(&mut self, _dw: &mut Tensor4<T>) {}
    fn on_data_grad(&mut self, _dd: &mut Tensor4<T>) {}
}

impl<T: Element> GradientHook<T> for NoFault {}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientVerdict {
    Clean,
    Corrected { block: usize },
    Recomputed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackwardReport {
    pub weight: GradientVerdict,
    pub data: GradientVerdict,
}

/// Sums over axis 1 of `t`, plain, index-weighted and probe-weighted:
/// `[a,b,x,y] → [a,1,x,y]`.
fn fold_axis1<T: Element>(t: &Tensor4<T>) -> [Tensor4<T>; 3] {
    let [a, b, x, y] = t.dims();
    let mut s = [(); 3].map(|_| Tensor4::zeros([a, 1, x, y]));
    for i in 0..a {
        for j in 0..b {
            let w = [T::one(), T::from_index(j), probe_weight::<T>(j, PROBE_SALT_M)];
            let src = t.plane(i, j);
            for (k, sk) in s.iter_mut().enumerate() {
                for (d, &v) in sk.plane_mut(i, 0).iter_mut().zip(src) {
                    *d = *d + w[k] * v;
                }
            }
        }
    }
    s
}

/// Sums over axis 0 of `t`.
struct Folded<T> {
    plain: Vec<T>,
    weighted: Vec<T>,
    magnitude: Vec<T>,
    probe: Vec<T>,
    probe_magnitude: Vec<T>,
}

fn fold_axis0<T: Element>(t: &Tensor4<T>) -> Folded<T> {
    let len = t.block_len();
    let z = || vec![T::zero(); len];
    let mut f = Folded {
        plain: z(),
        weighted: z(),
        magnitude: z(),
        probe: z(),
        probe_magnitude: z(),
    };
    for b in 0..t.dims()[0] {
        let w = T::from_index(b);
        let p = probe_weight::<T>(b, PROBE_SALT_M);
        for (q, &v) in t.block(b).iter().enumerate() {
            f.plain[q] = f.plain[q] + v;
            f.weighted[q] = f.weighted[q] + w * v;
            f.magnitude[q] = f.magnitude[q] + v.abs();
            f.probe[q] = f.probe[q] + p * v;
            f.probe_magnitude[q] = f.probe_magnitude[q] + p * v.abs();
        }
    }
    f
}

enum Guard {
    Clean,
    Corrected(usize),
    Failed,
}

/// Plain, index-weighted and probe-weighted checksums of a gradient.
struct Checks<'a, T> {
    c1: &'a [T],
    c2: &'a [T],
    c3: &'a [T],
}

impl<T: Element> Checks<'_, T> {
    fn agree(&self, f: &Folded<T>, tol: &Tolerance) -> bool {
        (0..self.c1.len()).all(|q| {
            !tol.mismatch(self.c1[q], f.plain[q], f.magnitude[q])
                && !tol.mismatch(self.c3[q], f.probe[q], f.probe_magnitude[q])
        })
    }
}

/// Verifies `g` block-wise and corrects a single corrupted block in place.
fn guard<T: Element>(g: &mut Tensor4<T>, ck: &Checks<'_, T>, tol: &Tolerance) -> Guard {
    let blocks = g.dims()[0];
    let f = fold_axis0(g);
    if ck.agree(&f, tol) {
        return Guard::Clean;
    }
    let (c1, c2) = (ck.c1, ck.c2);
    let flagged: Vec<usize> = (0..c1.len())
        .filter(|&q| tol.mismatch(c1[q], f.plain[q], f.magnitude[q]))
        .collect();
    let delta = |q: usize| (c1[q] - f.plain[q]).as_f64();
    let num = |q: usize| (c2[q] - f.weighted[q]).as_f64();
    let Some(&top) = flagged
        .iter()
        .max_by(|&&a, &&b| delta(a).abs().total_cmp(&delta(b).abs()))
    else {
        return Guard::Failed;
    };
    let Some(b) = locate(num(top) / delta(top), blocks) else {
        return Guard::Failed;
    };
    let weight_bound = blocks.saturating_sub(1) as f64;
    let consistent = flagged.iter().all(|&q| {
        let d = delta(q);
        let bound = tol.bound(
            c2[q].as_f64(),
            f.weighted[q].as_f64(),
            f.magnitude[q].as_f64() * weight_bound,
        );
        (num(q) - b as f64 * d).abs() <= (LOCATE_BAND * d.abs()).max(bound)
    });
    if !consistent {
        return Guard::Failed;
    }
    let saved = g.block(b).to_vec();
    let blk = g.block_mut(b);
    for &q in &flagged {
        blk[q] = blk[q] + (c1[q] - f.plain[q]);
    }
    if ck.agree(&fold_axis0(g), tol) {
        Guard::Corrected(b)
    } else {
        g.block_mut(b).copy_from_slice(&saved);
        Guard::Failed
    }
}

fn verdict<T: Element>(
    g: &mut Tensor4<T>,
    ck: &Checks<'_, T>,
    tol: &Tolerance,
    what: &str,
    recompute: impl FnOnce() -> Result<Tensor4<T>>,
) -> Result<GradientVerdict> {
    Ok(match guard(g, ck, tol) {
        Guard::Clean => GradientVerdict::Clean,
        Guard::Corrected(b) => GradientVerdict::Corrected { block: b },
        Guard::Failed => {
            *g = recompute()?;
            if !matches!(guard(g, ck, tol), Guard::Clean) {
                return Err(Error::Integrity {
                    layer: "backward".into(),
                    detail: format!("recomputed {what} gradient still mismatches"),
                });
            }
            GradientVerdict::Recomputed
        }
    })
}

/// Backward convolution returning `(∇W, ∇D)` with both gradients verified
/// and, where possible, corrected. A gradient that still disagrees with
/// its checksums after recomputation is an [`Error::Integrity`].
pub fn protected_backward<T: Element>(
    d: &Tensor4<T>,
    w: &Tensor4<T>,
    d_o: &Tensor4<T>,
    params: &ConvParams,
    tol: &Tolerance,
    hook: &mut dyn GradientHook<T>,
) -> Result<(Tensor4<T>, Tensor4<T>, BackwardReport)> {
    let (mut dw, mut dd) = conv_backward(d, w, d_o, params)?;
    hook.on_weight_grad(&mut dw);
    hook.on_data_grad(&mut dd);
    let r = w.dims()[2];
    let h = d.dims()[2];

    let [om1, om2, om3] = fold_axis1(d_o);
    let cw = [om1, om2, om3].map(|t| conv_backward_weight(d, &t, r, params));
    let [cw1, cw2, cw3] = cw;
    let (cw1, cw2, cw3) = (cw1?, cw2?, cw3?);
    let checks = Checks {
        c1: cw1.data(),
        c2: cw2.data(),
        c3: cw3.data(),
    };
    let weight = verdict(&mut dw, &checks, tol, "kernel", || {
        conv_backward_weight(d, d_o, r, params)
    })?;

    let [_, m, e, _] = d_o.dims();
    let f = fold_axis0(d_o);
    let cd = [f.plain, f.weighted, f.probe]
        .map(|v| Tensor4::from_vec([1, m, e, e], v).and_then(|t| conv_backward_data(w, &t, h, params)));
    let [cd1, cd2, cd3] = cd;
    let (cd1, cd2, cd3) = (cd1?, cd2?, cd3?);
    let checks = Checks {
        c1: cd1.data(),
        c2: cd2.data(),
        c3: cd3.data(),
    };
    let data = verdict(&mut dd, &checks, tol, "fmap", || conv_backward_data(w, d_o, h, params))?;
    Ok((dw, dd, BackwardReport { weight, data }))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Corrupt {
        weight: Option<(usize, usize, f64)>,
        data: Vec<(usize, usize, f64)>,
    }

    impl GradientHook<f64> for Corrupt {
        fn on_weight_grad(&mut self, dw: &mut Tensor4<f64>) {
            if let Some((b, q, v)) = self.weight {
                dw.block_mut(b)[q] += v;
            }
        }
        fn on_data_grad(&mut self, dd: &mut Tensor4<f64>) {
            for &(b, q, v) in &self.data {
                dd.block_mut(b)[q] += v;
            }
        }
    }

    fn fixture() -> (Tensor4<f64>, Tensor4<f64>, Tensor4<f64>, ConvParams) {
        let params = ConvParams {
            pad: 1,
            ..ConvParams::default()
        };
        let d = Tensor4::random([3, 2, 6, 6], 1);
        let w = Tensor4::random([4, 2, 3, 3], 2);
        let d_o = Tensor4::random([3, 4, 6, 6], 3);
        (d, w, d_o, params)
    }

    #[test]
    fn clean_backward_passes() {
        let (d, w, d_o, params) = fixture();
        let tol = Tolerance::for_element::<f64>();
        let (dw, dd, rep) = protected_backward(&d, &w, &d_o, &params, &tol, &mut NoFault).unwrap();
        let (rw, rd) = conv_backward(&d, &w, &d_o, &params).unwrap();
        assert_eq!(dw, rw);
        assert_eq!(dd, rd);
        assert_eq!(rep.weight, GradientVerdict::Clean);
        assert_eq!(rep.data, GradientVerdict::Clean);
    }

    #[test]
    fn single_block_gradient_faults_are_corrected() {
        let (d, w, d_o, params) = fixture();
        let tol = Tolerance::for_element::<f64>();
        let mut hook = Corrupt {
            weight: Some((2, 7, 5.0)),
            data: vec![(1, 20, -3.0), (1, 21, 0.5)],
        };
        let (dw, dd, rep) = protected_backward(&d, &w, &d_o, &params, &tol, &mut hook).unwrap();
        let (rw, rd) = conv_backward(&d, &w, &d_o, &params).unwrap();
        assert_eq!(rep.weight, GradientVerdict::Corrected { block: 2 });
        assert_eq!(rep.data, GradientVerdict::Corrected { block: 1 });
        for (a, b) in dw.data().iter().zip(rw.data()).chain(dd.data().iter().zip(rd.data())) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn multi_block_gradient_fault_is_recomputed() {
        let (d, w, d_o, params) = fixture();
        let tol = Tolerance::for_element::<f64>();
        let mut hook = Corrupt {
            weight: None,
            data: vec![(0, 3, 2.0), (2, 3, 2.0)],
        };
        let (_, dd, rep) = protected_backward(&d, &w, &d_o, &params, &tol, &mut hook).unwrap();
        assert_eq!(rep.data, GradientVerdict::Recomputed);
        assert_eq!(dd, conv_backward(&d, &w, &d_o, &params).unwrap().1);
    }
}
