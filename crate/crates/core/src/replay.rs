//! Replays fault specs through the protected layer and scores the outcome.

use serde::{Deserialize, Serialize};

use crate::checksum::Tolerance;
use crate::conv::{conv_forward, ConvImpl};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::fault::{FaultInjector, FaultSpec, GroundTruth};
use crate::layer::ConvLayer;
use crate::tensor::Tensor4;
use crate::workflow::{run_protected_layer, FaultHook, LayerReport, ProtectionPolicy, Resolution, RunOptions};

/// Factor applied to `τ·max(A, 1)` to obtain the significance floor.
pub const SIGNIFICANCE_FACTOR: f64 = 10.0;
/// Relative accuracy required of a recovered output element.
pub const RECOVERY_TOLERANCE: f64 = 1e-3;

/// Observable size of the output deviation caused by a fault.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Significance {
    /// The output is bit-identical to the fault-free output.
    NoEffect,
    /// Every element deviates by no more than the floor at its position.
    Benign,
    /// At some position the summed deviation exceeds the floor.
    Significant,
    /// Large per-element deviations that cancel in every position sum.
    Masked,
}

/// Per-position floors `10·τ·max(Σ_nm |clean_nm(p)|, 1)`.
fn floors<T: Element>(clean: &Tensor4<T>, tol: &Tolerance) -> Vec<f64> {
    let [n, m, e, _] = clean.dims();
    let mut a = vec![0.0f64; e * e];
    for i in 0..n {
        for j in 0..m {
            for (p, v) in clean.plane(i, j).iter().enumerate() {
                a[p] += v.as_f64().abs();
            }
        }
    }
    a.into_iter()
        .map(|v| SIGNIFICANCE_FACTOR * tol.tau * v.max(1.0))
        .collect()
}

pub fn classify<T: Element>(clean: &Tensor4<T>, faulty: &Tensor4<T>, tol: &Tolerance) -> Significance {
    if clean
        .data()
        .iter()
        .zip(faulty.data())
        .all(|(a, b)| a.to_bits_u64() == b.to_bits_u64())
    {
        return Significance::NoEffect;
    }
    let [n, m, e, _] = clean.dims();
    let floor = floors(clean, tol);
    let mut sum = vec![0.0f64; e * e];
    let mut benign = true;
    for i in 0..n {
        for j in 0..m {
            for (p, (c, f)) in clean.plane(i, j).iter().zip(faulty.plane(i, j)).enumerate() {
                let d = f.as_f64() - c.as_f64();
                sum[p] += d;
                if d.is_nan() || d.abs() > floor[p] {
                    benign = false;
                }
            }
        }
    }
    if sum.iter().zip(&floor).any(|(s, f)| s.is_nan() || s.abs() > *f) {
        Significance::Significant
    } else if benign {
        Significance::Benign
    } else {
        Significance::Masked
    }
}

/// True when every element of `out` matches `clean` to within
/// [`RECOVERY_TOLERANCE`] relative, or, for elements whose injected
/// deviation was below the significance floor, stays within that deviation.
pub fn recovered<T: Element>(clean: &Tensor4<T>, faulty: &Tensor4<T>, out: &Tensor4<T>, tol: &Tolerance) -> bool {
    if out.dims() != clean.dims() {
        return false;
    }
    let [n, m, _, _] = clean.dims();
    let floor = floors(clean, tol);
    (0..n).all(|i| {
        (0..m).all(|j| {
            let it = clean.plane(i, j).iter().zip(faulty.plane(i, j)).zip(out.plane(i, j));
            it.enumerate().all(|(p, ((c, f), o))| {
                let (c, f, o) = (c.as_f64(), f.as_f64(), o.as_f64());
                let slack = RECOVERY_TOLERANCE * c.abs().max(1.0);
                let diff = (o - c).abs();
                let delta = (f - c).abs();
                diff <= slack || (delta <= floor[p] && diff <= delta + slack)
            })
        })
    })
}

/// Output of the unprotected layer with `spec` applied, using the golden
/// weights as the starting state.
pub fn faulty_output<T: Element>(
    layer: &ConvLayer<T>,
    d: &Tensor4<T>,
    spec: &FaultSpec,
    imp: ConvImpl,
) -> Result<Tensor4<T>> {
    let geo = layer.geometry(d.dims()[0], d.dims()[2])?;
    let mut inj = FaultInjector::new::<T>(*spec, &geo)?;
    let hook: &mut dyn FaultHook<T> = &mut inj;
    let mut w = layer.golden().clone();
    hook.on_kernels(&mut w);
    let fmap = hook.conv_fmap(d);
    let mut o = conv_forward(fmap.as_ref().unwrap_or(d), &w, layer.bias(), &layer.params, imp)?;
    hook.on_output(&mut o);
    Ok(o)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayOutcome {
    pub spec: FaultSpec,
    pub significance: Significance,
    pub detected: bool,
    pub resolution: Option<Resolution>,
    /// Output matches the fault-free output per [`recovered`].
    pub recovered: bool,
    /// Resolution is consistent with the ground truth.
    pub admitted: bool,
    /// Set when the layer failed even after recomputation.
    pub integrity_error: Option<String>,
    pub report: Option<LayerReport>,
}

impl ReplayOutcome {
    /// Resolved by a correcting scheme (correction or checksum discard)
    /// with the output recovered.
    pub fn resolved_by_scheme(&self) -> bool {
        self.recovered
            && matches!(
                self.resolution,
                Some(Resolution::Corrected(_) | Resolution::ChecksumDiscard(_))
            )
    }
}

/// Replays `spec` through the protected layer. The layer's live weights
/// are restored from the golden copy afterwards.
pub fn replay<T: Element>(
    layer: &mut ConvLayer<T>,
    d: &Tensor4<T>,
    clean: &Tensor4<T>,
    spec: &FaultSpec,
    truth: &GroundTruth,
    policy: &ProtectionPolicy,
    opts: &RunOptions,
) -> Result<ReplayOutcome> {
    layer.reload_weights();
    let faulty = faulty_output(layer, d, spec, opts.imp)?;
    let significance = classify(clean, &faulty, &opts.tol);
    let geo = layer.geometry(d.dims()[0], d.dims()[2])?;
    let mut inj = FaultInjector::new::<T>(*spec, &geo)?;
    let result = run_protected_layer(layer, d, policy, opts, &mut inj);
    layer.reload_weights();
    match result {
        Ok((out, report)) => Ok(ReplayOutcome {
            spec: *spec,
            significance,
            detected: report.detected,
            resolution: Some(report.resolution),
            recovered: recovered(clean, &faulty, &out, &opts.tol),
            admitted: truth.admits(&report.resolution, policy),
            integrity_error: None,
            report: Some(report),
        }),
        Err(Error::Integrity { detail, .. }) => Ok(ReplayOutcome {
            spec: *spec,
            significance,
            detected: true,
            resolution: None,
            recovered: false,
            admitted: false,
            integrity_error: Some(detail),
            report: None,
        }),
        Err(e) => Err(e),
    }
}
