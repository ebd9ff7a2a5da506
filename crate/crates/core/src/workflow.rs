//! The multischeme protection pipeline, layerwise RC/ClC selection, the
//! analytic cost model and offline profiling.

use std::collections::VecDeque;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cache::LayerChecksums;
use crate::checksum::{verify_kernel, ChecksumKind, InputChecksums, Tolerance};
use crate::conv::{conv_forward, ConvGeometry, ConvImpl};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::layer::ConvLayer;
use crate::scheme::{correct, detect, CorrectionStatus, Scheme};
use crate::tensor::Tensor4;

/// Interception points for fault injection. Every method defaults to a
/// no-op.
pub trait FaultHook<T: Element> {
    /// Live kernels, before the convolution. Changes persist in the layer.
    fn on_kernels(&mut self, _w: &mut Tensor4<T>) {}

    /// Input checksums of this execution, after they are computed.
    fn on_input_checksums(&mut self, _ic: &mut InputChecksums<T>) {}

    /// Returns a corrupted copy of the fmap for the convolution to read.
    /// The stored fmap is left untouched.
    fn conv_fmap(&mut self, _d: &Tensor4<T>) -> Option<Tensor4<T>> {
        None
    }

    /// Convolution output, before verification.
    fn on_output(&mut self, _o: &mut Tensor4<T>) {}

    /// Each output checksum, right after it is computed.
    fn on_output_checksum(&mut self, _kind: ChecksumKind, _c: &mut Tensor4<T>) {}
}

/// Hook that injects nothing.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoFault;

impl<T: Element> FaultHook<T> for NoFault {}

/// Correction chain run after a detection.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtectionPolicy {
    pub chain: Vec<Scheme>,
    pub recompute: bool,
}

impl ProtectionPolicy {
    /// `CoC → RC? → ClC? → FC → recompute`.
    pub fn full(rc_enabled: bool, clc_enabled: bool) -> Self {
        let mut chain = vec![Scheme::Coc];
        if rc_enabled {
            chain.push(Scheme::Rc);
        }
        if clc_enabled {
            chain.push(Scheme::Clc);
        }
        chain.push(Scheme::Fc);
        Self { chain, recompute: true }
    }

    /// Detection, kernel check and a single scheme, without recompute.
    /// `CocD` yields detection only.
    pub fn isolated(scheme: Scheme) -> Self {
        let chain = if scheme == Scheme::CocD { vec![] } else { vec![scheme] };
        Self {
            chain,
            recompute: false,
        }
    }

    pub fn chain(chain: &[Scheme], recompute: bool) -> Self {
        Self {
            chain: chain.to_vec(),
            recompute,
        }
    }
}

impl Default for ProtectionPolicy {
    fn default() -> Self {
        Self::full(true, false)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    /// Detection found nothing.
    Clean,
    Corrected(Scheme),
    /// The checksums were found corrupted and discarded; output kept.
    ChecksumDiscard(Scheme),
    Recomputed,
    /// Nothing in the chain resolved the mismatch and recompute was off.
    Unresolved,
}

impl Resolution {
    pub fn stage_name(&self) -> &'static str {
        match self {
            Resolution::Clean => "none",
            Resolution::Corrected(s) => s.name(),
            Resolution::ChecksumDiscard(_) => "discard",
            Resolution::Recomputed => "recompute",
            Resolution::Unresolved => "unresolved",
        }
    }

    pub fn is_resolved(&self) -> bool {
        !matches!(self, Resolution::Unresolved)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub scheme: Scheme,
    pub status: CorrectionStatus,
    pub seconds: f64,
}

/// Wall-clock seconds per pipeline stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub input_checksums: f64,
    pub conv: f64,
    pub detect: f64,
    pub kernel_check: f64,
    pub correction: f64,
    pub recompute: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: String,
    pub detected: bool,
    /// Number of `E×E` positions flagged by CoC-D.
    pub mismatches: usize,
    pub max_rel_dev: f64,
    pub kernel_reloaded: bool,
    pub stages: Vec<StageRecord>,
    pub resolution: Resolution,
    pub corrected_blocks: Vec<(usize, usize)>,
    pub recomputed: bool,
    /// Output checksums computed, in order.
    pub checksums: Vec<ChecksumKind>,
    pub timings: StageTimings,
}

impl LayerReport {
    fn new(layer: &str) -> Self {
        Self {
            layer: layer.to_string(),
            detected: false,
            mismatches: 0,
            max_rel_dev: 0.0,
            kernel_reloaded: false,
            stages: Vec::new(),
            resolution: Resolution::Clean,
            corrected_blocks: Vec::new(),
            recomputed: false,
            checksums: Vec::new(),
            timings: StageTimings::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunOptions {
    pub imp: ConvImpl,
    pub tol: Tolerance,
}

impl RunOptions {
    pub fn new<T: Element>() -> Self {
        Self {
            imp: ConvImpl::Direct,
            tol: Tolerance::for_element::<T>(),
        }
    }
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

/// Runs one protected layer execution.
///
/// Input checksums → convolution → `So5`/`Co5` → CoC-D. On a mismatch the
/// live kernels are checked against the load-time `Cw1` and reloaded if
/// corrupted, then the correction chain runs until a scheme resolves the
/// mismatch; checksums and summations are shared down the chain. If the
/// chain fails and `policy.recompute` is set, the layer is recomputed once;
/// a second detection is an [`Error::Integrity`].
pub fn run_protected_layer<T: Element>(
    layer: &mut ConvLayer<T>,
    d: &Tensor4<T>,
    policy: &ProtectionPolicy,
    opts: &RunOptions,
    hook: &mut dyn FaultHook<T>,
) -> Result<(Tensor4<T>, LayerReport)> {
    let start = Instant::now();
    let params = layer.params;
    let mut report = LayerReport::new(&layer.name);
    let parts = layer.parts_mut();
    let tol = opts.tol;

    hook.on_kernels(parts.live);
    let t = Instant::now();
    let mut ic = InputChecksums::with_kernel_checksums(d, parts.cw1, parts.cw2);
    hook.on_input_checksums(&mut ic);
    report.timings.input_checksums = secs(t);

    let t = Instant::now();
    let corrupted_fmap = hook.conv_fmap(d);
    let mut o = conv_forward(
        corrupted_fmap.as_ref().unwrap_or(d),
        parts.live,
        parts.bias,
        &params,
        opts.imp,
    )?;
    drop(corrupted_fmap);
    hook.on_output(&mut o);
    report.timings.conv = secs(t);

    let mut resolved = true;
    {
        let t = Instant::now();
        let mut cx = LayerChecksums::new(d, parts.golden, params, opts.imp, tol, ic)?
            .with_kernel_reference(parts.cw1, parts.cw2)
            .with_hook(hook);
        if let Some(b) = parts.bias {
            cx = cx.with_bias(b)?;
        }
        let det = detect(&mut cx, &o)?;
        report.timings.detect = secs(t);
        report.detected = !det.clean;
        report.mismatches = det.mismatch_count();
        report.max_rel_dev = det.max_rel_dev;

        if report.detected {
            let t = Instant::now();
            if !verify_kernel(parts.live, parts.cw1, params.groups, &tol) {
                parts.live.clone_from(parts.golden);
                report.kernel_reloaded = true;
            }
            report.timings.kernel_check = secs(t);

            resolved = false;
            let t = Instant::now();
            for &scheme in &policy.chain {
                let st = Instant::now();
                let outcome = correct(scheme, &mut cx, &mut o)?;
                report.stages.push(StageRecord {
                    scheme,
                    status: outcome.status,
                    seconds: secs(st),
                });
                match outcome.status {
                    CorrectionStatus::Corrected => {
                        report.resolution = Resolution::Corrected(scheme);
                        report.corrected_blocks = outcome.corrected_blocks;
                        resolved = true;
                    }
                    CorrectionStatus::ChecksumCorruptionDiscard => {
                        report.resolution = Resolution::ChecksumDiscard(scheme);
                        resolved = true;
                    }
                    CorrectionStatus::Escalate => continue,
                }
                break;
            }
            report.timings.correction = secs(t);
        }
        report.checksums = cx.computed().to_vec();
    }

    if !resolved {
        if policy.recompute {
            let t = Instant::now();
            if parts.live != parts.golden {
                parts.live.clone_from(parts.golden);
                report.kernel_reloaded = true;
            }
            o = conv_forward(d, parts.live, parts.bias, &params, opts.imp)?;
            let ic = InputChecksums::with_kernel_checksums(d, parts.cw1, parts.cw2);
            let mut cx = LayerChecksums::new(d, parts.golden, params, opts.imp, tol, ic)?;
            if let Some(b) = parts.bias {
                cx = cx.with_bias(b)?;
            }
            let det = detect(&mut cx, &o)?;
            report.timings.recompute = secs(t);
            if !det.clean {
                return Err(Error::Integrity {
                    layer: report.layer,
                    detail: format!(
                        "recomputed output still mismatches at {} positions (max relative deviation {:.3e})",
                        det.mismatch_count(),
                        det.max_rel_dev
                    ),
                });
            }
            report.recomputed = true;
            report.resolution = Resolution::Recomputed;
        } else {
            report.resolution = Resolution::Unresolved;
        }
    }
    report.timings.total = secs(start);
    Ok((o, report))
}

/// Compute (`alpha`) and memory (`beta`) coefficients of the cost model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0 }
    }
}

impl CostModel {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if alpha > 0.0 && beta > 0.0 {
            Ok(Self { alpha, beta })
        } else {
            Err(Error::Config(format!(
                "cost coefficients must be positive, got α={alpha}, β={beta}"
            )))
        }
    }
}

/// Predicted runtime of one scheme for a layer.
pub fn cost_model(scheme: Scheme, geo: &ConvGeometry, cm: &CostModel) -> f64 {
    let n = geo.n as f64;
    let ch = geo.ch as f64;
    let h2 = (geo.h * geo.h) as f64;
    let m = geo.m as f64;
    let r2 = (geo.r * geo.r) as f64;
    let e2 = (geo.e * geo.e) as f64;
    let (a, b) = (cm.alpha, cm.beta);
    match scheme {
        Scheme::Fc => a * (n + m) * ch * r2 * e2 + b * (n * ch * h2 + 2.0 * n * m * e2),
        Scheme::Rc => 2.0 * a * m * ch * r2 * e2 + 2.0 * b * (n * ch * h2 + n * m * e2),
        Scheme::Clc => 2.0 * a * n * ch * r2 * e2 + 2.0 * b * n * m * e2,
        Scheme::Coc => 3.0 * a * ch * r2 * e2 + b * (2.0 * n * ch * h2 + 3.0 * n * m * e2),
        Scheme::CocD => a * ch * r2 * e2 + b * (2.0 * n * ch * h2 + n * m * e2),
    }
}

/// `(p_r, p_c)`: fault probabilities proportional to fmap and kernel
/// element counts.
pub fn estimate_error_probs(geo: &ConvGeometry) -> (f64, f64) {
    let d = (geo.n * geo.ch * geo.h * geo.h) as f64;
    let w = (geo.m * geo.channels_per_group() * geo.r * geo.r) as f64;
    let p_r = d / (d + w);
    (p_r, w / (d + w))
}

/// RC pays off when `p_r·(t0 − t1) > p_c·(t2 − t0)`.
pub fn decide_rc(t0: f64, t1: f64, t2: f64, p_r: f64, p_c: f64) -> bool {
    p_r * (t0 - t1) > p_c * (t2 - t0)
}

/// ClC counterpart of [`decide_rc`]; `t*` are the ClC variant timings.
pub fn decide_clc(t0: f64, t1: f64, t2: f64, p_r: f64, p_c: f64) -> bool {
    p_c * (t0 - t1) > p_r * (t2 - t0)
}

/// Per-layer protection plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub rc_enabled: bool,
    pub clc_enabled: bool,
    pub tau: f64,
    pub t0: f64,
    pub t1: f64,
    pub t2: f64,
    pub p_r: f64,
    #[serde(default)]
    pub p_c: Option<f64>,
    /// `(t0, t1, t2)` of the ClC variants.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clc_times: Option<[f64; 3]>,
}

impl LayerPlan {
    pub fn p_c(&self) -> f64 {
        self.p_c.unwrap_or(1.0 - self.p_r)
    }

    pub fn policy(&self) -> ProtectionPolicy {
        ProtectionPolicy::full(self.rc_enabled, self.clc_enabled)
    }

    pub fn tolerance(&self) -> Tolerance {
        Tolerance::new(self.tau)
    }

    /// Plan from analytic costs; ClC stays disabled.
    pub fn from_cost_model(geo: &ConvGeometry, tau: f64, cm: &CostModel) -> Self {
        let (p_r, p_c) = estimate_error_probs(geo);
        let [t0, t1, t2] = predicted_times(geo, cm, Scheme::Rc);
        Self {
            rc_enabled: decide_rc(t0, t1, t2, p_r, p_c),
            clc_enabled: false,
            tau,
            t0,
            t1,
            t2,
            p_r,
            p_c: Some(p_c),
            clc_times: None,
        }
    }

    pub fn from_profile(profile: &LayerProfile, geo: &ConvGeometry, tau: f64) -> Self {
        let (p_r, p_c) = estimate_error_probs(geo);
        let [t0, t1, t2] = profile.rc;
        let [c0, c1, c2] = profile.clc;
        if t1 > t2 || t0 > t2 {
            log::warn!("profile t0={t0:.3e} t1={t1:.3e} t2={t2:.3e} violates t0,t1 <= t2");
        }
        Self {
            rc_enabled: decide_rc(t0, t1, t2, p_r, p_c),
            clc_enabled: decide_clc(c0, c1, c2, p_r, p_c),
            tau,
            t0,
            t1,
            t2,
            p_r,
            p_c: Some(p_c),
            clc_times: Some(profile.clc),
        }
    }
}

/// Cost-model estimates of `(t0, t1, t2)` for `line` ∈ {RC, ClC}.
pub fn predicted_times(geo: &ConvGeometry, cm: &CostModel, line: Scheme) -> [f64; 3] {
    let base = cost_model(Scheme::CocD, geo, cm) + cost_model(Scheme::Coc, geo, cm);
    let fc = cost_model(Scheme::Fc, geo, cm);
    let mid = cost_model(line, geo, cm);
    [base + fc, base + mid, base + mid + fc]
}

/// Source of durations for profiling.
pub trait Timer {
    /// Runs `f` once and returns its duration in seconds.
    fn time(&mut self, f: &mut dyn FnMut() -> Result<()>) -> Result<f64>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct WallTimer;

impl Timer for WallTimer {
    fn time(&mut self, f: &mut dyn FnMut() -> Result<()>) -> Result<f64> {
        let t = Instant::now();
        f()?;
        Ok(secs(t))
    }
}

/// Runs the closure but reports pre-scripted durations.
#[derive(Clone, Debug, Default)]
pub struct ScriptedTimer {
    durations: VecDeque<f64>,
}

impl ScriptedTimer {
    pub fn new(durations: impl IntoIterator<Item = f64>) -> Self {
        Self {
            durations: durations.into_iter().collect(),
        }
    }
}

impl Timer for ScriptedTimer {
    fn time(&mut self, f: &mut dyn FnMut() -> Result<()>) -> Result<f64> {
        f()?;
        self.durations
            .pop_front()
            .ok_or_else(|| Error::Internal("scripted timer exhausted".into()))
    }
}

/// Median workflow timings for the RC and ClC variants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    /// `(t0, t1, t2)` = CoC+FC (row fault), CoC+RC (row fault),
    /// CoC+RC+FC (column fault).
    pub rc: [f64; 3],
    /// CoC+FC (column fault), CoC+ClC (column fault), CoC+ClC+FC (row
    /// fault).
    pub clc: [f64; 3],
    /// True when the measurements were too short and cost-model estimates
    /// were substituted.
    pub fallback: bool,
}

/// Smallest median duration considered resolvable by the timer.
pub const MIN_PROFILE_SECONDS: f64 = 1e-4;

/// Adds a fixed offset to every element of output row `i` or column `j`.
struct LineFault {
    row: bool,
    idx: usize,
}

impl<T: Element> FaultHook<T> for LineFault {
    fn on_output(&mut self, o: &mut Tensor4<T>) {
        let [n, m, _, _] = o.dims();
        let blocks: Vec<(usize, usize)> = if self.row {
            (0..m).map(|mi| (self.idx, mi)).collect()
        } else {
            (0..n).map(|ni| (ni, self.idx)).collect()
        };
        for (k, (ni, mi)) in blocks.into_iter().enumerate() {
            for v in o.plane_mut(ni, mi) {
                *v = *v + T::lit(1.0 + k as f64) * (T::one() + v.abs());
            }
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Profiles the six workflow variants on a seeded input of batch `n` and
/// size `h`, returning medians over `reps` runs each.
pub fn profile_layer<T: Element>(
    layer: &mut ConvLayer<T>,
    n: usize,
    h: usize,
    reps: usize,
    opts: &RunOptions,
    timer: &mut dyn Timer,
    seed: u64,
) -> Result<LayerProfile> {
    if reps < 3 {
        return Err(Error::Config(format!(
            "profiling needs at least 3 repetitions, got {reps}"
        )));
    }
    let geo = layer.geometry(n, h)?;
    let d = Tensor4::<T>::random(geo.fmap_dims(), seed);
    let variants: [(&[Scheme], bool); 6] = [
        (&[Scheme::Coc, Scheme::Fc], true),
        (&[Scheme::Coc, Scheme::Rc], true),
        (&[Scheme::Coc, Scheme::Rc, Scheme::Fc], false),
        (&[Scheme::Coc, Scheme::Fc], false),
        (&[Scheme::Coc, Scheme::Clc], false),
        (&[Scheme::Coc, Scheme::Clc, Scheme::Fc], true),
    ];
    let mut medians = [0.0; 6];
    for (slot, (chain, row)) in variants.iter().enumerate() {
        let policy = ProtectionPolicy::chain(chain, true);
        let mut samples = Vec::with_capacity(reps);
        for _ in 0..reps {
            let mut hook = LineFault { row: *row, idx: 0 };
            let t = timer.time(&mut || run_protected_layer(layer, &d, &policy, opts, &mut hook).map(|_| ()))?;
            samples.push(t);
        }
        medians[slot] = median(samples);
    }
    let min = medians.iter().copied().fold(f64::INFINITY, f64::min);
    if min < MIN_PROFILE_SECONDS {
        log::warn!(
            "layer {}: shortest median {min:.3e}s is below timer resolution; using cost-model estimates",
            layer.name
        );
        let cm = CostModel::default();
        return Ok(LayerProfile {
            rc: predicted_times(&geo, &cm, Scheme::Rc),
            clc: predicted_times(&geo, &cm, Scheme::Clc),
            fallback: true,
        });
    }
    Ok(LayerProfile {
        rc: [medians[0], medians[1], medians[2]],
        clc: [medians[3], medians[4], medians[5]],
        fallback: false,
    })
}
