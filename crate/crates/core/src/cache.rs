//! Per-execution checksum state shared by every scheme in the workflow.
//!
//! Output checksums are computed lazily and at most once per layer
//! execution; summations are cached until the output is modified.

use crate::checksum::{
    fmap_checksums, output_checksum, output_summations, tensors_agree, BiasAggregates, ChecksumKind, InputChecksumName,
    InputChecksums, OutputChecksums, OutputSummations, Tolerance,
};
use crate::conv::{conv_forward, ConvImpl, ConvParams};
use crate::element::Element;
use crate::error::{shape_err, Result};
use crate::tensor::Tensor4;
use crate::workflow::FaultHook;

/// Result of re-deriving the input checksums from the live inputs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InputVerdict {
    pub corrupted: Vec<InputChecksumName>,
}

impl InputVerdict {
    pub fn is_clean(&self) -> bool {
        self.corrupted.is_empty()
    }
}

/// Checksums, summations and bookkeeping for one layer execution.
pub struct LayerChecksums<'a, T: Element> {
    d: &'a Tensor4<T>,
    w: &'a Tensor4<T>,
    params: ConvParams,
    imp: ConvImpl,
    tol: Tolerance,
    n: usize,
    m: usize,
    e: usize,
    inputs: InputChecksums<T>,
    kernel_ref: Option<(&'a Tensor4<T>, &'a Tensor4<T>)>,
    bias: Option<BiasAggregates<T>>,
    outputs: OutputChecksums<T>,
    summations: Option<OutputSummations<T>>,
    verdict: Option<InputVerdict>,
    computed: Vec<ChecksumKind>,
    probe: Option<Tensor4<T>>,
    hook: Option<&'a mut dyn FaultHook<T>>,
}

impl<'a, T: Element> LayerChecksums<'a, T> {
    pub fn new(
        d: &'a Tensor4<T>,
        w: &'a Tensor4<T>,
        params: ConvParams,
        imp: ConvImpl,
        tol: Tolerance,
        inputs: InputChecksums<T>,
    ) -> Result<Self> {
        let geo = crate::conv::ConvGeometry::from_tensors(d, w, params)?;
        Ok(Self {
            d,
            w,
            params,
            imp,
            tol,
            n: geo.n,
            m: geo.m,
            e: geo.e,
            inputs,
            kernel_ref: None,
            bias: None,
            outputs: OutputChecksums::default(),
            summations: None,
            verdict: None,
            computed: Vec::new(),
            probe: None,
            hook: None,
        })
    }

    /// Bias to remove from summations before comparison.
    pub fn with_bias(mut self, bias: &[T]) -> Result<Self> {
        if bias.len() != self.m {
            return shape_err(format!("bias length {} != kernels {}", bias.len(), self.m));
        }
        self.bias = Some(BiasAggregates::new(bias, self.n));
        Ok(self)
    }

    /// Reference kernel checksums captured at model load, used to validate
    /// the per-execution copies.
    pub fn with_kernel_reference(mut self, cw1: &'a Tensor4<T>, cw2: &'a Tensor4<T>) -> Self {
        self.kernel_ref = Some((cw1, cw2));
        self
    }

    pub fn with_hook(mut self, hook: &'a mut dyn FaultHook<T>) -> Self {
        self.hook = Some(hook);
        self
    }

    pub fn tolerance(&self) -> Tolerance {
        self.tol
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn e(&self) -> usize {
        self.e
    }

    pub fn inputs(&self) -> &InputChecksums<T> {
        &self.inputs
    }

    /// Output checksums computed so far, in computation order.
    pub fn computed(&self) -> &[ChecksumKind] {
        &self.computed
    }

    pub fn has(&self, kind: ChecksumKind) -> bool {
        self.outputs.contains(kind)
    }

    pub fn ensure(&mut self, kinds: &[ChecksumKind]) -> Result<()> {
        for &kind in kinds {
            if self.outputs.contains(kind) {
                continue;
            }
            let mut t = output_checksum(kind, self.d, self.w, &self.inputs, &self.params, self.imp)?;
            if let Some(hook) = self.hook.as_deref_mut() {
                hook.on_output_checksum(kind, &mut t);
            }
            self.outputs.insert(kind, t);
            self.computed.push(kind);
        }
        Ok(())
    }

    pub fn checksum(&mut self, kind: ChecksumKind) -> Result<&Tensor4<T>> {
        self.ensure(&[kind])?;
        self.outputs.require(kind)
    }

    pub fn outputs(&self) -> &OutputChecksums<T> {
        &self.outputs
    }

    /// Bias-adjusted summations of `o`, without caching.
    pub fn fresh_summations(&self, o: &Tensor4<T>, kinds: &[ChecksumKind]) -> Result<OutputSummations<T>> {
        let mut s = output_summations(o, kinds);
        if let Some(b) = &self.bias {
            b.apply(&mut s)?;
        }
        Ok(s)
    }

    /// Cached bias-adjusted summations; computes any missing kinds.
    pub fn summations(&mut self, o: &Tensor4<T>, kinds: &[ChecksumKind]) -> Result<&OutputSummations<T>> {
        let missing: Vec<ChecksumKind> = match &self.summations {
            Some(s) => kinds.iter().copied().filter(|&k| s.get(k).is_none()).collect(),
            None => kinds.to_vec(),
        };
        if self.summations.is_none() || !missing.is_empty() {
            let fresh = self.fresh_summations(o, &missing)?;
            match &mut self.summations {
                Some(s) => {
                    for k in missing {
                        if let Some(t) = fresh.get(k) {
                            s.insert(k, t.clone());
                        }
                    }
                }
                None => self.summations = Some(fresh),
            }
        }
        Ok(self.summations.as_ref().expect("summations populated"))
    }

    /// Must be called after `o` is modified.
    pub fn invalidate_summations(&mut self) {
        self.summations = None;
    }

    /// Re-derives `Cd1`/`Cd2` from the live fmap and compares the kernel
    /// checksum copies with the load-time references. Cached per execution.
    pub fn verify_inputs(&mut self) -> &InputVerdict {
        if self.verdict.is_none() {
            let mut corrupted = Vec::new();
            let (cd1, cd2) = fmap_checksums(self.d);
            let (abs, _) = fmap_checksums(&self.d.map(|v| v.abs()));
            let weighted_abs = abs.map(|v| v * T::from_index(self.n.max(2) - 1));
            if !tensors_agree(&self.inputs.cd1, &cd1, &abs, &self.tol) {
                corrupted.push(InputChecksumName::Cd1);
            }
            if let Some(stored) = &self.inputs.cd2 {
                if !tensors_agree(stored, &cd2, &weighted_abs, &self.tol) {
                    corrupted.push(InputChecksumName::Cd2);
                }
            }
            if let Some((cw1, cw2)) = self.kernel_ref {
                let zeros = Tensor4::zeros(cw1.dims());
                if !tensors_agree(&self.inputs.cw1, cw1, &zeros, &self.tol) {
                    corrupted.push(InputChecksumName::Cw1);
                }
                if let Some(stored) = &self.inputs.cw2 {
                    if !tensors_agree(stored, cw2, &zeros, &self.tol) {
                        corrupted.push(InputChecksumName::Cw2);
                    }
                }
            }
            self.verdict = Some(InputVerdict { corrupted });
        }
        self.verdict.as_ref().expect("verdict populated")
    }

    /// Ensures the checksums and cached summations for `kinds`, then
    /// returns both.
    pub fn prepare(
        &mut self,
        o: &Tensor4<T>,
        kinds: &[ChecksumKind],
    ) -> Result<(&OutputChecksums<T>, &OutputSummations<T>)> {
        self.ensure(kinds)?;
        self.summations(o, kinds)?;
        Ok((&self.outputs, self.summations.as_ref().expect("summations populated")))
    }

    pub fn take_summations(&mut self) -> Option<OutputSummations<T>> {
        self.summations.take()
    }

    pub fn restore_summations(&mut self, s: Option<OutputSummations<T>>) {
        self.summations = s;
    }

    /// For every output checksum, the largest `|c − s| / bound` over all
    /// positions. A value of at most 1 means the identity holds within
    /// tolerance.
    pub fn identity_ratios(&mut self, o: &Tensor4<T>) -> Result<[f64; 7]> {
        let tol = self.tol;
        let (cs, s) = self.prepare(o, &ChecksumKind::ALL)?;
        let e2 = s.e * s.e;
        let mut out = [0.0f64; 7];
        for kind in ChecksumKind::ALL {
            let c = cs.require(kind)?;
            let sk = s.require(kind)?;
            for (idx, (&cv, &sv)) in c.data().iter().zip(sk.data()).enumerate() {
                let (cf, sf) = (cv.as_f64(), sv.as_f64());
                let bound = tol.bound(cf, sf, s.scale(kind, idx % e2).as_f64());
                let r = (cf - sf).abs() / bound;
                let slot = &mut out[kind.index()];
                *slot = if r.is_nan() { f64::INFINITY } else { slot.max(r) };
            }
        }
        Ok(out)
    }

    /// Tolerance for post-correction checks, [`VERIFY_FACTOR`] times the
    /// detection tolerance.
    pub fn verify_tolerance(&self) -> Tolerance {
        Tolerance::new(self.tol.tau * VERIFY_FACTOR)
    }

    /// Re-verifies `o` against `Co5` (plus `Co6`/`Co7` when already
    /// computed) and the probe checksum. On success the fresh summations
    /// replace the cache.
    pub fn verify_output(&mut self, o: &Tensor4<T>) -> Result<bool> {
        self.ensure(&[ChecksumKind::Co5])?;
        let kinds: Vec<ChecksumKind> = [ChecksumKind::Co5, ChecksumKind::Co6, ChecksumKind::Co7]
            .into_iter()
            .filter(|&k| self.has(k))
            .collect();
        let s = self.fresh_summations(o, &kinds)?;
        let e2 = self.e * self.e;
        let strict = self.verify_tolerance();
        for &kind in &kinds {
            let c = self.outputs.require(kind)?;
            let sk = s.require(kind)?;
            let bad = c
                .data()
                .iter()
                .zip(sk.data())
                .enumerate()
                .any(|(idx, (&cv, &sv))| strict.mismatch(cv, sv, s.scale(kind, idx % e2)));
            if bad {
                return Ok(false);
            }
        }
        if !self.probe_agrees(o)? {
            return Ok(false);
        }
        self.summations = Some(s);
        Ok(true)
    }

    /// Compares `o` with the probe checksum
    /// `(Σ_n a_n·D_n) ⊗ (Σ_m b_m·W_m) = Σ_n Σ_m a_n·b_m·O_nm`.
    pub fn probe_agrees(&mut self, o: &Tensor4<T>) -> Result<bool> {
        if self.probe.is_none() {
            self.probe = Some(self.probe_checksum()?);
        }
        let (sum, magnitude) = self.probe_summation(o);
        let strict = self.verify_tolerance();
        let c = self.probe.as_ref().expect("probe populated");
        Ok(c.data()
            .iter()
            .zip(sum.data())
            .zip(magnitude.data())
            .all(|((&cv, &sv), &a)| !strict.mismatch(cv, sv, a)))
    }

    fn probe_checksum(&self) -> Result<Tensor4<T>> {
        let [n, ch, h, hw] = self.d.dims();
        let mut cd = Tensor4::zeros([1, ch, h, hw]);
        for ni in 0..n {
            let a: T = probe_weight(ni, PROBE_SALT_N);
            for (acc, &v) in cd.data_mut().iter_mut().zip(self.d.block(ni)) {
                *acc = *acc + a * v;
            }
        }
        let [m, chg, r, rw] = self.w.dims();
        let mg = m / self.params.groups;
        let len = self.w.block_len();
        let mut cw = Tensor4::zeros([1, chg * self.params.groups, r, rw]);
        for mi in 0..m {
            let b: T = probe_weight(mi, PROBE_SALT_M);
            let g = mi / mg;
            let dst = &mut cw.data_mut()[g * len..(g + 1) * len];
            for (acc, &v) in dst.iter_mut().zip(self.w.block(mi)) {
                *acc = *acc + b * v;
            }
        }
        let plain = ConvParams {
            groups: 1,
            bias_enabled: false,
            ..self.params
        };
        conv_forward(&cd, &cw, None, &plain, self.imp)
    }

    fn probe_summation(&self, o: &Tensor4<T>) -> (Tensor4<T>, Tensor4<T>) {
        let mut sum = Tensor4::zeros([1, 1, self.e, self.e]);
        let mut magnitude = Tensor4::zeros([1, 1, self.e, self.e]);
        for ni in 0..self.n {
            let a: T = probe_weight(ni, PROBE_SALT_N);
            for mi in 0..self.m {
                let w = a * probe_weight::<T>(mi, PROBE_SALT_M);
                let plane = o.plane(ni, mi);
                for ((s, mg), &v) in sum
                    .data_mut()
                    .iter_mut()
                    .zip(magnitude.data_mut().iter_mut())
                    .zip(plane)
                {
                    *s = *s + w * v;
                    *mg = *mg + w * v.abs();
                }
            }
        }
        if let Some(b) = &self.bias {
            let a_sum = (0..self.n).fold(T::zero(), |acc, ni| acc + probe_weight(ni, PROBE_SALT_N));
            let b_sum = b.bias.iter().enumerate().fold(T::zero(), |acc, (mi, &bv)| {
                acc + probe_weight::<T>(mi, PROBE_SALT_M) * bv
            });
            let adj = a_sum * b_sum;
            sum.data_mut().iter_mut().for_each(|v| *v = *v - adj);
        }
        (sum, magnitude)
    }
}

/// A corrected output leaves only rounding residue, so verification runs
/// tighter than detection.
pub const VERIFY_FACTOR: f64 = 0.1;

pub(crate) const PROBE_SALT_N: u64 = 0x9e37_79b9_7f4a_7c15;
pub(crate) const PROBE_SALT_M: u64 = 0xc2b2_ae3d_27d4_eb4f;

/// Hashed weight in `[1, 2)`, fixed for each `(i, salt)`.
pub(crate) fn probe_weight<T: Element>(i: usize, salt: u64) -> T {
    let mut z = (i as u64).wrapping_add(salt).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 31)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 29;
    T::lit(1.0 + (z >> 11) as f64 / (1u64 << 53) as f64)
}
