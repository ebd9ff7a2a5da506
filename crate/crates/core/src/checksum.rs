//! Input checksums, output checksums, output summations and bias
//! adjustment.
//!
//! Input checksums are weighted sums of fmap blocks (`Cd1 = Σ D_n`,
//! `Cd2 = Σ n·D_n`) and kernel blocks (`Cw1 = Σ W_m`, `Cw2 = Σ m·W_m`).
//! Output checksums are convolutions of those blocks:
//!
//! | kind | definition    | shape      | matching summation    |
//! |------|---------------|------------|-----------------------|
//! | Co1  | `Cd1 ⊗ W`     | `1×M×E×E`  | `Σ_n O_nm`            |
//! | Co2  | `D ⊗ Cw1`     | `N×1×E×E`  | `Σ_m O_nm`            |
//! | Co3  | `Cd2 ⊗ W`     | `1×M×E×E`  | `Σ_n n·O_nm`          |
//! | Co4  | `D ⊗ Cw2`     | `N×1×E×E`  | `Σ_m m·O_nm`          |
//! | Co5  | `Cd1 ⊗ Cw1`   | `1×1×E×E`  | `Σ_n Σ_m O_nm`        |
//! | Co6  | `Cd1 ⊗ Cw2`   | `1×1×E×E`  | `Σ_n Σ_m m·O_nm`      |
//! | Co7  | `Cd2 ⊗ Cw1`   | `1×1×E×E`  | `Σ_n Σ_m n·O_nm`      |
//!
//! With grouped convolution the kernel checksums concatenate the per-group
//! sums along the channel axis, so they always carry `Ch` channels and the
//! checksum convolutions that involve them run ungrouped.

use serde::{Deserialize, Serialize};

use crate::conv::{conv_forward, ConvImpl, ConvParams};
use crate::element::Element;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor4;

/// Relative comparison tolerance.
///
/// A checksum `c` and summation `s` disagree when
/// `|c − s| > τ · max(|c|, |s|, A, 1)`, where `A` is the absolute-value
/// summation of the contributing outputs at that position.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tolerance {
    pub tau: f64,
}

impl Tolerance {
    pub fn new(tau: f64) -> Self {
        Self { tau }
    }

    pub fn for_element<T: Element>() -> Self {
        Self { tau: T::DEFAULT_TAU }
    }

    #[inline]
    pub fn bound(&self, c: f64, s: f64, magnitude: f64) -> f64 {
        self.tau * c.abs().max(s.abs()).max(magnitude).max(1.0)
    }

    /// True when `c` and `s` disagree. Non-finite values always disagree.
    #[inline]
    pub fn mismatch<T: Element>(&self, c: T, s: T, magnitude: T) -> bool {
        let (c, s) = (c.as_f64(), s.as_f64());
        if !(c.is_finite() && s.is_finite()) {
            return true;
        }
        let diff = (c - s).abs();
        diff > self.bound(c, s, magnitude.as_f64())
    }

    /// `|c − s| / max(|c|, |s|, A, 1)`.
    #[inline]
    pub fn rel_dev<T: Element>(&self, c: T, s: T, magnitude: T) -> f64 {
        let (c, s) = (c.as_f64(), s.as_f64());
        (c - s).abs() / c.abs().max(s.abs()).max(magnitude.as_f64()).max(1.0)
    }
}

/// Checksums of the fmap and kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct InputChecksums<T> {
    /// `Σ_n D_n`, `1×Ch×H×H` (unpadded).
    pub cd1: Tensor4<T>,
    /// `Σ_n n·D_n`.
    pub cd2: Option<Tensor4<T>>,
    /// `Σ_m W_m` per group, concatenated to `1×Ch×R×R`.
    pub cw1: Tensor4<T>,
    /// `Σ_m m·W_m` per group, concatenated to `1×Ch×R×R`.
    pub cw2: Option<Tensor4<T>>,
}

/// `(Cd1, Cd2)` of a feature map.
pub fn fmap_checksums<T: Element>(d: &Tensor4<T>) -> (Tensor4<T>, Tensor4<T>) {
    let [n, ch, h, w] = d.dims();
    let mut cd1 = Tensor4::zeros([1, ch, h, w]);
    let mut cd2 = Tensor4::zeros([1, ch, h, w]);
    for ni in 0..n {
        let weight = T::from_index(ni);
        let block = d.block(ni);
        for ((a, b), &v) in cd1.data_mut().iter_mut().zip(cd2.data_mut().iter_mut()).zip(block) {
            *a = *a + v;
            *b = *b + weight * v;
        }
    }
    (cd1, cd2)
}

/// `(Cw1, Cw2)` of a kernel tensor `M×(Ch/G)×R×R` for `groups` groups.
pub fn kernel_checksums<T: Element>(w: &Tensor4<T>, groups: usize) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let [m, chg, r, r2] = w.dims();
    if groups == 0 || m % groups != 0 {
        return shape_err(format!("groups {groups} must divide kernel count {m}"));
    }
    let mg = m / groups;
    let mut cw1 = Tensor4::zeros([1, chg * groups, r, r2]);
    let mut cw2 = Tensor4::zeros([1, chg * groups, r, r2]);
    let group_len = w.block_len();
    for mi in 0..m {
        let g = mi / mg;
        let weight = T::from_index(mi);
        let dst = g * group_len..(g + 1) * group_len;
        let block = w.block(mi);
        let (c1, c2) = (&mut cw1.data_mut()[dst.clone()], &mut cw2.data_mut()[dst]);
        for ((a, b), &v) in c1.iter_mut().zip(c2.iter_mut()).zip(block) {
            *a = *a + v;
            *b = *b + weight * v;
        }
    }
    Ok((cw1, cw2))
}

/// Computes all four input checksums.
pub fn input_checksums<T: Element>(d: &Tensor4<T>, w: &Tensor4<T>, groups: usize) -> Result<InputChecksums<T>> {
    let [_, ch, _, _] = d.dims();
    if w.dims()[1] * groups != ch {
        return shape_err(format!(
            "kernel channels {} × groups {groups} != fmap channels {ch}",
            w.dims()[1]
        ));
    }
    let (cd1, cd2) = fmap_checksums(d);
    let (cw1, cw2) = kernel_checksums(w, groups)?;
    Ok(InputChecksums {
        cd1,
        cd2: Some(cd2),
        cw1,
        cw2: Some(cw2),
    })
}

impl<T: Element> InputChecksums<T> {
    /// Builds the checksums for one layer execution from precomputed
    /// kernel checksums.
    pub fn with_kernel_checksums(d: &Tensor4<T>, cw1: &Tensor4<T>, cw2: &Tensor4<T>) -> Self {
        let (cd1, cd2) = fmap_checksums(d);
        Self {
            cd1,
            cd2: Some(cd2),
            cw1: cw1.clone(),
            cw2: Some(cw2.clone()),
        }
    }

    pub fn get(&self, name: InputChecksumName) -> Option<&Tensor4<T>> {
        match name {
            InputChecksumName::Cd1 => Some(&self.cd1),
            InputChecksumName::Cd2 => self.cd2.as_ref(),
            InputChecksumName::Cw1 => Some(&self.cw1),
            InputChecksumName::Cw2 => self.cw2.as_ref(),
        }
    }

    pub fn get_mut(&mut self, name: InputChecksumName) -> Option<&mut Tensor4<T>> {
        match name {
            InputChecksumName::Cd1 => Some(&mut self.cd1),
            InputChecksumName::Cd2 => self.cd2.as_mut(),
            InputChecksumName::Cw1 => Some(&mut self.cw1),
            InputChecksumName::Cw2 => self.cw2.as_mut(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InputChecksumName {
    Cd1,
    Cd2,
    Cw1,
    Cw2,
}

/// One of the seven output checksums.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ChecksumKind {
    Co1,
    Co2,
    Co3,
    Co4,
    Co5,
    Co6,
    Co7,
}

impl ChecksumKind {
    pub const ALL: [ChecksumKind; 7] = [
        Self::Co1,
        Self::Co2,
        Self::Co3,
        Self::Co4,
        Self::Co5,
        Self::Co6,
        Self::Co7,
    ];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    /// Output tensor dims for a layer with `n` fmaps, `m` kernels, `e`
    /// output size.
    pub fn dims(self, n: usize, m: usize, e: usize) -> [usize; 4] {
        match self {
            Self::Co1 | Self::Co3 => [1, m, e, e],
            Self::Co2 | Self::Co4 => [n, 1, e, e],
            _ => [1, 1, e, e],
        }
    }

    /// Largest block-index weight appearing in the matching summation.
    fn weight_bound(self, n: usize, m: usize) -> usize {
        match self {
            Self::Co3 | Self::Co7 => n.saturating_sub(1).max(1),
            Self::Co4 | Self::Co6 => m.saturating_sub(1).max(1),
            _ => 1,
        }
    }
}

/// Computes one output checksum from the inputs and input checksums.
pub fn output_checksum<T: Element>(
    kind: ChecksumKind,
    d: &Tensor4<T>,
    w: &Tensor4<T>,
    ic: &InputChecksums<T>,
    params: &ConvParams,
    imp: ConvImpl,
) -> Result<Tensor4<T>> {
    let grouped = ConvParams {
        bias_enabled: false,
        ..*params
    };
    let plain = ConvParams { groups: 1, ..grouped };
    let need = |t: &Option<Tensor4<T>>, name: &str| -> Result<Tensor4<T>> {
        t.clone()
            .ok_or_else(|| Error::Internal(format!("{kind:?} requested but input checksum {name} was not computed")))
    };
    match kind {
        ChecksumKind::Co1 => conv_forward(&ic.cd1, w, None, &grouped, imp),
        ChecksumKind::Co2 => conv_forward(d, &ic.cw1, None, &plain, imp),
        ChecksumKind::Co3 => conv_forward(&need(&ic.cd2, "Cd2")?, w, None, &grouped, imp),
        ChecksumKind::Co4 => conv_forward(d, &need(&ic.cw2, "Cw2")?, None, &plain, imp),
        ChecksumKind::Co5 => conv_forward(&ic.cd1, &ic.cw1, None, &plain, imp),
        ChecksumKind::Co6 => conv_forward(&ic.cd1, &need(&ic.cw2, "Cw2")?, None, &plain, imp),
        ChecksumKind::Co7 => conv_forward(&need(&ic.cd2, "Cd2")?, &ic.cw1, None, &plain, imp),
    }
}

/// Output checksums; only the requested ones are present.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OutputChecksums<T> {
    slots: [Option<Tensor4<T>>; 7],
}

impl<T: Element> OutputChecksums<T> {
    pub fn get(&self, kind: ChecksumKind) -> Option<&Tensor4<T>> {
        self.slots[kind.index()].as_ref()
    }

    pub fn get_mut(&mut self, kind: ChecksumKind) -> Option<&mut Tensor4<T>> {
        self.slots[kind.index()].as_mut()
    }

    pub fn contains(&self, kind: ChecksumKind) -> bool {
        self.slots[kind.index()].is_some()
    }

    pub fn insert(&mut self, kind: ChecksumKind, t: Tensor4<T>) {
        self.slots[kind.index()] = Some(t);
    }

    pub fn require(&self, kind: ChecksumKind) -> Result<&Tensor4<T>> {
        self.get(kind)
            .ok_or_else(|| Error::Internal(format!("output checksum {kind:?} not available")))
    }
}

/// Computes the requested output checksums.
pub fn output_checksums<T: Element>(
    which: &[ChecksumKind],
    d: &Tensor4<T>,
    w: &Tensor4<T>,
    ic: &InputChecksums<T>,
    params: &ConvParams,
    imp: ConvImpl,
) -> Result<OutputChecksums<T>> {
    let mut out = OutputChecksums::default();
    for &kind in which {
        if !out.contains(kind) {
            out.insert(kind, output_checksum(kind, d, w, ic, params, imp)?);
        }
    }
    Ok(out)
}

/// Block summations of `O`, plus the absolute-value summation used to scale
/// comparisons.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputSummations<T> {
    pub n: usize,
    pub m: usize,
    pub e: usize,
    slots: [Option<Tensor4<T>>; 7],
    /// `Σ_n Σ_m |O_nm|`, `1×1×E×E`.
    pub magnitude: Tensor4<T>,
}

impl<T: Element> OutputSummations<T> {
    pub fn get(&self, kind: ChecksumKind) -> Option<&Tensor4<T>> {
        self.slots[kind.index()].as_ref()
    }

    pub fn get_mut(&mut self, kind: ChecksumKind) -> Option<&mut Tensor4<T>> {
        self.slots[kind.index()].as_mut()
    }

    pub fn require(&self, kind: ChecksumKind) -> Result<&Tensor4<T>> {
        self.get(kind)
            .ok_or_else(|| Error::Internal(format!("output summation {kind:?} not available")))
    }

    pub(crate) fn insert(&mut self, kind: ChecksumKind, t: Tensor4<T>) {
        self.slots[kind.index()] = Some(t);
    }

    /// Comparison scale for `kind` at in-block position `p`.
    #[inline]
    pub fn scale(&self, kind: ChecksumKind, p: usize) -> T {
        self.magnitude.data()[p] * T::from_index(kind.weight_bound(self.n, self.m))
    }
}

/// Computes the requested summations with ascending-index reduction.
pub fn output_summations<T: Element>(o: &Tensor4<T>, which: &[ChecksumKind]) -> OutputSummations<T> {
    let [n, m, e, _] = o.dims();
    let e2 = e * e;
    let mut slots: [Option<Tensor4<T>>; 7] = Default::default();
    for &kind in which {
        if slots[kind.index()].is_some() {
            continue;
        }
        let mut s = Tensor4::zeros(kind.dims(n, m, e));
        for ni in 0..n {
            for mi in 0..m {
                let plane = o.plane(ni, mi);
                let (dst, weight) = match kind {
                    ChecksumKind::Co1 => (mi, T::one()),
                    ChecksumKind::Co2 => (ni, T::one()),
                    ChecksumKind::Co3 => (mi, T::from_index(ni)),
                    ChecksumKind::Co4 => (ni, T::from_index(mi)),
                    ChecksumKind::Co5 => (0, T::one()),
                    ChecksumKind::Co6 => (0, T::from_index(mi)),
                    ChecksumKind::Co7 => (0, T::from_index(ni)),
                };
                let out = &mut s.data_mut()[dst * e2..(dst + 1) * e2];
                for (a, &v) in out.iter_mut().zip(plane) {
                    *a = *a + weight * v;
                }
            }
        }
        slots[kind.index()] = Some(s);
    }
    let mut magnitude = Tensor4::zeros([1, 1, e, e]);
    for ni in 0..n {
        for mi in 0..m {
            for (a, &v) in magnitude.data_mut().iter_mut().zip(o.plane(ni, mi)) {
                *a = *a + v.abs();
            }
        }
    }
    OutputSummations {
        n,
        m,
        e,
        slots,
        magnitude,
    }
}

/// Precomputed bias terms for summation adjustment.
///
/// Block weights are 0-based, so the weighted row term is
/// `Σ_{n=0}^{N-1} n = N(N−1)/2`.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasAggregates<T> {
    pub bias: Vec<T>,
    pub n: usize,
    pub sum: T,
    pub weighted_sum: T,
}

impl<T: Element> BiasAggregates<T> {
    pub fn new(bias: &[T], n: usize) -> Self {
        let sum = bias.iter().fold(T::zero(), |a, &b| a + b);
        let weighted_sum = bias
            .iter()
            .enumerate()
            .fold(T::zero(), |a, (m, &b)| a + T::from_index(m) * b);
        Self {
            bias: bias.to_vec(),
            n,
            sum,
            weighted_sum,
        }
    }

    fn row_weight(&self) -> T {
        T::from_index(self.n * self.n.saturating_sub(1) / 2)
    }

    /// Removes the bias contribution from every summation present in `s`.
    pub fn apply(&self, s: &mut OutputSummations<T>) -> Result<()> {
        if self.bias.len() != s.m {
            return shape_err(format!("bias length {} != kernels {}", self.bias.len(), s.m));
        }
        let n = T::from_index(self.n);
        let e2 = s.e * s.e;
        let tri = self.row_weight();
        for kind in ChecksumKind::ALL {
            let Some(t) = s.get_mut(kind) else { continue };
            match kind {
                ChecksumKind::Co1 | ChecksumKind::Co3 => {
                    let w = if kind == ChecksumKind::Co1 { n } else { tri };
                    for (mi, plane) in t.data_mut().chunks_mut(e2).enumerate() {
                        let adj = w * self.bias[mi];
                        plane.iter_mut().for_each(|v| *v = *v - adj);
                    }
                }
                _ => {
                    let adj = match kind {
                        ChecksumKind::Co2 => self.sum,
                        ChecksumKind::Co4 => self.weighted_sum,
                        ChecksumKind::Co5 => n * self.sum,
                        ChecksumKind::Co6 => n * self.weighted_sum,
                        ChecksumKind::Co7 => tri * self.sum,
                        _ => unreachable!(),
                    };
                    t.data_mut().iter_mut().for_each(|v| *v = *v - adj);
                }
            }
        }
        Ok(())
    }
}

/// Returns `s` with the bias of an `N`-fmap layer removed.
pub fn bias_adjust<T: Element>(s: &OutputSummations<T>, bias: &[T], n: usize) -> Result<OutputSummations<T>> {
    let mut out = s.clone();
    BiasAggregates::new(bias, n).apply(&mut out)?;
    Ok(out)
}

/// Checks the live kernels against the reference `Cw1` captured at load.
/// `false` means the kernels were corrupted and should be reloaded.
pub fn verify_kernel<T: Element>(w: &Tensor4<T>, cw1_ref: &Tensor4<T>, groups: usize, tol: &Tolerance) -> bool {
    let Ok((fresh, _)) = kernel_checksums(w, groups) else {
        return false;
    };
    if fresh.dims() != cw1_ref.dims() {
        return false;
    }
    let abs = kernel_checksums(&w.map(|v| v.abs()), groups).map(|(a, _)| a);
    let Ok(abs) = abs else { return false };
    fresh
        .data()
        .iter()
        .zip(cw1_ref.data())
        .zip(abs.data())
        .all(|((&c, &r), &a)| !tol.mismatch(r, c, a))
}

/// Compares two tensors elementwise with the given tolerance, using each
/// side's magnitude as scale. Used for input checksum re-verification.
pub(crate) fn tensors_agree<T: Element>(a: &Tensor4<T>, b: &Tensor4<T>, scale: &Tensor4<T>, tol: &Tolerance) -> bool {
    a.dims() == b.dims()
        && a.data()
            .iter()
            .zip(b.data())
            .zip(scale.data())
            .all(|((&x, &y), &s)| !tol.mismatch(x, y, s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blocks(n: usize, f: impl Fn(usize) -> f64) -> Tensor4<f64> {
        Tensor4::from_fn([n, 2, 3, 3], |[i, ..]| f(i))
    }

    #[test]
    fn fmap_checksums_at_two_blocks() {
        let d = Tensor4::<f64>::random([2, 2, 4, 4], 3);
        let (cd1, cd2) = fmap_checksums(&d);
        for p in 0..d.block_len() {
            assert_eq!(cd1.data()[p], d.block(0)[p] + d.block(1)[p]);
            assert_eq!(cd2.data()[p], d.block(1)[p]);
        }
    }

    #[test]
    fn kernel_checksums_index_weighted() {
        let w = blocks(3, |m| m as f64);
        let (cw1, cw2) = kernel_checksums(&w, 1).unwrap();
        assert!(cw1.data().iter().all(|&v| v == 3.0));
        assert!(cw2.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn grouped_kernel_checksums_concatenate_groups() {
        let w = Tensor4::<f64>::random([4, 3, 2, 2], 5);
        let (cw1, cw2) = kernel_checksums(&w, 2).unwrap();
        assert_eq!(cw1.dims(), [1, 6, 2, 2]);
        let len = w.block_len();
        for p in 0..len {
            assert_eq!(cw1.data()[p], w.block(0)[p] + w.block(1)[p]);
            assert_eq!(cw1.data()[len + p], w.block(2)[p] + w.block(3)[p]);
            assert_eq!(cw2.data()[len + p], 2.0 * w.block(2)[p] + 3.0 * w.block(3)[p]);
        }
    }

    #[test]
    fn only_requested_checksums_are_computed() {
        let d = Tensor4::<f64>::random([2, 2, 5, 5], 1);
        let w = Tensor4::<f64>::random([3, 2, 3, 3], 2);
        let ic = input_checksums(&d, &w, 1).unwrap();
        let cs = output_checksums(
            &[ChecksumKind::Co5],
            &d,
            &w,
            &ic,
            &ConvParams::default(),
            ConvImpl::Direct,
        )
        .unwrap();
        assert!(cs.contains(ChecksumKind::Co5));
        assert!(!cs.contains(ChecksumKind::Co1));
        assert_eq!(cs.get(ChecksumKind::Co5).unwrap().dims(), [1, 1, 3, 3]);
    }

    #[test]
    fn missing_cd2_is_internal_error() {
        let d = Tensor4::<f64>::random([2, 1, 3, 3], 1);
        let w = Tensor4::<f64>::random([2, 1, 2, 2], 2);
        let mut ic = input_checksums(&d, &w, 1).unwrap();
        ic.cd2 = None;
        let r = output_checksum(ChecksumKind::Co3, &d, &w, &ic, &ConvParams::default(), ConvImpl::Direct);
        assert!(matches!(r, Err(Error::Internal(_))));
    }

    #[test]
    fn single_block_checksums_collapse_to_output() {
        let d = Tensor4::<f64>::from_vec([1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let w = Tensor4::<f64>::from_vec([1, 1, 2, 2], vec![1., 0., 0., 1.]).unwrap();
        let ic = input_checksums(&d, &w, 1).unwrap();
        let cs = output_checksums(
            &ChecksumKind::ALL,
            &d,
            &w,
            &ic,
            &ConvParams::default(),
            ConvImpl::Direct,
        )
        .unwrap();
        assert_eq!(cs.get(ChecksumKind::Co5).unwrap().data(), &[6., 8., 12., 14.]);
        assert_eq!(cs.get(ChecksumKind::Co1).unwrap().data(), &[6., 8., 12., 14.]);
    }

    #[test]
    fn summations_over_four_blocks() {
        // O_nm = (n + m) · ones, N = M = 2.
        let o = Tensor4::<f64>::from_fn([2, 2, 2, 2], |[n, m, ..]| (n + m) as f64);
        let s = output_summations(&o, &ChecksumKind::ALL);
        let all = |k: ChecksumKind, v: f64| s.get(k).unwrap().data().iter().all(|&x| x == v);
        assert!(all(ChecksumKind::Co5, 4.0));
        assert!(all(ChecksumKind::Co6, 3.0));
        assert!(all(ChecksumKind::Co7, 3.0));
        // So3[m] = O_1m when N = 2.
        let so3 = s.get(ChecksumKind::Co3).unwrap();
        assert_eq!(so3.plane(0, 1), o.plane(1, 1));
        assert_eq!(s.magnitude.data(), &[4.0; 4]);
    }

    #[test]
    fn single_block_summation_is_the_block() {
        let o = Tensor4::<f64>::random([1, 1, 3, 3], 8);
        let s = output_summations(&o, &[ChecksumKind::Co5]);
        assert_eq!(s.get(ChecksumKind::Co5).unwrap().data(), o.data());
    }

    #[test]
    fn bias_adjust_rows() {
        let o = Tensor4::<f64>::filled([2, 1, 1, 1], 10.0);
        let s = output_summations(&o, &[ChecksumKind::Co1]);
        let adj = bias_adjust(&s, &[3.0], 2).unwrap();
        assert_eq!(adj.get(ChecksumKind::Co1).unwrap().data(), &[20.0 - 6.0]);

        let o = Tensor4::<f64>::zeros([2, 2, 1, 1]);
        let s = output_summations(&o, &ChecksumKind::ALL);
        let adj = bias_adjust(&s, &[1.0, 2.0], 2).unwrap();
        assert_eq!(adj.get(ChecksumKind::Co5).unwrap().data(), &[-6.0]);
        assert_eq!(adj.get(ChecksumKind::Co6).unwrap().data(), &[-4.0]);
        // 0-based row weights: Σ n = 1 for N = 2.
        assert_eq!(adj.get(ChecksumKind::Co7).unwrap().data(), &[-3.0]);
        assert_eq!(adj.get(ChecksumKind::Co3).unwrap().data(), &[-1.0, -2.0]);
        assert_eq!(adj.get(ChecksumKind::Co2).unwrap().data(), &[-3.0, -3.0]);
        assert_eq!(adj.get(ChecksumKind::Co4).unwrap().data(), &[-2.0, -2.0]);

        let zero = bias_adjust(&s, &[0.0, 0.0], 2).unwrap();
        assert_eq!(zero, s);
        assert!(bias_adjust(&s, &[1.0], 2).is_err());
    }

    #[test]
    fn kernel_verification() {
        let w = Tensor4::<f32>::random([4, 3, 3, 3], 21);
        let (cw1, _) = kernel_checksums(&w, 1).unwrap();
        let tol = Tolerance::for_element::<f32>();
        assert!(verify_kernel(&w, &cw1, 1, &tol));

        let mut hit = w.clone();
        hit.data_mut()[0] += 1000.0;
        assert!(!verify_kernel(&hit, &cw1, 1, &tol));

        let mut tiny = w.clone();
        tiny.data_mut()[0] += 1e-9;
        assert!(verify_kernel(&tiny, &cw1, 1, &tol));
    }

    #[test]
    fn tolerance_flags_non_finite() {
        let tol = Tolerance::new(1e-4);
        assert!(tol.mismatch(f32::NAN, 1.0, 1.0));
        assert!(tol.mismatch(1.0f32, f32::INFINITY, 1.0));
        assert!(!tol.mismatch(100.0f32, 100.005, 0.0));
        assert!(tol.mismatch(100.0f32, 100.02, 0.0));
        // The magnitude term widens the bound for cancelling sums.
        assert!(!tol.mismatch(0.0f32, 0.01, 200.0));
    }
}
