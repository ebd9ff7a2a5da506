//! Detection (CoC-D) and the four correction schemes (CoC, RC, ClC, FC).
//!
//! Every scheme works from the checksums and summations held by a
//! [`LayerChecksums`] and patches the output in place. Patches are kept only
//! when the patched output passes re-verification; otherwise the original
//! values are restored and the scheme escalates.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cache::LayerChecksums;
use crate::checksum::{ChecksumKind, OutputChecksums, OutputSummations, Tolerance};
use crate::element::Element;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor4;

/// Width of the acceptance band around an integral location ratio.
pub const LOCATE_BAND: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "coc-d")]
    CocD,
    #[serde(rename = "coc")]
    Coc,
    #[serde(rename = "rc")]
    Rc,
    #[serde(rename = "clc")]
    Clc,
    #[serde(rename = "fc")]
    Fc,
}

impl Scheme {
    pub const CORRECTING: [Scheme; 4] = [Scheme::Coc, Scheme::Rc, Scheme::Clc, Scheme::Fc];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::CocD => "CoC-D",
            Scheme::Coc => "CoC",
            Scheme::Rc => "RC",
            Scheme::Clc => "ClC",
            Scheme::Fc => "FC",
        }
    }

    /// Output checksums the scheme reads.
    pub fn checksums(self) -> &'static [ChecksumKind] {
        use ChecksumKind::*;
        match self {
            Scheme::CocD => &[Co5],
            Scheme::Coc => &[Co5, Co6, Co7],
            Scheme::Rc => &[Co1, Co3],
            Scheme::Clc => &[Co2, Co4],
            Scheme::Fc => &[Co1, Co2, Co5, Co6, Co7],
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "coc-d" | "cocd" => Ok(Scheme::CocD),
            "coc" => Ok(Scheme::Coc),
            "rc" => Ok(Scheme::Rc),
            "clc" => Ok(Scheme::Clc),
            "fc" => Ok(Scheme::Fc),
            other => Err(Error::Config(format!("unknown scheme {other:?}"))),
        }
    }
}

/// Outcome of comparing `Co5` with `So5`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub clean: bool,
    pub e: usize,
    /// Row-major `E×E` map of mismatching positions.
    pub mismatch_mask: Vec<bool>,
    pub max_rel_dev: f64,
}

impl DetectionResult {
    pub fn mismatch_count(&self) -> usize {
        self.mismatch_mask.iter().filter(|&&b| b).count()
    }

    /// Mismatching `(x, y)` positions.
    pub fn mismatches(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.mismatch_mask
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(p, _)| (p / self.e, p % self.e))
    }
}

/// Compares `Co5` against the (bias-adjusted) `So5`.
pub fn detect_coc_d<T: Element>(co5: &Tensor4<T>, s: &OutputSummations<T>, tol: &Tolerance) -> Result<DetectionResult> {
    let so5 = s.require(ChecksumKind::Co5)?;
    if co5.dims() != so5.dims() {
        return shape_err(format!("Co5 {:?} vs So5 {:?}", co5.dims(), so5.dims()));
    }
    let mut mask = Vec::with_capacity(co5.len());
    let mut max_rel_dev = 0.0f64;
    for (p, (&c, &v)) in co5.data().iter().zip(so5.data()).enumerate() {
        let scale = s.scale(ChecksumKind::Co5, p);
        let bad = tol.mismatch(c, v, scale);
        let dev = tol.rel_dev(c, v, scale);
        max_rel_dev = if dev.is_nan() {
            f64::INFINITY
        } else {
            max_rel_dev.max(dev)
        };
        mask.push(bad);
    }
    Ok(DetectionResult {
        clean: !mask.contains(&true),
        e: co5.dims()[3],
        mismatch_mask: mask,
        max_rel_dev,
    })
}

/// Runs CoC-D detection on the layer's output, computing `Co5` and `So5`
/// if not already cached.
pub fn detect<T: Element>(cx: &mut LayerChecksums<'_, T>, o: &Tensor4<T>) -> Result<DetectionResult> {
    let tol = cx.tolerance();
    let (cs, s) = cx.prepare(o, &[ChecksumKind::Co5])?;
    detect_coc_d(cs.require(ChecksumKind::Co5)?, s, &tol)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionStatus {
    Corrected,
    ChecksumCorruptionDiscard,
    Escalate,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionOutcome {
    pub scheme: Scheme,
    pub status: CorrectionStatus,
    /// Output blocks `(n, m)` that were patched.
    pub corrected_blocks: Vec<(usize, usize)>,
}

impl CorrectionOutcome {
    fn new(scheme: Scheme, status: CorrectionStatus) -> Self {
        Self {
            scheme,
            status,
            corrected_blocks: Vec::new(),
        }
    }
}

/// Accepts `round(r)` when it lies within [`LOCATE_BAND`] of `r` and inside
/// `[0, count)`.
pub fn locate(r: f64, count: usize) -> Option<usize> {
    if !r.is_finite() {
        return None;
    }
    let i = r.round();
    if (r - i).abs() <= LOCATE_BAND && i >= 0.0 && (i as usize) < count {
        Some(i as usize)
    } else {
        None
    }
}

/// Runs one correcting scheme. `CocD` only re-verifies.
pub fn correct<T: Element>(
    scheme: Scheme,
    cx: &mut LayerChecksums<'_, T>,
    o: &mut Tensor4<T>,
) -> Result<CorrectionOutcome> {
    match scheme {
        Scheme::CocD => {
            let status = if cx.verify_output(o)? {
                CorrectionStatus::Corrected
            } else {
                CorrectionStatus::Escalate
            };
            Ok(CorrectionOutcome::new(scheme, status))
        }
        Scheme::Coc => correct_coc(cx, o),
        Scheme::Rc => correct_rc(cx, o),
        Scheme::Clc => correct_clc(cx, o),
        Scheme::Fc => correct_fc(cx, o),
    }
}

/// One checksum/summation pair viewed blockwise.
struct Pair<'a, T: Element> {
    kind: ChecksumKind,
    c: &'a [T],
    s: &'a [T],
    sums: &'a OutputSummations<T>,
    tol: Tolerance,
    e2: usize,
}

impl<'a, T: Element> Pair<'a, T> {
    fn new(
        kind: ChecksumKind,
        cs: &'a OutputChecksums<T>,
        sums: &'a OutputSummations<T>,
        tol: Tolerance,
    ) -> Result<Self> {
        Ok(Self {
            kind,
            c: cs.require(kind)?.data(),
            s: sums.require(kind)?.data(),
            sums,
            tol,
            e2: sums.e * sums.e,
        })
    }

    fn blocks(&self) -> usize {
        self.c.len() / self.e2.max(1)
    }

    fn delta_t(&self, b: usize, p: usize) -> T {
        let i = b * self.e2 + p;
        self.c[i] - self.s[i]
    }

    fn delta(&self, b: usize, p: usize) -> f64 {
        self.delta_t(b, p).as_f64()
    }

    fn mismatch(&self, b: usize, p: usize) -> bool {
        let i = b * self.e2 + p;
        self.tol.mismatch(self.c[i], self.s[i], self.sums.scale(self.kind, p))
    }

    fn bound(&self, b: usize, p: usize) -> f64 {
        let i = b * self.e2 + p;
        self.tol.bound(
            self.c[i].as_f64(),
            self.s[i].as_f64(),
            self.sums.scale(self.kind, p).as_f64(),
        )
    }

    /// Flagged `(block, position)` entries.
    fn flagged(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for b in 0..self.blocks() {
            for p in 0..self.e2 {
                if self.mismatch(b, p) {
                    out.push((b, p));
                }
            }
        }
        out
    }
}

/// True when the weighted deviation `num` is explained by index `idx`
/// carrying the whole deviation `delta`.
fn consistent(num: f64, delta: f64, idx: usize, bound: f64) -> bool {
    (num - idx as f64 * delta).abs() <= (LOCATE_BAND * delta.abs()).max(bound)
}

/// Locates the index implied by the weighted pair `w` relative to the plain
/// pair `d`, using the entry with the largest deviation and checking every
/// other entry for consistency.
fn locate_entries<T: Element>(
    d: &Pair<'_, T>,
    w: &Pair<'_, T>,
    entries: &[(usize, usize)],
    count: usize,
) -> Option<usize> {
    let &(b0, p0) = entries
        .iter()
        .max_by(|a, b| d.delta(a.0, a.1).abs().total_cmp(&d.delta(b.0, b.1).abs()))?;
    let idx = locate(w.delta(b0, p0) / d.delta(b0, p0), count)?;
    entries
        .iter()
        .all(|&(b, p)| consistent(w.delta(b, p), d.delta(b, p), idx, w.bound(b, p)))
        .then_some(idx)
}

#[derive(Clone, Copy, Debug)]
struct Fix<T> {
    n: usize,
    m: usize,
    p: usize,
    delta: T,
    flagged: bool,
}

/// Every position once anything is flagged by `entries` or `Co5`, else none.
fn fix_positions<T: Element>(p5: &Pair<'_, T>, entries: &[(usize, usize)]) -> BTreeSet<usize> {
    if entries.is_empty() && (0..p5.e2).all(|p| !p5.mismatch(0, p)) {
        BTreeSet::new()
    } else {
        (0..p5.e2).collect()
    }
}

fn blocks_of<T: Element>(fixes: &[Fix<T>]) -> Vec<(usize, usize)> {
    let mut blocks: BTreeSet<(usize, usize)> = fixes.iter().filter(|f| f.flagged).map(|f| (f.n, f.m)).collect();
    if blocks.is_empty() {
        if let Some(f) = fixes
            .iter()
            .max_by(|a, b| a.delta.as_f64().abs().total_cmp(&b.delta.as_f64().abs()))
        {
            blocks.insert((f.n, f.m));
        }
    }
    blocks.into_iter().collect()
}

/// Applies `fixes`, re-verifies, and rolls back on failure.
fn apply_verified<T: Element>(cx: &mut LayerChecksums<'_, T>, o: &mut Tensor4<T>, fixes: &[Fix<T>]) -> Result<bool> {
    let saved = cx.take_summations();
    let originals: Vec<T> = fixes.iter().map(|f| o.plane(f.n, f.m)[f.p]).collect();
    for f in fixes {
        let v = &mut o.plane_mut(f.n, f.m)[f.p];
        *v = *v + f.delta;
    }
    if cx.verify_output(o)? {
        return Ok(true);
    }
    for (f, &orig) in fixes.iter().zip(&originals) {
        o.plane_mut(f.n, f.m)[f.p] = orig;
    }
    cx.restore_summations(saved);
    Ok(false)
}

fn finish<T: Element>(
    scheme: Scheme,
    cx: &mut LayerChecksums<'_, T>,
    o: &mut Tensor4<T>,
    fixes: Option<Vec<Fix<T>>>,
) -> Result<CorrectionOutcome> {
    let Some(fixes) = fixes else {
        return Ok(CorrectionOutcome::new(scheme, CorrectionStatus::Escalate));
    };
    let ok = if fixes.is_empty() {
        cx.verify_output(o)?
    } else {
        apply_verified(cx, o, &fixes)?
    };
    if ok {
        Ok(CorrectionOutcome {
            scheme,
            status: CorrectionStatus::Corrected,
            corrected_blocks: blocks_of(&fixes),
        })
    } else {
        Ok(CorrectionOutcome::new(scheme, CorrectionStatus::Escalate))
    }
}

fn discard(scheme: Scheme) -> CorrectionOutcome {
    CorrectionOutcome::new(scheme, CorrectionStatus::ChecksumCorruptionDiscard)
}

/// Checksum-of-checksum correction of a single corrupted block.
pub fn correct_coc<T: Element>(cx: &mut LayerChecksums<'_, T>, o: &mut Tensor4<T>) -> Result<CorrectionOutcome> {
    use ChecksumKind::*;
    if !cx.verify_inputs().is_clean() {
        return Ok(discard(Scheme::Coc));
    }
    let (n, m, tol) = (cx.n(), cx.m(), cx.tolerance());
    let fixes = {
        let (cs, s) = cx.prepare(o, &[Co5, Co6, Co7])?;
        let p5 = Pair::new(Co5, cs, s, tol)?;
        let p6 = Pair::new(Co6, cs, s, tol)?;
        let p7 = Pair::new(Co7, cs, s, tol)?;
        let flagged = p5.flagged();
        if flagged.is_empty() {
            Some(Vec::new())
        } else {
            let i = locate_entries(&p5, &p7, &flagged, n);
            let j = locate_entries(&p5, &p6, &flagged, m);
            match (i, j) {
                (Some(i), Some(j)) => Some(
                    (0..p5.e2)
                        .filter(|&p| p5.delta_t(0, p) != T::zero())
                        .map(|p| Fix {
                            n: i,
                            m: j,
                            p,
                            delta: p5.delta_t(0, p),
                            flagged: p5.mismatch(0, p),
                        })
                        .collect(),
                ),
                _ => None,
            }
        }
    };
    finish(Scheme::Coc, cx, o, fixes)
}

/// Row checksum correction: all corrupted blocks lie in one row `i`.
pub fn correct_rc<T: Element>(cx: &mut LayerChecksums<'_, T>, o: &mut Tensor4<T>) -> Result<CorrectionOutcome> {
    line_correct(cx, o, Line::Row)
}

/// Column checksum correction: all corrupted blocks lie in one column `j`.
pub fn correct_clc<T: Element>(cx: &mut LayerChecksums<'_, T>, o: &mut Tensor4<T>) -> Result<CorrectionOutcome> {
    line_correct(cx, o, Line::Column)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Line {
    Row,
    Column,
}

impl Line {
    /// (scheme, plain checksum, weighted checksum)
    fn kinds(self) -> (Scheme, ChecksumKind, ChecksumKind) {
        match self {
            Line::Row => (Scheme::Rc, ChecksumKind::Co1, ChecksumKind::Co3),
            Line::Column => (Scheme::Clc, ChecksumKind::Co2, ChecksumKind::Co4),
        }
    }

    /// Patch for block `b` of the plain checksum on line `idx`.
    fn fix<T>(self, idx: usize, b: usize, p: usize, delta: T, flagged: bool) -> Fix<T> {
        let (n, m) = match self {
            Line::Row => (idx, b),
            Line::Column => (b, idx),
        };
        Fix {
            n,
            m,
            p,
            delta,
            flagged,
        }
    }
}

fn line_fixes<T: Element>(line: Line, idx: usize, plain: &Pair<'_, T>, positions: &BTreeSet<usize>) -> Vec<Fix<T>> {
    let mut fixes = Vec::new();
    for &p in positions {
        for b in 0..plain.blocks() {
            let delta = plain.delta_t(b, p);
            if delta != T::zero() {
                fixes.push(line.fix(idx, b, p, delta, plain.mismatch(b, p)));
            }
        }
    }
    fixes
}

fn line_correct<T: Element>(
    cx: &mut LayerChecksums<'_, T>,
    o: &mut Tensor4<T>,
    line: Line,
) -> Result<CorrectionOutcome> {
    let (scheme, plain_kind, weighted_kind) = line.kinds();
    if !cx.verify_inputs().is_clean() {
        return Ok(discard(scheme));
    }
    let count = match line {
        Line::Row => cx.n(),
        Line::Column => cx.m(),
    };
    let tol = cx.tolerance();
    let fixes = {
        let (cs, s) = cx.prepare(o, &[plain_kind, weighted_kind, ChecksumKind::Co5])?;
        let plain = Pair::new(plain_kind, cs, s, tol)?;
        let weighted = Pair::new(weighted_kind, cs, s, tol)?;
        let p5 = Pair::new(ChecksumKind::Co5, cs, s, tol)?;
        let entries = plain.flagged();
        let positions = fix_positions(&p5, &entries);
        if positions.is_empty() {
            Some(Vec::new())
        } else {
            locate_entries(&plain, &weighted, &entries, count).map(|idx| line_fixes(line, idx, &plain, &positions))
        }
    };
    finish(scheme, cx, o, fixes)
}

/// Full checksum correction.
///
/// `R` is the set of rows whose `Co2` disagrees at some position and `C`
/// the set of columns whose `Co1` disagrees. A single row (column) is
/// patched with the `Co1` (`Co2`) deltas. When `Co2` (`Co1`) agrees
/// everywhere but `Co5` does not, the row (column) is located through
/// `Co7` (`Co6`). When the output is consistent with every checksum except
/// one, the checksums are discarded.
pub fn correct_fc<T: Element>(cx: &mut LayerChecksums<'_, T>, o: &mut Tensor4<T>) -> Result<CorrectionOutcome> {
    use ChecksumKind::*;
    if !cx.verify_inputs().is_clean() {
        return Ok(discard(Scheme::Fc));
    }
    let (n, m, tol) = (cx.n(), cx.m(), cx.tolerance());
    enum Plan<T> {
        Nothing,
        Discard,
        Try(Vec<Vec<Fix<T>>>),
    }
    let plan = {
        let (cs, s) = cx.prepare(o, &[Co1, Co2, Co5, Co6, Co7])?;
        let p1 = Pair::new(Co1, cs, s, tol)?;
        let p2 = Pair::new(Co2, cs, s, tol)?;
        let p5 = Pair::new(Co5, cs, s, tol)?;
        let p6 = Pair::new(Co6, cs, s, tol)?;
        let p7 = Pair::new(Co7, cs, s, tol)?;
        let row_entries = p2.flagged();
        let col_entries = p1.flagged();
        let five = p5.flagged();
        let rows: BTreeSet<usize> = row_entries.iter().map(|&(b, _)| b).collect();
        let cols: BTreeSet<usize> = col_entries.iter().map(|&(b, _)| b).collect();
        let mut all = row_entries.clone();
        all.extend(&col_entries);
        let positions = fix_positions(&p5, &all);

        if rows.is_empty() && cols.is_empty() {
            if five.is_empty() {
                Plan::Nothing
            } else {
                Plan::Discard
            }
        } else if (rows.is_empty() || cols.is_empty()) && five.is_empty() {
            Plan::Discard
        } else {
            let mut candidates: Vec<(Line, usize)> = Vec::new();
            if rows.len() == 1 {
                candidates.push((Line::Row, *rows.first().expect("one row")));
            }
            if cols.len() == 1 {
                candidates.push((Line::Column, *cols.first().expect("one column")));
            }
            if rows.is_empty() {
                if let Some(i) = locate_entries(&p5, &p7, &five, n) {
                    candidates.push((Line::Row, i));
                }
            }
            if cols.is_empty() {
                if let Some(j) = locate_entries(&p5, &p6, &five, m) {
                    candidates.push((Line::Column, j));
                }
            }
            candidates.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1);
            Plan::Try(
                candidates
                    .into_iter()
                    .map(|(line, idx)| match line {
                        Line::Row => line_fixes(Line::Row, idx, &p1, &positions),
                        Line::Column => line_fixes(Line::Column, idx, &p2, &positions),
                    })
                    .collect(),
            )
        }
    };
    match plan {
        Plan::Nothing => finish(Scheme::Fc, cx, o, Some(Vec::new())),
        Plan::Discard => {
            if cx.probe_agrees(o)? {
                Ok(discard(Scheme::Fc))
            } else {
                Ok(CorrectionOutcome::new(Scheme::Fc, CorrectionStatus::Escalate))
            }
        }
        Plan::Try(candidates) => {
            for fixes in candidates {
                if apply_verified(cx, o, &fixes)? {
                    return Ok(CorrectionOutcome {
                        scheme: Scheme::Fc,
                        status: CorrectionStatus::Corrected,
                        corrected_blocks: blocks_of(&fixes),
                    });
                }
            }
            Ok(CorrectionOutcome::new(Scheme::Fc, CorrectionStatus::Escalate))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checksum::input_checksums;
    use crate::conv::{conv_forward, ConvImpl, ConvParams};

    struct Fixture {
        d: Tensor4<f64>,
        w: Tensor4<f64>,
        o: Tensor4<f64>,
        params: ConvParams,
    }

    fn fixture(n: usize, m: usize, seed: u64) -> Fixture {
        let params = ConvParams::default();
        let d = Tensor4::random([n, 2, 5, 5], seed);
        let w = Tensor4::random([m, 2, 3, 3], seed + 1);
        let o = conv_forward(&d, &w, None, &params, ConvImpl::Direct).unwrap();
        Fixture { d, w, o, params }
    }

    fn cache(f: &Fixture) -> LayerChecksums<'_, f64> {
        let ic = input_checksums(&f.d, &f.w, 1).unwrap();
        LayerChecksums::new(
            &f.d,
            &f.w,
            f.params,
            ConvImpl::Direct,
            Tolerance::for_element::<f64>(),
            ic,
        )
        .unwrap()
    }

    fn run(f: &Fixture, o: &mut Tensor4<f64>, scheme: Scheme) -> CorrectionOutcome {
        let mut cx = cache(f);
        assert!(!detect(&mut cx, o).unwrap().clean || o == &f.o);
        correct(scheme, &mut cx, o).unwrap()
    }

    fn close(a: &Tensor4<f64>, b: &Tensor4<f64>) -> bool {
        a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| (x - y).abs() <= 1e-9 * x.abs().max(1.0))
    }

    #[test]
    fn locate_band() {
        assert_eq!(locate(1.004, 3), Some(1));
        assert_eq!(locate(0.98, 3), None);
        assert_eq!(locate(3.0, 3), None);
        assert_eq!(locate(-0.001, 3), Some(0));
        assert_eq!(locate(f64::NAN, 3), None);
    }

    #[test]
    fn detection_flags_the_corrupted_position() {
        let f = fixture(2, 2, 1);
        let mut cx = cache(&f);
        assert!(detect(&mut cx, &f.o).unwrap().clean);

        let mut o = f.o.clone();
        o[[1, 0, 1, 2]] += 5.0;
        let mut cx = cache(&f);
        let det = detect(&mut cx, &o).unwrap();
        assert!(!det.clean);
        assert_eq!(det.mismatches().collect::<Vec<_>>(), vec![(1, 2)]);
    }

    #[test]
    fn cancelling_errors_are_invisible_to_detection() {
        let f = fixture(2, 2, 2);
        let mut o = f.o.clone();
        o[[0, 0, 0, 0]] += 5.0;
        o[[1, 1, 0, 0]] -= 5.0;
        let mut cx = cache(&f);
        assert!(detect(&mut cx, &o).unwrap().clean);
    }

    #[test]
    fn coc_corrects_a_single_block() {
        let f = fixture(2, 2, 3);
        let mut o = f.o.clone();
        o[[1, 0, 0, 0]] -= 5.0;
        let out = run(&f, &mut o, Scheme::Coc);
        assert_eq!(out.status, CorrectionStatus::Corrected);
        assert_eq!(out.corrected_blocks, vec![(1, 0)]);
        assert!(close(&o, &f.o));
    }

    #[test]
    fn coc_escalates_on_two_blocks() {
        let f = fixture(2, 2, 4);
        let mut o = f.o.clone();
        o[[0, 0, 1, 1]] += 3.0;
        o[[0, 1, 1, 1]] += 7.0;
        let before = o.clone();
        let out = run(&f, &mut o, Scheme::Coc);
        assert_eq!(out.status, CorrectionStatus::Escalate);
        assert_eq!(o, before);
    }

    #[test]
    fn coc_discards_corrupted_fmap_checksum() {
        let f = fixture(2, 2, 5);
        let mut ic = input_checksums(&f.d, &f.w, 1).unwrap();
        ic.cd1.data_mut()[0] += 10.0;
        let mut cx = LayerChecksums::new(
            &f.d,
            &f.w,
            f.params,
            ConvImpl::Direct,
            Tolerance::for_element::<f64>(),
            ic,
        )
        .unwrap();
        let mut o = f.o.clone();
        assert!(!detect(&mut cx, &o).unwrap().clean);
        let out = correct_coc(&mut cx, &mut o).unwrap();
        assert_eq!(out.status, CorrectionStatus::ChecksumCorruptionDiscard);
        assert_eq!(o, f.o);
    }

    #[test]
    fn rc_corrects_a_row_and_escalates_on_a_column() {
        let f = fixture(3, 3, 6);
        let mut o = f.o.clone();
        o[[1, 0, 2, 0]] -= 5.0;
        o[[1, 1, 2, 0]] -= 5.0;
        let out = run(&f, &mut o, Scheme::Rc);
        assert_eq!(out.status, CorrectionStatus::Corrected);
        assert_eq!(out.corrected_blocks, vec![(1, 0), (1, 1)]);
        assert!(close(&o, &f.o));

        let mut o = f.o.clone();
        o[[0, 0, 0, 0]] += 4.0;
        o[[1, 0, 0, 0]] += 4.0;
        let out = run(&f, &mut o, Scheme::Rc);
        assert_eq!(out.status, CorrectionStatus::Escalate);
    }

    #[test]
    fn clc_corrects_a_column_and_escalates_on_a_row() {
        let f = fixture(2, 2, 7);
        let mut o = f.o.clone();
        o[[0, 1, 0, 1]] += 2.0;
        o[[1, 1, 0, 1]] += 2.0;
        let out = run(&f, &mut o, Scheme::Clc);
        assert_eq!(out.status, CorrectionStatus::Corrected);
        assert!(close(&o, &f.o));

        let mut o = f.o.clone();
        o[[1, 0, 0, 0]] += 2.0;
        o[[1, 1, 0, 0]] += 3.0;
        assert_eq!(run(&f, &mut o, Scheme::Clc).status, CorrectionStatus::Escalate);
    }

    #[test]
    fn no_mismatch_is_a_no_op() {
        let f = fixture(2, 3, 8);
        for scheme in Scheme::CORRECTING {
            let mut o = f.o.clone();
            let out = run(&f, &mut o, scheme);
            assert_eq!(out.status, CorrectionStatus::Corrected, "{scheme}");
            assert!(out.corrected_blocks.is_empty());
            assert_eq!(o, f.o);
        }
    }

    #[test]
    fn fc_corrects_whole_row_and_single_block() {
        let f = fixture(3, 4, 9);
        let mut o = f.o.clone();
        for m in 0..4 {
            for v in o.plane_mut(0, m) {
                *v += 1.5 * (m as f64 + 1.0);
            }
        }
        let out = run(&f, &mut o, Scheme::Fc);
        assert_eq!(out.status, CorrectionStatus::Corrected);
        assert_eq!(out.corrected_blocks.len(), 4);
        assert!(close(&o, &f.o));

        let mut o = f.o.clone();
        o[[1, 1, 2, 2]] *= 3.0;
        o[[1, 1, 0, 2]] -= 1.0;
        let out = run(&f, &mut o, Scheme::Fc);
        assert_eq!(out.status, CorrectionStatus::Corrected);
        assert_eq!(out.corrected_blocks, vec![(1, 1)]);
        assert!(close(&o, &f.o));
    }

    #[test]
    fn fc_corrects_a_column() {
        let f = fixture(3, 3, 10);
        let mut o = f.o.clone();
        for n in 0..3 {
            o[[n, 2, 1, 1]] += 0.5 + n as f64;
        }
        let out = run(&f, &mut o, Scheme::Fc);
        assert_eq!(out.status, CorrectionStatus::Corrected);
        assert_eq!(out.corrected_blocks, vec![(0, 2), (1, 2), (2, 2)]);
        assert!(close(&o, &f.o));
    }

    #[test]
    fn fc_discards_a_corrupted_row_checksum() {
        let f = fixture(2, 2, 11);
        let mut cx = cache(&f);
        let mut o = f.o.clone();
        cx.ensure(&[ChecksumKind::Co1]).unwrap();
        // Corrupt Co1[1] through a fresh cache built from a tampered copy.
        let ic = input_checksums(&f.d, &f.w, 1).unwrap();
        struct Tamper;
        impl crate::workflow::FaultHook<f64> for Tamper {
            fn on_output_checksum(&mut self, kind: ChecksumKind, c: &mut Tensor4<f64>) {
                if kind == ChecksumKind::Co1 {
                    c.plane_mut(0, 1)[0] += 9.0;
                }
            }
        }
        let mut hook = Tamper;
        let mut cx2 = LayerChecksums::new(
            &f.d,
            &f.w,
            f.params,
            ConvImpl::Direct,
            Tolerance::for_element::<f64>(),
            ic,
        )
        .unwrap()
        .with_hook(&mut hook);
        let out = correct_fc(&mut cx2, &mut o).unwrap();
        assert_eq!(out.status, CorrectionStatus::ChecksumCorruptionDiscard);
        assert_eq!(o, f.o);
        assert!(cx.has(ChecksumKind::Co1));
    }

    #[test]
    fn fc_escalates_on_scattered_blocks() {
        let f = fixture(3, 3, 12);
        let mut o = f.o.clone();
        o[[0, 0, 0, 0]] += 1.0;
        o[[1, 1, 0, 0]] += 2.0;
        o[[2, 2, 1, 1]] += 3.0;
        let before = o.clone();
        assert_eq!(run(&f, &mut o, Scheme::Fc).status, CorrectionStatus::Escalate);
        assert_eq!(o, before);
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in [Scheme::CocD, Scheme::Coc, Scheme::Rc, Scheme::Clc, Scheme::Fc] {
            assert_eq!(s.name().parse::<Scheme>().unwrap(), s);
        }
        assert!("xx".parse::<Scheme>().is_err());
    }
}
