//! Deterministic fault injection, ground truth and corpus generation.

use std::io::{BufRead, Write};

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checksum::{ChecksumKind, InputChecksumName, InputChecksums};
use crate::conv::ConvGeometry;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::scheme::Scheme;
use crate::tensor::Tensor4;
use crate::workflow::{FaultHook, ProtectionPolicy, Resolution};

/// Names of every checksum the injector can corrupt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ChecksumName {
    Cd1,
    Cd2,
    Cw1,
    Cw2,
    Co1,
    Co2,
    Co3,
    Co4,
    Co5,
    Co6,
    Co7,
}

impl ChecksumName {
    pub const ALL: [ChecksumName; 11] = [
        Self::Cd1,
        Self::Cd2,
        Self::Cw1,
        Self::Cw2,
        Self::Co1,
        Self::Co2,
        Self::Co3,
        Self::Co4,
        Self::Co5,
        Self::Co6,
        Self::Co7,
    ];

    pub fn input(self) -> Option<InputChecksumName> {
        match self {
            Self::Cd1 => Some(InputChecksumName::Cd1),
            Self::Cd2 => Some(InputChecksumName::Cd2),
            Self::Cw1 => Some(InputChecksumName::Cw1),
            Self::Cw2 => Some(InputChecksumName::Cw2),
            _ => None,
        }
    }

    pub fn output(self) -> Option<ChecksumKind> {
        match self {
            Self::Co1 => Some(ChecksumKind::Co1),
            Self::Co2 => Some(ChecksumKind::Co2),
            Self::Co3 => Some(ChecksumKind::Co3),
            Self::Co4 => Some(ChecksumKind::Co4),
            Self::Co5 => Some(ChecksumKind::Co5),
            Self::Co6 => Some(ChecksumKind::Co6),
            Self::Co7 => Some(ChecksumKind::Co7),
            _ => None,
        }
    }

    /// Tensor dims of the checksum for a layer.
    pub fn dims(self, geo: &ConvGeometry) -> [usize; 4] {
        match self {
            Self::Cd1 | Self::Cd2 => [1, geo.ch, geo.h, geo.h],
            Self::Cw1 | Self::Cw2 => [1, geo.ch, geo.r, geo.r],
            other => other.output().expect("output checksum").dims(geo.n, geo.m, geo.e),
        }
    }
}

/// What the fault corrupts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultTarget {
    OutputBlock {
        i: usize,
        j: usize,
    },
    OutputRow {
        i: usize,
    },
    OutputColumn {
        j: usize,
    },
    /// Channel `channel` of fmap block `n`, read through a transient copy.
    Fmap {
        n: usize,
        channel: usize,
    },
    /// Channel `channel` (within its group) of kernel `m`, persistent.
    Kernel {
        m: usize,
        channel: usize,
    },
    /// Plane `(block, channel)` of a checksum tensor.
    Checksum {
        name: ChecksumName,
        block: usize,
        channel: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementSel {
    At { x: usize, y: usize },
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Magnitude {
    Additive {
        value: f64,
    },
    /// `v·(1 + u)` with `u ~ U[0.5, 2]` drawn per element from the seed.
    Multiplicative,
    BitFlip {
        bit: u32,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub layer: usize,
    pub target: FaultTarget,
    pub element: ElementSel,
    pub magnitude: Magnitude,
    pub seed: u64,
}

fn spec_err<T>(msg: String) -> Result<T> {
    Err(Error::FaultSpec(msg))
}

fn check(what: &str, v: usize, bound: usize) -> Result<()> {
    if v < bound {
        Ok(())
    } else {
        spec_err(format!("{what} = {v} out of range 0..{bound}"))
    }
}

impl FaultSpec {
    /// Checks coordinates against the layer and the bit index against `T`.
    pub fn validate<T: Element>(&self, geo: &ConvGeometry) -> Result<()> {
        let side = match self.target {
            FaultTarget::OutputBlock { i, j } => {
                check("i", i, geo.n)?;
                check("j", j, geo.m)?;
                geo.e
            }
            FaultTarget::OutputRow { i } => {
                check("i", i, geo.n)?;
                geo.e
            }
            FaultTarget::OutputColumn { j } => {
                check("j", j, geo.m)?;
                geo.e
            }
            FaultTarget::Fmap { n, channel } => {
                check("n", n, geo.n)?;
                check("channel", channel, geo.ch)?;
                geo.h
            }
            FaultTarget::Kernel { m, channel } => {
                check("m", m, geo.m)?;
                check("channel", channel, geo.channels_per_group())?;
                geo.r
            }
            FaultTarget::Checksum { name, block, channel } => {
                let [a, b, side, _] = name.dims(geo);
                check("block", block, a)?;
                check("channel", channel, b)?;
                side
            }
        };
        if let ElementSel::At { x, y } = self.element {
            check("x", x, side)?;
            check("y", y, side)?;
        }
        match self.magnitude {
            Magnitude::BitFlip { bit } if bit >= T::BITS => spec_err(format!("bit {bit} out of range for {}", T::NAME)),
            Magnitude::Additive { value } if !value.is_finite() => spec_err("non-finite additive magnitude".into()),
            _ => Ok(()),
        }
    }
}

/// Perturbs the selected elements of a `side×side` plane.
fn perturb<T: Element>(plane: &mut [T], side: usize, sel: ElementSel, mag: Magnitude, rng: &mut ChaCha8Rng) {
    let idx: Vec<usize> = match sel {
        ElementSel::At { x, y } => vec![x * side + y],
        ElementSel::All => (0..plane.len()).collect(),
    };
    for k in idx {
        let v = plane[k];
        plane[k] = match mag {
            Magnitude::Additive { value } => v + T::lit(value),
            Magnitude::Multiplicative => v * T::lit(1.0 + rng.gen_range(0.5..=2.0)),
            Magnitude::BitFlip { bit } => T::from_bits_u64(v.to_bits_u64() ^ (1u64 << bit)),
        };
    }
}

/// Applies `spec` to the tensor that its target names. `t` must be the
/// output, fmap, kernels or checksum tensor matching the target.
pub fn inject<T: Element>(t: &mut Tensor4<T>, spec: &FaultSpec) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [n, m, side, _] = t.dims();
    let planes: Vec<(usize, usize)> = match spec.target {
        FaultTarget::OutputBlock { i, j } => vec![(i, j)],
        FaultTarget::OutputRow { i } => (0..m).map(|j| (i, j)).collect(),
        FaultTarget::OutputColumn { j } => (0..n).map(|i| (i, j)).collect(),
        FaultTarget::Fmap { n, channel } => vec![(n, channel)],
        FaultTarget::Kernel { m, channel } => vec![(m, channel)],
        FaultTarget::Checksum { block, channel, .. } => vec![(block, channel)],
    };
    for (a, b) in planes {
        perturb(t.plane_mut(a, b), side, spec.element, spec.magnitude, &mut rng);
    }
}

/// [`FaultHook`] that applies one [`FaultSpec`] at the matching point of a
/// layer execution, at most once.
#[derive(Clone, Debug)]
pub struct FaultInjector {
    spec: FaultSpec,
    fired: bool,
}

impl FaultInjector {
    pub fn new<T: Element>(spec: FaultSpec, geo: &ConvGeometry) -> Result<Self> {
        spec.validate::<T>(geo)?;
        Ok(Self { spec, fired: false })
    }

    pub fn fired(&self) -> bool {
        self.fired
    }

    fn fire<T: Element>(&mut self, t: &mut Tensor4<T>) {
        if !self.fired {
            inject(t, &self.spec);
            self.fired = true;
        }
    }
}

impl<T: Element> FaultHook<T> for FaultInjector {
    fn on_kernels(&mut self, w: &mut Tensor4<T>) {
        if matches!(self.spec.target, FaultTarget::Kernel { .. }) {
            self.fire(w);
        }
    }

    fn on_input_checksums(&mut self, ic: &mut InputChecksums<T>) {
        if let FaultTarget::Checksum { name, .. } = self.spec.target {
            if let Some(t) = name.input().and_then(|n| ic.get_mut(n)) {
                self.fire(t);
            }
        }
    }

    fn conv_fmap(&mut self, d: &Tensor4<T>) -> Option<Tensor4<T>> {
        if matches!(self.spec.target, FaultTarget::Fmap { .. }) && !self.fired {
            let mut copy = d.clone();
            self.fire(&mut copy);
            return Some(copy);
        }
        None
    }

    fn on_output(&mut self, o: &mut Tensor4<T>) {
        if matches!(
            self.spec.target,
            FaultTarget::OutputBlock { .. } | FaultTarget::OutputRow { .. } | FaultTarget::OutputColumn { .. }
        ) {
            self.fire(o);
        }
    }

    fn on_output_checksum(&mut self, kind: ChecksumKind, c: &mut Tensor4<T>) {
        if let FaultTarget::Checksum { name, .. } = self.spec.target {
            if name.output() == Some(kind) {
                self.fire(c);
            }
        }
    }
}

/// Arrangement of the corrupted output blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockPattern {
    None,
    Single,
    Row,
    Column,
    Scattered,
}

impl BlockPattern {
    pub fn of(blocks: &[(usize, usize)]) -> Self {
        match blocks {
            [] => Self::None,
            [_] => Self::Single,
            [(i0, j0), rest @ ..] => {
                if rest.iter().all(|(i, _)| i == i0) {
                    Self::Row
                } else if rest.iter().all(|(_, j)| j == j0) {
                    Self::Column
                } else {
                    Self::Scattered
                }
            }
        }
    }

    /// Schemes able to correct this pattern on their own.
    pub fn ability(self) -> Vec<Scheme> {
        match self {
            Self::Single => Scheme::CORRECTING.to_vec(),
            Self::Row => vec![Scheme::Rc, Scheme::Fc],
            Self::Column => vec![Scheme::Clc, Scheme::Fc],
            Self::None | Self::Scattered => vec![],
        }
    }
}

/// How the fault reaches the protected computation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultEffect {
    /// Output blocks are corrupted.
    Output,
    /// Only checksums that feed detection are corrupted; the output is
    /// intact and the checksums should be discarded.
    ChecksumDiscard,
    /// Nothing observable: the corrupted value is never read, or only
    /// read by correction stages that never run without a detection.
    NoEffect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expected {
    NoEffect,
    Corrected(Scheme),
    ChecksumDiscard,
    Recompute,
    Unresolved,
}

/// Expected behaviour of the protected layer for one fault.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub blocks: Vec<(usize, usize)>,
    pub pattern: BlockPattern,
    pub effect: FaultEffect,
    /// Schemes that resolve the fault when run alone.
    pub ability: Vec<Scheme>,
    pub kernel_reload: bool,
    /// Expected resolution under the full chain CoC → RC → ClC → FC.
    pub expected: Expected,
}

impl GroundTruth {
    pub fn expected_for(&self, policy: &ProtectionPolicy) -> Expected {
        match self.effect {
            FaultEffect::NoEffect => Expected::NoEffect,
            FaultEffect::ChecksumDiscard => {
                if policy.chain.iter().any(|s| self.ability.contains(s)) {
                    Expected::ChecksumDiscard
                } else if policy.recompute {
                    Expected::Recompute
                } else {
                    Expected::Unresolved
                }
            }
            FaultEffect::Output => match policy.chain.iter().find(|s| self.ability.contains(s)) {
                Some(&s) => Expected::Corrected(s),
                None if policy.recompute => Expected::Recompute,
                None => Expected::Unresolved,
            },
        }
    }

    /// True when `resolution` happened no later in the chain than expected.
    /// A clean verdict is admitted for any fault (sub-threshold faults are
    /// invisible by design; callers check significance separately).
    pub fn admits(&self, resolution: &Resolution, policy: &ProtectionPolicy) -> bool {
        let pos = |s: &Scheme| policy.chain.iter().position(|c| c == s);
        match (self.expected_for(policy), resolution) {
            (_, Resolution::Clean) => true,
            (Expected::NoEffect, _) => false,
            (Expected::ChecksumDiscard, r) => matches!(r, Resolution::ChecksumDiscard(_)),
            (Expected::Corrected(e), Resolution::Corrected(s)) => self.ability.contains(s) && pos(s) <= pos(&e),
            (Expected::Corrected(_), _) => false,
            (Expected::Recompute, r) => matches!(r, Resolution::Recomputed),
            (Expected::Unresolved, r) => matches!(r, Resolution::Unresolved),
        }
    }
}

/// Output positions `o` with `u·o + i = p` for some kernel offset `i`.
fn reads(p: usize, geo: &ConvGeometry) -> bool {
    (0..geo.e).any(|o| {
        let start = geo.params.stride * o;
        p >= start && p < start + geo.r
    })
}

/// Derives the ground truth of `spec` from the layer geometry.
pub fn ground_truth(spec: &FaultSpec, geo: &ConvGeometry) -> GroundTruth {
    let all_m = |i: usize| (0..geo.m).map(move |j| (i, j));
    let all_n = |j: usize| (0..geo.n).map(move |i| (i, j));
    let mut kernel_reload = false;
    let (blocks, effect, ability): (Vec<(usize, usize)>, FaultEffect, Option<Vec<Scheme>>) = match spec.target {
        FaultTarget::OutputBlock { i, j } => (vec![(i, j)], FaultEffect::Output, None),
        FaultTarget::OutputRow { i } => (all_m(i).collect(), FaultEffect::Output, None),
        FaultTarget::OutputColumn { j } => (all_n(j).collect(), FaultEffect::Output, None),
        FaultTarget::Fmap { n, channel } => {
            let read = match spec.element {
                ElementSel::At { x, y } => reads(x + geo.params.pad, geo) && reads(y + geo.params.pad, geo),
                ElementSel::All => true,
            };
            if read {
                let g = geo.group_of_channel(channel);
                let mg = geo.kernels_per_group();
                (
                    (g * mg..(g + 1) * mg).map(|j| (n, j)).collect(),
                    FaultEffect::Output,
                    None,
                )
            } else {
                (vec![], FaultEffect::NoEffect, Some(vec![]))
            }
        }
        FaultTarget::Kernel { m, .. } => {
            kernel_reload = true;
            (all_n(m).collect(), FaultEffect::Output, None)
        }
        FaultTarget::Checksum { name, .. } => match name {
            ChecksumName::Cd1 | ChecksumName::Cw1 => {
                (vec![], FaultEffect::ChecksumDiscard, Some(Scheme::CORRECTING.to_vec()))
            }
            ChecksumName::Co5 => (vec![], FaultEffect::ChecksumDiscard, Some(vec![Scheme::Fc])),
            _ => (vec![], FaultEffect::NoEffect, Some(vec![])),
        },
    };
    let pattern = BlockPattern::of(&blocks);
    let ability = ability.unwrap_or_else(|| pattern.ability());
    let mut truth = GroundTruth {
        blocks,
        pattern,
        effect,
        ability,
        kernel_reload,
        expected: Expected::NoEffect,
    };
    truth.expected = truth.expected_for(&ProtectionPolicy::full(true, true));
    truth
}

/// Relative weights of fault targets in a campaign.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetWeights {
    pub output_block: f64,
    pub output_row: f64,
    pub output_column: f64,
    pub fmap: f64,
    pub kernel: f64,
    pub checksum: f64,
}

impl Default for TargetWeights {
    fn default() -> Self {
        Self {
            output_block: 3.0,
            output_row: 2.0,
            output_column: 2.0,
            fmap: 2.0,
            kernel: 1.0,
            checksum: 1.0,
        }
    }
}

impl TargetWeights {
    pub fn uniform() -> Self {
        Self {
            output_block: 1.0,
            output_row: 1.0,
            output_column: 1.0,
            fmap: 1.0,
            kernel: 1.0,
            checksum: 1.0,
        }
    }

    fn as_array(&self) -> [f64; 6] {
        [
            self.output_block,
            self.output_row,
            self.output_column,
            self.fmap,
            self.kernel,
            self.checksum,
        ]
    }
}

/// Relative weights of magnitude kinds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeWeights {
    pub additive: f64,
    pub multiplicative: f64,
    pub bitflip: f64,
}

impl Default for MagnitudeWeights {
    fn default() -> Self {
        Self {
            additive: 1.0,
            multiplicative: 2.0,
            bitflip: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub runs: usize,
    pub seed: u64,
    pub targets: TargetWeights,
    pub magnitudes: MagnitudeWeights,
    /// Inclusive range of bit indices for bit flips.
    pub bits: (u32, u32),
    /// Checksums eligible as fault targets.
    pub checksums: Vec<ChecksumName>,
}

impl CampaignConfig {
    /// Standard settings for element type `T`: bit flips span the upper
    /// mantissa and low exponent bits, and every checksum except `Co5` is
    /// eligible.
    pub fn standard<T: Element>(runs: usize, seed: u64) -> Self {
        let bits = if T::BITS == 32 { (16, 26) } else { (45, 55) };
        Self {
            runs,
            seed,
            targets: TargetWeights::default(),
            magnitudes: MagnitudeWeights::default(),
            bits,
            checksums: ChecksumName::ALL
                .into_iter()
                .filter(|&c| c != ChecksumName::Co5)
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub spec: FaultSpec,
    pub truth: GroundTruth,
}

fn weighted(weights: &[f64], what: &str) -> Result<WeightedIndex<f64>> {
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Config(format!("{what} weights must be finite and nonnegative")));
    }
    WeightedIndex::new(weights).map_err(|e| Error::Config(format!("{what} weights: {e}")))
}

/// Generates `cfg.runs` fault specs, cycling the layer index, with ground
/// truth for each.
pub fn campaign(layers: &[ConvGeometry], cfg: &CampaignConfig) -> Result<Vec<CorpusEntry>> {
    if layers.is_empty() {
        return Err(Error::Config("campaign needs at least one layer".into()));
    }
    let targets = weighted(&cfg.targets.as_array(), "target")?;
    let mags = weighted(
        &[
            cfg.magnitudes.additive,
            cfg.magnitudes.multiplicative,
            cfg.magnitudes.bitflip,
        ],
        "magnitude",
    )?;
    if cfg.bits.0 > cfg.bits.1 {
        return Err(Error::Config(format!("empty bit range {:?}", cfg.bits)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.runs);
    for run in 0..cfg.runs {
        let layer = run % layers.len();
        let geo = &layers[layer];
        let at = |rng: &mut ChaCha8Rng, side: usize| ElementSel::At {
            x: rng.gen_range(0..side),
            y: rng.gen_range(0..side),
        };
        let (target, element) = match targets.sample(&mut rng) {
            0 => {
                let t = FaultTarget::OutputBlock {
                    i: rng.gen_range(0..geo.n),
                    j: rng.gen_range(0..geo.m),
                };
                (t, at(&mut rng, geo.e))
            }
            1 => {
                let t = FaultTarget::OutputRow {
                    i: rng.gen_range(0..geo.n),
                };
                let e = if rng.gen_bool(0.5) {
                    ElementSel::All
                } else {
                    at(&mut rng, geo.e)
                };
                (t, e)
            }
            2 => {
                let t = FaultTarget::OutputColumn {
                    j: rng.gen_range(0..geo.m),
                };
                let e = if rng.gen_bool(0.5) {
                    ElementSel::All
                } else {
                    at(&mut rng, geo.e)
                };
                (t, e)
            }
            3 => {
                let t = FaultTarget::Fmap {
                    n: rng.gen_range(0..geo.n),
                    channel: rng.gen_range(0..geo.ch),
                };
                (t, at(&mut rng, geo.h))
            }
            4 => {
                let t = FaultTarget::Kernel {
                    m: rng.gen_range(0..geo.m),
                    channel: rng.gen_range(0..geo.channels_per_group()),
                };
                (t, at(&mut rng, geo.r))
            }
            _ => {
                if cfg.checksums.is_empty() {
                    return Err(Error::Config(
                        "checksum target weight > 0 but no eligible checksums".into(),
                    ));
                }
                let name = cfg.checksums[rng.gen_range(0..cfg.checksums.len())];
                let [a, b, side, _] = name.dims(geo);
                let t = FaultTarget::Checksum {
                    name,
                    block: rng.gen_range(0..a),
                    channel: rng.gen_range(0..b),
                };
                (t, at(&mut rng, side))
            }
        };
        let magnitude = match mags.sample(&mut rng) {
            0 => {
                let v = rng.gen_range(0.5..50.0);
                Magnitude::Additive {
                    value: if rng.gen_bool(0.5) { v } else { -v },
                }
            }
            1 => Magnitude::Multiplicative,
            _ => Magnitude::BitFlip {
                bit: rng.gen_range(cfg.bits.0..=cfg.bits.1),
            },
        };
        let spec = FaultSpec {
            layer,
            target,
            element,
            magnitude,
            seed: rng.gen(),
        };
        let truth = ground_truth(&spec, geo);
        out.push(CorpusEntry { spec, truth });
    }
    Ok(out)
}

pub fn write_corpus(entries: &[CorpusEntry], mut w: impl Write) -> Result<()> {
    for e in entries {
        let line = serde_json::to_string(e).map_err(|err| Error::Internal(err.to_string()))?;
        writeln!(w, "{line}").map_err(|err| Error::Internal(err.to_string()))?;
    }
    Ok(())
}

pub fn read_corpus(r: impl BufRead) -> Result<Vec<CorpusEntry>> {
    let mut out = Vec::new();
    for (k, line) in r.lines().enumerate() {
        let line = line.map_err(|err| Error::Internal(err.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let e = serde_json::from_str(&line).map_err(|err| Error::FaultSpec(format!("corpus line {}: {err}", k + 1)))?;
        out.push(e);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::ConvParams;

    fn geo() -> ConvGeometry {
        ConvGeometry::new(3, 4, 6, 4, 3, ConvParams::default()).unwrap()
    }

    fn spec(target: FaultTarget, element: ElementSel, magnitude: Magnitude) -> FaultSpec {
        FaultSpec {
            layer: 0,
            target,
            element,
            magnitude,
            seed: 1,
        }
    }

    #[test]
    fn single_element_block_fault() {
        let s = spec(
            FaultTarget::OutputBlock { i: 1, j: 0 },
            ElementSel::At { x: 0, y: 0 },
            Magnitude::Additive { value: -5.0 },
        );
        let o = Tensor4::<f32>::random([3, 4, 4, 4], 2);
        let mut f = o.clone();
        inject(&mut f, &s);
        let changed: Vec<usize> = (0..o.len()).filter(|&k| o.data()[k] != f.data()[k]).collect();
        assert_eq!(changed, vec![o.offset([1, 0, 0, 0])]);
        assert!((f.get([1, 0, 0, 0]) - o.get([1, 0, 0, 0]) + 5.0).abs() < 1e-6);
        let t = ground_truth(&s, &geo());
        assert_eq!(t.pattern, BlockPattern::Single);
        assert_eq!(t.expected, Expected::Corrected(Scheme::Coc));
    }

    #[test]
    fn row_fault_expects_rc_or_fc() {
        let s = spec(
            FaultTarget::OutputRow { i: 1 },
            ElementSel::All,
            Magnitude::Multiplicative,
        );
        let t = ground_truth(&s, &geo());
        assert_eq!(t.blocks.len(), 4);
        assert_eq!(t.expected, Expected::Corrected(Scheme::Rc));
        assert_eq!(
            t.expected_for(&ProtectionPolicy::full(false, true)),
            Expected::Corrected(Scheme::Fc)
        );
    }

    #[test]
    fn cd1_fault_expects_discard() {
        let s = spec(
            FaultTarget::Checksum {
                name: ChecksumName::Cd1,
                block: 0,
                channel: 2,
            },
            ElementSel::At { x: 1, y: 1 },
            Magnitude::BitFlip { bit: 24 },
        );
        assert_eq!(ground_truth(&s, &geo()).expected, Expected::ChecksumDiscard);
    }

    #[test]
    fn fmap_and_kernel_patterns() {
        let fmap = spec(
            FaultTarget::Fmap { n: 2, channel: 1 },
            ElementSel::At { x: 3, y: 3 },
            Magnitude::Multiplicative,
        );
        let t = ground_truth(&fmap, &geo());
        assert_eq!(t.pattern, BlockPattern::Row);
        let kernel = spec(
            FaultTarget::Kernel { m: 1, channel: 0 },
            ElementSel::At { x: 0, y: 2 },
            Magnitude::Multiplicative,
        );
        let t = ground_truth(&kernel, &geo());
        assert_eq!(t.pattern, BlockPattern::Column);
        assert!(t.kernel_reload);

        let strided = ConvGeometry::new(1, 1, 5, 1, 1, ConvParams::with_stride(2)).unwrap();
        let skipped = spec(
            FaultTarget::Fmap { n: 0, channel: 0 },
            ElementSel::At { x: 1, y: 0 },
            Magnitude::Multiplicative,
        );
        assert_eq!(ground_truth(&skipped, &strided).effect, FaultEffect::NoEffect);
    }

    #[test]
    fn out_of_range_specs_are_rejected() {
        let g = geo();
        let bad = [
            spec(
                FaultTarget::OutputBlock { i: 3, j: 0 },
                ElementSel::All,
                Magnitude::Multiplicative,
            ),
            spec(
                FaultTarget::OutputRow { i: 0 },
                ElementSel::At { x: 4, y: 0 },
                Magnitude::Multiplicative,
            ),
            spec(
                FaultTarget::Kernel { m: 0, channel: 4 },
                ElementSel::All,
                Magnitude::Multiplicative,
            ),
            spec(
                FaultTarget::OutputColumn { j: 0 },
                ElementSel::All,
                Magnitude::BitFlip { bit: 32 },
            ),
            spec(
                FaultTarget::Checksum {
                    name: ChecksumName::Co5,
                    block: 1,
                    channel: 0,
                },
                ElementSel::All,
                Magnitude::Multiplicative,
            ),
        ];
        for s in bad {
            assert!(matches!(s.validate::<f32>(&g), Err(Error::FaultSpec(_))), "{s:?}");
        }
        let ok = spec(
            FaultTarget::OutputColumn { j: 0 },
            ElementSel::All,
            Magnitude::BitFlip { bit: 40 },
        );
        assert!(ok.validate::<f64>(&g).is_ok());
    }

    #[test]
    fn corpus_round_trips_through_json_lines() {
        let entries = campaign(&[geo()], &CampaignConfig::standard::<f32>(20, 4)).unwrap();
        let mut buf = Vec::new();
        write_corpus(&entries, &mut buf).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 20);
        assert_eq!(read_corpus(&buf[..]).unwrap(), entries);
    }
}
