//! Run reports: per-layer records, campaign aggregates and rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use convguard::workflow::StageTimings;
use convguard::{ConvImpl, LayerPlan, LayerReport, Resolution, Scheme, Significance};
use serde::{Deserialize, Serialize};

use crate::config::ElementType;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    Protected,
    Campaign,
    Profile,
}

/// Outcome of protecting one layer execution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Protection {
    pub tau: f64,
    pub rc_enabled: bool,
    pub clc_enabled: bool,
    pub detected: bool,
    pub mismatches: usize,
    pub resolving_stage: String,
    pub corrected_blocks: Vec<(usize, usize)>,
    pub recomputed: bool,
    pub kernel_reloaded: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timings: Option<StageTimings>,
}

impl Protection {
    pub fn new(rep: &LayerReport, plan: &LayerPlan, timings: bool) -> Self {
        Self {
            tau: plan.tau,
            rc_enabled: plan.rc_enabled,
            clc_enabled: plan.clc_enabled,
            detected: rep.detected,
            mismatches: rep.mismatches,
            resolving_stage: rep.resolution.stage_name().to_string(),
            corrected_blocks: rep.corrected_blocks.clone(),
            recomputed: rep.recomputed,
            kernel_reloaded: rep.kernel_reloaded,
            timings: timings.then(|| rep.timings.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub name: String,
    pub output_dims: [usize; 4],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_seconds: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub protection: Option<Protection>,
}

/// Final network output: shape and SHA-256 of its little-endian bytes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputSummary {
    pub dims: [usize; 4],
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overhead {
    pub baseline_seconds: f64,
    pub protected_seconds: f64,
    pub percent: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignificanceCounts {
    pub no_effect: usize,
    pub benign: usize,
    pub masked: usize,
    pub significant: usize,
}

impl SignificanceCounts {
    pub fn total(&self) -> usize {
        self.no_effect + self.benign + self.masked + self.significant
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolutionCounts {
    pub clean: usize,
    pub coc: usize,
    pub rc: usize,
    pub clc: usize,
    pub fc: usize,
    pub checksum_discard: usize,
    pub recomputed: usize,
    pub unresolved: usize,
    pub integrity_error: usize,
}

impl ResolutionCounts {
    pub fn record(&mut self, r: Option<Resolution>) {
        let slot = match r {
            None => &mut self.integrity_error,
            Some(Resolution::Clean) => &mut self.clean,
            Some(Resolution::Corrected(Scheme::Coc)) => &mut self.coc,
            Some(Resolution::Corrected(Scheme::Rc)) => &mut self.rc,
            Some(Resolution::Corrected(Scheme::Clc)) => &mut self.clc,
            Some(Resolution::Corrected(_)) => &mut self.fc,
            Some(Resolution::ChecksumDiscard(_)) => &mut self.checksum_discard,
            Some(Resolution::Recomputed) => &mut self.recomputed,
            Some(Resolution::Unresolved) => &mut self.unresolved,
        };
        *slot += 1;
    }

    pub fn corrected(&self) -> usize {
        self.coc + self.rc + self.clc + self.fc
    }

    pub fn total(&self) -> usize {
        self.clean + self.corrected() + self.checksum_discard + self.recomputed + self.unresolved + self.integrity_error
    }

    /// Fraction of corrected faults per scheme; empty when nothing was
    /// corrected.
    pub fn distribution(&self) -> BTreeMap<String, f64> {
        let total = self.corrected();
        if total == 0 {
            return BTreeMap::new();
        }
        [("CoC", self.coc), ("RC", self.rc), ("ClC", self.clc), ("FC", self.fc)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v as f64 / total as f64))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub entry: usize,
    pub layer: usize,
    pub significance: Significance,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub entries: usize,
    pub significance: SignificanceCounts,
    /// Entries where detection fired, of any significance.
    pub detected: usize,
    pub significant_detected: usize,
    pub detection_rate: f64,
    pub resolutions: ResolutionCounts,
    pub distribution: BTreeMap<String, f64>,
    pub significant_recovered: usize,
    pub recovery_rate: f64,
    pub significant_admitted: usize,
    pub failures: Vec<Failure>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seconds: Option<f64>,
}

pub fn rate(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub mode: Mode,
    pub element: ElementType,
    pub seed: u64,
    #[serde(rename = "impl")]
    pub imp: ConvImpl,
    pub layers: Vec<LayerRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overhead: Option<Overhead>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub campaign: Option<CampaignSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plans: Option<BTreeMap<String, LayerPlan>>,
}

impl Report {
    /// 4 when a campaign entry ended in an integrity failure, else 0.
    pub fn exit_code(&self) -> i32 {
        match &self.campaign {
            Some(c) if c.resolutions.integrity_error > 0 => 4,
            _ => 0,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "mode {:?}  element {:?}  seed {}  impl {:?}",
            self.mode, self.element, self.seed, self.imp
        );
        if !self.layers.is_empty() {
            let _ = writeln!(
                s,
                "{:<12} {:>18} {:>10} {:>4} {:>4} {:>9} {:>11} {:>7} {:>10}",
                "layer", "output", "tau", "rc", "clc", "detected", "stage", "blocks", "time(s)"
            );
            for l in &self.layers {
                let dims = format!("{:?}", l.output_dims);
                let secs = |v: Option<f64>| v.map_or("-".to_string(), |t| format!("{t:.3e}"));
                match &l.protection {
                    Some(p) => {
                        let _ = writeln!(
                            s,
                            "{:<12} {:>18} {:>10.1e} {:>4} {:>4} {:>9} {:>11} {:>7} {:>10}",
                            l.name,
                            dims,
                            p.tau,
                            yes(p.rc_enabled),
                            yes(p.clc_enabled),
                            yes(p.detected),
                            p.resolving_stage,
                            p.corrected_blocks.len(),
                            secs(p.timings.as_ref().map(|t| t.total))
                        );
                    }
                    None => {
                        let _ = writeln!(
                            s,
                            "{:<12} {:>18} {:>10} {:>4} {:>4} {:>9} {:>11} {:>7} {:>10}",
                            l.name,
                            dims,
                            "-",
                            "-",
                            "-",
                            "-",
                            "-",
                            "-",
                            secs(l.baseline_seconds)
                        );
                    }
                }
            }
        }
        if let Some(o) = &self.output {
            let _ = writeln!(s, "output {:?} sha256 {}", o.dims, o.sha256);
        }
        if let Some(o) = &self.overhead {
            let _ = writeln!(
                s,
                "overhead {:.2}% (baseline {:.3e}s, protected {:.3e}s)",
                o.percent, o.baseline_seconds, o.protected_seconds
            );
        }
        if let Some(plans) = &self.plans {
            let _ = writeln!(
                s,
                "{:<12} {:>4} {:>4} {:>10} {:>10} {:>10} {:>6}",
                "plan", "rc", "clc", "t0", "t1", "t2", "p_r"
            );
            for (name, p) in plans {
                let _ = writeln!(
                    s,
                    "{:<12} {:>4} {:>4} {:>10.3e} {:>10.3e} {:>10.3e} {:>6.3}",
                    name,
                    yes(p.rc_enabled),
                    yes(p.clc_enabled),
                    p.t0,
                    p.t1,
                    p.t2,
                    p.p_r
                );
            }
        }
        if let Some(c) = &self.campaign {
            let sig = &c.significance;
            let r = &c.resolutions;
            let _ = writeln!(
                s,
                "entries {}: significant {}, benign {}, masked {}, no effect {}",
                c.entries, sig.significant, sig.benign, sig.masked, sig.no_effect
            );
            let _ = writeln!(
                s,
                "detected {} of {} significant ({:.2}%), {} in total",
                c.significant_detected,
                sig.significant,
                100.0 * c.detection_rate,
                c.detected
            );
            let _ = writeln!(
                s,
                "recovered {} of {} significant ({:.2}%), admitted by ground truth {}",
                c.significant_recovered,
                sig.significant,
                100.0 * c.recovery_rate,
                c.significant_admitted
            );
            let _ = writeln!(
                s,
                "resolution: clean {} CoC {} RC {} ClC {} FC {} discard {} recompute {} unresolved {} integrity {}",
                r.clean, r.coc, r.rc, r.clc, r.fc, r.checksum_discard, r.recomputed, r.unresolved, r.integrity_error
            );
            if !c.distribution.is_empty() {
                let parts: Vec<String> = c
                    .distribution
                    .iter()
                    .map(|(k, v)| format!("{k} {:.1}%", 100.0 * v))
                    .collect();
                let _ = writeln!(s, "corrected by scheme: {}", parts.join(", "));
            }
            for f in c.failures.iter().take(20) {
                let _ = writeln!(
                    s,
                    "FAIL entry {} (layer {}, {:?}): {}",
                    f.entry, f.layer, f.significance, f.reason
                );
            }
            if c.failures.len() > 20 {
                let _ = writeln!(s, "... {} more failures", c.failures.len() - 20);
            }
        }
        s
    }
}

fn yes(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}
