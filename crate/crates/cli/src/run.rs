//! Mode execution over a loaded model.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use convguard::fault::{read_corpus, write_corpus};
use convguard::workflow::{profile_layer, WallTimer};
use convguard::{
    campaign, ground_truth, replay, run_protected_layer, CampaignConfig, ConvImpl, ConvLayer, CorpusEntry, CostModel,
    Element, LayerPlan, NoFault, RunOptions, Significance, Tensor4, Tolerance,
};
use sha2::{Digest, Sha256};

use crate::config::{ElementType, ModelConfig};
use crate::error::{CliError, Result};
use crate::report::{
    rate, CampaignSummary, Failure, LayerRecord, Mode, OutputSummary, Overhead, Protection, Report, ResolutionCounts,
    SignificanceCounts,
};
use crate::weights::{self, LayerWeights};

/// Settings of one `run` invocation.
#[derive(Clone, Debug)]
pub struct RunArgs {
    pub mode: Mode,
    pub config: PathBuf,
    pub weights: PathBuf,
    pub corpus: Option<PathBuf>,
    pub plan: Option<PathBuf>,
    pub seed: u64,
    pub tau: Option<f64>,
    pub imp: ConvImpl,
    pub json: Option<PathBuf>,
    /// Raw little-endian bytes of the final output.
    pub output: Option<PathBuf>,
    /// Include wall-clock timings in the report.
    pub timings: bool,
    /// Repetitions per profiled workflow variant.
    pub reps: usize,
}

impl RunArgs {
    pub fn new(mode: Mode, config: impl Into<PathBuf>, weights: impl Into<PathBuf>) -> Self {
        Self {
            mode,
            config: config.into(),
            weights: weights.into(),
            corpus: None,
            plan: None,
            seed: 0,
            tau: None,
            imp: ConvImpl::Direct,
            json: None,
            output: None,
            timings: true,
            reps: 5,
        }
    }
}

/// Runs the requested mode and writes the JSON report, plan and output
/// files it asks for.
pub fn run(args: &RunArgs) -> Result<Report> {
    let cfg = ModelConfig::load(&args.config)?;
    let w = weights::load(&args.weights)?;
    weights::check_against(&cfg, &w)?;
    let report = match cfg.element {
        ElementType::F32 => Runner::<f32>::new(&cfg, &w, args)?.run()?,
        ElementType::F64 => Runner::<f64>::new(&cfg, &w, args)?.run()?,
    };
    if let Some(path) = &args.json {
        std::fs::write(path, report.to_json()).map_err(|e| CliError::io(path, e))?;
    }
    Ok(report)
}

/// Seeded random weights for `config`, written to `weights`.
pub fn init_weights(config: &Path, out: &Path, seed: u64) -> Result<()> {
    let cfg = ModelConfig::load(config)?;
    weights::save(out, &weights::random(&cfg, seed))
}

/// Writes a fault corpus for `config` with the standard campaign settings.
pub fn generate_corpus(config: &Path, out: &Path, runs: usize, seed: u64) -> Result<usize> {
    let cfg = ModelConfig::load(config)?;
    let geos = cfg.geometries()?;
    let camp = match cfg.element {
        ElementType::F32 => CampaignConfig::standard::<f32>(runs, seed),
        ElementType::F64 => CampaignConfig::standard::<f64>(runs, seed),
    };
    let entries = campaign(&geos, &camp)?;
    let file = std::fs::File::create(out).map_err(|e| CliError::io(out, e))?;
    let mut w = BufWriter::new(file);
    write_corpus(&entries, &mut w)?;
    w.flush().map_err(|e| CliError::io(out, e))?;
    Ok(entries.len())
}

pub fn load_plans(path: &Path) -> Result<BTreeMap<String, LayerPlan>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Parse {
        what: "plan file",
        path: path.into(),
        detail: e.to_string(),
    })
}

fn relu<T: Element>(t: &Tensor4<T>) -> Tensor4<T> {
    t.map(|v| if v > T::zero() { v } else { T::zero() })
}

fn le_bytes<T: Element>(t: &Tensor4<T>) -> Vec<u8> {
    let width = (T::BITS / 8) as usize;
    t.data()
        .iter()
        .flat_map(|v| v.to_bits_u64().to_le_bytes().into_iter().take(width))
        .collect()
}

/// Every layer's input, the final output and per-layer times.
struct Chain<T> {
    inputs: Vec<Tensor4<T>>,
    output: Tensor4<T>,
    times: Vec<f64>,
}

struct Runner<'a, T: Element> {
    cfg: &'a ModelConfig,
    args: &'a RunArgs,
    layers: Vec<ConvLayer<T>>,
    plans: Vec<LayerPlan>,
    opts: RunOptions,
}

impl<'a, T: Element> Runner<'a, T> {
    fn new(cfg: &'a ModelConfig, w: &[LayerWeights], args: &'a RunArgs) -> Result<Self> {
        if let Some(t) = args.tau {
            if !(t.is_finite() && t > 0.0) {
                return Err(CliError::Config(format!("--tau must be positive, got {t}")));
            }
        }
        let layers = cfg
            .layers
            .iter()
            .zip(w)
            .map(|(l, lw)| {
                let bias = lw
                    .bias
                    .as_ref()
                    .map(|b| b.iter().map(|&v| T::lit(f64::from(v))).collect());
                ConvLayer::new(l.name.clone(), lw.kernels.cast::<T>(), bias, l.params())
            })
            .collect::<convguard::Result<Vec<_>>>()?;
        let override_tau = args.tau.or(cfg.tau);
        let loaded = match (&args.plan, args.mode) {
            (Some(path), Mode::Protected | Mode::Campaign) => Some(load_plans(path)?),
            _ => None,
        };
        if let Some(map) = &loaded {
            if let Some(extra) = map.keys().find(|k| !cfg.layers.iter().any(|l| &l.name == *k)) {
                return Err(CliError::Config(format!("plan names unknown layer {extra}")));
            }
        }
        let geos = cfg.geometries()?;
        let plans = cfg
            .layers
            .iter()
            .zip(&geos)
            .map(|(l, geo)| {
                let default_tau = override_tau.unwrap_or(T::DEFAULT_TAU);
                let mut plan = match loaded.as_ref().and_then(|m| m.get(&l.name)) {
                    Some(p) => p.clone(),
                    None => {
                        if loaded.is_some() {
                            log::warn!("plan has no entry for layer {}; using the cost model", l.name);
                        }
                        LayerPlan::from_cost_model(geo, default_tau, &CostModel::default())
                    }
                };
                if let Some(t) = override_tau {
                    plan.tau = t;
                }
                if !(plan.tau.is_finite() && plan.tau > 0.0) {
                    return Err(CliError::Config(format!(
                        "layer {}: tau must be positive, got {}",
                        l.name, plan.tau
                    )));
                }
                Ok(plan)
            })
            .collect::<Result<Vec<_>>>()?;
        let opts = RunOptions {
            imp: args.imp,
            tol: Tolerance::for_element::<T>(),
        };
        Ok(Self {
            cfg,
            args,
            layers,
            plans,
            opts,
        })
    }

    fn opts_for(&self, k: usize) -> RunOptions {
        RunOptions {
            tol: self.plans[k].tolerance(),
            ..self.opts
        }
    }

    fn input(&self) -> Tensor4<T> {
        let l = &self.cfg.layers[0];
        Tensor4::random([l.n, l.ch, l.h, l.h], self.args.seed)
    }

    fn report(&self, layers: Vec<LayerRecord>) -> Report {
        Report {
            mode: self.args.mode,
            element: self.cfg.element,
            seed: self.args.seed,
            imp: self.args.imp,
            layers,
            output: None,
            overhead: None,
            campaign: None,
            plans: None,
        }
    }

    fn run(mut self) -> Result<Report> {
        match self.args.mode {
            Mode::Baseline => self.baseline(),
            Mode::Protected => self.protected(),
            Mode::Campaign => self.campaign(),
            Mode::Profile => self.profile(),
        }
    }

    /// Unprotected inference.
    fn forward_chain(&self) -> Result<Chain<T>> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut times = Vec::with_capacity(self.layers.len());
        let mut x = self.input();
        for (k, layer) in self.layers.iter().enumerate() {
            let t = Instant::now();
            let o = layer.forward(&x, self.opts.imp)?;
            times.push(t.elapsed().as_secs_f64());
            inputs.push(std::mem::replace(
                &mut x,
                if k + 1 < self.layers.len() { relu(&o) } else { o },
            ));
        }
        Ok(Chain {
            inputs,
            output: x,
            times,
        })
    }

    fn finish_output(&self, report: &mut Report, out: &Tensor4<T>) -> Result<()> {
        let bytes = le_bytes(out);
        let digest = Sha256::digest(&bytes);
        report.output = Some(OutputSummary {
            dims: out.dims(),
            sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
        });
        if let Some(path) = &self.args.output {
            std::fs::write(path, &bytes).map_err(|e| CliError::io(path, e))?;
        }
        Ok(())
    }

    fn baseline(&mut self) -> Result<Report> {
        let Chain { inputs, output, times } = self.forward_chain()?;
        let records = self
            .layers
            .iter()
            .zip(&inputs)
            .zip(&times)
            .map(|((l, d), &t)| {
                Ok(LayerRecord {
                    name: l.name.clone(),
                    output_dims: l.geometry(d.dims()[0], d.dims()[2])?.output_dims(),
                    baseline_seconds: self.args.timings.then_some(t),
                    protection: None,
                })
            })
            .collect::<Result<_>>()?;
        let mut report = self.report(records);
        self.finish_output(&mut report, &output)?;
        Ok(report)
    }

    fn protected(&mut self) -> Result<Report> {
        let base_times = self.forward_chain()?.times;
        let mut x = self.input();
        let mut records = Vec::with_capacity(self.layers.len());
        let count = self.layers.len();
        let start = Instant::now();
        for (k, &base) in base_times.iter().enumerate() {
            let opts = self.opts_for(k);
            let policy = self.plans[k].policy();
            let (o, rep) =
                run_protected_layer(&mut self.layers[k], &x, &policy, &opts, &mut NoFault).map_err(|e| match e {
                    convguard::Error::Integrity { layer, detail } => {
                        CliError::Integrity(format!("layer {layer}: {detail}"))
                    }
                    other => other.into(),
                })?;
            records.push(LayerRecord {
                name: self.layers[k].name.clone(),
                output_dims: o.dims(),
                baseline_seconds: self.args.timings.then_some(base),
                protection: Some(Protection::new(&rep, &self.plans[k], self.args.timings)),
            });
            x = if k + 1 < count { relu(&o) } else { o };
        }
        let protected = start.elapsed().as_secs_f64();
        let mut report = self.report(records);
        if self.args.timings {
            let baseline: f64 = base_times.iter().sum();
            report.overhead = Some(Overhead {
                baseline_seconds: baseline,
                protected_seconds: protected,
                percent: 100.0 * (protected / baseline.max(f64::MIN_POSITIVE) - 1.0),
            });
        }
        self.finish_output(&mut report, &x)?;
        Ok(report)
    }

    fn read_entries(&self) -> Result<Vec<CorpusEntry>> {
        let path = self
            .args
            .corpus
            .as_ref()
            .ok_or_else(|| CliError::Config("campaign mode needs --corpus".into()))?;
        let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
        read_corpus(BufReader::new(file)).map_err(|e| CliError::Parse {
            what: "corpus",
            path: path.clone(),
            detail: e.to_string(),
        })
    }

    fn campaign(&mut self) -> Result<Report> {
        let entries = self.read_entries()?;
        let geos = self.cfg.geometries()?;
        for (k, e) in entries.iter().enumerate() {
            let geo = geos.get(e.spec.layer).ok_or_else(|| {
                CliError::Config(format!(
                    "corpus entry {k} targets layer {} of a {}-layer model",
                    e.spec.layer,
                    geos.len()
                ))
            })?;
            e.spec
                .validate::<T>(geo)
                .map_err(|err| CliError::Config(format!("corpus entry {k}: {err}")))?;
            if ground_truth(&e.spec, geo) != e.truth {
                return Err(CliError::Config(format!(
                    "corpus entry {k}: ground truth does not match the model"
                )));
            }
        }
        let inputs = self.forward_chain()?.inputs;
        let clean: Vec<Tensor4<T>> = self
            .layers
            .iter()
            .zip(&inputs)
            .map(|(l, d)| l.forward(d, self.opts.imp))
            .collect::<convguard::Result<_>>()?;

        let start = Instant::now();
        let mut sig = SignificanceCounts::default();
        let mut res = ResolutionCounts::default();
        let (mut detected, mut sig_detected, mut recovered, mut admitted) = (0, 0, 0, 0);
        let mut failures = Vec::new();
        for (idx, e) in entries.iter().enumerate() {
            let k = e.spec.layer;
            let opts = self.opts_for(k);
            let policy = self.plans[k].policy();
            let out = replay(
                &mut self.layers[k],
                &inputs[k],
                &clean[k],
                &e.spec,
                &e.truth,
                &policy,
                &opts,
            )?;
            res.record(out.resolution);
            detected += usize::from(out.detected);
            let sub_threshold = match out.significance {
                Significance::NoEffect if !out.admitted => Some(format!(
                    "{:?} contradicts expected {:?}",
                    out.resolution,
                    e.truth.expected_for(&policy)
                )),
                Significance::NoEffect | Significance::Benign if !out.recovered => {
                    Some(format!("output made worse by {:?}", out.resolution))
                }
                _ => None,
            };
            if let Some(reason) = sub_threshold {
                failures.push(Failure {
                    entry: idx,
                    layer: k,
                    significance: out.significance,
                    reason,
                });
            }
            match out.significance {
                Significance::NoEffect => sig.no_effect += 1,
                Significance::Benign => sig.benign += 1,
                Significance::Masked => sig.masked += 1,
                Significance::Significant => {
                    sig.significant += 1;
                    sig_detected += usize::from(out.detected);
                    recovered += usize::from(out.recovered);
                    admitted += usize::from(out.admitted);
                    let reason = if let Some(detail) = &out.integrity_error {
                        Some(format!("integrity failure: {detail}"))
                    } else if !out.detected {
                        Some("not detected".to_string())
                    } else if !out.recovered {
                        Some(format!("output not recovered after {:?}", out.resolution))
                    } else if !out.admitted {
                        Some(format!(
                            "{:?} contradicts expected {:?}",
                            out.resolution,
                            e.truth.expected_for(&policy)
                        ))
                    } else {
                        None
                    };
                    if let Some(reason) = reason {
                        failures.push(Failure {
                            entry: idx,
                            layer: k,
                            significance: out.significance,
                            reason,
                        });
                    }
                }
            }
        }
        let seconds = start.elapsed().as_secs_f64();
        let mut report = self.report(Vec::new());
        report.campaign = Some(CampaignSummary {
            entries: entries.len(),
            detected,
            significant_detected: sig_detected,
            detection_rate: rate(sig_detected, sig.significant),
            distribution: res.distribution(),
            significant_recovered: recovered,
            recovery_rate: rate(recovered, sig.significant),
            significant_admitted: admitted,
            significance: sig,
            resolutions: res,
            failures,
            seconds: self.args.timings.then_some(seconds),
        });
        Ok(report)
    }

    fn profile(&mut self) -> Result<Report> {
        let path = self
            .args
            .plan
            .clone()
            .ok_or_else(|| CliError::Config("profile mode needs --plan to write the plan file".into()))?;
        let mut plans = BTreeMap::new();
        let geos = self.cfg.geometries()?;
        for (k, geo) in geos.iter().enumerate() {
            let opts = self.opts_for(k);
            let tau = self.plans[k].tau;
            let profile = profile_layer(
                &mut self.layers[k],
                geo.n,
                geo.h,
                self.args.reps,
                &opts,
                &mut WallTimer,
                self.args.seed.wrapping_add(k as u64),
            )?;
            plans.insert(self.layers[k].name.clone(), LayerPlan::from_profile(&profile, geo, tau));
        }
        let text = serde_json::to_string_pretty(&plans).expect("plans serialize") + "\n";
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        let mut report = self.report(Vec::new());
        report.plans = Some(plans);
        Ok(report)
    }
}
