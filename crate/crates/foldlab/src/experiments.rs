//! Config-driven experiment runner.
//!
//! A run is described by one JSON document. [`RunConfig::from_json`] checks
//! every field before anything is computed and reports all problems at once;
//! [`run`] dispatches to the module operations and returns an [`Outcome`]
//! holding one PASS/FAIL line per check, a deterministic CSV table and a JSON
//! report that embeds the resolved configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{json, Map, Value};

use crate::canrel::{nondegeneracy_scan, verify_identities};
use crate::changevars::{basepoint_grid, check_lemma, normalize, verify_taylor_structure, CHANGEVARS_TOL};
use crate::dyadic::{calibrate_c4, envelope_probes, top_level, DyadicPiece};
use crate::error::{Error, Result};
use crate::jets::{default_reach, JetMode};
use crate::models::{DefiningModel, ModelSpec, BUILTIN_MODELS};
use crate::normlab::{
    decoupling_ratio, estimate_opnorm, fit_decay, lp_slab_bound_check, predicted_slab_slopes, slab_linf_norm, DecayFit,
    DecayRow, FiberConfig, SLAB_SLOPE_TOL,
};
use crate::plates::{plate_localization_check, PlateCheckConfig, ScaleMode, ScaleRule};
use crate::suggest;

/// Experiment identifiers accepted in the `experiment` field.
pub const EXPERIMENTS: [&str; 8] = [
    "verify-identities",
    "fold-scan",
    "changevars-check",
    "plate-check",
    "kernel-decay",
    "norm-decay",
    "decouple-ratio",
    "slab-bound",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    VerifyIdentities,
    FoldScan,
    ChangevarsCheck,
    PlateCheck,
    KernelDecay,
    NormDecay,
    DecoupleRatio,
    SlabBound,
}

impl Experiment {
    const ALL: [Experiment; 8] = [
        Experiment::VerifyIdentities,
        Experiment::FoldScan,
        Experiment::ChangevarsCheck,
        Experiment::PlateCheck,
        Experiment::KernelDecay,
        Experiment::NormDecay,
        Experiment::DecoupleRatio,
        Experiment::SlabBound,
    ];

    pub fn parse(name: &str) -> Result<Experiment> {
        EXPERIMENTS
            .iter()
            .position(|e| *e == name)
            .map(|i| Experiment::ALL[i])
            .ok_or_else(|| Error::config_with(format!("unknown experiment `{name}`"), suggest(name, &EXPERIMENTS)))
    }

    pub fn name(self) -> &'static str {
        EXPERIMENTS[Experiment::ALL.iter().position(|e| *e == self).unwrap()]
    }

    /// One-line summary and the config keys the experiment reads.
    pub fn keys(self) -> (&'static str, &'static [&'static str]) {
        match self {
            Experiment::VerifyIdentities => (
                "kernel-field, cone-curvature and V_L identities at random points",
                &["samples", "jet_mode", "tolerance"],
            ),
            Experiment::FoldScan => {
                ("minimum of |Δ1| + |Δ2| over random points", &["samples", "jet_mode", "tolerance"])
            }
            Experiment::ChangevarsCheck => (
                "normalization lemma items (i)-(v) on a grid of base points, plus the Taylor structure at the center",
                &["basepoints", "samples", "ells", "delta0", "tolerance"],
            ),
            Experiment::PlateCheck => (
                "plate containment of normalized gradients, with a negative control",
                &[
                    "ℓ (ells)",
                    "δ₀ (delta0)",
                    "δ₁ (delta1)",
                    "n_samples (samples)",
                    "mode (scale_mode)",
                    "c1",
                    "c2",
                    "eps",
                    "negative_control",
                    "tolerance",
                ],
            ),
            Experiment::KernelDecay => (
                "kernel of R_{k,ℓ} against the envelope C4 U1 U2",
                &["ks", "ells", "span", "probe_bases", "probe_side", "calibration_bases", "tolerance"],
            ),
            Experiment::NormDecay => (
                "operator norms of R_{k,ℓ} and their fitted decay",
                &["ks", "ells", "p", "trials", "fiber", "slope_tolerances"],
            ),
            Experiment::DecoupleRatio => (
                "decoupling ratio over y3-slabs and its growth in ℓ",
                &["ks", "ells", "p", "inputs", "fiber", "tolerance"],
            ),
            Experiment::SlabBound => (
                "slab-localized bounds; p = inf uses the exact kernel duality",
                &["ks", "ells", "p", "trials", "x_samples", "fiber", "tolerance"],
            ),
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Text for `describe <experiment>`.
pub fn describe(name: &str) -> Result<String> {
    let e = Experiment::parse(name)?;
    let (summary, keys) = e.keys();
    let mut out = format!("{e}: {summary}\nkeys:");
    for k in keys {
        out.push_str("\n  ");
        out.push_str(k);
    }
    out.push_str("\ncommon keys: model, experiment, seed, output_dir");
    Ok(out)
}

/// Provenance strings of the built-in models.
pub fn list_models() -> Vec<(&'static str, &'static str)> {
    let notes = [
        "restricted X-ray transform, S = (x1 - x3 y3, (x2 - x3 g(y3))/(1 + β x3)), g = t²/2, β = 0",
        "Heisenberg group, averages over a plane curve (t, g(t)) lifted, g = t²",
        "Heisenberg group, lifted moment curve (t, t², α t³), α = 1/3",
        "translation-invariant averages over γ(s) = (s, s²/2, s³/6) dilated by x3",
    ];
    BUILTIN_MODELS.into_iter().zip(notes).collect()
}

/// An exponent that may be infinite; written as a number or `"inf"`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Exponent(pub f64);

impl Serialize for Exponent {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Exponent {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Exponent(v)),
            Raw::Text(t) if matches!(t.as_str(), "inf" | "infinity" | "∞") => Ok(Exponent(f64::INFINITY)),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got `{t}`"))),
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T> OneOrMany<T> {
    fn into_vec(self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v],
            OneOrMany::Many(v) => v,
        }
    }
}

/// Model given by built-in name or by an inline description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelRef {
    Name(String),
    Spec(ModelSpec),
}

const KEYS: [&str; 29] = [
    "model",
    "experiment",
    "seed",
    "ks",
    "ells",
    "p",
    "samples",
    "trials",
    "inputs",
    "jet_mode",
    "tolerance",
    "slope_tolerances",
    "scale_mode",
    "c1",
    "c2",
    "eps",
    "delta0",
    "delta1",
    "negative_control",
    "basepoints",
    "x_samples",
    "span",
    "probe_bases",
    "probe_side",
    "calibration_bases",
    "fiber",
    "output_dir",
    "model_name",
    "description",
];

/// Fully resolved run configuration. Every field has its final value, so the
/// serialized form is a complete record of what was run.
#[derive(Clone, Serialize)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub model_name: String,
    pub model: ModelSpec,
    pub seed: u64,
    pub ks: Vec<u32>,
    pub ells: Vec<u32>,
    pub p: Vec<Exponent>,
    pub samples: usize,
    pub trials: usize,
    pub inputs: usize,
    pub jet_mode: JetMode,
    pub tolerance: Option<f64>,
    pub slope_tolerances: [f64; 2],
    pub scale_mode: ScaleMode,
    pub c1: f64,
    pub c2: f64,
    pub eps: f64,
    pub delta0: Option<f64>,
    pub delta1: Option<f64>,
    pub negative_control: bool,
    pub basepoints: usize,
    pub x_samples: usize,
    pub span: f64,
    pub probe_bases: usize,
    pub probe_side: usize,
    pub calibration_bases: usize,
    pub fiber: FiberConfig,
    pub output_dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(skip)]
    built: Option<DefiningModel>,
}

struct Reader {
    obj: Map<String, Value>,
    errors: Vec<String>,
    suggestions: Vec<String>,
}

impl Reader {
    fn take<T: DeserializeOwned>(&mut self, key: &str) -> Option<T> {
        let v = self.obj.remove(key)?;
        match serde_json::from_value(v) {
            Ok(t) => Some(t),
            Err(e) => {
                self.errors.push(format!("`{key}`: {e}"));
                None
            }
        }
    }
}

impl RunConfig {
    /// Parse and validate a JSON config document.
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| Error::config(format!("config is not valid JSON: {e}")))?;
        RunConfig::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<RunConfig> {
        let Value::Object(obj) = value else {
            return Err(Error::config("config must be a JSON object"));
        };
        let mut r = Reader { obj, errors: Vec::new(), suggestions: Vec::new() };
        let unknown: Vec<String> = r.obj.keys().filter(|k| !KEYS.contains(&k.as_str())).cloned().collect();
        for k in &unknown {
            let s = suggest(k, &KEYS);
            r.errors.push(match s.first() {
                Some(best) => format!("unknown key `{k}` (did you mean `{best}`?)"),
                None => format!("unknown key `{k}`"),
            });
            r.suggestions.extend(s);
            r.obj.remove(k);
        }

        let experiment = match r.take::<String>("experiment") {
            Some(name) => match Experiment::parse(&name) {
                Ok(e) => Some(e),
                Err(Error::Config { message, suggestions }) => {
                    r.errors.push(message);
                    r.suggestions.extend(suggestions);
                    None
                }
                Err(e) => return Err(e),
            },
            None => {
                if !r.errors.iter().any(|e| e.starts_with("`experiment`")) {
                    r.errors.push("missing key `experiment`".into());
                }
                None
            }
        };
        let model_ref = r.take::<ModelRef>("model");
        let model_name_override = r.take::<String>("model_name");
        let mut model = None;
        match model_ref {
            Some(ModelRef::Name(name)) => match ModelSpec::builtin(&name) {
                Ok(spec) => model = Some((model_name_override.clone().unwrap_or(name), spec)),
                Err(Error::Config { message, suggestions }) => {
                    r.errors.push(message);
                    r.suggestions.extend(suggestions);
                }
                Err(e) => return Err(e),
            },
            Some(ModelRef::Spec(spec)) => {
                let name = model_name_override.clone().unwrap_or_else(|| {
                    serde_json::to_value(spec.kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
                });
                model = Some((name, spec));
            }
            None => {
                if !r.errors.iter().any(|e| e.starts_with("`model`")) {
                    r.errors.push("missing key `model`".into());
                }
            }
        }
        let built = match &model {
            Some((name, spec)) => match spec.build(name) {
                Ok(m) => Some(m),
                Err(e) => {
                    r.errors.push(format!("`model`: {e}"));
                    None
                }
            },
            None => None,
        };

        let seed = r.take::<u64>("seed").unwrap_or(0);
        let ks = r.take::<OneOrMany<u32>>("ks").map(OneOrMany::into_vec);
        let ells = r.take::<OneOrMany<u32>>("ells").map(OneOrMany::into_vec);
        let p = r.take::<OneOrMany<Exponent>>("p").map(OneOrMany::into_vec);
        let samples = r.take::<usize>("samples");
        let trials = r.take::<usize>("trials");
        let inputs = r.take::<usize>("inputs").unwrap_or(8);
        let jet_mode = r.take::<JetMode>("jet_mode").unwrap_or_default();
        let tolerance = r.take::<f64>("tolerance");
        let slope_tolerances = r.take::<[f64; 2]>("slope_tolerances").unwrap_or([0.15, 0.2]);
        let scale_mode = r.take::<ScaleMode>("scale_mode").unwrap_or(ScaleMode::Relaxed);
        let c1 = r.take::<f64>("c1").unwrap_or(1.0);
        let c2 = r.take::<f64>("c2").unwrap_or(1.0);
        let eps = r.take::<f64>("eps").unwrap_or(0.1);
        let delta0 = r.take::<f64>("delta0");
        let delta1 = r.take::<f64>("delta1");
        let negative_control = r.take::<bool>("negative_control").unwrap_or(true);
        let basepoints = r.take::<usize>("basepoints").unwrap_or(5);
        let x_samples = r.take::<usize>("x_samples").unwrap_or(5);
        let span = r.take::<f64>("span").unwrap_or(6.0);
        let probe_bases = r.take::<usize>("probe_bases").unwrap_or(10);
        let probe_side = r.take::<usize>("probe_side").unwrap_or(10);
        let calibration_bases = r.take::<usize>("calibration_bases").unwrap_or(10);
        let fiber = r.take::<FiberConfig>("fiber").unwrap_or_default();
        let output_dir = r.take::<PathBuf>("output_dir").unwrap_or_else(|| PathBuf::from("results"));
        let description = r.take::<String>("description");

        let Some(experiment) = experiment else {
            return Err(aggregate(r.errors, r.suggestions));
        };
        let (ks_default, ells_default, p_default): (Vec<u32>, Vec<u32>, Vec<f64>) = match experiment {
            Experiment::PlateCheck => (vec![], vec![8, 10, 12], vec![]),
            Experiment::ChangevarsCheck => (vec![], vec![6], vec![]),
            Experiment::KernelDecay => (vec![6, 8, 10], vec![0, 1, 2], vec![]),
            Experiment::NormDecay => ((5..=10).collect(), vec![0], vec![2.0]),
            Experiment::DecoupleRatio => (vec![9], vec![1, 2, 3], vec![6.0]),
            Experiment::SlabBound => (vec![9], vec![0, 1, 2, 3], vec![f64::INFINITY]),
            _ => (vec![], vec![], vec![]),
        };
        let ks = ks.unwrap_or(ks_default);
        let ells = ells.unwrap_or(ells_default);
        let p = p.unwrap_or_else(|| p_default.into_iter().map(Exponent).collect());
        let samples = samples.unwrap_or(match experiment {
            Experiment::PlateCheck => 10_000,
            Experiment::ChangevarsCheck => 100,
            _ => 1000,
        });
        let finite_p = p.iter().any(|e| e.0.is_finite() && e.0 != 2.0);
        let trials = trials.unwrap_or(if finite_p { 4 } else { 1 });

        let errs = &mut r.errors;
        let mut need = |ok: bool, msg: String| {
            if !ok {
                errs.push(msg);
            }
        };
        need(samples > 0, "`samples` must be positive".into());
        need(trials > 0, "`trials` must be positive".into());
        need(inputs > 0, "`inputs` must be positive".into());
        need(
            tolerance.is_none_or(|t| t.is_finite() && t >= 0.0),
            "`tolerance` must be a finite non-negative number".into(),
        );
        need(slope_tolerances.iter().all(|t| *t > 0.0), "`slope_tolerances` must be positive".into());
        need(c1 > 0.0 && c2 > 0.0, "`c1` and `c2` must be positive".into());
        need(eps > 0.0 && eps < 0.5, "`eps` must lie in (0, 1/2)".into());
        need(delta0.is_none_or(|d| d > 0.0 && d < 1.0), "`delta0` must lie in (0, 1)".into());
        need(delta1.is_none_or(|d| d > 0.0 && d < 1.0), "`delta1` must lie in (0, 1)".into());
        if let (Some(d0), Some(d1)) = (delta0, delta1) {
            need(d1 < d0, "`delta1` must be smaller than `delta0`".into());
        }
        need(
            delta0.is_some() == delta1.is_some() || experiment != Experiment::PlateCheck,
            "`delta0` and `delta1` must be given together".into(),
        );
        need(basepoints > 0, "`basepoints` must be positive".into());
        need(x_samples > 0, "`x_samples` must be positive".into());
        need(span > 0.0, "`span` must be positive".into());
        need(probe_bases > 0 && probe_side > 0 && calibration_bases > 0, "probe counts must be positive".into());
        need(ks.iter().all(|k| (1..=12).contains(k)), format!("`ks` must lie in 1..=12, got {ks:?}"));
        need(p.iter().all(|e| e.0 >= 2.0), "`p` must lie in [2, inf]".into());
        for msg in fiber.validate() {
            need(false, msg);
        }
        let needs_ks = matches!(
            experiment,
            Experiment::KernelDecay | Experiment::NormDecay | Experiment::DecoupleRatio | Experiment::SlabBound
        );
        if needs_ks {
            need(!ks.is_empty(), "`ks` must not be empty".into());
            need(!ells.is_empty(), "`ells` must not be empty".into());
            need(!p.is_empty() || experiment == Experiment::KernelDecay, "`p` must not be empty".into());
            for &k in &ks {
                for &l in &ells {
                    need(l <= top_level(k), format!("ℓ = {l} exceeds ⌊k/3⌋ = {} at k = {k}", top_level(k)));
                }
            }
        }
        if experiment == Experiment::PlateCheck || experiment == Experiment::ChangevarsCheck {
            need(!ells.is_empty() && ells.iter().all(|l| *l >= 1), "`ells` must be non-empty with ℓ ≥ 1".into());
        }
        if experiment == Experiment::DecoupleRatio {
            need(p.iter().all(|e| e.0 <= 6.0), "decouple-ratio needs p ≤ 6".into());
        }
        if matches!(experiment, Experiment::NormDecay | Experiment::DecoupleRatio)
            || (experiment == Experiment::SlabBound && p.iter().any(|e| e.0.is_finite()))
        {
            if let Some(m) = &built {
                need(
                    m.horizontal,
                    format!("{experiment} needs a horizontal model (S = x' − Φ(x3, y3)); `{}` is not", m.name),
                );
            }
        }
        if !r.errors.is_empty() {
            return Err(aggregate(r.errors, r.suggestions));
        }
        let (model_name, model) = model.expect("checked above");
        Ok(RunConfig {
            experiment,
            model_name,
            model,
            seed,
            ks,
            ells,
            p,
            samples,
            trials,
            inputs,
            jet_mode,
            tolerance,
            slope_tolerances,
            scale_mode,
            c1,
            c2,
            eps,
            delta0,
            delta1,
            negative_control,
            basepoints,
            x_samples,
            span,
            probe_bases,
            probe_side,
            calibration_bases,
            fiber,
            output_dir,
            description,
            built,
        })
    }

    pub fn model(&self) -> &DefiningModel {
        self.built.as_ref().expect("model is built during validation")
    }
}

impl fmt::Debug for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match serde_json::to_string(self) {
            Ok(text) => f.write_str(&text),
            Err(_) => f.debug_struct("RunConfig").field("experiment", &self.experiment).finish_non_exhaustive(),
        }
    }
}

fn aggregate(errors: Vec<String>, mut suggestions: Vec<String>) -> Error {
    suggestions.dedup();
    let message = if errors.len() == 1 {
        errors.into_iter().next().unwrap()
    } else {
        format!("{} problems:\n  - {}", errors.len(), errors.join("\n  - "))
    };
    Error::config_with(message, suggestions)
}

/// One named PASS/FAIL check.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", if self.pass { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// Result of [`run`]: checks, a CSV table and a JSON report.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub experiment: Experiment,
    pub model: String,
    pub checks: Vec<Check>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub report: Value,
}

impl Outcome {
    pub fn pass(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.pass)
    }

    pub fn csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    /// Write `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir)?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let json_path = dir.join(format!("{stem}.json"));
        std::fs::write(&csv_path, self.csv_string()?)?;
        std::fs::write(&json_path, serde_json::to_string_pretty(&self.report)?)?;
        Ok((csv_path, json_path))
    }
}

fn num(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{v:.15e}")
    }
}

fn exponent(p: f64) -> String {
    if p.is_infinite() {
        "inf".into()
    } else {
        format!("{p}")
    }
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
    checks: Vec<Check>,
    extra: Map<String, Value>,
}

impl Table {
    fn new(header: &[&str]) -> Table {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
            checks: Vec::new(),
            extra: Map::new(),
        }
    }

    fn check(&mut self, name: impl Into<String>, pass: bool, detail: impl Into<String>) {
        self.checks.push(Check { name: name.into(), pass, detail: detail.into() });
    }
}

/// Run the configured experiment.
pub fn run(cfg: &RunConfig) -> Result<Outcome> {
    let start = Instant::now();
    let model = cfg.model();
    let table = match cfg.experiment {
        Experiment::VerifyIdentities => run_identities(cfg, model)?,
        Experiment::FoldScan => run_fold_scan(cfg, model)?,
        Experiment::ChangevarsCheck => run_changevars(cfg, model)?,
        Experiment::PlateCheck => run_plates(cfg, model)?,
        Experiment::KernelDecay => run_kernel(cfg, model)?,
        Experiment::NormDecay => run_norms(cfg, model)?,
        Experiment::DecoupleRatio => run_decoupling(cfg, model)?,
        Experiment::SlabBound => run_slab_bound(cfg, model)?,
    };
    let pass = !table.checks.is_empty() && table.checks.iter().all(|c| c.pass);
    let mut report = Map::new();
    report.insert("experiment".into(), json!(cfg.experiment.name()));
    report.insert("model".into(), json!(cfg.model_name));
    report.insert("seed".into(), json!(cfg.seed));
    report.insert("pass".into(), json!(pass));
    report.insert("checks".into(), serde_json::to_value(&table.checks)?);
    for (k, v) in table.extra {
        report.insert(k, v);
    }
    report.insert("elapsed_seconds".into(), json!(start.elapsed().as_secs_f64()));
    report.insert("config".into(), serde_json::to_value(cfg)?);
    Ok(Outcome {
        experiment: cfg.experiment,
        model: cfg.model_name.clone(),
        checks: table.checks,
        header: table.header,
        rows: table.rows,
        report: Value::Object(report),
    })
}

fn run_identities(cfg: &RunConfig, model: &DefiningModel) -> Result<Table> {
    let mut t = Table::new(&["model", "check", "n_samples", "max_residual", "pass"]);
    for r in verify_identities(model, cfg.samples, cfg.seed, cfg.jet_mode)? {
        let pass = match cfg.tolerance {
            Some(tol) => r.max_residual < tol,
            None => r.pass,
        };
        t.rows.push(vec![
            cfg.model_name.clone(),
            r.check.clone(),
            r.n_samples.to_string(),
            num(r.max_residual),
            pass.to_string(),
        ]);
        t.check(
            format!("{}/{}", cfg.model_name, r.check),
            pass,
            format!("max residual {:.3e} over {} points", r.max_residual, r.n_samples),
        );
    }
    Ok(t)
}

fn run_fold_scan(cfg: &RunConfig, model: &DefiningModel) -> Result<Table> {
    let mut t = Table::new(&["model", "n_samples", "min_delta_sum", "x1", "x2", "x3", "y3", "floor", "pass"]);
    let floor = cfg.tolerance.unwrap_or(1e-3);
    let region = model.domain().shrink(default_reach(model.domain(), 4) * 1.01);
    let r = nondegeneracy_scan(model, &region, cfg.samples, cfg.seed, cfg.jet_mode, floor)?;
    let a = r.argmin;
    t.rows.push(vec![
        cfg.model_name.clone(),
        r.n_samples.to_string(),
        num(r.min_delta_sum),
        num(a[0]),
        num(a[1]),
        num(a[2]),
        num(a[3]),
        num(floor),
        r.pass.to_string(),
    ]);
    t.check(
        format!("{}/nondegeneracy", cfg.model_name),
        r.pass,
        format!("min |Δ1|+|Δ2| = {:.6e} (floor {floor:e})", r.min_delta_sum),
    );
    Ok(t)
}

fn run_changevars(cfg: &RunConfig, model: &DefiningModel) -> Result<Table> {
    let mut t = Table::new(&["model", "item", "a1", "a2", "a3", "b", "max_residual", "pass"]);
    let tol = cfg.tolerance.unwrap_or(CHANGEVARS_TOL);
    let grid = basepoint_grid(model, cfg.basepoints);
    let reports = crate::par::map(grid.len(), |i| {
        let (a, b) = grid[i];
        check_lemma(model, a, b, cfg.samples, cfg.seed.wrapping_add(i as u64))
    });
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut all_pass = Vec::new();
    for rep in reports {
        for r in rep? {
            // item (i) is an exact identity; the others use the tolerance
            let pass = if r.lemma_item == "i" { r.max_residual == 0.0 } else { r.max_residual <= tol };
            let bp = r.basepoint;
            t.rows.push(vec![
                cfg.model_name.clone(),
                r.lemma_item.clone(),
                num(bp[0]),
                num(bp[1]),
                num(bp[2]),
                num(bp[3]),
                num(r.max_residual),
                pass.to_string(),
            ]);
            match worst.iter_mut().find(|(k, _)| *k == r.lemma_item) {
                Some(w) => w.1 = w.1.max(r.max_residual),
                None => worst.push((r.lemma_item.clone(), r.max_residual)),
            }
            all_pass.push((r.lemma_item, pass));
        }
    }
    for (item, w) in &worst {
        let pass = all_pass.iter().filter(|(k, _)| k == item).all(|(_, p)| *p);
        let bound = if item == "i" { "exact".to_string() } else { format!("≤ {tol:e}") };
        t.check(
            format!("{}/lemma-{item}", cfg.model_name),
            pass,
            format!("worst residual {w:.3e} over {} base points ({bound})", grid.len()),
        );
    }

    let c = model.domain().center();
    let nz = normalize(model, [c[0], c[1], c[2]], c[3])?;
    let delta0 = cfg.delta0.unwrap_or(0.0625);
    let mut taylor = Vec::new();
    for &ell in &cfg.ells {
        let r = verify_taylor_structure(&nz, ell, delta0, cfg.samples, cfg.seed, true)?;
        let worst = r.ratio_e1.max(r.ratio_e2_tangential).max(r.ratio_e2_normal);
        t.check(
            format!("{}/taylor-structure ℓ={ell}", cfg.model_name),
            r.pass,
            format!("largest error/bound ratio {worst:.3e} at δ0 = {delta0}"),
        );
        taylor.push(serde_json::to_value(&r)?);
        if cfg.negative_control {
            taylor.push(serde_json::to_value(verify_taylor_structure(
                &nz,
                ell,
                delta0,
                cfg.samples,
                cfg.seed,
                false,
            )?)?);
        }
    }
    t.extra.insert("taylor_structure".into(), Value::Array(taylor));
    Ok(t)
}

fn run_plates(cfg: &RunConfig, model: &DefiningModel) -> Result<Table> {
    let mut t = Table::new(&[
        "model",
        "ell",
        "delta0",
        "delta1",
        "mode",
        "hypothesis",
        "n",
        "contained_fraction",
        "contained_fraction_t2_n",
        "margin_t1",
        "margin_t2",
        "margin_n",
        "kappa0",
        "a",
        "m0",
        "acceptance_rate",
    ]);
    let c = model.domain().center();
    let nz = normalize(model, [c[0], c[1], c[2]], c[3])?;
    let m0 = nz.radii.m;
    let rule = match cfg.scale_mode {
        ScaleMode::Strict => ScaleRule::strict(cfg.eps, m0),
        ScaleMode::Relaxed => ScaleRule::relaxed(cfg.eps, m0, cfg.c1, cfg.c2),
    };
    let tol = cfg.tolerance.unwrap_or(0.0);
    let mut reports = Vec::new();
    for &ell in &cfg.ells {
        let scales = match (cfg.delta0, cfg.delta1) {
            (Some(d0), Some(d1)) => Some((d0, d1)),
            _ => rule.widest(ell),
        };
        let Some((delta0, delta1)) = scales else {
            t.check(format!("{}/containment ℓ={ell}", cfg.model_name), false, "admissible scale window is empty");
            continue;
        };
        let runs: &[bool] = if cfg.negative_control { &[true, false] } else { &[true] };
        for &hypothesis in runs {
            let pc = PlateCheckConfig {
                ell,
                delta0,
                delta1,
                n_samples: cfg.samples,
                mode: cfg.scale_mode,
                m0,
                hypothesis,
                seed: cfg.seed.wrapping_add(u64::from(ell)),
            };
            let r = plate_localization_check(&nz, &pc)?;
            t.rows.push(vec![
                cfg.model_name.clone(),
                ell.to_string(),
                num(delta0),
                num(delta1),
                format!("{:?}", r.mode).to_lowercase(),
                hypothesis.to_string(),
                r.n.to_string(),
                num(r.contained_fraction),
                num(r.contained_fraction_t2_n),
                num(r.worst_margins[0]),
                num(r.worst_margins[1]),
                num(r.worst_margins[2]),
                num(r.kappa0),
                num(r.a),
                num(r.m0),
                num(r.acceptance_rate),
            ]);
            if hypothesis {
                t.check(
                    format!("{}/containment ℓ={ell}", cfg.model_name),
                    r.contained_fraction >= 1.0 - tol,
                    format!(
                        "fraction {:.6} of {} samples (T2/N only {:.6}), δ0 = {delta0:e}, δ1 = {delta1:e}",
                        r.contained_fraction, r.n, r.contained_fraction_t2_n
                    ),
                );
            } else {
                t.check(
                    format!("{}/negative-control ℓ={ell}", cfg.model_name),
                    r.contained_fraction < 1.0,
                    format!("fraction {:.6} with the band hypothesis widened", r.contained_fraction),
                );
            }
            reports.push(serde_json::to_value(&r)?);
        }
    }
    t.extra.insert("plate_reports".into(), Value::Array(reports));
    Ok(t)
}

fn run_kernel(cfg: &RunConfig, model: &DefiningModel) -> Result<Table> {
    let mut t = Table::new(&["model", "k", "ell", "c4", "max_check_ratio", "violations", "n_probes"]);
    let stability = cfg.tolerance.unwrap_or(2.0);
    let mut c4s: Vec<(u32, u32, f64)> = Vec::new();
    for &ell in &cfg.ells {
        for &k in &cfg.ks {
            let piece = DyadicPiece::new(model.clone(), k, Some(ell))?;
            let calib = envelope_probes(&piece, cfg.probe_bases, cfg.calibration_bases, cfg.probe_side, cfg.span)?;
            let c4 = calibrate_c4(&calib);
            let probes = envelope_probes(&piece, 0, cfg.probe_bases, cfg.probe_side, cfg.span)?;
            let ratio = calibrate_c4(&probes) / c4;
            let violations = probes.iter().filter(|p| p.kernel_abs > c4 * p.envelope).count();
            t.rows.push(vec![
                cfg.model_name.clone(),
                k.to_string(),
                ell.to_string(),
                num(c4),
                num(ratio),
                violations.to_string(),
                probes.len().to_string(),
            ]);
            t.check(
                format!("{}/domination k={k} ℓ={ell}", cfg.model_name),
                violations == 0,
                format!(
                    "{violations} of {} probes above C4 U1 U2 (C4 = {c4:.4e}, worst ratio {ratio:.4})",
                    probes.len()
                ),
            );
            c4s.push((k, ell, c4));
        }
    }
    for &ell in &cfg.ells {
        let vals: Vec<f64> = c4s.iter().filter(|c| c.1 == ell).map(|c| c.2).collect();
        let (lo, hi) = vals.iter().fold((f64::INFINITY, 0.0f64), |(a, b), v| (a.min(*v), b.max(*v)));
        let spread = hi / lo;
        t.check(
            format!("{}/c4-stability ℓ={ell}", cfg.model_name),
            spread <= stability,
            format!("max/min C4 across k = {spread:.4} (bound {stability})"),
        );
    }
    Ok(t)
}

fn slope_check(t: &mut Table, name: String, fitted: Option<f64>, target: f64, tol: f64) {
    match fitted {
        Some(s) => t.check(name, (s - target).abs() <= tol, format!("slope {s:.4}, target {target:.4} ± {tol}")),
        None => t.check(name, false, "axis does not vary".to_string()),
    }
}

fn fit_value(rows: &[DecayRow]) -> Result<(Option<DecayFit>, Value)> {
    let varying = rows.iter().any(|r| r.k != rows[0].k || r.ell != rows[0].ell);
    if rows.len() < 3 || !varying {
        return Ok((None, Value::Null));
    }
    let fit = fit_decay(rows)?;
    let v = serde_json::to_value(&fit)?;
    Ok((Some(fit), v))
}

/// Targets for `‖R_{k,ℓ}‖_{p→p}`: `−1/p` in k and `2/p − 1/2` in ℓ.
fn norm_targets(p: f64) -> (f64, f64) {
    if p.is_infinite() {
        (0.0, -0.5)
    } else {
        (-1.0 / p, 2.0 / p - 0.5)
    }
}

fn run_norms(cfg: &RunConfig, model: &DefiningModel) -> Result<Table> {
    let mut t = Table::new(&["model", "k", "ell", "p", "value", "method"]);
    let mut fits = Vec::new();
    for &Exponent(p) in &cfg.p {
        let mut rows = Vec::new();
        for &k in &cfg.ks {
            for &ell in &cfg.ells {
                let est = estimate_opnorm(model, k, Some(ell), p, cfg.trials, cfg.seed, &cfg.fiber)?;
                let monotone = est.running_max.windows(2).all(|w| w[1] >= w[0]);
                if !monotone {
                    t.check(
                        format!("{}/running-max k={k} ℓ={ell}", cfg.model_name),
                        false,
                        "running maximum decreased",
                    );
                }
                t.rows.push(vec![
                    cfg.model_name.clone(),
                    k.to_string(),
                    ell.to_string(),
                    exponent(p),
                    num(est.value),
                    serde_json::to_value(est.method)?.as_str().unwrap_or_default().to_string(),
                ]);
                rows.push(DecayRow { k, ell, p, value: est.value });
            }
        }
        let (fit, v) = fit_value(&rows)?;
        let (tk, tl) = norm_targets(p);
        let [tol_k, tol_l] = cfg.slope_tolerances;
        match &fit {
            Some(f) => {
                if f.slope_k.is_some() {
                    slope_check(&mut t, format!("{}/slope_k p={}", cfg.model_name, exponent(p)), f.slope_k, tk, tol_k);
                }
                if f.slope_ell.is_some() {
                    slope_check(
                        &mut t,
                        format!("{}/slope_ell p={}", cfg.model_name, exponent(p)),
                        f.slope_ell,
                        tl,
                        tol_l,
                    );
                }
            }
            None => {
                t.check(format!("{}/fit p={}", cfg.model_name, exponent(p)), false, "fewer than 3 rows; fit invalid")
            }
        }
        fits.push(json!({ "p": Exponent(p), "fit": v, "target_slope_k": tk, "target_slope_ell": tl }));
    }
    t.extra.insert("fits".into(), Value::Array(fits));
    Ok(t)
}

fn run_decoupling(cfg: &RunConfig, model: &DefiningModel) -> Result<Table> {
    let mut t = Table::new(&["model", "k", "ell", "p", "input", "ratio", "slab_count", "floor_ok", "ceiling_ok"]);
    let slack = cfg.tolerance.unwrap_or(0.15);
    let mut fits = Vec::new();
    for &Exponent(p) in &cfg.p {
        let mut means = Vec::new();
        for &k in &cfg.ks {
            for &ell in &cfg.ells {
                let samples = decoupling_ratio(model, k, ell, p, cfg.inputs, cfg.seed, &cfg.fiber)?;
                for (i, s) in samples.iter().enumerate() {
                    t.rows.push(vec![
                        cfg.model_name.clone(),
                        k.to_string(),
                        ell.to_string(),
                        exponent(p),
                        i.to_string(),
                        num(s.ratio),
                        s.slab_count.to_string(),
                        s.floor_ok.to_string(),
                        s.ceiling_ok.to_string(),
                    ]);
                }
                let ok = samples.iter().all(|s| s.floor_ok && s.ceiling_ok);
                let (lo, hi) =
                    samples.iter().fold((f64::INFINITY, 0.0f64), |(a, b), s| (a.min(s.ratio), b.max(s.ratio)));
                t.check(
                    format!("{}/invariants k={k} ℓ={ell} p={}", cfg.model_name, exponent(p)),
                    ok,
                    format!(
                        "ratios in [{lo:.4}, {hi:.4}], {} slabs",
                        samples.iter().map(|s| s.slab_count).max().unwrap_or(0)
                    ),
                );
                let mean = samples.iter().map(|s| s.ratio).sum::<f64>() / samples.len() as f64;
                means.push(DecayRow { k, ell, p, value: mean });
            }
        }
        let (fit, v) = fit_value(&means)?;
        let bound = 0.5 - 1.0 / p + slack;
        if let Some(f) = &fit {
            match f.slope_ell {
                Some(s) => t.check(
                    format!("{}/slope_ell p={}", cfg.model_name, exponent(p)),
                    s <= bound,
                    format!("slope of log2(mean ratio) {s:.4} (bound {bound:.4})"),
                ),
                None => t.check(format!("{}/slope_ell p={}", cfg.model_name, exponent(p)), false, "ℓ does not vary"),
            }
        }
        fits.push(json!({ "p": Exponent(p), "fit": v, "means": means, "slope_bound": bound }));
    }
    t.extra.insert("fits".into(), Value::Array(fits));
    Ok(t)
}

fn run_slab_bound(cfg: &RunConfig, model: &DefiningModel) -> Result<Table> {
    let mut t = Table::new(&["model", "k", "ell", "p", "value", "constant"]);
    let mut fits = Vec::new();
    for &Exponent(p) in &cfg.p {
        if p.is_infinite() {
            let spread_bound = cfg.tolerance.unwrap_or(2.0);
            let mut rows = Vec::new();
            for &k in &cfg.ks {
                let mut consts = Vec::new();
                for &ell in &cfg.ells {
                    let v = slab_linf_norm(model, k, ell, cfg.x_samples)?;
                    let c = v * 2f64.powi(ell as i32);
                    t.rows.push(vec![
                        cfg.model_name.clone(),
                        k.to_string(),
                        ell.to_string(),
                        "inf".into(),
                        num(v),
                        num(c),
                    ]);
                    consts.push(c);
                    rows.push(DecayRow { k, ell, p, value: v });
                }
                let (lo, hi) = consts.iter().fold((f64::INFINITY, 0.0f64), |(a, b), v| (a.min(*v), b.max(*v)));
                t.check(
                    format!("{}/linf-constant k={k}", cfg.model_name),
                    hi / lo <= spread_bound,
                    format!("2^ℓ ‖R_{{k,ℓ}}‖ in [{lo:.5}, {hi:.5}], spread {:.4} (bound {spread_bound})", hi / lo),
                );
            }
            let (_, v) = fit_value(&rows)?;
            fits.push(json!({ "p": "inf", "fit": v }));
        } else {
            let (rows, fit, pass) =
                lp_slab_bound_check(model, p, &cfg.ks, &cfg.ells, cfg.trials, cfg.seed, &cfg.fiber)?;
            for r in &rows {
                t.rows.push(vec![
                    cfg.model_name.clone(),
                    r.k.to_string(),
                    r.ell.to_string(),
                    exponent(p),
                    num(r.value),
                    String::new(),
                ]);
            }
            let (pl, pk) = predicted_slab_slopes(p);
            t.check(
                format!("{}/slab-slopes p={}", cfg.model_name, exponent(p)),
                pass,
                format!(
                    "slopes (ℓ, k) = ({}, {}), predicted ({pl:.3}, {pk:.3}) ± {SLAB_SLOPE_TOL}",
                    fit.slope_ell.map_or("-".into(), |s| format!("{s:.3}")),
                    fit.slope_k.map_or("-".into(), |s| format!("{s:.3}")),
                ),
            );
            fits.push(json!({ "p": Exponent(p), "fit": fit }));
        }
    }
    t.extra.insert("fits".into(), Value::Array(fits));
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(v: Value) -> Result<RunConfig> {
        RunConfig::from_value(v)
    }

    #[test]
    fn defaults_are_filled_in() {
        let c = parse(json!({"model": "xray", "experiment": "norm-decay"})).unwrap();
        assert_eq!(c.ks, vec![5, 6, 7, 8, 9, 10]);
        assert_eq!(c.ells, vec![0]);
        assert_eq!(c.p, vec![Exponent(2.0)]);
        assert_eq!(c.trials, 1);
    }

    #[test]
    fn typo_in_experiment_suggests() {
        match parse(json!({"model": "xray", "experiment": "plate-chek"})) {
            Err(Error::Config { suggestions, .. }) => assert_eq!(suggestions, vec!["plate-check"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn all_problems_are_reported_together() {
        let err = parse(json!({"model": "xrya", "experiment": "slab-bound", "sampels": 3, "trials": 0})).unwrap_err();
        let Error::Config { message, suggestions } = err else { panic!() };
        assert!(message.starts_with("3 problems"), "{message}");
        assert!(suggestions.contains(&"xray".to_string()) && suggestions.contains(&"samples".to_string()));
    }

    #[test]
    fn levels_above_a_third_of_k_are_rejected() {
        let err = parse(json!({"model": "xray", "experiment": "norm-decay", "ks": [6], "ells": [3]})).unwrap_err();
        assert!(err.to_string().contains("exceeds"));
    }

    #[test]
    fn infinite_exponent_round_trips() {
        let c = parse(json!({"model": "xray", "experiment": "slab-bound", "p": "inf"})).unwrap();
        assert!(c.p[0].0.is_infinite());
        assert_eq!(serde_json::to_value(&c).unwrap()["p"], json!(["inf"]));
    }

    #[test]
    fn fiber_engine_needs_horizontal_model() {
        let err = parse(json!({"model": "heisenberg_plane", "experiment": "norm-decay"})).unwrap_err();
        assert!(err.to_string().contains("horizontal"));
    }

    #[test]
    fn describe_lists_plate_keys() {
        let d = describe("plate-check").unwrap();
        for k in ["ℓ", "δ₀", "δ₁", "n_samples", "mode"] {
            assert!(d.contains(k), "{d}");
        }
        assert!(describe("plate").is_err());
    }

    #[test]
    fn identity_run_passes_and_embeds_config() {
        let c = parse(json!({"model": "xray", "experiment": "verify-identities", "samples": 50, "seed": 4})).unwrap();
        let out = run(&c).unwrap();
        assert!(out.pass(), "{:?}", out.checks);
        assert_eq!(out.report["config"]["samples"], json!(50));
        assert_eq!(out.rows.len(), 4);
    }
}
