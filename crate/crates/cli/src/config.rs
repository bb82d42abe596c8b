//! Experiment configuration.
//!
//! The file is TOML restricted to top-level keys and one level of
//! `[section]` tables; every key is optional except the master seed, which
//! may instead come from `--seed`. Unknown keys are rejected.
//!
//! ```toml
//! seed = 7
//! out = "out"
//!
//! [data]
//! spacing = [1.0, 1.0, 2.0]
//!
//! [cohort_b]
//! patients = 6
//! fractions = 7
//!
//! [adapt]
//! iterations = [200, 500]
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use fracadapt::adapt::AdaptationConfig;
use fracadapt::phantom::{CohortConfig, InstituteProfile};
use fracadapt::rng::derive_seed;
use fracadapt::segnet::{NetworkSpec, Variant, RESOLUTIONS};
use fracadapt::trainer::TrainConfig;
use serde::Deserialize;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub data: DataSection,
    pub cohort_a: CohortSection,
    pub cohort_b: CohortSection,
    pub network: NetworkSection,
    pub train: TrainSection,
    pub adapt: AdaptSection,
    pub evaluate: EvaluateSection,
}

#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Grid every scan is resampled to before training and evaluation, mm.
    pub spacing: Option<[f64; 3]>,
    /// Cohort directories; default `<out>/cohort/<profile>`.
    pub cohort_a: Option<PathBuf>,
    pub cohort_b: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CohortSection {
    pub profile: Option<String>,
    pub patients: Option<usize>,
    /// Scans per patient including the planning scan.
    pub fractions: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub variants: Option<Vec<String>>,
    pub channels: Option<[usize; RESOLUTIONS]>,
    pub fc_width: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub iterations: Option<u64>,
    pub patches_per_volume: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub train_fraction: Option<f64>,
    pub log_every: Option<u64>,
    pub val_patches: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptSection {
    /// Iteration sweep; one adaptation trace per entry.
    pub iterations: Option<Vec<u64>>,
    pub patches_per_volume: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    pub pairing: Option<String>,
    /// Fraction the cross-applied models are scored on; default the last.
    pub held_out: Option<usize>,
    pub alpha: Option<f64>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string().trim_end().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

/// How base and adapted scores are paired for the signed-rank test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pairing {
    /// One pair per patient and fraction.
    Fraction,
    /// One pair per patient, each side averaged over fractions.
    Patient,
}

impl Pairing {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fraction" => Ok(Pairing::Fraction),
            "patient" => Ok(Pairing::Patient),
            _ => Err(CliError::Config(format!("pairing must be `fraction` or `patient`, got `{s}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Pairing::Fraction => "fraction",
            Pairing::Patient => "patient",
        }
    }
}

impl fmt::Display for Pairing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Restriction of the institute-B cohort.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PatientFilter {
    All,
    /// The first `n` patients in id order.
    First(usize),
    Ids(Vec<String>),
}

impl PatientFilter {
    /// `N` or a comma-separated list of patient ids.
    pub fn parse(s: &str) -> Result<Self> {
        if let Ok(n) = s.parse::<usize>() {
            if n == 0 {
                return Err(CliError::Config("--patients must be at least 1".into()));
            }
            return Ok(PatientFilter::First(n));
        }
        let ids: Vec<String> = s.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
        if ids.is_empty() {
            return Err(CliError::Config("--patients is empty".into()));
        }
        Ok(PatientFilter::Ids(ids))
    }

    pub fn admits(&self, index: usize, id: &str) -> bool {
        match self {
            PatientFilter::All => true,
            PatientFilter::First(n) => index < *n,
            PatientFilter::Ids(ids) => ids.iter().any(|i| i == id),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub patients: Option<String>,
    pub iterations: Option<Vec<u64>>,
    pub pairing: Option<String>,
}

/// A network variant to train, named after its head.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantSpec {
    pub name: String,
    pub spec: NetworkSpec,
}

/// Fully resolved and validated experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub out: PathBuf,
    pub spacing: [f64; 3],
    pub cohort_a_dir: PathBuf,
    pub cohort_b_dir: PathBuf,
    pub cohort_a: CohortConfig,
    pub cohort_b: CohortConfig,
    pub variants: Vec<VariantSpec>,
    pub train: TrainConfig,
    pub adapt: AdaptationConfig,
    pub sweep: Vec<u64>,
    pub patients: PatientFilter,
    pub pairing: Pairing,
    pub held_out: usize,
    pub alpha: f64,
}

// seed derivation tags
const COHORT_A: u64 = 0xC0A;
const COHORT_B: u64 = 0xC0B;
const TRAIN: u64 = 0x7A;
const ADAPT: u64 = 0xAD;

fn profile(name: Option<&str>, default: InstituteProfile) -> Result<InstituteProfile> {
    match name {
        None => Ok(default),
        Some(n) => InstituteProfile::by_name(n).ok_or_else(|| CliError::Config(format!("unknown profile `{n}`"))),
    }
}

impl Settings {
    /// Defaults of the desk-scale experiment with `seed`.
    pub fn with_seed(seed: u64) -> Result<Self> {
        Self::resolve(&ConfigFile::default(), &Overrides { seed: Some(seed), ..Default::default() })
    }

    pub fn resolve(file: &ConfigFile, over: &Overrides) -> Result<Self> {
        let seed = over
            .seed
            .or(file.seed)
            .ok_or_else(|| CliError::Config("a master seed is required (`seed = N` or --seed N)".into()))?;
        let out = over.out.clone().or_else(|| file.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
        let spacing = file.data.spacing.unwrap_or([1.0, 1.0, 2.0]);
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(CliError::Config(format!("data.spacing {spacing:?} must be positive")));
        }

        let pa = profile(file.cohort_a.profile.as_deref(), InstituteProfile::institute_a())?;
        let pb = profile(file.cohort_b.profile.as_deref(), InstituteProfile::institute_b())?;
        let cohort_a_dir = file.data.cohort_a.clone().unwrap_or_else(|| out.join("cohort").join(&pa.name));
        let cohort_b_dir = file.data.cohort_b.clone().unwrap_or_else(|| out.join("cohort").join(&pb.name));
        if cohort_a_dir == cohort_b_dir {
            return Err(CliError::Config("the two cohorts need distinct directories".into()));
        }
        let cohort_a = CohortConfig::new(
            pa,
            file.cohort_a.patients.unwrap_or(20),
            file.cohort_a.fractions.unwrap_or(1),
            derive_seed(seed, &[COHORT_A]),
        );
        let patients = match &over.patients {
            Some(s) => PatientFilter::parse(s)?,
            None => PatientFilter::All,
        };
        let mut cohort_b = CohortConfig::new(
            pb,
            file.cohort_b.patients.unwrap_or(6),
            file.cohort_b.fractions.unwrap_or(7),
            derive_seed(seed, &[COHORT_B]),
        );
        if let PatientFilter::First(n) = patients {
            cohort_b.patients = n;
        }
        for (name, c) in [("cohort_a", &cohort_a), ("cohort_b", &cohort_b)] {
            c.validate().map_err(|e| CliError::Config(format!("{name}: {e}")))?;
        }
        if cohort_b.fractions < 2 {
            return Err(CliError::Config(
                "cohort_b.fractions must be at least 2 (a planning scan and one treatment fraction)".into(),
            ));
        }

        let names = file
            .network
            .variants
            .clone()
            .unwrap_or_else(|| vec!["base_a".into(), "base_b".into()]);
        if names.is_empty() {
            return Err(CliError::Config("network.variants is empty".into()));
        }
        let mut variants: Vec<VariantSpec> = Vec::new();
        for n in &names {
            let v = Variant::parse(n).ok_or_else(|| CliError::Config(format!("unknown network variant `{n}`")))?;
            if variants.iter().any(|s| s.name == v.name()) {
                return Err(CliError::Config(format!("variant `{n}` listed twice")));
            }
            let mut spec = NetworkSpec::new(v);
            if let Some(c) = file.network.channels {
                spec.channels = c;
            }
            if let Some(w) = file.network.fc_width {
                spec.fc_width = w;
            }
            spec.validate().map_err(CliError::config)?;
            variants.push(VariantSpec { name: v.name().into(), spec });
        }
        let patch_size = variants[0].spec.patch_size;

        let t = &file.train;
        let td = TrainConfig::default();
        let train = TrainConfig {
            patch_size,
            patches_per_volume: t.patches_per_volume.unwrap_or(td.patches_per_volume),
            batch_size: t.batch_size.unwrap_or(td.batch_size),
            iterations: t.iterations.unwrap_or(td.iterations),
            learning_rate: t.learning_rate.unwrap_or(td.learning_rate),
            seed: derive_seed(seed, &[TRAIN]),
            train_fraction: t.train_fraction.unwrap_or(td.train_fraction),
            log_every: t.log_every.unwrap_or(td.log_every),
            val_patches: t.val_patches.unwrap_or(td.val_patches),
        };
        train.validate().map_err(CliError::config)?;

        let a = &file.adapt;
        let ad = AdaptationConfig::default();
        let adapt = AdaptationConfig {
            iterations: 0,
            patches_per_volume: a.patches_per_volume.unwrap_or(ad.patches_per_volume),
            batch_size: a.batch_size.unwrap_or(ad.batch_size),
            learning_rate: a.learning_rate.unwrap_or(ad.learning_rate),
            patch_size,
            seed: derive_seed(seed, &[ADAPT]),
        };
        adapt.validate().map_err(CliError::config)?;
        let mut sweep = over
            .iterations
            .clone()
            .or_else(|| a.iterations.clone())
            .unwrap_or_else(|| vec![ad.iterations]);
        if sweep.is_empty() {
            return Err(CliError::Config("the adaptation iteration sweep is empty".into()));
        }
        sweep.sort_unstable();
        sweep.dedup();

        let e = &file.evaluate;
        let pairing = Pairing::parse(over.pairing.as_deref().or(e.pairing.as_deref()).unwrap_or("fraction"))?;
        let last = cohort_b.fractions - 1;
        let held_out = e.held_out.unwrap_or(last);
        if !(1..=last).contains(&held_out) {
            return Err(CliError::Config(format!("evaluate.held_out must lie in 1..={last}, got {held_out}")));
        }
        let alpha = e.alpha.unwrap_or(0.05);
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(CliError::Config(format!("evaluate.alpha must lie in (0, 1), got {alpha}")));
        }

        Ok(Settings {
            seed,
            out,
            spacing,
            cohort_a_dir,
            cohort_b_dir,
            cohort_a,
            cohort_b,
            variants,
            train,
            adapt,
            sweep,
            patients,
            pairing,
            held_out,
            alpha,
        })
    }

    /// Adaptation settings for one entry of the sweep.
    pub fn adapt_config(&self, iterations: u64) -> AdaptationConfig {
        AdaptationConfig { iterations, ..self.adapt.clone() }
    }
}
