//! Run configuration: a TOML file of dotted `key = value` pairs plus
//! `--set key=value` overrides applied on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use saliency_audit::crop::RegionMethod;
use saliency_audit::estimators::{Baseline, Estimator, EstimatorConfig};
use saliency_audit::fidelity::{default_n_grid, validate_grid, LabelMode, ShiftConfig};
use saliency_audit::model::{Architecture, Optimizer, ScoreKind, SynthConfig, TrainConfig};
use saliency_audit::perturbation::{ChannelMean, Perturbation, DEFAULT_CHANCE_MARGIN};
use saliency_audit::seed::{derive_seed, tag_hash};

use crate::error::{CliError, Result};

/// Sigma sweep for 32x32 inputs. Extends past 12 because a location-coded
/// image keeps its class in the residual brightness gradient until the
/// blur is wider than the image.
pub const CLI_SIGMA_GRID: [f64; 10] = [1.0, 2.0, 3.0, 4.0, 6.0, 8.0, 12.0, 16.0, 24.0, 32.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub output: OutputSection,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub estimators: EstimatorSection,
    #[serde(default)]
    pub perturbation: PerturbationSection,
    #[serde(default)]
    pub fidelity: FidelitySection,
    #[serde(default)]
    pub crop: CropSection,
    #[serde(default)]
    pub histogram: HistogramSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: "out".into() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub synthetic: Option<SyntheticSource>,
    pub directory: Option<DirectorySource>,
    pub idx: Option<IdxSource>,
    /// Class count for file sources; defaults to the largest label + 1.
    pub classes: Option<usize>,
    /// Evaluate on at most this many samples.
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSource {
    pub side: usize,
    pub channels: usize,
    pub classes: usize,
    pub patch: usize,
    pub noise: f32,
    pub train_samples: usize,
    pub test_samples: usize,
}

impl Default for SyntheticSource {
    fn default() -> Self {
        let d = SynthConfig::default();
        Self {
            side: d.side,
            channels: d.channels,
            classes: d.num_classes,
            patch: d.patch,
            noise: d.noise,
            train_samples: 5000,
            test_samples: 1000,
        }
    }
}

impl SyntheticSource {
    pub fn split(&self, samples: usize, seed: u64) -> SynthConfig {
        SynthConfig {
            side: self.side,
            channels: self.channels,
            num_classes: self.classes,
            patch: self.patch,
            noise: self.noise,
            samples,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectorySource {
    pub path: PathBuf,
    /// Defaults to `<path>/labels.csv`.
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSource {
    pub images: PathBuf,
    pub labels: PathBuf,
}

/// Which dataset source a config selects.
#[derive(Debug, Clone, PartialEq)]
pub enum Source<'a> {
    Synthetic(&'a SyntheticSource),
    Directory(&'a DirectorySource),
    Idx(&'a IdxSource),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Model file. Loaded when it exists; `train` writes it. Without a
    /// path, evaluation commands train in memory.
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// `sgd` or `momentum`.
    pub optimizer: String,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        let momentum = match d.optimizer {
            Optimizer::Momentum { beta } => beta,
            Optimizer::Sgd => 0.9,
        };
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            optimizer: match d.optimizer {
                Optimizer::Sgd => "sgd".into(),
                Optimizer::Momentum { .. } => "momentum".into(),
            },
            momentum,
            weight_decay: d.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorSection {
    pub list: Vec<String>,
    pub ig_steps: usize,
    /// Constant integrated-gradients baseline value (0 is black).
    pub ig_baseline: f32,
    pub sg_samples: usize,
    pub sg_sigma: f64,
    pub clamp_noisy: bool,
    /// `logit` or `probability`.
    pub score_kind: String,
    /// `true` or `predicted`.
    pub label_mode: String,
}

impl Default for EstimatorSection {
    fn default() -> Self {
        let d = EstimatorConfig::default();
        Self {
            list: Estimator::ALL.iter().map(|e| e.tag().to_owned()).collect(),
            ig_steps: d.ig_steps,
            ig_baseline: 0.0,
            sg_samples: d.sg_samples,
            sg_sigma: d.sg_noise_sigma,
            clamp_noisy: d.clamp_noisy,
            score_kind: d.score_kind.tag().to_owned(),
            label_mode: "true".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbationSection {
    /// `blur`, `uniform`, `constant` or `constant-global`.
    pub kind: String,
    /// Fixed blur sigma; calibrated on the evaluation set when absent.
    pub sigma: Option<f64>,
    pub sigma_grid: Vec<f64>,
    pub chance_margin: f64,
}

impl Default for PerturbationSection {
    fn default() -> Self {
        Self {
            kind: "blur".into(),
            sigma: None,
            sigma_grid: CLI_SIGMA_GRID.to_vec(),
            chance_margin: DEFAULT_CHANCE_MARGIN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FidelitySection {
    pub n_grid: Vec<f64>,
    pub n_stars: Vec<f64>,
    pub reference: String,
    /// Inclusive shift ranges; default `[ceil(0.05 side), ceil(0.45 side)]`.
    pub shift_dx: Option<[i64; 2]>,
    pub shift_dy: Option<[i64; 2]>,
}

impl Default for FidelitySection {
    fn default() -> Self {
        Self {
            n_grid: default_n_grid(),
            n_stars: vec![0.2, 0.4],
            reference: Estimator::SquaredSmooth.tag().to_owned(),
            shift_dx: None,
            shift_dy: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropSection {
    /// Any of `threshold`, `topfrac`.
    pub methods: Vec<String>,
    pub t_rel: f64,
    pub frac: f64,
    pub trim_low: f64,
    pub trim_high: f64,
}

impl Default for CropSection {
    fn default() -> Self {
        Self {
            methods: vec!["threshold".into(), "topfrac".into()],
            t_rel: 0.2,
            frac: 0.2,
            trim_low: 1.0,
            trim_high: 99.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HistogramSection {
    pub bins: usize,
}

impl Default for HistogramSection {
    fn default() -> Self {
        Self { bins: 50 }
    }
}

/// Parses a TOML document into a table.
pub fn parse_table(text: &str) -> Result<Table> {
    text.parse::<Table>()
        .map_err(|e| CliError::Config(format!("malformed config: {e}")))
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_owned()))
}

/// Applies `key.path=value`. Values use TOML syntax; anything that does not
/// parse is taken as a bare string.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override '{assignment}' is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key '{key}'")));
    }
    let (last, path) = parts.split_last().expect("nonempty split");
    let mut cur = table;
    for part in path {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| {
            CliError::Config(format!("override key '{key}' descends into a non-table"))
        })?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    pub fn from_table(table: Table) -> Result<Self> {
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string().trim().to_owned()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_str_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table = parse_table(text)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    /// Reads `path` (if any) and applies the overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::reading(p, e))?,
            None => String::new(),
        };
        Self::from_str_with(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.source()?;
        self.estimator_list()?;
        self.estimator_config()?;
        self.label_mode()?;
        self.train_config()?;
        self.region_methods()?;
        if let Some(s) = self.perturbation.sigma {
            Perturbation::blur(s).map_err(|e| CliError::Config(e.to_string()))?;
        }
        self.perturbation_for(1.0)?;
        validate_grid(&self.fidelity.n_grid).map_err(|e| CliError::Config(e.to_string()))?;
        let last = *self.fidelity.n_grid.last().expect("validated grid");
        if self
            .fidelity
            .n_stars
            .iter()
            .any(|&n| !(0.0..=last).contains(&n))
        {
            return Err(CliError::Config(
                "fidelity.n_stars must lie within fidelity.n_grid".into(),
            ));
        }
        self.reference()?;
        if self.histogram.bins == 0 {
            return Err(CliError::Config("histogram.bins must be positive".into()));
        }
        Ok(())
    }

    pub fn source(&self) -> Result<Source<'_>> {
        let d = &self.dataset;
        let mut found = Vec::new();
        if let Some(s) = &d.synthetic {
            found.push(Source::Synthetic(s));
        }
        if let Some(s) = &d.directory {
            found.push(Source::Directory(s));
        }
        if let Some(s) = &d.idx {
            found.push(Source::Idx(s));
        }
        match found.len() {
            1 => Ok(found.pop().expect("one source")),
            0 => Err(CliError::Config(
                "no dataset source: set one of dataset.synthetic, dataset.directory, dataset.idx"
                    .into(),
            )),
            _ => Err(CliError::Config(
                "more than one dataset source configured".into(),
            )),
        }
    }

    pub fn estimator_list(&self) -> Result<Vec<Estimator>> {
        let mut list = Vec::new();
        for tag in &self.estimators.list {
            let e = Estimator::from_tag(tag)
                .ok_or_else(|| CliError::Config(format!("unknown estimator '{tag}'")))?;
            if !list.contains(&e) {
                list.push(e);
            }
        }
        if list.is_empty() {
            return Err(CliError::Config("estimators.list is empty".into()));
        }
        Ok(list)
    }

    pub fn estimator_config(&self) -> Result<EstimatorConfig> {
        let e = &self.estimators;
        let score_kind = ScoreKind::from_tag(&e.score_kind)
            .ok_or_else(|| CliError::Config(format!("unknown score kind '{}'", e.score_kind)))?;
        let cfg = EstimatorConfig {
            ig_steps: e.ig_steps,
            ig_baseline: if e.ig_baseline == 0.0 {
                Baseline::Black
            } else {
                Baseline::Constant(e.ig_baseline)
            },
            sg_samples: e.sg_samples,
            sg_noise_sigma: e.sg_sigma,
            clamp_noisy: e.clamp_noisy,
            score_kind,
            seed: derive_seed(self.seed, &[tag_hash("estimators")]),
        };
        cfg.validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn label_mode(&self) -> Result<LabelMode> {
        match self.estimators.label_mode.as_str() {
            "true" => Ok(LabelMode::True),
            "predicted" => Ok(LabelMode::Predicted),
            other => Err(CliError::Config(format!("unknown label mode '{other}'"))),
        }
    }

    pub fn reference(&self) -> Result<Estimator> {
        let r = Estimator::from_tag(&self.fidelity.reference).ok_or_else(|| {
            CliError::Config(format!(
                "unknown reference estimator '{}'",
                self.fidelity.reference
            ))
        })?;
        Ok(r)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let optimizer = match t.optimizer.as_str() {
            "sgd" => Optimizer::Sgd,
            "momentum" => Optimizer::Momentum { beta: t.momentum },
            other => return Err(CliError::Config(format!("unknown optimizer '{other}'"))),
        };
        let cfg = TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            optimizer,
            weight_decay: t.weight_decay,
            seed: derive_seed(self.seed, &[tag_hash("train")]),
            blocks: Architecture::default_blocks(),
        };
        cfg.validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// The configured perturbation; `sigma` is used for blur unless a fixed
    /// one is configured.
    pub fn perturbation_for(&self, sigma: f64) -> Result<Perturbation> {
        match self.perturbation.kind.as_str() {
            "blur" => Ok(Perturbation::Blur {
                sigma: self.perturbation.sigma.unwrap_or(sigma),
            }),
            "uniform" => Ok(Perturbation::Uniform),
            "constant" => Ok(Perturbation::Constant(ChannelMean::PerChannel)),
            "constant-global" => Ok(Perturbation::Constant(ChannelMean::Global)),
            other => Err(CliError::Config(format!("unknown perturbation '{other}'"))),
        }
    }

    /// Whether a blur sigma has to be calibrated.
    pub fn needs_calibration(&self) -> bool {
        self.perturbation.kind == "blur" && self.perturbation.sigma.is_none()
    }

    pub fn shift_config(&self, height: usize, width: usize) -> ShiftConfig {
        let mut s =
            ShiftConfig::for_image(height, width, derive_seed(self.seed, &[tag_hash("shift")]));
        if let Some([lo, hi]) = self.fidelity.shift_dx {
            s.dx = Some((lo, hi));
        }
        if let Some([lo, hi]) = self.fidelity.shift_dy {
            s.dy = Some((lo, hi));
        }
        s
    }

    pub fn region_methods(&self) -> Result<Vec<RegionMethod>> {
        let c = &self.crop;
        c.methods
            .iter()
            .map(|m| match m.as_str() {
                "threshold" if c.t_rel > 0.0 && c.t_rel <= 1.0 => {
                    Ok(RegionMethod::Threshold { t_rel: c.t_rel })
                }
                "topfrac" if c.frac > 0.0 && c.frac <= 1.0 => Ok(RegionMethod::TopFraction {
                    frac: c.frac,
                    trim_low: c.trim_low,
                    trim_high: c.trim_high,
                }),
                "threshold" | "topfrac" => Err(CliError::Config(format!(
                    "crop parameters out of range for {m}"
                ))),
                other => Err(CliError::Config(format!("unknown crop method '{other}'"))),
            })
            .collect()
    }

    /// Seed of the per-sample perturbation draws.
    pub fn perturbation_seed(&self) -> u64 {
        derive_seed(self.seed, &[tag_hash("perturbation")])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "seed = 7\n[dataset.synthetic]\n";

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = RunConfig::from_str_with(MINIMAL, &[]).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.output.dir, PathBuf::from("out"));
        assert!(matches!(cfg.source().unwrap(), Source::Synthetic(_)));
        assert_eq!(cfg.estimator_list().unwrap().len(), 5);
        assert_eq!(cfg.fidelity.n_grid.len(), 21);
        assert!(cfg.needs_calibration());
        assert_eq!(cfg.region_methods().unwrap().len(), 2);
    }

    #[test]
    fn seed_is_mandatory() {
        let err = RunConfig::from_str_with("[dataset.synthetic]\n", &[]).unwrap_err();
        assert!(
            matches!(err, CliError::Config(ref m) if m.contains("seed")),
            "{err}"
        );
    }

    #[test]
    fn exactly_one_source() {
        assert!(RunConfig::from_str_with("seed = 1\n", &[]).is_err());
        let two = "seed = 1\n[dataset.synthetic]\n[dataset.idx]\nimages = \"a\"\nlabels = \"b\"\n";
        assert!(matches!(
            RunConfig::from_str_with(two, &[]),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn dotted_keys_and_overrides() {
        let text = "seed = 1\ndataset.synthetic.side = 16\nperturbation.sigma = 3.5\n";
        let cfg = RunConfig::from_str_with(
            text,
            &[
                "dataset.synthetic.patch=4".into(),
                "estimators.list=[\"VG\", \"random\"]".into(),
                "output.dir=results/run1".into(),
                "seed=99".into(),
            ],
        )
        .unwrap();
        let Source::Synthetic(s) = cfg.source().unwrap() else {
            panic!()
        };
        assert_eq!((s.side, s.patch), (16, 4));
        assert_eq!(cfg.perturbation.sigma, Some(3.5));
        assert!(!cfg.needs_calibration());
        assert_eq!(
            cfg.estimator_list().unwrap(),
            vec![Estimator::Vanilla, Estimator::Random]
        );
        assert_eq!(cfg.output.dir, PathBuf::from("results/run1"));
        assert_eq!(cfg.seed, 99);
    }

    #[test]
    fn rejects_bad_values() {
        for bad in [
            "estimators.list=[\"XX\"]",
            "train.optimizer=adam",
            "perturbation.kind=noise",
            "fidelity.n_grid=[0.1, 0.5]",
            "fidelity.n_stars=[1.5]",
            "crop.methods=[\"circle\"]",
            "unknown.key=1",
            "train.epochs=0",
            "perturbation.sigma=-1.0",
        ] {
            let r = RunConfig::from_str_with(MINIMAL, &[bad.into()]);
            assert!(matches!(r, Err(CliError::Config(_))), "{bad} accepted");
        }
        assert!(RunConfig::from_str_with("seed = = 1", &[]).is_err());
        assert!(RunConfig::from_str_with(MINIMAL, &["noequals".into()]).is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        let cfg = RunConfig::from_str_with(MINIMAL, &[]).unwrap();
        let a = cfg.estimator_config().unwrap().seed;
        let b = cfg.train_config().unwrap().seed;
        assert_ne!(a, b);
        assert_ne!(cfg.perturbation_seed(), a);
    }
}
