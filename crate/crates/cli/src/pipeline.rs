//! Subcommand pipelines. A [`Session`] caches the model, the blur sigma and
//! the saliency maps so that `report` computes each map once.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use saliency_audit::crop::{crop_metric_from_maps, CropReport};
use saliency_audit::estimators::{score_histogram, Estimator};
use saliency_audit::fidelity::{
    fidelity_curves_from_maps, plan_shifts, saliency_maps, CurveSet, FidelityReport, FidelityRow,
    ShiftPlan,
};
use saliency_audit::model::{accuracy, load_model, save_model, train, AnyModel, Classifier};
use saliency_audit::perturbation::{calibrate_blur_sigma, BlurCalibration, Perturbation};
use saliency_audit::tensor::{Dataset, SaliencyMap};
use saliency_audit::Error as CoreError;

use crate::config::RunConfig;
use crate::dataset::{encode_idx_images, encode_idx_labels, load_splits, write_directory, Splits};
use crate::emit::{self, Histogram};
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    SynthData,
    Train,
    CalibrateBlur,
    Curves,
    Fidelity,
    CropEval,
    Histogram,
    Report,
}

impl Command {
    pub const ALL: [Command; 8] = [
        Command::SynthData,
        Command::Train,
        Command::CalibrateBlur,
        Command::Curves,
        Command::Fidelity,
        Command::CropEval,
        Command::Histogram,
        Command::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::SynthData => "synth-data",
            Command::Train => "train",
            Command::CalibrateBlur => "calibrate-blur",
            Command::Curves => "curves",
            Command::Fidelity => "fidelity",
            Command::CropEval => "crop-eval",
            Command::Histogram => "histogram",
            Command::Report => "report",
        }
    }
}

pub const MODEL_FILE: &str = "model.salm";
pub const CURVES_CSV: &str = "curves.csv";
pub const FIDELITY_CSV: &str = "fidelity_report.csv";
pub const CROP_CSV: &str = "crop_report.csv";
pub const HISTOGRAM_CSV: &str = "histograms.csv";
pub const CALIBRATION_CSV: &str = "calibration.csv";
pub const TRAIN_LOG_CSV: &str = "train_log.csv";
pub const REPORT_JSON: &str = "report.json";

/// How the model of a session was obtained.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelInfo {
    pub source: String,
    pub path: Option<PathBuf>,
    pub eval_accuracy: f64,
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SigmaInfo {
    pub sigma: f64,
    pub calibration: Option<BlurCalibration>,
}

/// Everything `report` writes to `report.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub score_kind: String,
    pub label_mode: String,
    pub reference: String,
    pub perturbation: String,
    pub estimators: Vec<String>,
    pub eval_samples: usize,
    pub model: ModelInfo,
    pub sigma: Option<SigmaInfo>,
    pub shift_dx: Option<(i64, i64)>,
    pub shift_dy: Option<(i64, i64)>,
    pub fidelity: Vec<FidelityRow>,
    pub crop: Vec<CropReport>,
}

pub struct Session {
    cfg: RunConfig,
    splits: Splits,
    model: Option<(AnyModel, ModelInfo)>,
    sigma: Option<SigmaInfo>,
    maps: Vec<(Estimator, Vec<SaliencyMap>)>,
    curves: Option<(CurveSet, ShiftPlan)>,
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::output(dir, e))
}

impl Session {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let splits = load_splits(&cfg)?;
        Ok(Self {
            cfg,
            splits,
            model: None,
            sigma: None,
            maps: Vec::new(),
            curves: None,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    fn out(&self, name: &str) -> Result<PathBuf> {
        ensure_dir(&self.cfg.output.dir)?;
        Ok(self.cfg.output.dir.join(name))
    }

    fn check_model(&self, model: &AnyModel) -> Result<()> {
        let dims = self.splits.eval.dims().expect("nonempty eval set");
        if model.input_dims() != dims {
            return Err(CliError::Shape(format!(
                "model expects {} inputs, dataset has {dims}",
                model.input_dims()
            )));
        }
        if model.num_classes() < self.splits.eval.num_classes() {
            return Err(CliError::Shape(format!(
                "model has {} classes, dataset has {}",
                model.num_classes(),
                self.splits.eval.num_classes()
            )));
        }
        Ok(())
    }

    fn train_model(&self, path: Option<PathBuf>) -> Result<(AnyModel, ModelInfo)> {
        let outcome = train(&self.splits.train, &self.cfg.train_config()?)?;
        let model = AnyModel::Conv(outcome.model);
        if let Some(p) = &path {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                ensure_dir(parent)?;
            }
            save_model(&model, p).map_err(|e| match e {
                CoreError::Io(io) => CliError::output(p, io),
                other => other.into(),
            })?;
        }
        let info = ModelInfo {
            source: "trained".into(),
            path,
            eval_accuracy: accuracy(&model, &self.splits.eval)?,
            epoch_losses: outcome.epoch_losses,
        };
        Ok((model, info))
    }

    /// Loads `model.path` when it exists; otherwise trains, saving to
    /// `model.path` when one is configured.
    pub fn model(&mut self) -> Result<&AnyModel> {
        if self.model.is_none() {
            let loaded = match &self.cfg.model.path {
                Some(p) if p.exists() => {
                    let model = load_model(p).map_err(|e| match e {
                        CoreError::Io(io) => CliError::reading(p, io),
                        other => other.into(),
                    })?;
                    self.check_model(&model)?;
                    let info = ModelInfo {
                        source: "loaded".into(),
                        path: Some(p.clone()),
                        eval_accuracy: accuracy(&model, &self.splits.eval)?,
                        epoch_losses: Vec::new(),
                    };
                    (model, info)
                }
                other => self.train_model(other.clone())?,
            };
            self.model = Some(loaded);
        }
        Ok(&self.model.as_ref().expect("just set").0)
    }

    pub fn model_info(&mut self) -> Result<&ModelInfo> {
        self.model()?;
        Ok(&self.model.as_ref().expect("model cached").1)
    }

    /// Always trains, writes the model file and the loss log.
    pub fn run_train(&mut self) -> Result<ModelInfo> {
        let path = match &self.cfg.model.path {
            Some(p) => p.clone(),
            None => self.out(MODEL_FILE)?,
        };
        let trained = self.train_model(Some(path))?;
        emit::write_train_log(&self.out(TRAIN_LOG_CSV)?, &trained.1.epoch_losses)?;
        let info = trained.1.clone();
        emit::write_json(&self.out("train.json")?, &info)?;
        self.model = Some(trained);
        Ok(info)
    }

    /// Sweeps the sigma grid, writing the curve even when no sigma passes.
    pub fn calibrate(&mut self) -> Result<BlurCalibration> {
        let grid = self.cfg.perturbation.sigma_grid.clone();
        let margin = self.cfg.perturbation.chance_margin;
        self.model()?;
        let model = &self.model.as_ref().expect("model cached").0;
        let result = calibrate_blur_sigma(model, &self.splits.eval, &grid, margin);
        let (curve, threshold) = match &result {
            Ok(c) => (c.curve.clone(), c.threshold),
            Err(CoreError::CalibrationFailed { threshold, curve }) => (curve.clone(), *threshold),
            Err(_) => (Vec::new(), 0.0),
        };
        if !curve.is_empty() {
            emit::write_calibration(&self.out(CALIBRATION_CSV)?, &curve)?;
            emit::write_text(
                &self.out("calibration.svg")?,
                &emit::calibration_plot(&curve, threshold),
            )?;
        }
        let cal = result?;
        self.sigma = Some(SigmaInfo {
            sigma: cal.sigma,
            calibration: Some(cal.clone()),
        });
        Ok(cal)
    }

    /// The fixed or calibrated blur sigma; `None` for non-blur perturbations.
    pub fn sigma(&mut self) -> Result<Option<f64>> {
        if self.cfg.perturbation.kind != "blur" {
            return Ok(None);
        }
        if self.sigma.is_none() {
            match self.cfg.perturbation.sigma {
                Some(sigma) => {
                    self.sigma = Some(SigmaInfo {
                        sigma,
                        calibration: None,
                    })
                }
                None => {
                    self.calibrate()?;
                }
            }
        }
        Ok(self.sigma.as_ref().map(|s| s.sigma))
    }

    pub fn perturbation(&mut self) -> Result<Perturbation> {
        let sigma = self.sigma()?.unwrap_or(1.0);
        self.cfg.perturbation_for(sigma)
    }

    fn ensure_maps(&mut self, estimators: &[Estimator]) -> Result<()> {
        let cfg = self.cfg.estimator_config()?;
        let mode = self.cfg.label_mode()?;
        self.model()?;
        let model = &self.model.as_ref().expect("model cached").0;
        for &e in estimators {
            if !self.maps.iter().any(|(have, _)| *have == e) {
                let maps = saliency_maps(model, &self.splits.eval, e, &cfg, mode)?;
                self.maps.push((e, maps));
            }
        }
        Ok(())
    }

    /// Cached saliency maps of every configured estimator, in list order.
    pub fn maps(&mut self) -> Result<Vec<&(Estimator, Vec<SaliencyMap>)>> {
        let list = self.cfg.estimator_list()?;
        self.ensure_maps(&list)?;
        Ok(list
            .iter()
            .map(|e| {
                self.maps
                    .iter()
                    .find(|(have, _)| have == e)
                    .expect("computed")
            })
            .collect())
    }

    pub fn curves(&mut self) -> Result<&CurveSet> {
        if self.curves.is_none() {
            let perturbation = self.perturbation()?;
            let list = self.cfg.estimator_list()?;
            self.ensure_maps(&list)?;
            let dims = self.splits.eval.dims().expect("nonempty eval set");
            let plan = plan_shifts(
                self.splits.eval.len(),
                &self.cfg.shift_config(dims.height, dims.width),
            )?;
            let ordered: Vec<(Estimator, Vec<SaliencyMap>)> = list
                .iter()
                .map(|e| {
                    self.maps
                        .iter()
                        .find(|(have, _)| have == e)
                        .expect("computed")
                        .clone()
                })
                .collect();
            let model = &self.model.as_ref().expect("model cached").0;
            let set = fidelity_curves_from_maps(
                model,
                &self.splits.eval,
                &ordered,
                &perturbation,
                &self.cfg.fidelity.n_grid,
                &plan,
                self.cfg.perturbation_seed(),
            )?;
            self.curves = Some((set, plan));
        }
        Ok(&self.curves.as_ref().expect("just set").0)
    }

    pub fn run_curves(&mut self) -> Result<CurveSet> {
        let set = self.curves()?.clone();
        emit::write_curves(&self.out(CURVES_CSV)?, set.curves())?;
        emit::write_text(
            &self.out("curves.svg")?,
            &emit::curves_plot(set.curves(), false),
        )?;
        emit::write_text(
            &self.out("curves_shifted.svg")?,
            &emit::curves_plot(set.curves(), true),
        )?;
        Ok(set)
    }

    pub fn fidelity(&mut self) -> Result<FidelityReport> {
        let reference = self.cfg.reference()?;
        let list = self.cfg.estimator_list()?;
        if !list.contains(&reference) {
            return Err(CliError::Config(format!(
                "reference estimator {reference} is not in estimators.list"
            )));
        }
        let tags: Vec<&str> = list.iter().map(|e| e.tag()).collect();
        let n_stars = self.cfg.fidelity.n_stars.clone();
        let set = self.curves()?;
        Ok(FidelityReport::from_curves(
            set,
            &tags,
            reference.tag(),
            &n_stars,
        )?)
    }

    pub fn run_fidelity(&mut self) -> Result<FidelityReport> {
        let report = self.fidelity()?;
        emit::write_fidelity(&self.out(FIDELITY_CSV)?, &report)?;
        Ok(report)
    }

    pub fn crop(&mut self) -> Result<Vec<CropReport>> {
        let methods = self.cfg.region_methods()?;
        self.maps()?;
        let list = self.cfg.estimator_list()?;
        let model = &self.model.as_ref().expect("model cached").0;
        let mut reports = Vec::new();
        for method in &methods {
            for e in &list {
                let (_, maps) = self
                    .maps
                    .iter()
                    .find(|(have, _)| have == e)
                    .expect("computed");
                reports.push(
                    crop_metric_from_maps(model, &self.splits.eval, maps, e.tag(), method)?.0,
                );
            }
        }
        Ok(reports)
    }

    pub fn run_crop(&mut self) -> Result<Vec<CropReport>> {
        let reports = self.crop()?;
        emit::write_crop(&self.out(CROP_CSV)?, &reports)?;
        Ok(reports)
    }

    pub fn histograms(&mut self) -> Result<Vec<Histogram>> {
        let bins = self.cfg.histogram.bins;
        Ok(self
            .maps()?
            .into_iter()
            .map(|(e, maps)| Histogram {
                estimator: e.tag().to_owned(),
                counts: score_histogram(maps, bins),
            })
            .collect())
    }

    pub fn run_histogram(&mut self) -> Result<Vec<Histogram>> {
        let hists = self.histograms()?;
        emit::write_histograms(&self.out(HISTOGRAM_CSV)?, &hists)?;
        emit::write_text(&self.out("histograms.svg")?, &emit::histogram_plot(&hists))?;
        Ok(hists)
    }

    /// Curves, fidelity, crop and histograms from one set of maps.
    pub fn run_report(&mut self) -> Result<RunSummary> {
        self.run_curves()?;
        let fidelity = self.run_fidelity()?;
        let crop = self.run_crop()?;
        self.run_histogram()?;
        let perturbation = self.perturbation()?;
        let model = self.model_info()?.clone();
        let dims = self.splits.eval.dims().expect("nonempty eval set");
        let shift = self.cfg.shift_config(dims.height, dims.width);
        let summary = RunSummary {
            seed: self.cfg.seed,
            score_kind: self.cfg.estimators.score_kind.clone(),
            label_mode: self.cfg.estimators.label_mode.clone(),
            reference: fidelity.reference.clone(),
            perturbation: perturbation.tag(),
            estimators: self
                .cfg
                .estimator_list()?
                .iter()
                .map(|e| e.tag().to_owned())
                .collect(),
            eval_samples: self.splits.eval.len(),
            model,
            sigma: self.sigma.clone(),
            shift_dx: shift.dx,
            shift_dy: shift.dy,
            fidelity: fidelity.rows,
            crop,
        };
        emit::write_json(&self.out(REPORT_JSON)?, &summary)?;
        Ok(summary)
    }

    /// Writes both synthetic splits as PNG directories and IDX files.
    pub fn run_synth_data(&self) -> Result<()> {
        if self.cfg.dataset.synthetic.is_none() {
            return Err(CliError::Config(
                "synth-data needs dataset.synthetic".into(),
            ));
        }
        let root = self.out("synthetic")?;
        for (name, data) in [("train", &self.splits.train), ("test", &self.splits.eval)] {
            write_directory(data, &root.join(name))?;
            write_idx(data, &root, name)?;
        }
        Ok(())
    }
}

fn write_idx(data: &Dataset, root: &Path, name: &str) -> Result<()> {
    let images = root.join(format!("{name}-images.idx"));
    let labels = root.join(format!("{name}-labels.idx"));
    fs::write(&images, encode_idx_images(data)).map_err(|e| CliError::output(&images, e))?;
    fs::write(&labels, encode_idx_labels(data)).map_err(|e| CliError::output(&labels, e))
}

/// Runs one subcommand and returns a one-line summary for stdout.
pub fn run(command: Command, cfg: RunConfig) -> Result<String> {
    let mut s = Session::new(cfg)?;
    let dir = s.config().output.dir.display().to_string();
    Ok(match command {
        Command::SynthData => {
            s.run_synth_data()?;
            format!(
                "wrote {} train and {} test samples to {dir}/synthetic",
                s.splits().train.len(),
                s.splits().eval.len()
            )
        }
        Command::Train => {
            let info = s.run_train()?;
            format!(
                "trained {} epochs, final loss {:.4e}, eval accuracy {:.4}",
                info.epoch_losses.len(),
                info.epoch_losses.last().copied().unwrap_or(f64::NAN),
                info.eval_accuracy
            )
        }
        Command::CalibrateBlur => {
            let cal = s.calibrate()?;
            format!(
                "calibrated sigma {} (threshold {:.3})",
                cal.sigma, cal.threshold
            )
        }
        Command::Curves => {
            let set = s.run_curves()?;
            format!("wrote {} curves to {dir}/{CURVES_CSV}", set.len())
        }
        Command::Fidelity => {
            let r = s.run_fidelity()?;
            format!("wrote {} rows to {dir}/{FIDELITY_CSV}", r.rows.len())
        }
        Command::CropEval => {
            let r = s.run_crop()?;
            format!("wrote {} rows to {dir}/{CROP_CSV}", r.len())
        }
        Command::Histogram => {
            let h = s.run_histogram()?;
            format!("wrote {} histograms to {dir}/{HISTOGRAM_CSV}", h.len())
        }
        Command::Report => {
            s.run_report()?;
            format!("wrote report to {dir}")
        }
    })
}
