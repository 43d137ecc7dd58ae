//! Accuracy-degradation curves and the quantities derived from them.
//!
//! For an estimator `e`, `F^e(n)` is the area between the unperturbed
//! accuracy and the MiF curve over `[0, n]`, and `U^e(n)` the same area for
//! the LiF curve. Masks borrowed from a different image and toroidally
//! shifted give importance-random perturbation patterns whose MiF area
//! `F^{s,e}` feeds the artifact bound
//! `B^e = max(F^{s,e} - U^ref, 0) + U^ref`.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::estimators::{compute_saliency, Estimator, EstimatorConfig};
use crate::model::Classifier;
use crate::perturbation::Perturbation;
use crate::seed::{derive_seed, rng_from_seed, tag_hash};
use crate::tensor::{
    apply_mask, mask_from_ranking, rank_pixels, shift_mask, Dataset, Direction, SaliencyMap,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCurve {
    pub estimator: String,
    pub perturbation: String,
    pub direction: Direction,
    pub shifted: bool,
    pub n_grid: Vec<f64>,
    pub accuracy: Vec<f64>,
}

impl AccuracyCurve {
    pub fn new(
        estimator: impl Into<String>,
        perturbation: impl Into<String>,
        direction: Direction,
        shifted: bool,
        n_grid: Vec<f64>,
        accuracy: Vec<f64>,
    ) -> Result<Self> {
        validate_grid(&n_grid)?;
        if accuracy.len() != n_grid.len() {
            return shape_err("curve grid and accuracy lengths differ");
        }
        if accuracy.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return arg_err("accuracies must lie in [0, 1]");
        }
        Ok(Self {
            estimator: estimator.into(),
            perturbation: perturbation.into(),
            direction,
            shifted,
            n_grid,
            accuracy,
        })
    }

    /// Accuracy at `n`, linearly interpolated between grid points.
    pub fn accuracy_at(&self, n: f64) -> Result<f64> {
        self.check_in_range(n)?;
        let g = &self.n_grid;
        let i = g.partition_point(|&v| v < n);
        if i < g.len() && g[i] == n {
            return Ok(self.accuracy[i]);
        }
        let (x0, x1) = (g[i - 1], g[i]);
        let t = (n - x0) / (x1 - x0);
        Ok(self.accuracy[i - 1] + t * (self.accuracy[i] - self.accuracy[i - 1]))
    }

    fn check_in_range(&self, n: f64) -> Result<()> {
        let last = *self.n_grid.last().expect("validated grid is nonempty");
        if !(0.0..=last).contains(&n) {
            return arg_err(format!("n = {n} is outside the curve grid [0, {last}]"));
        }
        Ok(())
    }
}

/// Grids must start at exactly 0, ascend strictly and stay within `[0, 1]`.
pub fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.first() != Some(&0.0) {
        return arg_err("n grid must start at 0");
    }
    let ascending = grid
        .windows(2)
        .all(|w| w[0].partial_cmp(&w[1]) == Some(std::cmp::Ordering::Less));
    if !ascending || grid.iter().any(|&n| n > 1.0) {
        return arg_err("n grid must be strictly ascending within [0, 1]");
    }
    Ok(())
}

/// `{0.00, 0.05, ..., 1.00}`.
pub fn default_n_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

/// Which class the saliency maps explain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum LabelMode {
    #[default]
    True,
    Predicted,
}

/// One saliency map per sample, in dataset order.
pub fn saliency_maps<M: Classifier + ?Sized>(
    model: &M,
    dataset: &Dataset,
    estimator: Estimator,
    cfg: &EstimatorConfig,
    label_mode: LabelMode,
) -> Result<Vec<SaliencyMap>> {
    cfg.validate()?;
    dataset
        .samples()
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let class = match label_mode {
                LabelMode::True => s.label,
                LabelMode::Predicted => model.predict(&s.image)?,
            };
            compute_saliency(model, &s.image, class, estimator, cfg, i)
        })
        .collect()
}

/// Mask source and toroidal offset for every sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftPlan {
    /// Index of the sample whose saliency builds this sample's mask.
    pub partner: Vec<usize>,
    /// `(dx, dy)` applied to the borrowed mask.
    pub shifts: Vec<(i64, i64)>,
}

impl ShiftPlan {
    /// Each sample uses its own mask, unshifted.
    pub fn identity(len: usize) -> Self {
        Self {
            partner: (0..len).collect(),
            shifts: vec![(0, 0); len],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftConfig {
    /// Inclusive horizontal shift range, or `None` for no shift.
    pub dx: Option<(i64, i64)>,
    pub dy: Option<(i64, i64)>,
    /// Borrow masks through a random derangement (`false`: own mask).
    pub derange: bool,
    pub seed: u64,
}

impl ShiftConfig {
    /// Shifts uniform in `[ceil(0.05 side), ceil(0.45 side)]` per axis.
    pub fn for_image(height: usize, width: usize, seed: u64) -> Self {
        let range = |side: usize| {
            (
                (0.05 * side as f64).ceil() as i64,
                (0.45 * side as f64).ceil() as i64,
            )
        };
        Self {
            dx: Some(range(width)),
            dy: Some(range(height)),
            derange: true,
            seed,
        }
    }

    /// Own mask, no shift.
    pub fn diagnostic() -> Self {
        Self {
            dx: None,
            dy: None,
            derange: false,
            seed: 0,
        }
    }
}

/// Draws the partner assignment and shifts for `len` samples.
pub fn plan_shifts(len: usize, cfg: &ShiftConfig) -> Result<ShiftPlan> {
    for (lo, hi) in [cfg.dx, cfg.dy].into_iter().flatten() {
        if lo > hi {
            return arg_err(format!("empty shift range [{lo}, {hi}]"));
        }
    }
    let mut rng = rng_from_seed(cfg.seed);
    let partner = if cfg.derange {
        if len < 2 {
            return arg_err("shifted masks need at least two samples");
        }
        // Rejection sampling gives a uniform derangement; ~e tries on average.
        let mut p: Vec<usize> = (0..len).collect();
        loop {
            p.shuffle(&mut rng);
            if p.iter().enumerate().all(|(i, &j)| i != j) {
                break p;
            }
        }
    } else {
        (0..len).collect()
    };
    let mut draw = |r: Option<(i64, i64)>| r.map_or(0, |(lo, hi)| rng.gen_range(lo..=hi));
    let shifts = (0..len).map(|_| (draw(cfg.dx), draw(cfg.dy))).collect();
    Ok(ShiftPlan { partner, shifts })
}

fn alternative_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, &[index as u64, tag_hash("alternative")])
}

/// Accuracy on the grid when sample `i` is perturbed with the mask built
/// from `maps[plan.partner[i]]`, shifted by `plan.shifts[i]`.
#[allow(clippy::too_many_arguments)]
fn evaluate_masks<M: Classifier + ?Sized>(
    model: &M,
    dataset: &Dataset,
    maps: &[SaliencyMap],
    plan: &ShiftPlan,
    direction: Direction,
    perturbation: &Perturbation,
    n_grid: &[f64],
    seed: u64,
) -> Result<Vec<f64>> {
    let dims = dataset.require_nonempty()?;
    validate_grid(n_grid)?;
    perturbation.validate()?;
    if maps.len() != dataset.len()
        || plan.partner.len() != dataset.len()
        || plan.shifts.len() != dataset.len()
    {
        return shape_err("need one saliency map and one plan entry per sample");
    }
    if maps
        .iter()
        .any(|m| m.height() != dims.height || m.width() != dims.width)
    {
        return shape_err("saliency map dims do not match the images");
    }
    if plan.partner.iter().any(|&p| p >= dataset.len()) {
        return arg_err("plan references a sample outside the dataset");
    }

    let per_sample = dataset
        .samples()
        .par_iter()
        .enumerate()
        .map(|(i, s)| -> Result<Vec<bool>> {
            let alternative = perturbation.alternative(&s.image, alternative_seed(seed, i))?;
            let ranking = rank_pixels(&maps[plan.partner[i]], direction);
            let (dx, dy) = plan.shifts[i];
            n_grid
                .iter()
                .map(|&n| {
                    let mut mask = mask_from_ranking(&ranking, n)?;
                    if (dx, dy) != (0, 0) {
                        mask = shift_mask(&mask, dx, dy);
                    }
                    let perturbed = apply_mask(&s.image, &mask, &alternative)?;
                    Ok(model.predict(&perturbed)? == s.label)
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut hits = vec![0usize; n_grid.len()];
    for row in &per_sample {
        for (h, &ok) in hits.iter_mut().zip(row) {
            *h += ok as usize;
        }
    }
    Ok(hits
        .into_iter()
        .map(|h| h as f64 / dataset.len() as f64)
        .collect())
}

#[allow(clippy::too_many_arguments)]
pub fn degradation_curve_from_maps<M: Classifier + ?Sized>(
    model: &M,
    dataset: &Dataset,
    maps: &[SaliencyMap],
    estimator: &str,
    direction: Direction,
    perturbation: &Perturbation,
    n_grid: &[f64],
    seed: u64,
) -> Result<AccuracyCurve> {
    let plan = ShiftPlan::identity(dataset.len());
    let acc = evaluate_masks(
        model,
        dataset,
        maps,
        &plan,
        direction,
        perturbation,
        n_grid,
        seed,
    )?;
    AccuracyCurve::new(
        estimator,
        perturbation.tag(),
        direction,
        false,
        n_grid.to_vec(),
        acc,
    )
}

/// MiF/LiF curve for one estimator. Saliency is computed for the true label.
#[allow(clippy::too_many_arguments)]
pub fn degradation_curve<M: Classifier + ?Sized>(
    model: &M,
    dataset: &Dataset,
    estimator: Estimator,
    cfg: &EstimatorConfig,
    direction: Direction,
    perturbation: &Perturbation,
    n_grid: &[f64],
    seed: u64,
) -> Result<AccuracyCurve> {
    let maps = saliency_maps(model, dataset, estimator, cfg, LabelMode::True)?;
    degradation_curve_from_maps(
        model,
        dataset,
        &maps,
        estimator.tag(),
        direction,
        perturbation,
        n_grid,
        seed,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn shifted_degradation_curve_from_maps<M: Classifier + ?Sized>(
    model: &M,
    dataset: &Dataset,
    maps: &[SaliencyMap],
    estimator: &str,
    direction: Direction,
    perturbation: &Perturbation,
    n_grid: &[f64],
    plan: &ShiftPlan,
    seed: u64,
) -> Result<AccuracyCurve> {
    let acc = evaluate_masks(
        model,
        dataset,
        maps,
        plan,
        direction,
        perturbation,
        n_grid,
        seed,
    )?;
    AccuracyCurve::new(
        estimator,
        perturbation.tag(),
        direction,
        true,
        n_grid.to_vec(),
        acc,
    )
}

/// Curve for masks borrowed from other images and toroidally shifted.
#[allow(clippy::too_many_arguments)]
pub fn shifted_degradation_curve<M: Classifier + ?Sized>(
    model: &M,
    dataset: &Dataset,
    estimator: Estimator,
    cfg: &EstimatorConfig,
    direction: Direction,
    perturbation: &Perturbation,
    n_grid: &[f64],
    shift: &ShiftConfig,
    seed: u64,
) -> Result<AccuracyCurve> {
    if dataset.len() < 2 && shift.derange {
        return arg_err("shifted masks need at least two samples");
    }
    let plan = plan_shifts(dataset.len(), shift)?;
    let maps = saliency_maps(model, dataset, estimator, cfg, LabelMode::True)?;
    shifted_degradation_curve_from_maps(
        model,
        dataset,
        &maps,
        estimator.tag(),
        direction,
        perturbation,
        n_grid,
        &plan,
        seed,
    )
}

/// Trapezoidal area of `accuracy(0) - accuracy(m)` over `[0, n]`. Segments
/// where the accuracy exceeds the unperturbed value count negatively.
pub fn area_above(curve: &AccuracyCurve, n: f64) -> Result<f64> {
    curve.check_in_range(n)?;
    let a0 = curve.accuracy[0];
    let mut area = 0.0;
    for i in 0..curve.n_grid.len() - 1 {
        let left = curve.n_grid[i];
        if left >= n {
            break;
        }
        let right = curve.n_grid[i + 1].min(n);
        let drop_left = a0 - curve.accuracy[i];
        let drop_right = a0 - curve.accuracy_at(right)?;
        area += 0.5 * (right - left) * (drop_left + drop_right);
    }
    Ok(area)
}

pub fn delta(f: f64, u: f64) -> f64 {
    f - u
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArtifactBound {
    /// `F^{s,e}(n) - U^ref(n)`.
    pub delta_tilde: f64,
    /// `max(delta_tilde, 0) + U^ref(n)`.
    pub bound: f64,
}

/// Artifact bound from the shifted MiF curve of an estimator and the LiF
/// curve of the reference estimator.
pub fn artifact_bound(
    shifted_mif: &AccuracyCurve,
    reference_lif: &AccuracyCurve,
    n: f64,
) -> Result<ArtifactBound> {
    if shifted_mif.n_grid != reference_lif.n_grid {
        return Err(Error::Shape("curves are sampled on different grids".into()));
    }
    let f_s = area_above(shifted_mif, n)?;
    let u_ref = area_above(reference_lif, n)?;
    let delta_tilde = f_s - u_ref;
    Ok(ArtifactBound {
        delta_tilde,
        bound: delta_tilde.max(0.0) + u_ref,
    })
}

/// Curves keyed by `(estimator, direction, shifted)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CurveSet {
    curves: Vec<AccuracyCurve>,
}

impl CurveSet {
    pub fn push(&mut self, curve: AccuracyCurve) {
        self.curves.push(curve);
    }

    pub fn get(
        &self,
        estimator: &str,
        direction: Direction,
        shifted: bool,
    ) -> Option<&AccuracyCurve> {
        self.curves
            .iter()
            .find(|c| c.estimator == estimator && c.direction == direction && c.shifted == shifted)
    }

    fn require(
        &self,
        estimator: &str,
        direction: Direction,
        shifted: bool,
    ) -> Result<&AccuracyCurve> {
        self.get(estimator, direction, shifted).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "missing {}{direction} curve for {estimator}",
                if shifted { "shifted " } else { "" }
            ))
        })
    }

    pub fn curves(&self) -> &[AccuracyCurve] {
        &self.curves
    }

    pub fn len(&self) -> usize {
        self.curves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.curves.is_empty()
    }
}

impl FromIterator<AccuracyCurve> for CurveSet {
    fn from_iter<I: IntoIterator<Item = AccuracyCurve>>(iter: I) -> Self {
        Self {
            curves: iter.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityRow {
    pub estimator: String,
    pub n_star: f64,
    pub f: f64,
    pub u: f64,
    pub delta: f64,
    pub delta_tilde: f64,
    pub bound: f64,
    /// `-bound`: systematic error with the clamp on `delta_tilde`.
    pub delta_sys: f64,
    /// `-(U^ref + delta_tilde)`: the same error without the clamp.
    pub delta_sys_unclamped: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub reference: String,
    pub perturbation: String,
    pub rows: Vec<FidelityRow>,
}

impl FidelityReport {
    /// Needs unshifted MiF and LiF plus shifted MiF curves for every
    /// estimator, and the unshifted LiF curve of `reference`.
    pub fn from_curves(
        curves: &CurveSet,
        estimators: &[&str],
        reference: &str,
        n_stars: &[f64],
    ) -> Result<Self> {
        let u_ref_curve = curves.require(reference, Direction::LiF, false)?;
        let mut rows = Vec::new();
        for &n in n_stars {
            for &e in estimators {
                let f = area_above(curves.require(e, Direction::MiF, false)?, n)?;
                let u = area_above(curves.require(e, Direction::LiF, false)?, n)?;
                let b = artifact_bound(curves.require(e, Direction::MiF, true)?, u_ref_curve, n)?;
                let u_ref = area_above(u_ref_curve, n)?;
                rows.push(FidelityRow {
                    estimator: e.to_owned(),
                    n_star: n,
                    f,
                    u,
                    delta: delta(f, u),
                    delta_tilde: b.delta_tilde,
                    bound: b.bound,
                    delta_sys: -b.bound,
                    delta_sys_unclamped: -(u_ref + b.delta_tilde),
                });
            }
        }
        Ok(Self {
            reference: reference.to_owned(),
            perturbation: u_ref_curve.perturbation.clone(),
            rows,
        })
    }

    pub fn row(&self, estimator: &str, n_star: f64) -> Option<&FidelityRow> {
        self.rows
            .iter()
            .find(|r| r.estimator == estimator && r.n_star == n_star)
    }
}

/// All four curves (MiF/LiF, plain/shifted) for each estimator's maps.
#[allow(clippy::too_many_arguments)]
pub fn fidelity_curves_from_maps<M: Classifier + ?Sized>(
    model: &M,
    dataset: &Dataset,
    maps: &[(Estimator, Vec<SaliencyMap>)],
    perturbation: &Perturbation,
    n_grid: &[f64],
    plan: &ShiftPlan,
    seed: u64,
) -> Result<CurveSet> {
    let mut set = CurveSet::default();
    for (estimator, est_maps) in maps {
        for direction in [Direction::MiF, Direction::LiF] {
            set.push(degradation_curve_from_maps(
                model,
                dataset,
                est_maps,
                estimator.tag(),
                direction,
                perturbation,
                n_grid,
                seed,
            )?);
            set.push(shifted_degradation_curve_from_maps(
                model,
                dataset,
                est_maps,
                estimator.tag(),
                direction,
                perturbation,
                n_grid,
                plan,
                seed,
            )?);
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FidelityRun {
    pub curves: CurveSet,
    pub report: FidelityReport,
    pub plan: ShiftPlan,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FidelitySettings {
    pub estimators: Vec<Estimator>,
    pub estimator_config: EstimatorConfig,
    pub perturbation: Perturbation,
    pub n_grid: Vec<f64>,
    pub n_stars: Vec<f64>,
    pub shift: ShiftConfig,
    pub reference: Estimator,
    pub seed: u64,
}

impl FidelitySettings {
    /// Defaults for `height x width` images: all five estimators, blur with
    /// `sigma`, the 21-point grid, `n* = {0.2, 0.4}`, SQ-SG as reference.
    pub fn new(height: usize, width: usize, sigma: f64, seed: u64) -> Self {
        Self {
            estimators: Estimator::ALL.to_vec(),
            estimator_config: EstimatorConfig {
                seed: derive_seed(seed, &[tag_hash("estimators")]),
                ..EstimatorConfig::default()
            },
            perturbation: Perturbation::Blur { sigma },
            n_grid: default_n_grid(),
            n_stars: vec![0.2, 0.4],
            shift: ShiftConfig::for_image(height, width, derive_seed(seed, &[tag_hash("shift")])),
            reference: Estimator::SquaredSmooth,
            seed,
        }
    }
}

/// Computes every estimator's maps once, all curves, and the report.
pub fn run_fidelity<M: Classifier + ?Sized>(
    model: &M,
    dataset: &Dataset,
    settings: &FidelitySettings,
) -> Result<FidelityRun> {
    dataset.require_nonempty()?;
    if !settings.estimators.contains(&settings.reference) {
        return arg_err(format!(
            "reference estimator {} is not among the evaluated estimators",
            settings.reference
        ));
    }
    for &n in &settings.n_stars {
        if !(0.0..=*settings.n_grid.last().unwrap_or(&0.0)).contains(&n) {
            return arg_err(format!("n* = {n} lies outside the grid"));
        }
    }
    let plan = plan_shifts(dataset.len(), &settings.shift)?;
    let maps = settings
        .estimators
        .iter()
        .map(|&e| {
            Ok((
                e,
                saliency_maps(
                    model,
                    dataset,
                    e,
                    &settings.estimator_config,
                    LabelMode::True,
                )?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let curves = fidelity_curves_from_maps(
        model,
        dataset,
        &maps,
        &settings.perturbation,
        &settings.n_grid,
        &plan,
        settings.seed,
    )?;
    let tags: Vec<&str> = settings.estimators.iter().map(|e| e.tag()).collect();
    let report =
        FidelityReport::from_curves(&curves, &tags, settings.reference.tag(), &settings.n_stars)?;
    Ok(FidelityRun {
        curves,
        report,
        plan,
    })
}

pub fn fidelity_report<M: Classifier + ?Sized>(
    model: &M,
    dataset: &Dataset,
    settings: &FidelitySettings,
) -> Result<FidelityReport> {
    Ok(run_fidelity(model, dataset, settings)?.report)
}
