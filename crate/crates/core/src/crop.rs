//! Crop-and-rescale evaluation.
//!
//! The salient region of a map is cropped to its tightest bounding box,
//! resized back to the input size and classified again. The score
//! `s = ln a - ln S_c` rewards small crops (`a`, area fraction) that keep a
//! high true-class probability `S_c`. Lower is better.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::estimators::{Estimator, EstimatorConfig};
use crate::fidelity::{saliency_maps, LabelMode};
use crate::model::Classifier;
use crate::tensor::{masked_count, rank_pixels, Dataset, Direction, Image, SaliencyMap};

/// Floor applied to `S_c` before taking the log.
pub const MIN_CLASS_SCORE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            top: 0,
            left: 0,
            height,
            width,
        }
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    /// `a`: the rect's share of a `height x width` image.
    pub fn area_fraction(&self, height: usize, width: usize) -> f64 {
        self.area() as f64 / (height * width) as f64
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.height >= 1
            && self.width >= 1
            && self.top + self.height <= height
            && self.left + self.width <= width
    }
}

/// Pixels whose min-max-normalized score is at least `t_rel`. A constant
/// map selects everything.
pub fn salient_region_threshold(map: &SaliencyMap, t_rel: f64) -> Result<Vec<usize>> {
    if !(t_rel > 0.0 && t_rel <= 1.0) {
        return arg_err(format!("relative threshold {t_rel} must lie in (0, 1]"));
    }
    let scores = map.scores();
    let (lo, hi) = scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| {
            (lo.min(s as f64), hi.max(s as f64))
        });
    let range = hi - lo;
    if range <= 0.0 {
        return Ok((0..scores.len()).collect());
    }
    Ok((0..scores.len())
        .filter(|&p| (scores[p] as f64 - lo) / range >= t_rel)
        .collect())
}

/// Nearest-rank percentile: the `ceil(p/100 * N)`-th smallest value.
pub fn nearest_rank_percentile(sorted: &[usize], p: f64) -> usize {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// The `round(frac * H * W)` highest-ranked pixels, minus those whose row
/// or column lies outside the `[lo, hi]` percentile range of the selection.
pub fn salient_region_topfrac(
    map: &SaliencyMap,
    frac: f64,
    trim: (f64, f64),
) -> Result<Vec<usize>> {
    if !(frac > 0.0 && frac <= 1.0) {
        return arg_err(format!("region fraction {frac} must lie in (0, 1]"));
    }
    let (lo_p, hi_p) = trim;
    if !(0.0 < lo_p && lo_p <= hi_p && hi_p <= 100.0) {
        return arg_err("trim percentiles must satisfy 0 < low <= high <= 100");
    }
    let w = map.width();
    let count = masked_count(frac, map.height() * map.width()).max(1);
    let selected: Vec<usize> = rank_pixels(map, Direction::MiF).order()[..count].to_vec();

    let bounds = |coord: &dyn Fn(usize) -> usize| {
        let mut v: Vec<usize> = selected.iter().map(|&p| coord(p)).collect();
        v.sort_unstable();
        (
            nearest_rank_percentile(&v, lo_p),
            nearest_rank_percentile(&v, hi_p),
        )
    };
    let (y_lo, y_hi) = bounds(&|p| p / w);
    let (x_lo, x_hi) = bounds(&|p| p % w);
    let trimmed: Vec<usize> = selected
        .iter()
        .copied()
        .filter(|&p| (y_lo..=y_hi).contains(&(p / w)) && (x_lo..=x_hi).contains(&(p % w)))
        .collect();
    Ok(if trimmed.is_empty() {
        selected
    } else {
        trimmed
    })
}

/// Smallest axis-aligned rectangle containing every pixel index.
pub fn bounding_crop(pixels: &[usize], height: usize, width: usize) -> Result<Rect> {
    if pixels.is_empty() {
        return arg_err("cannot crop to an empty region");
    }
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for &p in pixels {
        if p >= height * width {
            return shape_err(format!("pixel {p} outside a {height}x{width} image"));
        }
        let (y, x) = (p / width, p % width);
        y0 = y0.min(y);
        y1 = y1.max(y);
        x0 = x0.min(x);
        x1 = x1.max(x);
    }
    Ok(Rect {
        top: y0,
        left: x0,
        height: y1 - y0 + 1,
        width: x1 - x0 + 1,
    })
}

/// Sampling positions and weights for align-corners resizing of `len`
/// source samples starting at `start` to `out` samples.
fn resample_axis(start: usize, len: usize, out: usize) -> Vec<(usize, usize, f64)> {
    (0..out)
        .map(|o| {
            let pos = if out > 1 {
                (o * (len - 1)) as f64 / (out - 1) as f64
            } else {
                (len - 1) as f64 / 2.0
            };
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (start + i0, start + i1, pos - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of `rect` back to the full image size.
pub fn crop_and_rescale(image: &Image, rect: Rect) -> Result<Image> {
    let dims = image.dims();
    if !rect.fits(dims.height, dims.width) {
        return shape_err(format!("crop {rect:?} does not fit a {dims} image"));
    }
    let ys = resample_axis(rect.top, rect.height, dims.height);
    let xs = resample_axis(rect.left, rect.width, dims.width);
    let src = image.data();
    let mut out = Vec::with_capacity(dims.len());
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..dims.channels {
                let v = |y, x| src[dims.index(y, x, c)] as f64;
                let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
                let bottom = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
                out.push((top * (1.0 - fy) + bottom * fy) as f32);
            }
        }
    }
    Image::from_clamped(dims, out)
}

/// `ln a - ln max(S_c, 1e-12)`.
pub fn crop_score(a: f64, class_score: f64) -> f64 {
    a.ln() - class_score.max(MIN_CLASS_SCORE).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RegionMethod {
    /// Min-max-normalized score at least `t_rel`.
    Threshold { t_rel: f64 },
    /// Top `frac` of pixels with percentile trimming of coordinates.
    TopFraction {
        frac: f64,
        trim_low: f64,
        trim_high: f64,
    },
}

impl Default for RegionMethod {
    fn default() -> Self {
        RegionMethod::Threshold { t_rel: 0.2 }
    }
}

impl RegionMethod {
    pub fn top_fraction(frac: f64) -> Self {
        RegionMethod::TopFraction {
            frac,
            trim_low: 1.0,
            trim_high: 99.0,
        }
    }

    pub fn tag(&self) -> String {
        match *self {
            RegionMethod::Threshold { t_rel } => format!("threshold-{t_rel}"),
            RegionMethod::TopFraction { frac, .. } => format!("topfrac-{frac}"),
        }
    }

    pub fn region(&self, map: &SaliencyMap) -> Result<Vec<usize>> {
        match *self {
            RegionMethod::Threshold { t_rel } => salient_region_threshold(map, t_rel),
            RegionMethod::TopFraction {
                frac,
                trim_low,
                trim_high,
            } => salient_region_topfrac(map, frac, (trim_low, trim_high)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropSample {
    pub rect: Rect,
    pub a: f64,
    pub class_score: f64,
    pub s: f64,
    pub region_pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropReport {
    pub estimator: String,
    pub region_method: String,
    pub samples: usize,
    pub mean_sc: f64,
    pub mean_a: f64,
    /// Mean of the per-sample scores.
    pub mean_s: f64,
    /// `1.96 * std / sqrt(N)` of the per-sample scores.
    pub ci_half: f64,
    /// `ln(mean_a) - ln(mean_sc)`.
    pub s_of_means: f64,
    /// Mean region size in percent of the image.
    pub pct_pixels: f64,
}

impl CropReport {
    pub fn from_samples(
        estimator: &str,
        method: &RegionMethod,
        pixels: usize,
        per: &[CropSample],
    ) -> Result<Self> {
        if per.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = per.len() as f64;
        let mean = |f: fn(&CropSample) -> f64| per.iter().map(f).sum::<f64>() / n;
        let mean_sc = mean(|c| c.class_score);
        let mean_a = mean(|c| c.a);
        let mean_s = mean(|c| c.s);
        let ci_half = if per.len() > 1 {
            let var = per.iter().map(|c| (c.s - mean_s).powi(2)).sum::<f64>() / (n - 1.0);
            1.96 * var.sqrt() / n.sqrt()
        } else {
            0.0
        };
        Ok(Self {
            estimator: estimator.to_owned(),
            region_method: method.tag(),
            samples: per.len(),
            mean_sc,
            mean_a,
            mean_s,
            ci_half,
            s_of_means: crop_score(mean_a, mean_sc),
            pct_pixels: 100.0 * per.iter().map(|c| c.region_pixels as f64).sum::<f64>()
                / (n * pixels as f64),
        })
    }
}

/// Crop, rescale and rescore one image. `S_c` is the true-class softmax
/// probability on the rescaled crop.
pub fn crop_sample<M: Classifier + ?Sized>(
    model: &M,
    image: &Image,
    label: usize,
    map: &SaliencyMap,
    method: &RegionMethod,
) -> Result<CropSample> {
    let dims = image.dims();
    if map.height() != dims.height || map.width() != dims.width {
        return shape_err("saliency map dims do not match the image");
    }
    let region = method.region(map)?;
    let rect = bounding_crop(&region, dims.height, dims.width)?;
    let cropped = crop_and_rescale(image, rect)?;
    model.check_class(label)?;
    let class_score = model.forward(&cropped)?.probabilities[label] as f64;
    let a = rect.area_fraction(dims.height, dims.width);
    Ok(CropSample {
        rect,
        a,
        class_score,
        s: crop_score(a, class_score),
        region_pixels: region.len(),
    })
}

pub fn crop_metric_from_maps<M: Classifier + ?Sized>(
    model: &M,
    dataset: &Dataset,
    maps: &[SaliencyMap],
    estimator: &str,
    method: &RegionMethod,
) -> Result<(CropReport, Vec<CropSample>)> {
    let dims = dataset.require_nonempty()?;
    if maps.len() != dataset.len() {
        return shape_err("need one saliency map per sample");
    }
    let per = dataset
        .samples()
        .par_iter()
        .zip(maps)
        .map(|(s, m)| crop_sample(model, &s.image, s.label, m, method))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        CropReport::from_samples(estimator, method, dims.pixels(), &per)?,
        per,
    ))
}

/// Saliency for the true label, then the crop metric over the dataset.
pub fn crop_metric_eval<M: Classifier + ?Sized>(
    model: &M,
    dataset: &Dataset,
    estimator: Estimator,
    cfg: &EstimatorConfig,
    method: &RegionMethod,
) -> Result<CropReport> {
    dataset.require_nonempty()?;
    let maps = saliency_maps(model, dataset, estimator, cfg, LabelMode::True)?;
    Ok(crop_metric_from_maps(model, dataset, &maps, estimator.tag(), method)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::random_saliency;
    use crate::model::LinearModel;
    use crate::tensor::{Dims, LabeledSample};
    use proptest::prelude::*;

    fn map(h: usize, w: usize, s: Vec<f32>) -> SaliencyMap {
        SaliencyMap::new(h, w, s).unwrap()
    }

    #[test]
    fn threshold_basics() {
        let m = map(2, 2, vec![0.0, 1.0, 0.5, 0.1]);
        assert_eq!(salient_region_threshold(&m, 0.2).unwrap(), vec![1, 2]);
        assert_eq!(salient_region_threshold(&m, 1.0).unwrap(), vec![1]);
        let flat = map(3, 3, vec![0.4; 9]);
        assert_eq!(salient_region_threshold(&flat, 0.5).unwrap().len(), 9);
        assert!(salient_region_threshold(&m, 0.0).is_err());
        assert!(salient_region_threshold(&m, 1.5).is_err());
    }

    #[test]
    fn random_map_threshold_covers_eighty_percent() {
        let m = random_saliency(224, 224, 17).unwrap();
        let frac = salient_region_threshold(&m, 0.2).unwrap().len() as f64 / (224.0 * 224.0);
        assert!((frac - 0.8).abs() <= 0.01, "{frac}");
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<usize> = (1..=10).collect();
        assert_eq!(nearest_rank_percentile(&v, 1.0), 1);
        assert_eq!(nearest_rank_percentile(&v, 50.0), 5);
        assert_eq!(nearest_rank_percentile(&v, 99.0), 10);
        let v: Vec<usize> = (0..200).collect();
        assert_eq!(nearest_rank_percentile(&v, 1.0), 1);
        assert_eq!(nearest_rank_percentile(&v, 99.0), 197);
    }

    #[test]
    fn topfrac_full_image_trims_little() {
        let m = random_saliency(32, 32, 2).unwrap();
        let r = salient_region_topfrac(&m, 1.0, (1.0, 99.0)).unwrap();
        assert!(r.len() >= (0.96 * 1024.0) as usize && r.len() <= 1024);
    }

    #[test]
    fn topfrac_recovers_block() {
        let (h, w) = (32, 32);
        let mut s = vec![0.01f32; h * w];
        let block: Vec<usize> = (10..18)
            .flat_map(|y| (3..11).map(move |x| y * w + x))
            .collect();
        for (k, &p) in block.iter().enumerate() {
            s[p] = 1.0 + k as f32;
        }
        let r = salient_region_topfrac(&map(h, w, s), 64.0 / 1024.0, (1.0, 99.0)).unwrap();
        let mut got = r.clone();
        got.sort_unstable();
        assert_eq!(got, block);
    }

    #[test]
    fn topfrac_matches_ranking_prefix_without_trim() {
        let m = random_saliency(16, 16, 4).unwrap();
        let mut r = salient_region_topfrac(&m, 0.25, (100.0, 100.0)).unwrap();
        let mut expected = rank_pixels(&m, Direction::MiF).order()[..64].to_vec();
        r.sort_unstable();
        expected.sort_unstable();
        // Trimming at the 100th percentile on both ends keeps only the
        // maximal row and column, so compare the untrimmed path instead.
        assert!(r.iter().all(|p| expected.contains(p)));
        let untrimmed = salient_region_topfrac(&m, 0.25, (f64::MIN_POSITIVE, 100.0)).unwrap();
        let mut u = untrimmed.clone();
        u.sort_unstable();
        assert_eq!(u, expected);
    }

    #[test]
    fn bounding_crop_examples() {
        assert_eq!(
            bounding_crop(&[2 * 5 + 3], 4, 5).unwrap(),
            Rect {
                top: 2,
                left: 3,
                height: 1,
                width: 1
            }
        );
        assert_eq!(bounding_crop(&[0, 19], 4, 5).unwrap(), Rect::full(4, 5));
        assert!(bounding_crop(&[], 4, 5).is_err());
        assert!(bounding_crop(&[20], 4, 5).is_err());
    }

    fn gradient_image(dims: Dims) -> Image {
        let data = (0..dims.len()).map(|i| (i % 97) as f32 / 96.0).collect();
        Image::new(dims, data).unwrap()
    }

    #[test]
    fn full_rect_is_identity() {
        let img = gradient_image(Dims::new(7, 5, 3));
        let out = crop_and_rescale(&img, Rect::full(7, 5)).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn two_by_two_corners() {
        let dims = Dims::new(6, 6, 1);
        let img = gradient_image(dims);
        let rect = Rect {
            top: 2,
            left: 1,
            height: 2,
            width: 2,
        };
        let out = crop_and_rescale(&img, rect).unwrap();
        let at = |im: &Image, y, x| im.data()[dims.index(y, x, 0)];
        assert_eq!(at(&out, 0, 0), at(&img, 2, 1));
        assert_eq!(at(&out, 0, 5), at(&img, 2, 2));
        assert_eq!(at(&out, 5, 0), at(&img, 3, 1));
        assert_eq!(at(&out, 5, 5), at(&img, 3, 2));
        let bad = Rect { top: 5, ..rect };
        assert!(crop_and_rescale(&img, bad).is_err());
    }

    #[test]
    fn constant_crop_stays_constant() {
        let img = Image::filled(Dims::new(8, 8, 2), 0.3).unwrap();
        let out = crop_and_rescale(
            &img,
            Rect {
                top: 1,
                left: 2,
                height: 3,
                width: 5,
            },
        )
        .unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.3).abs() < 1e-7));
    }

    #[test]
    fn score_monotonicity() {
        assert_eq!(crop_score(1.0, 0.5), -(0.5f64).ln());
        assert!(crop_score(0.5, 0.5) < crop_score(0.6, 0.5));
        assert!(crop_score(0.5, 0.6) < crop_score(0.5, 0.5));
        assert_eq!(crop_score(1.0, 0.0), -(1e-12f64).ln());
    }

    #[test]
    fn report_statistics() {
        let mk = |s: f64| CropSample {
            rect: Rect::full(2, 2),
            a: 1.0,
            class_score: (-s).exp(),
            s,
            region_pixels: 2,
        };
        let per = [mk(1.0), mk(2.0), mk(3.0)];
        let r = CropReport::from_samples("VG", &RegionMethod::default(), 4, &per).unwrap();
        assert!((r.mean_s - 2.0).abs() < 1e-12);
        assert!((r.ci_half - 1.96 / 3f64.sqrt()).abs() < 1e-12);
        assert_eq!(r.pct_pixels, 50.0);
        assert!(CropReport::from_samples("VG", &RegionMethod::default(), 4, &[]).is_err());
    }

    #[test]
    fn full_region_scores_minus_log_probability() {
        let dims = Dims::new(4, 4, 1);
        let model = LinearModel::random(dims, 2, 1.0, 1);
        let img = gradient_image(dims);
        let m = map(4, 4, vec![1.0; 16]);
        let c = crop_sample(&model, &img, 1, &m, &RegionMethod::default()).unwrap();
        let p = model.forward(&img).unwrap().probabilities[1] as f64;
        assert_eq!(c.a, 1.0);
        assert!((c.s + p.ln()).abs() < 1e-12);
    }

    #[test]
    fn eval_is_deterministic_and_rejects_empty() {
        let dims = Dims::new(8, 8, 1);
        let model = LinearModel::random(dims, 2, 1.0, 5);
        let samples = (0..6)
            .map(|i| LabeledSample {
                image: crate::perturbation::uniform_alternative(dims, i),
                label: (i % 2) as usize,
                ground_truth: None,
            })
            .collect();
        let data = Dataset::new(samples, 2).unwrap();
        let cfg = EstimatorConfig::default();
        for method in [RegionMethod::default(), RegionMethod::top_fraction(0.2)] {
            let a = crop_metric_eval(&model, &data, Estimator::Smooth, &cfg, &method).unwrap();
            let b = crop_metric_eval(&model, &data, Estimator::Smooth, &cfg, &method).unwrap();
            assert_eq!(a, b);
            assert!(a.mean_a > 0.0 && a.mean_a <= 1.0 && a.ci_half >= 0.0);
        }
        let empty = Dataset::new(vec![], 2).unwrap();
        assert!(matches!(
            crop_metric_eval(
                &model,
                &empty,
                Estimator::Vanilla,
                &cfg,
                &RegionMethod::default()
            ),
            Err(Error::EmptyDataset)
        ));
    }

    proptest! {
        #[test]
        fn bounding_crop_is_monotone(
            base in prop::collection::btree_set(0usize..64, 1..10),
            extra in prop::collection::btree_set(0usize..64, 0..10),
        ) {
            let small: Vec<usize> = base.iter().copied().collect();
            let big: Vec<usize> = base.union(&extra).copied().collect();
            let r1 = bounding_crop(&small, 8, 8).unwrap();
            let r2 = bounding_crop(&big, 8, 8).unwrap();
            prop_assert!(r2.area() >= r1.area());
            for &p in &big {
                let (y, x) = (p / 8, p % 8);
                prop_assert!(y >= r2.top && y < r2.top + r2.height && x >= r2.left && x < r2.left + r2.width);
            }
        }

        #[test]
        fn regions_invariant_under_exact_rescaling(
            ints in prop::collection::vec(0u16..1000, 64),
            exp in -8i32..8,
            odd in prop::sample::select(vec![1.0f32, 3.0, 5.0, 7.0]),
        ) {
            let scores: Vec<f32> = ints.iter().map(|&v| v as f32).collect();
            let m = map(8, 8, scores);
            let k = odd * 2f32.powi(exp);
            let scaled = m.scaled(k).unwrap();
            for method in [RegionMethod::default(), RegionMethod::top_fraction(0.2)] {
                prop_assert_eq!(method.region(&m).unwrap(), method.region(&scaled).unwrap());
            }
        }
    }
}
