//! Images, saliency maps, masks and the ranking primitives built on them.
//!
//! All buffers are row-major. Images and gradient tensors interleave
//! channels (`(y * width + x) * channels + c`); maps and masks hold one
//! value per pixel (`y * width + x`).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Dims {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub const fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Number of scalar entries, `height * width * channels`.
    pub const fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return shape_err(format!("dimensions must be positive, got {self}"));
        }
        Ok(())
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

/// An image with every value finite and inside `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    dims: Dims,
    data: Vec<f32>,
}

impl Image {
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        dims.validate()?;
        if data.len() != dims.len() {
            return shape_err(format!(
                "image {dims} needs {} values, got {}",
                dims.len(),
                data.len()
            ));
        }
        if let Some(pos) = data
            .iter()
            .position(|v| !v.is_finite() || *v < 0.0 || *v > 1.0)
        {
            return Err(Error::InvalidImage(format!(
                "value {} at offset {pos} is outside [0, 1]",
                data[pos]
            )));
        }
        Ok(Self { dims, data })
    }

    /// Builds an image by clamping arbitrary finite values into `[0, 1]`.
    pub fn from_clamped(dims: Dims, data: Vec<f32>) -> Result<Self> {
        let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self::new(dims, data)
    }

    pub fn filled(dims: Dims, value: f32) -> Result<Self> {
        Self::new(dims, vec![value; dims.len()])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.dims.index(y, x, c)]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            dims: self.dims,
            data: self.data.clone(),
        }
    }
}

/// An unconstrained `H x W x C` float tensor: gradients, attributions and
/// noisy model inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Dims,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        dims.validate()?;
        if data.len() != dims.len() {
            return shape_err(format!(
                "tensor {dims} needs {} values, got {}",
                dims.len(),
                data.len()
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.len()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

/// Non-negative per-pixel importance scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    scores: Vec<f32>,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, scores: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return shape_err("saliency map dimensions must be positive");
        }
        if scores.len() != height * width {
            return shape_err(format!(
                "saliency map {height}x{width} needs {} scores, got {}",
                height * width,
                scores.len()
            ));
        }
        if let Some(pos) = scores.iter().position(|s| !s.is_finite() || *s < 0.0) {
            return arg_err(format!(
                "saliency score {} at pixel {pos} is negative or not finite",
                scores[pos]
            ));
        }
        Ok(Self {
            height,
            width,
            scores,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn scores(&self) -> &[f32] {
        &self.scores
    }

    pub fn max_score(&self) -> f32 {
        self.scores.iter().copied().fold(0.0, f32::max)
    }

    /// Multiplies every score by `factor > 0`.
    pub fn scaled(&self, factor: f32) -> Result<Self> {
        if factor <= 0.0 || !factor.is_finite() {
            return arg_err(format!("scale factor must be positive, got {factor}"));
        }
        Self::new(
            self.height,
            self.width,
            self.scores.iter().map(|s| s * factor).collect(),
        )
    }
}

/// Binary pixel mask: `false` marks a pixel to replace, `true` one to keep.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    keep: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != height * width {
            return shape_err(format!(
                "mask {height}x{width} needs {} entries, got {}",
                height * width,
                keep.len()
            ));
        }
        Ok(Self {
            height,
            width,
            keep,
        })
    }

    /// Builds a mask from 0/1 values, rejecting anything else.
    pub fn from_bits(height: usize, width: usize, bits: &[u8]) -> Result<Self> {
        let keep = bits
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => arg_err(format!("mask entries must be 0 or 1, got {other}")),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(height, width, keep)
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            keep: vec![true; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            keep: vec![false; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn bits(&self) -> Vec<u8> {
        self.keep.iter().map(|&k| k as u8).collect()
    }

    /// Number of pixels marked for replacement.
    pub fn count_replaced(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            keep: self.keep.iter().map(|k| !k).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    /// Most important first.
    MiF,
    /// Least important first.
    LiF,
}

impl Direction {
    pub fn tag(self) -> &'static str {
        match self {
            Direction::MiF => "MiF",
            Direction::LiF => "LiF",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "MiF" => Some(Direction::MiF),
            "LiF" => Some(Direction::LiF),
            _ => None,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// A permutation of pixel indices in masking order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelRanking {
    height: usize,
    width: usize,
    order: Vec<usize>,
    direction: Direction,
}

impl PixelRanking {
    pub fn new(
        height: usize,
        width: usize,
        order: Vec<usize>,
        direction: Direction,
    ) -> Result<Self> {
        let n = height * width;
        if order.len() != n {
            return shape_err(format!("ranking needs {n} entries, got {}", order.len()));
        }
        let mut seen = vec![false; n];
        for &i in &order {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return arg_err(format!("ranking is not a permutation (index {i})"));
            }
        }
        Ok(Self {
            height,
            width,
            order,
            direction,
        })
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }
}

/// Replaces pixels where `mask` is 0 with the corresponding pixels of
/// `alternative`, across all channels.
pub fn apply_mask(image: &Image, mask: &Mask, alternative: &Image) -> Result<Image> {
    let dims = image.dims();
    if mask.height != dims.height || mask.width != dims.width {
        return shape_err(format!(
            "mask {}x{} does not match image {dims}",
            mask.height, mask.width
        ));
    }
    if alternative.dims() != dims {
        return shape_err(format!(
            "alternative {} does not match image {dims}",
            alternative.dims()
        ));
    }
    let c = dims.channels;
    let mut data = image.data.clone();
    for (p, _) in mask.keep.iter().enumerate().filter(|(_, k)| !**k) {
        data[p * c..(p + 1) * c].copy_from_slice(&alternative.data[p * c..(p + 1) * c]);
    }
    Ok(Image { dims, data })
}

/// Orders pixels by score: descending for MiF, ascending for LiF. Equal
/// scores keep ascending row-major order in both directions.
pub fn rank_pixels(saliency: &SaliencyMap, direction: Direction) -> PixelRanking {
    let scores = &saliency.scores;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    match direction {
        Direction::MiF => order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))),
        Direction::LiF => order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b))),
    }
    PixelRanking {
        height: saliency.height,
        width: saliency.width,
        order,
        direction,
    }
}

/// Number of pixels masked for fraction `n` of `pixels`.
pub fn masked_count(n: f64, pixels: usize) -> usize {
    ((n * pixels as f64).round() as usize).min(pixels)
}

/// Zeros the first `round(n * H * W)` pixels of `ranking`.
pub fn mask_from_ranking(ranking: &PixelRanking, n: f64) -> Result<Mask> {
    if !(0.0..=1.0).contains(&n) {
        return arg_err(format!("fraction n must lie in [0, 1], got {n}"));
    }
    let total = ranking.order.len();
    let mut keep = vec![true; total];
    for &p in &ranking.order[..masked_count(n, total)] {
        keep[p] = false;
    }
    Ok(Mask {
        height: ranking.height,
        width: ranking.width,
        keep,
    })
}

/// Toroidal translation: entry `(y, x)` moves to `(y + dy, x + dx)` modulo
/// the mask size.
pub fn shift_mask(mask: &Mask, dx: i64, dy: i64) -> Mask {
    let (h, w) = (mask.height, mask.width);
    let sx = dx.rem_euclid(w as i64) as usize;
    let sy = dy.rem_euclid(h as i64) as usize;
    let mut keep = vec![true; h * w];
    for y in 0..h {
        let ty = (y + sy) % h;
        for x in 0..w {
            keep[ty * w + (x + sx) % w] = mask.keep[y * w + x];
        }
    }
    Mask {
        height: h,
        width: w,
        keep,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub image: Image,
    pub label: usize,
    /// Ground-truth importance (0 on the informative pixels), synthetic data only.
    pub ground_truth: Option<Mask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<LabeledSample>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(samples: Vec<LabeledSample>, num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return arg_err("class count must be positive");
        }
        if let Some(first) = samples.first() {
            let dims = first.image.dims();
            for (i, s) in samples.iter().enumerate() {
                if s.image.dims() != dims {
                    return shape_err(format!(
                        "sample {i} has dims {}, expected {dims}",
                        s.image.dims()
                    ));
                }
                if s.label >= num_classes {
                    return Err(Error::InvalidClass {
                        class: s.label,
                        num_classes,
                    });
                }
                if let Some(m) = &s.ground_truth {
                    if m.height != dims.height || m.width != dims.width {
                        return shape_err(format!(
                            "ground-truth mask of sample {i} has wrong dims"
                        ));
                    }
                }
            }
        }
        Ok(Self {
            samples,
            num_classes,
        })
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Image dims shared by all samples, or `None` when empty.
    pub fn dims(&self) -> Option<Dims> {
        self.samples.first().map(|s| s.image.dims())
    }

    /// The first `count` samples (or all of them if fewer).
    pub fn take(&self, count: usize) -> Self {
        Self {
            samples: self.samples.iter().take(count).cloned().collect(),
            num_classes: self.num_classes,
        }
    }

    pub(crate) fn require_nonempty(&self) -> Result<Dims> {
        self.dims().ok_or(Error::EmptyDataset)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gray(h: usize, w: usize, v: &[f32]) -> Image {
        Image::new(Dims::new(h, w, 1), v.to_vec()).unwrap()
    }

    fn map(h: usize, w: usize, v: &[f32]) -> SaliencyMap {
        SaliencyMap::new(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn image_rejects_out_of_range() {
        assert!(Image::new(Dims::new(1, 2, 1), vec![0.5, 1.5]).is_err());
        assert!(Image::new(Dims::new(1, 2, 1), vec![0.5, f32::NAN]).is_err());
        assert!(Image::new(Dims::new(1, 2, 1), vec![0.5]).is_err());
        assert!(Image::new(Dims::new(0, 2, 1), vec![]).is_err());
    }

    #[test]
    fn mask_bits_must_be_binary() {
        assert!(Mask::from_bits(1, 2, &[0, 2]).is_err());
        assert_eq!(Mask::from_bits(1, 2, &[0, 1]).unwrap().count_replaced(), 1);
    }

    #[test]
    fn apply_mask_identities() {
        let img = Image::new(
            Dims::new(2, 2, 3),
            (0..12).map(|i| i as f32 / 12.0).collect(),
        )
        .unwrap();
        let alt = Image::filled(Dims::new(2, 2, 3), 0.5).unwrap();
        assert_eq!(apply_mask(&img, &Mask::ones(2, 2), &alt).unwrap(), img);
        assert_eq!(apply_mask(&img, &Mask::zeros(2, 2), &alt).unwrap(), alt);
    }

    #[test]
    fn apply_mask_elementwise() {
        let img = gray(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let alt = gray(2, 2, &[0.0; 4]);
        let mask = Mask::from_bits(2, 2, &[1, 0, 0, 1]).unwrap();
        let out = apply_mask(&img, &mask, &alt).unwrap();
        assert_eq!(out.data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn apply_mask_rejects_mismatch() {
        let img = gray(2, 2, &[0.0; 4]);
        let alt = gray(2, 2, &[0.0; 4]);
        assert!(matches!(
            apply_mask(&img, &Mask::ones(2, 3), &alt),
            Err(Error::Shape(_))
        ));
        let alt3 = Image::filled(Dims::new(2, 2, 3), 0.0).unwrap();
        assert!(matches!(
            apply_mask(&img, &Mask::ones(2, 2), &alt3),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn ranking_examples() {
        let m = map(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(rank_pixels(&m, Direction::MiF).order(), &[3, 2, 1, 0]);
        assert_eq!(rank_pixels(&m, Direction::LiF).order(), &[0, 1, 2, 3]);
        let flat = map(2, 3, &[0.5; 6]);
        assert_eq!(
            rank_pixels(&flat, Direction::MiF).order(),
            &[0, 1, 2, 3, 4, 5]
        );
        assert_eq!(
            rank_pixels(&flat, Direction::LiF).order(),
            &[0, 1, 2, 3, 4, 5]
        );
    }

    #[test]
    fn mask_from_ranking_examples() {
        let m = map(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let r = rank_pixels(&m, Direction::MiF);
        assert_eq!(mask_from_ranking(&r, 0.0).unwrap(), Mask::ones(2, 2));
        assert_eq!(mask_from_ranking(&r, 1.0).unwrap(), Mask::zeros(2, 2));
        assert_eq!(mask_from_ranking(&r, 0.5).unwrap().bits(), vec![1, 1, 0, 0]);
        assert!(mask_from_ranking(&r, 1.01).is_err());
        assert!(mask_from_ranking(&r, -0.1).is_err());
    }

    #[test]
    fn shift_examples() {
        let m = Mask::from_bits(2, 3, &[0, 1, 1, 1, 1, 0]).unwrap();
        assert_eq!(shift_mask(&m, 0, 0), m);
        assert_eq!(shift_mask(&m, 3, 2), m);
        let s = shift_mask(&m, 1, 0);
        assert_eq!(s.bits(), vec![1, 0, 1, 0, 1, 1]);
    }

    #[test]
    fn dataset_validation() {
        let s = |label| LabeledSample {
            image: gray(1, 1, &[0.0]),
            label,
            ground_truth: None,
        };
        assert!(Dataset::new(vec![s(0), s(1)], 2).is_ok());
        assert!(matches!(
            Dataset::new(vec![s(2)], 2),
            Err(Error::InvalidClass { .. })
        ));
        let other = LabeledSample {
            image: gray(1, 2, &[0.0, 0.0]),
            label: 0,
            ground_truth: None,
        };
        assert!(Dataset::new(vec![s(0), other], 2).is_err());
    }

    fn arb_scores(len: usize) -> impl Strategy<Value = Vec<f32>> {
        prop::collection::vec(0.0f32..10.0, len)
    }

    proptest! {
        #[test]
        fn apply_mask_is_idempotent(
            data in prop::collection::vec(0.0f32..=1.0, 12),
            alt in prop::collection::vec(0.0f32..=1.0, 12),
            bits in prop::collection::vec(0u8..2, 4),
        ) {
            let d = Dims::new(2, 2, 3);
            let img = Image::new(d, data).unwrap();
            let alt = Image::new(d, alt).unwrap();
            let mask = Mask::from_bits(2, 2, &bits).unwrap();
            let once = apply_mask(&img, &mask, &alt).unwrap();
            let twice = apply_mask(&once, &mask, &alt).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn mif_lif_complementary(scores in arb_scores(30), n in 0.0f64..=1.0) {
            let mut distinct = scores.clone();
            distinct.sort_by(f32::total_cmp);
            distinct.dedup();
            prop_assume!(distinct.len() == scores.len());
            let m = SaliencyMap::new(5, 6, scores).unwrap();
            prop_assume!(masked_count(n, 30) + masked_count(1.0 - n, 30) == 30);
            let mif = mask_from_ranking(&rank_pixels(&m, Direction::MiF), n).unwrap();
            let lif = mask_from_ranking(&rank_pixels(&m, Direction::LiF), 1.0 - n).unwrap();
            prop_assert_eq!(mif.complement(), lif);
        }

        #[test]
        fn lif_reverses_mif_for_distinct_scores(scores in arb_scores(20)) {
            let mut distinct = scores.clone();
            distinct.sort_by(f32::total_cmp);
            distinct.dedup();
            prop_assume!(distinct.len() == scores.len());
            let m = SaliencyMap::new(4, 5, scores).unwrap();
            let mut mif = rank_pixels(&m, Direction::MiF).order().to_vec();
            mif.reverse();
            prop_assert_eq!(mif, rank_pixels(&m, Direction::LiF).order().to_vec());
        }

        #[test]
        fn shift_roundtrip_and_count(
            bits in prop::collection::vec(0u8..2, 35),
            dx in -50i64..50,
            dy in -50i64..50,
        ) {
            let m = Mask::from_bits(5, 7, &bits).unwrap();
            let s = shift_mask(&m, dx, dy);
            prop_assert_eq!(s.count_replaced(), m.count_replaced());
            prop_assert_eq!(shift_mask(&s, -dx, -dy), m);
        }

        #[test]
        fn ranking_is_permutation_and_deterministic(scores in arb_scores(24)) {
            let m = SaliencyMap::new(4, 6, scores).unwrap();
            for dir in [Direction::MiF, Direction::LiF] {
                let r = rank_pixels(&m, dir);
                prop_assert!(PixelRanking::new(4, 6, r.order().to_vec(), dir).is_ok());
                prop_assert_eq!(r, rank_pixels(&m, dir));
            }
        }
    }
}
