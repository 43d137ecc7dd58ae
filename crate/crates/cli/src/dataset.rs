//! Dataset ingestion (IDX, image directories, synthetic) and export.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ColorType, DynamicImage, GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use saliency_audit::model::synth_dataset;
use saliency_audit::seed::{derive_seed, tag_hash};
use saliency_audit::tensor::{Dataset, Dims, Image, LabeledSample};

use crate::config::{RunConfig, Source};
use crate::error::{CliError, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
/// Extension: `n x rows x cols x channels` unsigned bytes.
pub const IDX_COLOR_IMAGES_MAGIC: u32 = 0x0000_0804;

fn data_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(CliError::Data(msg.into()))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::reading(path, e))
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| CliError::Data("truncated IDX header".into()))
}

/// Decodes an IDX image file into dims and per-image `[0, 1]` data.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(Dims, Vec<Vec<f32>>)> {
    let magic = be_u32(bytes, 0)?;
    let (dims, count, header) = match magic {
        IDX_IMAGES_MAGIC => {
            let n = be_u32(bytes, 4)? as usize;
            let dims = Dims::new(be_u32(bytes, 8)? as usize, be_u32(bytes, 12)? as usize, 1);
            (dims, n, 16)
        }
        IDX_COLOR_IMAGES_MAGIC => {
            let n = be_u32(bytes, 4)? as usize;
            let dims = Dims::new(
                be_u32(bytes, 8)? as usize,
                be_u32(bytes, 12)? as usize,
                be_u32(bytes, 16)? as usize,
            );
            (dims, n, 20)
        }
        other => return data_err(format!("bad IDX image magic {other:#010x}")),
    };
    if dims.is_empty() {
        return data_err("IDX images have a zero dimension");
    }
    let expected = count
        .checked_mul(dims.len())
        .and_then(|n| n.checked_add(header))
        .ok_or_else(|| CliError::Data("IDX dimensions overflow".into()))?;
    if bytes.len() != expected {
        return data_err(format!(
            "IDX image file has {} bytes, header implies {expected}",
            bytes.len()
        ));
    }
    let images = bytes[header..]
        .chunks_exact(dims.len())
        .map(|c| c.iter().map(|&b| b as f32 / 255.0).collect())
        .collect();
    Ok((dims, images))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return data_err(format!("bad IDX label magic {magic:#010x}"));
    }
    let n = be_u32(bytes, 4)? as usize;
    if bytes.len() != 8 + n {
        return data_err(format!(
            "IDX label file has {} bytes, header implies {}",
            bytes.len(),
            8 + n
        ));
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

/// Serializes images as IDX: the standard layout for one channel, the
/// color extension otherwise. Values are quantized to bytes.
pub fn encode_idx_images(dataset: &Dataset) -> Vec<u8> {
    let dims = dataset.dims().unwrap_or(Dims::new(0, 0, 1));
    let mut out = Vec::new();
    let color = dims.channels != 1;
    let magic = if color {
        IDX_COLOR_IMAGES_MAGIC
    } else {
        IDX_IMAGES_MAGIC
    };
    out.extend_from_slice(&magic.to_be_bytes());
    out.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    out.extend_from_slice(&(dims.height as u32).to_be_bytes());
    out.extend_from_slice(&(dims.width as u32).to_be_bytes());
    if color {
        out.extend_from_slice(&(dims.channels as u32).to_be_bytes());
    }
    for s in dataset.samples() {
        out.extend(s.image.data().iter().map(|&v| to_byte(v)));
    }
    out
}

pub fn encode_idx_labels(dataset: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    out.extend(dataset.samples().iter().map(|s| s.label as u8));
    out
}

fn to_byte(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn resolve_classes(labels: &[usize], classes: Option<usize>) -> Result<usize> {
    let max = labels.iter().copied().max().unwrap_or(0);
    match classes {
        Some(k) => {
            if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
                return data_err(format!("label {bad} out of range for {k} classes"));
            }
            Ok(k)
        }
        None => Ok(max + 1),
    }
}

fn assemble(
    dims: Dims,
    images: Vec<Vec<f32>>,
    labels: Vec<usize>,
    classes: Option<usize>,
) -> Result<Dataset> {
    if images.len() != labels.len() {
        return data_err(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        ));
    }
    let k = resolve_classes(&labels, classes)?;
    let samples = images
        .into_iter()
        .zip(labels)
        .map(|(data, label)| {
            Ok(LabeledSample {
                image: Image::new(dims, data)?,
                label,
                ground_truth: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(samples, k)?)
}

pub fn load_idx(images: &Path, labels: &Path, classes: Option<usize>) -> Result<Dataset> {
    let (dims, data) = parse_idx_images(&read_file(images)?)?;
    let labels = parse_idx_labels(&read_file(labels)?)?;
    assemble(dims, data, labels, classes)
}

#[derive(Debug, Deserialize, Serialize)]
struct LabelRow {
    filename: String,
    label: usize,
}

fn decode_image(path: &Path) -> Result<(Dims, Vec<f32>)> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => CliError::reading(path, io),
        other => CliError::Data(format!("{}: {other}", path.display())),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let gray = matches!(
        img.color(),
        ColorType::L8 | ColorType::L16 | ColorType::La8 | ColorType::La16
    );
    if gray {
        let data = img
            .to_luma8()
            .into_raw()
            .into_iter()
            .map(|b| b as f32 / 255.0)
            .collect();
        Ok((Dims::new(h, w, 1), data))
    } else {
        let data = img
            .to_rgb8()
            .into_raw()
            .into_iter()
            .map(|b| b as f32 / 255.0)
            .collect();
        Ok((Dims::new(h, w, 3), data))
    }
}

/// Loads `filename,label` rows from `labels` and the images they name,
/// resolved relative to `dir`. Missing images are listed in the error.
pub fn load_directory(dir: &Path, labels: &Path, classes: Option<usize>) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(labels).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::reading(labels, io),
        other => CliError::Data(format!("{}: {other:?}", labels.display())),
    })?;
    let rows = reader
        .deserialize::<LabelRow>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| CliError::Data(format!("{}: {e}", labels.display())))?;
    let missing: Vec<&str> = rows
        .iter()
        .filter(|r| !dir.join(&r.filename).is_file())
        .map(|r| r.filename.as_str())
        .collect();
    if let Some(first) = missing.first() {
        if missing.len() == 1 {
            return Err(CliError::MissingFile {
                path: dir.join(first),
            });
        }
        return Err(CliError::MissingFile {
            path: PathBuf::from(format!(
                "{} (and {} more: {})",
                dir.join(first).display(),
                missing.len() - 1,
                missing[1..].join(", ")
            )),
        });
    }
    let mut dims = None;
    let mut images = Vec::with_capacity(rows.len());
    for r in &rows {
        let path = dir.join(&r.filename);
        let (d, data) = decode_image(&path)?;
        match dims {
            None => dims = Some(d),
            Some(first) if first != d => {
                return data_err(format!("{} is {d}, expected {first}", path.display()));
            }
            _ => {}
        }
        images.push(data);
    }
    let labels = rows.iter().map(|r| r.label).collect();
    assemble(dims.unwrap_or(Dims::new(1, 1, 1)), images, labels, classes)
}

/// Writes every image as an 8-bit PNG plus `labels.csv`.
pub fn write_directory(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::output(dir, e))?;
    let labels_path = dir.join("labels.csv");
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(&labels_path)
        .map_err(|e| CliError::output(&labels_path, e.into()))?;
    for (i, s) in dataset.samples().iter().enumerate() {
        let name = format!("{i:05}.png");
        let d = s.image.dims();
        let bytes: Vec<u8> = s.image.data().iter().map(|&v| to_byte(v)).collect();
        let img = if d.channels == 1 {
            DynamicImage::ImageLuma8(
                GrayImage::from_raw(d.width as u32, d.height as u32, bytes).expect("buffer size"),
            )
        } else if d.channels == 3 {
            DynamicImage::ImageRgb8(
                RgbImage::from_raw(d.width as u32, d.height as u32, bytes).expect("buffer size"),
            )
        } else {
            return Err(CliError::Invalid(format!(
                "cannot export {}-channel images as PNG",
                d.channels
            )));
        };
        let path = dir.join(&name);
        img.save(&path)
            .map_err(|e| CliError::output(&path, std::io::Error::other(e.to_string())))?;
        w.serialize(LabelRow {
            filename: name,
            label: s.label,
        })
        .map_err(|e| CliError::output(&labels_path, e.into()))?;
    }
    w.flush().map_err(|e| CliError::output(&labels_path, e))?;
    Ok(())
}

/// Training and evaluation data for a run.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub eval: Dataset,
}

/// Synthetic sources draw independent train and test splits; file sources
/// use the same samples for both.
pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let (train, eval) = match cfg.source()? {
        Source::Synthetic(s) => {
            let train = synth_dataset(&s.split(
                s.train_samples,
                derive_seed(cfg.seed, &[tag_hash("synthetic-train")]),
            ))
            .map_err(|e| CliError::Config(e.to_string()))?;
            let test = synth_dataset(&s.split(
                s.test_samples,
                derive_seed(cfg.seed, &[tag_hash("synthetic-test")]),
            ))
            .map_err(|e| CliError::Config(e.to_string()))?;
            (train, test)
        }
        Source::Directory(d) => {
            let labels = d
                .labels
                .clone()
                .unwrap_or_else(|| d.path.join("labels.csv"));
            let data = load_directory(&d.path, &labels, cfg.dataset.classes)?;
            (data.clone(), data)
        }
        Source::Idx(i) => {
            let data = load_idx(&i.images, &i.labels, cfg.dataset.classes)?;
            (data.clone(), data)
        }
    };
    let eval = match cfg.dataset.limit {
        Some(n) => eval.take(n),
        None => eval,
    };
    if eval.is_empty() {
        return data_err("evaluation set is empty");
    }
    Ok(Splits { train, eval })
}
