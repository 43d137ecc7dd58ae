//! Binary model files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SALM"            4 bytes magic
//! version           u16 (currently 1)
//! kind              u8  (1 = conv net, 2 = linear)
//! height width channels num_classes      u32 each
//! block count       u32
//! per block         u32 kernel, u32 out_channels
//! parameters        f32, in the model's flat parameter order
//! ```
//!
//! For linear models the block count is 0 and the parameters are the
//! weight matrix followed by the bias vector.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Architecture, Classifier, ConvNet, ConvSpec, LinearModel, ScoreKind};
use crate::error::{Error, Result};
use crate::tensor::Dims;

pub const MODEL_MAGIC: &[u8; 4] = b"SALM";
pub const MODEL_FORMAT_VERSION: u16 = 1;

const KIND_CONV: u8 = 1;
const KIND_LINEAR: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Conv(ConvNet<f32>),
    Linear(LinearModel<f32>),
}

impl Classifier for AnyModel {
    fn input_dims(&self) -> Dims {
        match self {
            AnyModel::Conv(m) => m.input_dims(),
            AnyModel::Linear(m) => m.input_dims(),
        }
    }

    fn num_classes(&self) -> usize {
        match self {
            AnyModel::Conv(m) => Classifier::num_classes(m),
            AnyModel::Linear(m) => Classifier::num_classes(m),
        }
    }

    fn logits_unchecked(&self, input: &[f32]) -> Vec<f32> {
        match self {
            AnyModel::Conv(m) => m.logits_unchecked(input),
            AnyModel::Linear(m) => m.logits_unchecked(input),
        }
    }

    fn score_gradient_unchecked(&self, input: &[f32], class: usize, kind: ScoreKind) -> Vec<f32> {
        match self {
            AnyModel::Conv(m) => m.score_gradient_unchecked(input, class, kind),
            AnyModel::Linear(m) => m.score_gradient_unchecked(input, class, kind),
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::ModelFormat(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn write_model<W: Write>(model: &AnyModel, mut writer: W) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    let (kind, dims, classes, blocks, params): (u8, Dims, usize, &[ConvSpec], Vec<f32>) =
        match model {
            AnyModel::Conv(m) => {
                let a = m.architecture();
                (
                    KIND_CONV,
                    a.input,
                    a.num_classes,
                    &a.convs,
                    m.params().to_vec(),
                )
            }
            AnyModel::Linear(m) => {
                let mut p = m.weights().to_vec();
                p.extend_from_slice(m.bias());
                (KIND_LINEAR, m.dims(), m.classes(), &[], p)
            }
        };
    buf.push(kind);
    for v in [
        dims.height,
        dims.width,
        dims.channels,
        classes,
        blocks.len(),
    ] {
        put_u32(&mut buf, v)?;
    }
    for b in blocks {
        put_u32(&mut buf, b.kernel)?;
        put_u32(&mut buf, b.out_channels)?;
    }
    for p in params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    writer.write_all(&buf)?;
    writer.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::ModelFormat("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn read_model<R: Read>(mut reader: R) -> Result<AnyModel> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if cur.take(4)? != MODEL_MAGIC {
        return Err(Error::ModelFormat("bad magic bytes".into()));
    }
    let version = u16::from_le_bytes(cur.take(2)?.try_into().expect("2 bytes"));
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::ModelFormat(format!("unsupported version {version}")));
    }
    let kind = cur.take(1)?[0];
    let dims = Dims::new(cur.u32()?, cur.u32()?, cur.u32()?);
    let classes = cur.u32()?;
    let n_blocks = cur.u32()?;
    if n_blocks > 64 {
        return Err(Error::ModelFormat(format!(
            "implausible block count {n_blocks}"
        )));
    }
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        blocks.push(ConvSpec {
            kernel: cur.u32()?,
            out_channels: cur.u32()?,
        });
    }
    let rest = &bytes[cur.pos..];
    if rest.len() % 4 != 0 {
        return Err(Error::ModelFormat(
            "parameter block is not a whole number of f32".into(),
        ));
    }
    let params: Vec<f32> = rest
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let wrap = |e: Error| Error::ModelFormat(e.to_string());
    match kind {
        KIND_CONV => {
            let arch = Architecture::new(dims, blocks, classes).map_err(wrap)?;
            Ok(AnyModel::Conv(ConvNet::new(arch, params).map_err(wrap)?))
        }
        KIND_LINEAR => {
            if n_blocks != 0 {
                return Err(Error::ModelFormat("linear model with conv blocks".into()));
            }
            let split = classes * dims.len();
            if params.len() != split + classes {
                return Err(Error::ModelFormat("parameter count mismatch".into()));
            }
            let bias = params[split..].to_vec();
            let mut weights = params;
            weights.truncate(split);
            Ok(AnyModel::Linear(
                LinearModel::new(dims, classes, weights, bias).map_err(wrap)?,
            ))
        }
        other => Err(Error::ModelFormat(format!("unknown model kind {other}"))),
    }
}

pub fn save_model(model: &AnyModel, path: &Path) -> Result<()> {
    write_model(model, BufWriter::new(File::create(path)?))
}

pub fn load_model(path: &Path) -> Result<AnyModel> {
    read_model(BufReader::new(File::open(path)?))
}
