use std::path::PathBuf;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("file not found: {}", path.display())]
    MissingFile { path: PathBuf },

    #[error("dataset error: {0}")]
    Data(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("model file error: {0}")]
    ModelFormat(String),

    #[error("{0}")]
    Calibration(String),

    #[error("{0}")]
    Divergence(String),

    #[error("cannot write {}: {source}", path.display())]
    Output {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    /// Process exit status. `2` is left to the argument parser.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 3,
            CliError::MissingFile { .. } => 4,
            CliError::Data(_) => 5,
            CliError::Shape(_) => 6,
            CliError::ModelFormat(_) => 7,
            CliError::Calibration(_) => 8,
            CliError::Divergence(_) => 9,
            CliError::Output { .. } => 10,
            CliError::Invalid(_) => 11,
            CliError::Io(_) => 12,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::MissingFile { .. } => "missing_file",
            CliError::Data(_) => "dataset",
            CliError::Shape(_) => "shape",
            CliError::ModelFormat(_) => "model_format",
            CliError::Calibration(_) => "calibration",
            CliError::Divergence(_) => "divergence",
            CliError::Output { .. } => "output",
            CliError::Invalid(_) => "invalid_argument",
            CliError::Io(_) => "io",
        }
    }

    /// Single-line JSON record for stderr.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Record<'a> {
            error: &'a str,
            code: i32,
            message: String,
        }
        serde_json::to_string(&Record {
            error: self.kind(),
            code: self.exit_code(),
            message: self.to_string(),
        })
        .expect("plain record serializes")
    }

    pub fn output(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Output {
            path: path.into(),
            source,
        }
    }

    /// Maps an error raised while opening `path` for reading.
    pub fn reading(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingFile { path }
        } else {
            CliError::Io(std::io::Error::new(
                source.kind(),
                format!("{}: {source}", path.display()),
            ))
        }
    }
}

impl From<saliency_audit::Error> for CliError {
    fn from(e: saliency_audit::Error) -> Self {
        use saliency_audit::Error as E;
        let msg = e.to_string();
        match e {
            E::Shape(_) => CliError::Shape(msg),
            E::InvalidArgument(_) => CliError::Invalid(msg),
            E::InvalidImage(_) | E::InvalidClass { .. } | E::EmptyDataset => CliError::Data(msg),
            E::CalibrationFailed { .. } => CliError::Calibration(msg),
            E::Divergence { .. } => CliError::Divergence(msg),
            E::ModelFormat(_) => CliError::ModelFormat(msg),
            E::Io(io) => CliError::Io(io),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct() {
        let all = [
            CliError::Config(String::new()),
            CliError::MissingFile { path: "x".into() },
            CliError::Data(String::new()),
            CliError::Shape(String::new()),
            CliError::ModelFormat(String::new()),
            CliError::Calibration(String::new()),
            CliError::Divergence(String::new()),
            CliError::output("x", std::io::Error::other("e")),
            CliError::Invalid(String::new()),
            CliError::Io(std::io::Error::other("e")),
        ];
        let mut codes: Vec<i32> = all.iter().map(CliError::exit_code).collect();
        codes.sort_unstable();
        codes.dedup();
        assert_eq!(codes.len(), all.len());
        assert!(codes.iter().all(|&c| c > 2));
    }

    #[test]
    fn json_record() {
        let e = CliError::MissingFile {
            path: "a/b.png".into(),
        };
        let v: serde_json::Value = serde_json::from_str(&e.to_json()).unwrap();
        assert_eq!(v["error"], "missing_file");
        assert_eq!(v["code"], 4);
        assert!(v["message"].as_str().unwrap().contains("a/b.png"));
    }

    #[test]
    fn core_errors_map_to_kinds() {
        let e: CliError = saliency_audit::Error::Shape("x".into()).into();
        assert_eq!(e.kind(), "shape");
        let e: CliError = saliency_audit::Error::EmptyDataset.into();
        assert_eq!(e.kind(), "dataset");
    }
}
