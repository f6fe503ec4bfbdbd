//! Versioned JSON envelope shared by every persisted artifact (problems,
//! solutions, models, policies, reports).
//!
//! Matrices are written as `{ "rows": r, "cols": c, "data": [...] }` with
//! `data` in row-major order.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("expected a `{expected}` document, found `{found}`")]
    WrongKind { expected: String, found: String },
    #[error("unsupported format version {0} (this build reads version {FORMAT_VERSION})")]
    Version(u32),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub payload: T,
}

pub const FORMAT_NAME: &str = "latent-kl";

pub fn to_json<T: Serialize>(kind: &str, payload: &T) -> Result<String, FormatError> {
    let env = Envelope { format: FORMAT_NAME.to_string(), version: FORMAT_VERSION, kind: kind.to_string(), payload };
    Ok(serde_json::to_string_pretty(&env)?)
}

pub fn from_json<T: DeserializeOwned>(kind: &str, text: &str) -> Result<T, FormatError> {
    let env: Envelope<T> = serde_json::from_str(text)?;
    if env.format != FORMAT_NAME {
        return Err(FormatError::Invalid(format!("unknown format tag `{}`", env.format)));
    }
    if env.version != FORMAT_VERSION {
        return Err(FormatError::Version(env.version));
    }
    if env.kind != kind {
        return Err(FormatError::WrongKind { expected: kind.to_string(), found: env.kind });
    }
    Ok(env.payload)
}

pub fn write_file<T: Serialize>(path: &Path, kind: &str, payload: &T) -> Result<(), FormatError> {
    let text = to_json(kind, payload)?;
    std::fs::write(path, text).map_err(|source| FormatError::Io { path: path.display().to_string(), source })
}

pub fn read_file<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T, FormatError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| FormatError::Io { path: path.display().to_string(), source })?;
    from_json(kind, &text)
}

/// serde adapter for `DMatrix<f64>` in row-major layout.
pub mod dmatrix {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Record {
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        Record { rows: m.nrows(), cols: m.ncols(), data }.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let r = Record::deserialize(d)?;
        if r.data.len() != r.rows * r.cols {
            return Err(serde::de::Error::custom(format!(
                "matrix payload has {} values, expected {}x{}",
                r.data.len(),
                r.rows,
                r.cols
            )));
        }
        Ok(DMatrix::from_row_slice(r.rows, r.cols, &r.data))
    }
}

/// serde adapter for `Vec<DMatrix<f64>>`.
pub mod dmatrix_vec {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Wrap(#[serde(with = "super::dmatrix")] DMatrix<f64>);

    pub fn serialize<S: Serializer>(v: &[DMatrix<f64>], s: S) -> Result<S::Ok, S::Error> {
        let w: Vec<Wrap> = v.iter().cloned().map(Wrap).collect();
        w.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DMatrix<f64>>, D::Error> {
        let w: Vec<Wrap> = Vec::deserialize(d)?;
        Ok(w.into_iter().map(|x| x.0).collect())
    }
}

/// serde adapter for `Vec<DVector<f64>>` as nested arrays.
pub mod dvector_vec {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[DVector<f64>], s: S) -> Result<S::Ok, S::Error> {
        let w: Vec<Vec<f64>> = v.iter().map(|x| x.as_slice().to_vec()).collect();
        w.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DVector<f64>>, D::Error> {
        let w: Vec<Vec<f64>> = Vec::deserialize(d)?;
        Ok(w.into_iter().map(DVector::from_vec).collect())
    }
}

/// serde adapter for `DVector<f64>` as a flat array.
pub mod dvector {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::deserialize(d)?))
    }
}
