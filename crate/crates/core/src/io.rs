//! Model files: a versioned JSON envelope with explicit dimensions and
//! row-major matrix storage.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::decouple::DecoupledModel;
use crate::error::{Error, Result};
use crate::linfit::{LinearStateSpace, TransferFunctionModel};
use crate::nlss2::Nlss2Model;
use crate::pnlss::PnlssModel;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct MatrixRepr {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// `#[serde(with = "crate::io::matrix")]` for `DMatrix<f64>` stored row-major.
pub mod matrix {
    use super::*;

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        let data = (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect();
        MatrixRepr { rows: m.nrows(), cols: m.ncols(), data }.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<DMatrix<f64>, D::Error> {
        let r = MatrixRepr::deserialize(d)?;
        if r.data.len() != r.rows * r.cols {
            return Err(serde::de::Error::custom(format!("matrix {}x{} has {} entries", r.rows, r.cols, r.data.len())));
        }
        Ok(DMatrix::from_row_slice(r.rows, r.cols, &r.data))
    }
}

/// `#[serde(with = "crate::io::vector")]` for `DVector<f64>` as a plain list.
pub mod vector {
    use super::*;

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", content = "model", rename_all = "snake_case")]
pub enum ModelFile {
    TransferFunction(TransferFunctionModel),
    Linear(LinearStateSpace),
    Pnlss(PnlssModel),
    Nlss2(Nlss2Model),
    Decoupled(DecoupledModel),
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    format_version: u32,
    #[serde(flatten)]
    body: ModelFile,
}

impl ModelFile {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelFile::TransferFunction(_) => "transfer_function",
            ModelFile::Linear(_) => "linear",
            ModelFile::Pnlss(_) => "pnlss",
            ModelFile::Nlss2(_) => "nlss2",
            ModelFile::Decoupled(_) => "decoupled",
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&Envelope { format_version: FORMAT_VERSION, body: self.clone() })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let env: Envelope = serde_json::from_str(text)?;
        if env.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported model format version {} (expected {FORMAT_VERSION})",
                env.format_version
            )));
        }
        Ok(env.body)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
