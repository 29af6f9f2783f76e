//! Structure files, element data, analytic pair potentials and dataset
//! generation.

mod dataset;
pub mod elements;
mod extxyz;
mod oracle;

pub use dataset::{fcc_lattice, generate_dataset, DatasetConfig, DatasetManifest};
pub use extxyz::{parse_extxyz, read_extxyz_file, write_extxyz, write_extxyz_file};
pub use oracle::{OraclePotential, PairParams, SpeciesPair};

use crate::geometry::GeometryError;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{path}: {source}")]
    File {
        path: String,
        source: std::io::Error,
    },
    #[error("no element with atomic number {0}")]
    UnknownElement(u32),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("molecular dynamics: {0}")]
    Md(String),
}

pub type Result<T> = std::result::Result<T, IoError>;
