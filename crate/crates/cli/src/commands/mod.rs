pub mod compare;
pub mod eval;
pub mod gradcheck;
pub mod sweep;
pub mod synth;
pub mod train;

use std::fs;
use std::path::Path;

use vidsal::data::read_dataset;
use vidsal::Dataset;

use crate::failure::Failure;

pub fn load_dataset(dir: &Path) -> Result<Dataset, Failure> {
    // Any problem with an input dataset is a data error, including a
    // malformed manifest.
    read_dataset(dir).map_err(|e| Failure::data(e.to_string()))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Failure::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Failure::io(path, e))
}

/// Format an optional value at full precision, empty when absent.
pub fn field(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:?}"))
}
