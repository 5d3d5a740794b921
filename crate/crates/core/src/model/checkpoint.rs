//! Versioned binary checkpoints.
//!
//! Layout: an 8-byte magic with the format version, a JSON header
//! (config, free-form metadata such as the pipeline role and provenance,
//! and the score space when one applies), then each named parameter array
//! as shape plus row-major little-endian f64. Round-trips are bit-exact.

use super::{param_layout, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::score_space::ScoreSpace;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"TRLBCK01";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    /// Role and provenance labels (e.g. "role" => "p_s",
    /// "init_from" => "p_0"). Sorted map so serialization is stable.
    pub metadata: BTreeMap<String, String>,
    pub score_space: Option<ScoreSpace>,
}

pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    metadata: &BTreeMap<String, String>,
    score_space: Option<&ScoreSpace>,
) -> Result<()> {
    let header = CheckpointHeader {
        config: params.config.clone(),
        metadata: metadata.clone(),
        score_space: score_space.cloned(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let layout = param_layout(&params.config);

    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    w.write_all(&(layout.len() as u64).to_le_bytes())?;
    for ((name, rows, cols), arr) in layout.iter().zip(params.arrays.iter()) {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u64).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&(*rows as u64).to_le_bytes())?;
        w.write_all(&(*cols as u64).to_le_bytes())?;
        for v in arr.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, CheckpointHeader)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Input(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let header_len = read_u64(&mut r)? as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;
    header.config.validate()?;

    let layout = param_layout(&header.config);
    let n_arrays = read_u64(&mut r)? as usize;
    if n_arrays != layout.len() {
        return Err(Error::Input(format!(
            "checkpoint has {n_arrays} arrays, config implies {}",
            layout.len()
        )));
    }
    let mut arrays = Vec::with_capacity(n_arrays);
    for (name, rows, cols) in &layout {
        let name_len = read_u64(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let got_name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Input("non-utf8 array name".into()))?;
        if got_name != *name {
            return Err(Error::Input(format!(
                "array name mismatch: expected {name}, found {got_name}"
            )));
        }
        let got_rows = read_u64(&mut r)? as usize;
        let got_cols = read_u64(&mut r)? as usize;
        if got_rows != *rows || got_cols != *cols {
            return Err(Error::Input(format!(
                "array {name}: shape ({got_rows},{got_cols}) does not match config ({rows},{cols})"
            )));
        }
        let mut data = vec![0.0f64; rows * cols];
        let mut buf = [0u8; 8];
        for v in &mut data {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        let arr = Array2::from_shape_vec((*rows, *cols), data)
            .map_err(|e| Error::Internal(e.to_string()))?;
        arrays.push(arr);
    }
    let params = ModelParams { config: header.config.clone(), arrays };
    if !params.all_finite() {
        return Err(Error::Input("checkpoint contains non-finite values".into()));
    }
    Ok((params, header))
}
