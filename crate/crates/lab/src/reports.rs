//! Report writers: JSON summaries, CSV matrices and embedding dumps.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use enclab_core::analysis::LayerSimMatrix;
use enclab_core::graph::AttentionMode;
use enclab_core::objectives::LossCurve;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub task: String,
    pub mode: AttentionMode,
    pub shifted: bool,
    pub accuracy: f64,
    pub n_test: usize,
    pub seed: u64,
    pub majority_baseline: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StsReport {
    pub spearman: f64,
    pub n_pairs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingSidecar {
    pub count: usize,
    pub dim: usize,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    fs::write(path, text + "\n")
}

/// `step,loss` with 1-based steps.
pub fn curve_csv(curve: &LossCurve) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in curve.losses.iter().enumerate() {
        writeln!(out, "{},{l}", i + 1).expect("writing to a string");
    }
    out
}

/// Rows are layers (0 = embeddings), columns are positions.
pub fn layer_matrix_csv(m: &LayerSimMatrix) -> String {
    let mut out = String::from("layer");
    for t in 0..m.n_positions() {
        write!(out, ",p{t}").expect("writing to a string");
    }
    out.push('\n');
    for (l, row) in m.values.iter().enumerate() {
        out.push_str(&l.to_string());
        for v in row {
            write!(out, ",{v}").expect("writing to a string");
        }
        out.push('\n');
    }
    out
}

/// One row per input: id, then the vector.
pub fn embeddings_csv(vectors: &[Vec<f32>]) -> String {
    let mut out = String::new();
    for (i, v) in vectors.iter().enumerate() {
        out.push_str(&i.to_string());
        for x in v {
            write!(out, ",{x}").expect("writing to a string");
        }
        out.push('\n');
    }
    out
}

/// Raw little-endian f32 rows plus a JSON sidecar at `path.json`.
pub fn write_embeddings_f32(path: &Path, vectors: &[Vec<f32>]) -> io::Result<EmbeddingSidecar> {
    let dim = vectors.first().map_or(0, Vec::len);
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "embeddings have different lengths"));
    }
    let bytes: Vec<u8> = vectors.iter().flatten().flat_map(|x| x.to_le_bytes()).collect();
    fs::write(path, bytes)?;
    let sidecar = EmbeddingSidecar { count: vectors.len(), dim };
    write_json(&path.with_extension("json"), &sidecar)?;
    Ok(sidecar)
}
