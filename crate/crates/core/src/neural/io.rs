//! Versioned JSON model documents.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mlp::{Dense, Mlp};
use super::ModelBundle;
use crate::error::{Error, Result};
use crate::preprocess::{PcaModel, TrainingStats};
use crate::sampling::PACKET_LEN;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    /// One row per output neuron.
    weights: Vec<Vec<f64>>,
    biases: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    format_version: u32,
    l_max: u32,
    h: f64,
    n_components: usize,
    hidden_widths: Vec<usize>,
    layers: Vec<LayerDoc>,
    stats: TrainingStats,
    pca: PcaModel,
}

fn to_doc(b: &ModelBundle) -> ModelDoc {
    ModelDoc {
        format_version: FORMAT_VERSION,
        l_max: b.l_max,
        h: b.h,
        n_components: b.mlp.n_components,
        hidden_widths: b.mlp.hidden_widths(),
        layers: b
            .mlp
            .layers
            .iter()
            .map(|l| LayerDoc { weights: l.weights.chunks(l.n_in).map(<[f64]>::to_vec).collect(), biases: l.biases.clone() })
            .collect(),
        stats: b.stats.clone(),
        pca: b.pca.clone(),
    }
}

fn from_doc(d: ModelDoc) -> Result<ModelBundle> {
    let nc = d.n_components;
    if d.layers.len() != d.hidden_widths.len() + 1 {
        return Err(Error::Dimension(format!("{} layers for {} hidden widths", d.layers.len(), d.hidden_widths.len())));
    }
    let mut layers = Vec::with_capacity(d.layers.len());
    let mut n_in = nc;
    for (k, (l, &n_out)) in d.layers.into_iter().zip(d.hidden_widths.iter().chain(std::iter::once(&1))).enumerate() {
        if l.weights.len() != n_out || l.biases.len() != n_out || l.weights.iter().any(|r| r.len() != n_in) {
            return Err(Error::Dimension(format!("layer {k}: expected {n_out}x{n_in} weights and {n_out} biases")));
        }
        layers.push(Dense { n_in, n_out, weights: l.weights.concat(), biases: l.biases });
        n_in = n_out;
    }
    let mlp = Mlp { n_components: nc, layers };
    mlp.validate()?;
    let p = &d.pca;
    if d.stats.n_components != nc
        || p.components.len() != nc
        || p.eigenvalues.len() != nc
        || p.mean.len() != PACKET_LEN
        || p.components.iter().any(|r| r.len() != PACKET_LEN)
    {
        return Err(Error::Dimension(format!("preprocessing does not match {nc} network inputs")));
    }
    if p.eigenvalues.iter().any(|&l| !(l > 0.0)) || !(d.h > 0.0) {
        return Err(Error::Malformed("non-positive eigenvalue or mesh size".into()));
    }
    Ok(ModelBundle { mlp, stats: d.stats, pca: d.pca, h: d.h, l_max: d.l_max })
}

pub fn to_json(b: &ModelBundle) -> Result<String> {
    Ok(serde_json::to_string_pretty(&to_doc(b))?)
}

pub fn from_json(s: &str) -> Result<ModelBundle> {
    let v: serde_json::Value = serde_json::from_str(s).map_err(|e| Error::Malformed(e.to_string()))?;
    let found = v.get("format_version").and_then(|f| f.as_u64()).ok_or_else(|| Error::Malformed("missing format_version".into()))?;
    if found != FORMAT_VERSION as u64 {
        return Err(Error::Version { found: found as u32, expected: FORMAT_VERSION });
    }
    from_doc(serde_json::from_value(v).map_err(|e| Error::Malformed(e.to_string()))?)
}

pub fn save_model(b: &ModelBundle, path: &Path) -> Result<()> {
    std::fs::write(path, to_json(b)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelBundle> {
    from_json(&std::fs::read_to_string(path)?)
}
