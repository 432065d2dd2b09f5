//! Embedding export: one CSV row per sample with the unit-norm embedding
//! vector, the label, and the source id. Values print in shortest
//! round-trip form, so re-parsing recovers the exact f32 bits.

use heterovid_core::Graph;
use heterovid_core::loss::EmbeddingBatch;
use heterovid_core::model::Model;
use heterovid_core::params::ParamStore;
use heterovid_core::tensor::Tensor;

use crate::dataset::stack;
use crate::synth::Dataset;
use crate::{HarnessError, Result};

pub fn export_embeddings(
    model: &Model<f32>,
    store: &ParamStore<f32>,
    data: &Dataset,
    batch_size: usize,
) -> Result<String> {
    if !model.cfg.dsm_enabled {
        return Err(HarnessError::Config(
            "this checkpoint has no projection head; nothing to export".into(),
        ));
    }
    let d = model.cfg.embed_dim;
    let mut out = String::new();
    for i in 0..d {
        out.push_str(&format!("e{i},"));
    }
    out.push_str("label,source\n");

    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let (batch, _) = stack(data, chunk);
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, store, &batch)?;
        let z = g.value(fwd.embeddings.expect("projection head checked above"));
        for (row, &idx) in chunk.iter().enumerate() {
            for j in 0..d {
                out.push_str(&format!("{},", z.data()[row * d + j]));
            }
            out.push_str(&format!(
                "{},{}\n",
                data.samples[idx].label, data.samples[idx].source
            ));
        }
    }
    Ok(out)
}

/// Parses exported rows back into an embedding batch plus source ids.
pub fn parse_embeddings_csv(text: &str) -> Result<(EmbeddingBatch<f32>, Vec<usize>)> {
    let mut lines = text.lines();
    let header: &str = lines
        .next()
        .ok_or_else(|| HarnessError::Data("empty embedding file".into()))?;
    let d = header.split(',').filter(|c| c.starts_with('e')).count();
    if d == 0 {
        return Err(HarnessError::Data("header has no embedding columns".into()));
    }
    let mut z = Vec::new();
    let mut labels = Vec::new();
    let mut sources = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != d + 2 {
            return Err(HarnessError::Data(format!("row has {} cells, expected {}", cells.len(), d + 2)));
        }
        for cell in &cells[..d] {
            z.push(
                cell.parse::<f32>()
                    .map_err(|_| HarnessError::Data(format!("bad value '{cell}'")))?,
            );
        }
        labels.push(
            cells[d]
                .parse::<usize>()
                .map_err(|_| HarnessError::Data(format!("bad label '{}'", cells[d])))?,
        );
        sources.push(
            cells[d + 1]
                .parse::<usize>()
                .map_err(|_| HarnessError::Data(format!("bad source '{}'", cells[d + 1])))?,
        );
    }
    let n = labels.len();
    let batch = EmbeddingBatch::new(Tensor::from_vec(&[n, d], z), labels)?;
    Ok((batch, sources))
}
