//! Test-split embedding export for offline analysis and plotting.

use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use super::{load_tuned, stage_err, ExperimentConfig, PipelineError};
use crate::data::{load_manifest, Split};
use crate::encoders::{encode_image, encode_image_prompted};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    ClipBase,
    NolaTuned,
}

#[derive(Debug, Clone)]
pub struct EmbeddingDump {
    pub source: EmbeddingSource,
    pub rows: Vec<EmbeddingRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub id: String,
    pub label: Option<usize>,
    pub embedding: Vec<f64>,
}

/// Write one JSONL row per test image: base embeddings straight from the
/// vision encoder, or prompted embeddings using the saved prompt tokens.
/// Output bytes are a pure function of the checkpoint.
pub fn export_embeddings(
    config: &ExperimentConfig,
    which: EmbeddingSource,
    out: &Path,
) -> Result<EmbeddingDump, PipelineError> {
    let manifest = load_manifest(&config.dataset.manifest).map_err(stage_err("export"))?;
    let bundle = config.encoders.build().map_err(stage_err("export"))?;
    let prompts = match which {
        EmbeddingSource::ClipBase => None,
        EmbeddingSource::NolaTuned => {
            let tuned =
                load_tuned(&config.output_dir.join("tuned.json")).map_err(stage_err("export"))?;
            Some(tuned.prompts)
        }
    };

    let records = manifest.split(Split::Test);
    if records.is_empty() {
        return Err(PipelineError {
            stage: "export",
            source: "test split is empty".into(),
        });
    }
    let mut rows = Vec::with_capacity(records.len());
    // Manifest order, chunked; no shuffling so re-exports are identical.
    for chunk in records.chunks(64) {
        let ids: Vec<String> = chunk.iter().map(|r| r.id.clone()).collect();
        let batch = crate::data::load_images_by_id(&manifest, Split::Test, &ids)
            .map_err(stage_err("export"))?;
        let embedded = match &prompts {
            None => encode_image(&bundle, &batch).map_err(stage_err("export"))?,
            Some(p) => encode_image_prompted(&bundle, &batch, p).map_err(stage_err("export"))?,
        };
        for (i, record) in chunk.iter().enumerate() {
            rows.push(EmbeddingRow {
                id: record.id.clone(),
                label: manifest.eval_label(record),
                embedding: embedded.vectors.row(i).to_vec(),
            });
        }
    }

    let mut file = std::io::BufWriter::new(
        std::fs::File::create(out).map_err(stage_err("export"))?,
    );
    for row in &rows {
        writeln!(file, "{}", serde_json::to_string(row).expect("row serializes"))
            .map_err(stage_err("export"))?;
    }
    Ok(EmbeddingDump {
        source: which,
        rows,
    })
}
