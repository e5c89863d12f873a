use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::model::S4Rec;
use crate::dataio::PreparedDataset;
use crate::error::{Error, Result};
use crate::evalkit::EVAL_BATCH;
use crate::tensor::Tensor;

/// One exported user.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub user_id: usize,
    pub is_head: bool,
    pub cluster: usize,
    pub vector: Vec<f32>,
}

/// Writes one tab-separated row per user: id, head flag, nearest prototype
/// and the representation of the user's full history. Returns the row count.
pub fn export_embeddings(model: &S4Rec<f32>, dataset: &PreparedDataset, out: &Path) -> Result<usize> {
    let mut w = BufWriter::new(File::create(out)?);
    let d = model.encoder.config.dim;
    let header: Vec<String> = ["user_id", "is_head", "cluster"]
        .into_iter()
        .map(String::from)
        .chain((0..d).map(|j| format!("e{j}")))
        .collect();
    writeln!(w, "{}", header.join("\t"))?;
    let mut rows = 0;
    for chunk in dataset.sequences.chunks(EVAL_BATCH) {
        let prefixes: Vec<Vec<usize>> = chunk.iter().map(|s| s.items.clone()).collect();
        let reprs = model.represent(&prefixes)?;
        let clusters = model.clusters(&reprs);
        for (r, s) in chunk.iter().enumerate() {
            write!(w, "{}\t{}\t{}", s.user_id, u8::from(s.is_head), clusters[r])?;
            for x in reprs.row(r) {
                write!(w, "\t{x}")?;
            }
            writeln!(w)?;
            rows += 1;
        }
    }
    w.flush()?;
    Ok(rows)
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRow>> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header = lines.next().ok_or(Error::EmptyInput)??;
    let width = header.split('\t').count();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let bad = |msg: String| Error::Parse { line: i + 2, msg };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != width || width < 4 {
            return Err(bad(format!("expected {width} columns, found {}", fields.len())));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("{s:?}: {e}")));
        let vector = fields[3..]
            .iter()
            .map(|s| s.parse::<f32>().map_err(|e| bad(format!("{s:?}: {e}"))))
            .collect::<Result<_>>()?;
        rows.push(EmbeddingRow {
            user_id: int(fields[0])?,
            is_head: int(fields[1])? == 1,
            cluster: int(fields[2])?,
            vector,
        });
    }
    Ok(rows)
}

/// Stacks the vectors of `rows` into an `[n, d]` tensor.
pub fn embedding_matrix(rows: &[EmbeddingRow]) -> Result<Tensor<f32>> {
    let d = rows.first().map_or(0, |r| r.vector.len());
    Tensor::new(
        &[rows.len(), d],
        rows.iter().flat_map(|r| r.vector.iter().copied()).collect(),
    )
}
