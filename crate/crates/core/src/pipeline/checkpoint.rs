use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::model::S4Rec;
use crate::error::{Error, Result};
use crate::tensor::{read_blocks, write_blocks, Adam, ParamSet, TensorBlock};

const MAGIC: &[u8; 4] = b"S4CK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub config: TrainConfig,
    pub config_hash: String,
    pub num_items: usize,
    pub num_users: usize,
    /// Completed epochs.
    pub epoch: usize,
    pub best_metric: Option<f64>,
    pub best_epoch: usize,
    pub adam_step: u64,
    pub param_names: Vec<String>,
    pub data: Option<PathBuf>,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub model: S4Rec<f32>,
    pub adam: Adam<f32>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(MAGIC)?;
            w.write_all(&VERSION.to_le_bytes())?;
            let manifest = serde_json::to_vec(&self.manifest)?;
            w.write_all(&(manifest.len() as u64).to_le_bytes())?;
            w.write_all(&manifest)?;
            let (first, second) = self.adam.moments();
            let mut blocks = Vec::new();
            for (id, name, t) in self.model.params.iter() {
                blocks.push(TensorBlock::from_tensor(&format!("param/{name}"), t));
                blocks.push(TensorBlock::from_tensor(&format!("adam.m/{name}"), &first[id.index()]));
                blocks.push(TensorBlock::from_tensor(&format!("adam.v/{name}"), &second[id.index()]));
            }
            write_blocks(&mut w, &blocks)?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(
            File::open(path).map_err(|e| Error::Format(format!("cannot open checkpoint {}: {e}", path.display())))?,
        );
        let mut head = [0u8; 16];
        r.read_exact(&mut head)
            .map_err(|_| Error::Format(format!("{} is truncated", path.display())))?;
        if &head[..4] != MAGIC {
            return Err(Error::Format(format!("{} is not a checkpoint", path.display())));
        }
        let version = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(head[8..16].try_into().expect("8 bytes")) as usize;
        let mut manifest = vec![0u8; len];
        r.read_exact(&mut manifest)
            .map_err(|_| Error::Format(format!("{} is truncated", path.display())))?;
        let manifest: CheckpointManifest =
            serde_json::from_slice(&manifest).map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;
        let blocks = read_blocks(&mut r)?;
        if blocks.len() != 3 * manifest.param_names.len() {
            return Err(Error::Format(
                "checkpoint block count does not match its manifest".into(),
            ));
        }
        let mut params = ParamSet::new();
        let (mut first, mut second) = (Vec::new(), Vec::new());
        for (name, chunk) in manifest.param_names.iter().zip(blocks.chunks(3)) {
            let expect = [
                format!("param/{name}"),
                format!("adam.m/{name}"),
                format!("adam.v/{name}"),
            ];
            if chunk.iter().zip(&expect).any(|(b, e)| &b.name != e) {
                return Err(Error::Format(format!("checkpoint blocks for {name} are out of order")));
            }
            params.add(name.clone(), chunk[0].to_tensor()?)?;
            first.push(chunk[1].to_tensor()?);
            second.push(chunk[2].to_tensor()?);
        }
        let cfg = &manifest.config;
        let model = S4Rec::from_params(cfg.encoder.clone(), cfg.intent.clone(), manifest.num_items, params)?;
        let adam = Adam::restore(cfg.optim.adam(), manifest.adam_step, first, second);
        Ok(Self { manifest, model, adam })
    }
}
