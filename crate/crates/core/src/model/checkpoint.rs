//! JSON checkpoints.
//!
//! ```text
//! {
//!   "format": "fedsplit-checkpoint/1",
//!   "client_id": 3 | null,
//!   "config": { "layer_widths": [d, h1, …, 1], "loss": "BinaryCrossEntropy", … },
//!   "hidden": [ { "rows": h1, "cols": d, "values": [row-major …] }, … ],
//!   "head": [ … ],
//!   "partitions": [ null | { "layer": l, "zeta": [bool …], "shared": […], "personal": […], "nu": […] }, … ]
//! }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{ModelConfig, SplitParams};
use crate::error::{Error, Result};
use crate::facsplit::Partition;
use crate::numerics::DenseMatrix;

pub const CHECKPOINT_FORMAT: &str = "fedsplit-checkpoint/1";

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    client_id: Option<usize>,
    config: ModelConfig,
    hidden: Vec<DenseMatrix>,
    head: Vec<f64>,
    partitions: Vec<Option<Partition>>,
}

pub fn to_json(params: &SplitParams) -> Result<String> {
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.to_string(),
        client_id: params.client_id,
        config: params.config.clone(),
        hidden: params.hidden.clone(),
        head: params.head.clone(),
        partitions: params.partitions.clone(),
    };
    Ok(serde_json::to_string(&ck)?)
}

pub fn from_json(text: &str) -> Result<SplitParams> {
    let ck: Checkpoint = serde_json::from_str(text)?;
    if ck.format != CHECKPOINT_FORMAT {
        return Err(Error::Data(format!("unsupported checkpoint format `{}`", ck.format)));
    }
    ck.config.validate()?;
    let widths = &ck.config.layer_widths;
    if ck.hidden.len() != widths.len() - 2 || ck.partitions.len() != ck.hidden.len() {
        return Err(Error::Data("checkpoint layer count does not match its config".into()));
    }
    for (l, w) in ck.hidden.iter().enumerate() {
        if w.shape() != (widths[l + 1], widths[l]) || !w.all_finite() {
            return Err(Error::Data(format!("checkpoint layer {l} has the wrong shape")));
        }
    }
    if ck.head.len() != widths[widths.len() - 2] {
        return Err(Error::Data("checkpoint head width does not match its config".into()));
    }
    Ok(SplitParams {
        config: ck.config,
        hidden: ck.hidden,
        head: ck.head,
        partitions: ck.partitions,
        client_id: ck.client_id,
    })
}

pub fn save(params: &SplitParams, path: &Path) -> Result<()> {
    std::fs::write(path, to_json(params)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<SplitParams> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
    from_json(&text)
}
