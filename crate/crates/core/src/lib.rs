//! Self-guided visual evidence discovery on a toy multimodal transformer.
//!
//! The pipeline finds the prompt tokens a model's next prediction depends on
//! (gradient × input saliency), grounds each of them to a block of image
//! patches by cosine matching in a middle-layer representation, caches the
//! patch embeddings of that region, and lets a policy splice the cached
//! embeddings back into its own context while it reasons. A GRPO-style
//! trainer optimizes that policy against a four-part trajectory reward.
//!
//! All math is generic over [`numerics::Scalar`]; the aliases below fix the
//! double-precision instantiation used by the command-line tool.

mod codec;
pub mod error;
pub mod evidence_cache;
pub mod grounding;
pub mod metrics;
pub mod numerics;
pub mod raster;
pub mod reward;
pub mod rollout;
pub mod saliency;
pub mod synth_data;
pub mod toy_vlm;
pub mod trainer;

use std::path::Path;

pub use error::{Error, Result};
pub use numerics::{RngStream, Scalar};
pub use raster::RgbImage;

pub type Model = toy_vlm::Model<f64>;
pub type Model32 = toy_vlm::Model<f32>;
pub type EvidenceCache = evidence_cache::EvidenceCache<f64>;
pub type EvidenceSnapshot = grounding::EvidenceSnapshot<f64>;
pub type Trajectory = rollout::Trajectory<f64>;

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
