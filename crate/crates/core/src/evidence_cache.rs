//! Per-sample store of evidence snapshots, with a compact binary container.
//!
//! Container layout (little-endian): `"SVEC"`, u32 format version, u32 entry
//! count; per entry a u32-length-prefixed UTF-8 key, u32 model version, u32
//! refresh count and u32 snapshot count; per snapshot the u32 anchor token
//! id, the inclusive patch box as four u32 (row_min, col_min, row_max,
//! col_max), u32 vector count, u32 width and the row-major f32 payload.
//! A JSON sidecar next to the container carries the remaining metadata.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::Reader;
use crate::error::{Error, Result};
use crate::grounding::{discover_evidence, DiscoveryParams, EvidenceSnapshot, PatchBox, Region, SourceSpace};
use crate::metrics::BBox;
use crate::numerics::Scalar;
use crate::synth_data::Sample;
use crate::toy_vlm::{Model, ModelConfig};

const MAGIC: &[u8; 4] = b"SVEC";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry<T> {
    pub sample_id: String,
    pub snapshots: Vec<EvidenceSnapshot<T>>,
    pub model_version: u64,
    pub refresh_count: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceCache<T> {
    entries: BTreeMap<String, CacheEntry<T>>,
}

impl<T> Default for EvidenceCache<T> {
    fn default() -> Self {
        Self { entries: BTreeMap::new() }
    }
}

impl<T: Scalar> EvidenceCache<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &CacheEntry<T>> {
        self.entries.values()
    }

    /// Replaces the entry for `sample_id`. The refresh counter survives
    /// replacement and starts at 0 for new keys.
    pub fn upsert(&mut self, sample_id: &str, snapshots: Vec<EvidenceSnapshot<T>>, model_version: u64) {
        let refresh_count = self.entries.get(sample_id).map_or(0, |e| e.refresh_count);
        let snapshots = stamp(snapshots, model_version);
        self.entries.insert(
            sample_id.to_string(),
            CacheEntry { sample_id: sample_id.to_string(), snapshots, model_version, refresh_count },
        );
    }

    pub fn lookup(&self, sample_id: &str) -> Option<&CacheEntry<T>> {
        self.entries.get(sample_id)
    }

    /// Re-runs discovery for `sample` under the current weights. On failure
    /// the entry is left as it was.
    pub fn refresh(&mut self, sample: &Sample, model: &Model<T>, params: &DiscoveryParams) -> Result<()> {
        if !self.entries.contains_key(&sample.sample_id) {
            return Err(Error::Config(format!("no cache entry for {}", sample.sample_id)));
        }
        let snapshots = discover_for(sample, model, params)?;
        let entry = self.entries.get_mut(&sample.sample_id).expect("checked above");
        entry.snapshots = stamp(snapshots, model.version);
        entry.model_version = model.version;
        entry.refresh_count += 1;
        Ok(())
    }

    /// Discovers and stores evidence for every sample.
    pub fn populate(samples: &[Sample], model: &Model<T>, params: &DiscoveryParams) -> Result<Self> {
        let found: Vec<(String, Vec<EvidenceSnapshot<T>>)> = samples
            .par_iter()
            .map(|s| Ok((s.sample_id.clone(), discover_for(s, model, params)?)))
            .collect::<Result<_>>()?;
        let mut cache = Self::new();
        for (id, snaps) in found {
            cache.upsert(&id, snaps, model.version);
        }
        Ok(cache)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_u32(&mut out, count_u32(self.entries.len(), "entry count")?);
        for e in self.entries.values() {
            put_u32(&mut out, count_u32(e.sample_id.len(), "key length")?);
            out.extend_from_slice(e.sample_id.as_bytes());
            put_u32(&mut out, count_u32(e.model_version as usize, "model version")?);
            put_u32(&mut out, e.refresh_count);
            put_u32(&mut out, count_u32(e.snapshots.len(), "snapshot count")?);
            for s in &e.snapshots {
                put_u32(&mut out, s.anchor_id);
                let b = s.region.bbox_patches;
                for v in [b.row_min, b.col_min, b.row_max, b.col_max] {
                    put_u32(&mut out, count_u32(v, "patch coordinate")?);
                }
                put_u32(&mut out, count_u32(s.n_vectors(), "vector count")?);
                put_u32(&mut out, count_u32(s.d, "vector width")?);
                for &x in &s.embeddings {
                    out.extend_from_slice(&(x.to_f64_lossy() as f32).to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    /// Parses a container; any defect yields an error and no cache.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Format { offset: 0, msg: "missing SVEC magic".into() });
        }
        let at = r.offset();
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format { offset: at, msg: format!("unsupported format version {version}") });
        }
        let n_entries = r.u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..n_entries {
            let key_len = r.u32()? as usize;
            let at = r.offset();
            let sample_id = std::str::from_utf8(r.take(key_len)?)
                .map_err(|e| Error::Format { offset: at, msg: format!("key is not UTF-8: {e}") })?
                .to_string();
            let model_version = u64::from(r.u32()?);
            let refresh_count = r.u32()?;
            let n_snaps = r.u32()?;
            let mut snapshots = Vec::new();
            for _ in 0..n_snaps {
                let anchor_id = r.u32()?;
                let at = r.offset();
                let c: Vec<usize> = (0..4).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
                let bbox_patches = PatchBox { row_min: c[0], col_min: c[1], row_max: c[2], col_max: c[3] };
                if bbox_patches.row_min > bbox_patches.row_max || bbox_patches.col_min > bbox_patches.col_max {
                    return Err(Error::Format { offset: at, msg: format!("inverted patch box {bbox_patches:?}") });
                }
                let n_vectors = r.u32()? as usize;
                let d = r.u32()? as usize;
                let at = r.offset();
                let len = n_vectors
                    .checked_mul(d)
                    .filter(|&l| l.checked_mul(4).is_some_and(|b| b <= r.remaining()))
                    .ok_or_else(|| Error::Format {
                        offset: at,
                        msg: format!("payload of {n_vectors}x{d} floats exceeds the remaining {} bytes", r.remaining()),
                    })?;
                let embeddings = (0..len).map(|_| r.f32().map(|x| T::of(f64::from(x)))).collect::<Result<_>>()?;
                let patch_size = ModelConfig::default().patch_size;
                snapshots.push(EvidenceSnapshot {
                    anchor_id,
                    anchor_token: String::new(),
                    region: Region {
                        blocks: Vec::new(),
                        block_size: 1,
                        bbox_patches,
                        bbox_pixels: bbox_patches.to_pixels(patch_size),
                    },
                    d,
                    embeddings,
                    source_space: SourceSpace::InputEmbedding,
                    model_version,
                });
            }
            entries.insert(sample_id.clone(), CacheEntry { sample_id, snapshots, model_version, refresh_count });
        }
        if r.remaining() != 0 {
            return Err(Error::Format { offset: r.offset(), msg: format!("{} trailing bytes", r.remaining()) });
        }
        Ok(Self { entries })
    }

    /// Writes the container and its JSON sidecar atomically.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        crate::write_atomic(path, &bytes)?;
        let sidecar = serde_json::to_vec_pretty(&self.sidecar()).expect("sidecar serializes");
        crate::write_atomic(&sidecar_path(path), &sidecar)
    }

    /// Reads a container. Metadata that the binary layout does not carry
    /// (anchor strings, selected blocks, pixel boxes, source space) is taken
    /// from the sidecar when one is present and agrees with the container.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut cache = Self::from_bytes(&bytes)?;
        let side = sidecar_path(path);
        if let Ok(text) = std::fs::read(&side) {
            match serde_json::from_slice::<Sidecar>(&text) {
                Ok(meta) => cache.apply_sidecar(&meta),
                Err(e) => log::warn!("ignoring unreadable sidecar {}: {e}", side.display()),
            }
        }
        Ok(cache)
    }

    pub fn sidecar(&self) -> Sidecar {
        Sidecar {
            format_version: FORMAT_VERSION,
            entries: self
                .entries
                .values()
                .map(|e| SidecarEntry {
                    sample_id: e.sample_id.clone(),
                    model_version: e.model_version,
                    refresh_count: e.refresh_count,
                    snapshots: e
                        .snapshots
                        .iter()
                        .map(|s| SidecarSnapshot {
                            anchor_id: s.anchor_id,
                            anchor_token: s.anchor_token.clone(),
                            bbox_patches: s.region.bbox_patches,
                            bbox_pixels: s.region.bbox_pixels,
                            blocks: s.region.blocks.clone(),
                            block_size: s.region.block_size,
                            n_vectors: s.n_vectors(),
                            d: s.d,
                            source_space: s.source_space,
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    fn apply_sidecar(&mut self, meta: &Sidecar) {
        for m in &meta.entries {
            let Some(e) = self.entries.get_mut(&m.sample_id) else { continue };
            if e.snapshots.len() != m.snapshots.len() {
                continue;
            }
            for (s, ms) in e.snapshots.iter_mut().zip(&m.snapshots) {
                if s.anchor_id == ms.anchor_id && s.region.bbox_patches == ms.bbox_patches {
                    s.anchor_token.clone_from(&ms.anchor_token);
                    s.region.blocks.clone_from(&ms.blocks);
                    s.region.block_size = ms.block_size;
                    s.region.bbox_pixels = ms.bbox_pixels;
                    s.source_space = ms.source_space;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format_version: u32,
    pub entries: Vec<SidecarEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarEntry {
    pub sample_id: String,
    pub model_version: u64,
    pub refresh_count: u32,
    pub snapshots: Vec<SidecarSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarSnapshot {
    pub anchor_id: u32,
    pub anchor_token: String,
    pub bbox_patches: PatchBox,
    pub bbox_pixels: BBox,
    pub blocks: Vec<(usize, usize)>,
    pub block_size: usize,
    pub n_vectors: usize,
    pub d: usize,
    pub source_space: SourceSpace,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// A sample's evidence is refreshed when any trajectory in its latest group
/// inserted evidence and still answered wrongly. Each outcome is
/// `(insertion_count, answer_correct)`.
pub fn refresh_triggered(outcomes: impl IntoIterator<Item = (usize, bool)>) -> bool {
    outcomes.into_iter().any(|(insertions, correct)| insertions >= 1 && !correct)
}

fn discover_for<T: Scalar>(sample: &Sample, model: &Model<T>, params: &DiscoveryParams) -> Result<Vec<EvidenceSnapshot<T>>> {
    discover_evidence(model, &sample.image, &crate::rollout::prompt_text(&sample.question), params)
}

fn stamp<T>(mut snapshots: Vec<EvidenceSnapshot<T>>, version: u64) -> Vec<EvidenceSnapshot<T>> {
    for s in snapshots.iter_mut() {
        s.model_version = version;
    }
    snapshots
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn count_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Config(format!("{what} {v} does not fit in 32 bits")))
}
