//! Checkpoint directory: `manifest.json` (text) plus `tensors.bin`, one raw
//! little-endian f64 blob. Every tensor record carries its role tag, offsets
//! and a CRC32 of its bytes.
//!
//! Writes go to temporary files that are renamed into place while holding an
//! exclusive lock on `.lock` in the checkpoint directory.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{param_specs, ArchConfig, ModelParams, NamedTensor, Role};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: &str = "moe-forge-ckpt/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";
const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub length: u64,
    pub role: RoleTag,
    pub layer: Option<usize>,
    pub expert: Option<usize>,
    pub crc32: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RoleTag {
    NonExpert,
    Expert,
    Gate,
}

impl TensorRecord {
    fn role(&self) -> Option<Role> {
        match (self.role, self.layer, self.expert) {
            (RoleTag::NonExpert, None, None) => Some(Role::NonExpert),
            (RoleTag::Expert, Some(layer), Some(idx)) => Some(Role::Expert { layer, idx }),
            (RoleTag::Gate, Some(layer), None) => Some(Role::Gate { layer }),
            _ => None,
        }
    }
}

fn tag(role: Role) -> (RoleTag, Option<usize>, Option<usize>) {
    match role {
        Role::NonExpert => (RoleTag::NonExpert, None, None),
        Role::Expert { layer, idx } => (RoleTag::Expert, Some(layer), Some(idx)),
        Role::Gate { layer } => (RoleTag::Gate, Some(layer), None),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub arch: ArchConfig,
    pub blob_bytes: u64,
    pub tensors: Vec<TensorRecord>,
}

impl CheckpointManifest {
    /// Manifest layout for `arch` without materializing any tensor. CRCs are 0.
    pub fn for_arch(arch: &ArchConfig) -> Self {
        let mut offset = 0;
        let tensors = param_specs(arch)
            .into_iter()
            .map(|spec| {
                let length = spec.numel() as u64 * 8;
                let (role, layer, expert) = tag(spec.role);
                let rec = TensorRecord {
                    name: spec.name,
                    shape: spec.shape,
                    dtype: "f64".into(),
                    offset,
                    length,
                    role,
                    layer,
                    expert,
                    crc32: 0,
                };
                offset += length;
                rec
            })
            .collect();
        Self {
            format: FORMAT_VERSION.into(),
            arch: arch.clone(),
            blob_bytes: offset,
            tensors,
        }
    }

    pub fn count_role(&self, role: RoleTag) -> usize {
        self.tensors.iter().filter(|t| t.role == role).count()
    }
}

fn encode(model: &ModelParams) -> (CheckpointManifest, Vec<u8>) {
    let mut blob = Vec::with_capacity(model.num_params() as usize * 8);
    let mut tensors = Vec::with_capacity(model.tensors().len());
    for t in model.tensors() {
        let offset = blob.len() as u64;
        for v in t.tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        let (role, layer, expert) = tag(t.role);
        tensors.push(TensorRecord {
            name: t.name.clone(),
            shape: t.tensor.shape().to_vec(),
            dtype: "f64".into(),
            offset,
            length: blob.len() as u64 - offset,
            role,
            layer,
            expert,
            crc32: crc32fast::hash(&blob[offset as usize..]),
        });
    }
    let manifest = CheckpointManifest {
        format: FORMAT_VERSION.into(),
        arch: model.arch.clone(),
        blob_bytes: blob.len() as u64,
        tensors,
    };
    (manifest, blob)
}

fn lock(dir: &Path) -> Result<File> {
    let path = dir.join(LOCK_FILE);
    let file = OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    file.lock().map_err(|e| Error::io(&path, e))?;
    Ok(file)
}

fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let tmp = dir.join(format!(".{name}.tmp"));
    let dst = dir.join(name);
    let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, &dst).map_err(|e| Error::io(&dst, e))
}

/// Writes `model` into directory `dir`, creating it if needed.
pub fn save(model: &ModelParams, dir: impl AsRef<Path>) -> Result<CheckpointManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (manifest, blob) = encode(model);
    let _guard = lock(dir)?;
    // Blob first: a manifest is only ever visible next to the blob it describes.
    write_atomic(dir, BLOB_FILE, &blob)?;
    write_atomic(dir, MANIFEST_FILE, &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<CheckpointManifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let found = value.get("format").and_then(|f| f.as_str()).unwrap_or("<missing>");
    if found != FORMAT_VERSION {
        return Err(Error::Version {
            found: found.to_string(),
            expected: FORMAT_VERSION,
        });
    }
    Ok(serde_json::from_value(value)?)
}

fn read_blob(dir: &Path) -> Result<Vec<u8>> {
    let path = dir.join(BLOB_FILE);
    fs::read(&path).map_err(|e| Error::io(&path, e))
}

pub fn load(dir: impl AsRef<Path>) -> Result<ModelParams> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let blob = read_blob(dir)?;
    if (blob.len() as u64) < manifest.blob_bytes {
        return Err(Error::Truncated {
            needed: manifest.blob_bytes,
            found: blob.len() as u64,
        });
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for rec in &manifest.tensors {
        let end = rec.offset.checked_add(rec.length).filter(|&e| e <= blob.len() as u64).ok_or(Error::Truncated {
            needed: rec.offset.saturating_add(rec.length),
            found: blob.len() as u64,
        })?;
        let bytes = &blob[rec.offset as usize..end as usize];
        if crc32fast::hash(bytes) != rec.crc32 {
            return Err(Error::Checksum { name: rec.name.clone() });
        }
        if rec.dtype != "f64" || rec.length != rec.shape.iter().product::<usize>() as u64 * 8 {
            return Err(Error::Malformed(format!("record `{}` has inconsistent dtype/length", rec.name)));
        }
        let role = rec
            .role()
            .ok_or_else(|| Error::Malformed(format!("record `{}` has inconsistent role tags", rec.name)))?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        let tensor = Tensor::new(rec.shape.clone(), data)?.with_requires_grad(true);
        tensors.push(NamedTensor {
            name: rec.name.clone(),
            role,
            tensor,
        });
    }
    ModelParams::from_tensors(manifest.arch, tensors)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    Version { found: String },
    DuplicateName { name: String },
    Overlap { first: String, second: String },
    OutOfBounds { name: String },
    LengthMismatch { name: String },
    SizeMismatch { declared: u64, sum_of_lengths: u64, blob: u64 },
    Tagging { name: String, detail: String },
    Checksum { name: String },
    Layout { detail: String },
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every manifest invariant and tensor checksum. Only an unreadable
/// or unparsable manifest is an error.
pub fn validate(dir: impl AsRef<Path>) -> Result<ValidationReport> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    let blob = read_blob(dir).ok();
    Ok(validate_manifest(&manifest, blob.as_deref()))
}

pub fn validate_manifest(manifest: &CheckpointManifest, blob: Option<&[u8]>) -> ValidationReport {
    let mut v = Vec::new();
    if manifest.format != FORMAT_VERSION {
        v.push(Violation::Version {
            found: manifest.format.clone(),
        });
    }
    let mut names = std::collections::HashSet::new();
    for rec in &manifest.tensors {
        if !names.insert(rec.name.as_str()) {
            v.push(Violation::DuplicateName { name: rec.name.clone() });
        }
        if rec.role().is_none() {
            let detail = match rec.role {
                RoleTag::Expert => "EXPERT record needs layer and expert indices",
                RoleTag::Gate => "GATE record needs a layer index and no expert index",
                RoleTag::NonExpert => "NON_EXPERT record carries layer/expert indices",
            };
            v.push(Violation::Tagging {
                name: rec.name.clone(),
                detail: detail.into(),
            });
        }
        if rec.length != rec.shape.iter().product::<usize>() as u64 * 8 || rec.dtype != "f64" {
            v.push(Violation::LengthMismatch { name: rec.name.clone() });
        }
        if rec.offset.saturating_add(rec.length) > manifest.blob_bytes {
            v.push(Violation::OutOfBounds { name: rec.name.clone() });
        }
    }
    let mut spans: Vec<&TensorRecord> = manifest.tensors.iter().filter(|r| r.length > 0).collect();
    spans.sort_by_key(|r| r.offset);
    for w in spans.windows(2) {
        if w[0].offset + w[0].length > w[1].offset {
            v.push(Violation::Overlap {
                first: w[0].name.clone(),
                second: w[1].name.clone(),
            });
        }
    }
    let sum: u64 = manifest.tensors.iter().map(|r| r.length).sum();
    let blob_len = blob.map_or(manifest.blob_bytes, |b| b.len() as u64);
    if sum != manifest.blob_bytes || blob_len != manifest.blob_bytes {
        v.push(Violation::SizeMismatch {
            declared: manifest.blob_bytes,
            sum_of_lengths: sum,
            blob: blob_len,
        });
    }
    if let Some(blob) = blob {
        for rec in &manifest.tensors {
            let end = rec.offset.saturating_add(rec.length);
            if end <= blob.len() as u64 && crc32fast::hash(&blob[rec.offset as usize..end as usize]) != rec.crc32 {
                v.push(Violation::Checksum { name: rec.name.clone() });
            }
        }
    }
    if manifest.arch.validate().is_ok() {
        let expected = CheckpointManifest::for_arch(&manifest.arch);
        let mut want: Vec<_> = expected.tensors.iter().map(|r| (&r.name, &r.shape, r.role, r.layer, r.expert)).collect();
        let mut got: Vec<_> = manifest.tensors.iter().map(|r| (&r.name, &r.shape, r.role, r.layer, r.expert)).collect();
        want.sort();
        got.sort();
        if want != got {
            v.push(Violation::Layout {
                detail: "tensor set does not match the layout of the recorded arch".into(),
            });
        }
    } else {
        v.push(Violation::Layout {
            detail: "recorded arch is invalid".into(),
        });
    }
    ValidationReport { violations: v }
}

pub fn manifest_path(dir: impl AsRef<Path>) -> PathBuf {
    dir.as_ref().join(MANIFEST_FILE)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelParams {
        ModelParams::build(&ArchConfig::toy(20, 2), 3).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = toy();
        let manifest = save(&m, dir.path()).unwrap();
        assert_eq!(manifest.format, FORMAT_VERSION);
        let back = load(dir.path()).unwrap();
        assert_eq!(back.arch, m.arch);
        for (a, b) in back.tensors().iter().zip(m.tensors()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.role, b.role);
            assert!(a.tensor.bit_eq(&b.tensor));
        }
        assert!(validate(dir.path()).unwrap().is_valid());
    }

    #[test]
    fn corrupt_byte_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        save(&toy(), dir.path()).unwrap();
        let path = dir.path().join(BLOB_FILE);
        let mut bytes = fs::read(&path).unwrap();
        bytes[100] ^= 0x01;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Checksum { .. })));
        let report = validate(dir.path()).unwrap();
        assert!(report.violations.iter().any(|v| matches!(v, Violation::Checksum { .. })));
    }

    #[test]
    fn truncated_blob_and_version_errors() {
        let dir = tempfile::tempdir().unwrap();
        save(&toy(), dir.path()).unwrap();
        let path = dir.path().join(BLOB_FILE);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Truncated { .. })));

        save(&toy(), dir.path()).unwrap();
        let mpath = manifest_path(dir.path());
        let text = fs::read_to_string(&mpath).unwrap().replace(FORMAT_VERSION, "moe-forge-ckpt/0");
        fs::write(&mpath, text).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Version { .. })));
    }

    #[test]
    fn validate_reports_overlap_and_tagging() {
        let m = toy();
        let (manifest, blob) = encode(&m);
        let mut overlapped = manifest.clone();
        overlapped.tensors[1].offset -= 8;
        let r = validate_manifest(&overlapped, Some(&blob));
        assert!(r.violations.iter().any(|v| matches!(v, Violation::Overlap { .. })));

        let mut untagged = manifest.clone();
        let i = untagged.tensors.iter().position(|t| t.role == RoleTag::Expert).unwrap();
        untagged.tensors[i].expert = None;
        let r = validate_manifest(&untagged, Some(&blob));
        assert!(r.violations.iter().any(|v| matches!(v, Violation::Tagging { .. })));
        assert!(validate_manifest(&manifest, Some(&blob)).is_valid());
    }

    #[test]
    fn large_manifest_lists_eighteen_gates() {
        let m = CheckpointManifest::for_arch(&ArchConfig::large(64));
        assert_eq!(m.count_role(RoleTag::Gate), 18);
        assert_eq!(m.count_role(RoleTag::Expert), 18 * 64 * 4);
        assert_eq!(m.blob_bytes, crate::model::param_count(&ArchConfig::large(64)).total * 8);
        assert!(validate_manifest(&m, None).is_valid());
    }
}
