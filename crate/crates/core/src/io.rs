//! On-disk datasets: `manifest.json`, `data/<id>.f32` (little-endian f32,
//! C order) and `labels/<id>.u8`, with a CRC-32 per file in the manifest.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::PRNG_NAME;
use crate::volume::{LabelMap, ProtectedVolume, Volume, VolumeShape};

pub const FORMAT_VERSION: &str = "voxshield-dataset/1";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeEntry {
    pub id: String,
    pub data_path: String,
    pub label_path: String,
    /// `[C, D, H, W]`.
    pub shape: [usize; 4],
    pub spacing: [f32; 3],
    pub num_classes: usize,
    pub protected: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator_fingerprint: Option<String>,
    pub data_crc32: u32,
    pub label_crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: String,
    pub prng_name: String,
    pub config_hash: String,
    pub volumes: Vec<VolumeEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StoredVolume {
    Clean(Volume),
    Protected(ProtectedVolume),
}

impl StoredVolume {
    pub fn id(&self) -> &str {
        match self {
            Self::Clean(v) => v.id(),
            Self::Protected(p) => p.id(),
        }
    }

    pub fn data(&self) -> &[f32] {
        match self {
            Self::Clean(v) => v.data(),
            Self::Protected(p) => p.data(),
        }
    }

    pub fn to_volume(&self) -> Volume {
        match self {
            Self::Clean(v) => v.clone(),
            Self::Protected(p) => p.to_volume(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub entries: Vec<(StoredVolume, LabelMap)>,
}

impl Dataset {
    /// Images as plain volumes paired with labels, in manifest order.
    pub fn pairs(&self) -> Vec<(Volume, LabelMap)> {
        self.entries.iter().map(|(v, y)| (v.to_volume(), y.clone())).collect()
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|(v, _)| v.id().to_string()).collect()
    }
}

struct Pending<'a> {
    entry: VolumeEntry,
    data: &'a [f32],
    labels: &'a [u8],
}

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id != "."
        && id != ".."
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::Precondition(format!("volume id {id:?} is not usable as a file name")))
    }
}

fn entry_for(
    id: &str,
    shape: VolumeShape,
    spacing: [f32; 3],
    label: &LabelMap,
    protected: Option<(&str, Option<&str>)>,
    data: &[f32],
) -> Result<VolumeEntry> {
    check_id(id)?;
    if !label.matches(shape) {
        return Err(Error::ShapeMismatch(format!(
            "label of {id} has grid {:?}, volume has {:?}",
            label.dims(),
            shape.as_array()
        )));
    }
    Ok(VolumeEntry {
        id: id.to_string(),
        data_path: format!("data/{id}.f32"),
        label_path: format!("labels/{id}.u8"),
        shape: shape.as_array(),
        spacing,
        num_classes: label.num_classes(),
        protected: protected.is_some(),
        source_id: protected.map(|(s, _)| s.to_string()),
        generator_fingerprint: protected.and_then(|(_, f)| f.map(str::to_string)),
        data_crc32: crc32fast::hash(&f32_bytes(data)),
        label_crc32: crc32fast::hash(label.classes()),
    })
}

fn f32_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn save_clean(dir: &Path, pairs: &[(Volume, LabelMap)], config_hash: &str) -> Result<DatasetManifest> {
    let pending = pairs
        .iter()
        .map(|(v, y)| {
            Ok(Pending {
                entry: entry_for(v.id(), v.shape(), v.spacing(), y, None, v.data())?,
                data: v.data(),
                labels: y.classes(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_all(dir, pending, config_hash)
}

pub fn save_protected(
    dir: &Path,
    pairs: &[(ProtectedVolume, LabelMap)],
    config_hash: &str,
) -> Result<DatasetManifest> {
    let pending = pairs
        .iter()
        .map(|(p, y)| {
            let prov = Some((p.source_id(), p.generator_fingerprint()));
            Ok(Pending {
                entry: entry_for(p.id(), p.shape(), p.spacing(), y, prov, p.data())?,
                data: p.data(),
                labels: y.classes(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_all(dir, pending, config_hash)
}

/// Writes into a sibling staging directory and renames it into place, so a
/// failure never leaves a half-written dataset at `dir`.
fn write_all(dir: &Path, pending: Vec<Pending>, config_hash: &str) -> Result<DatasetManifest> {
    let mut seen = HashSet::new();
    for p in &pending {
        if !seen.insert(p.entry.id.as_str()) {
            return Err(Error::Precondition(format!("duplicate volume id {}", p.entry.id)));
        }
    }
    if dir.exists() && fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some() {
        return Err(Error::Precondition(format!("{} exists and is not empty", dir.display())));
    }
    let name = dir
        .file_name()
        .ok_or_else(|| Error::Precondition(format!("{} has no final component", dir.display())))?;
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let staging = parent.join(format!(".{}.partial-{}", name.to_string_lossy(), std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION.into(),
        prng_name: PRNG_NAME.into(),
        config_hash: config_hash.into(),
        volumes: pending.iter().map(|p| p.entry.clone()).collect(),
    };
    let result = write_staged(&staging, &pending, &manifest).and_then(|()| {
        if dir.exists() {
            fs::remove_dir(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))
    });
    if result.is_err() {
        let _ = fs::remove_dir_all(&staging);
    }
    result.map(|()| manifest)
}

fn write_staged(staging: &Path, pending: &[Pending], manifest: &DatasetManifest) -> Result<()> {
    for sub in ["data", "labels"] {
        let p = staging.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for p in pending {
        let path = staging.join(&p.entry.data_path);
        fs::write(&path, f32_bytes(p.data)).map_err(|e| Error::io(&path, e))?;
        let path = staging.join(&p.entry.label_path);
        fs::write(&path, p.labels).map_err(|e| Error::io(&path, e))?;
    }
    let path = staging.join(MANIFEST);
    let json = serde_json::to_string_pretty(manifest).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Corruption {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_checked(dir: &Path, rel: &str, crc: u32, expected_len: usize) -> Result<(PathBuf, Vec<u8>)> {
    if Path::new(rel).is_absolute() || rel.split('/').any(|c| c == "..") {
        return Err(corrupt(&dir.join(MANIFEST), format!("path {rel} escapes the dataset directory")));
    }
    let path = dir.join(rel);
    let bytes = fs::read(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => corrupt(&path, "file listed in manifest is missing"),
        _ => Error::io(&path, e),
    })?;
    if bytes.len() != expected_len {
        return Err(corrupt(&path, format!("expected {expected_len} bytes, found {}", bytes.len())));
    }
    let actual = crc32fast::hash(&bytes);
    if actual != crc {
        return Err(corrupt(&path, format!("CRC-32 {actual:08x} does not match manifest {crc:08x}")));
    }
    Ok((path, bytes))
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| corrupt(&path, e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(corrupt(&path, format!("unsupported format {}", manifest.format_version)));
    }
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let mpath = dir.join(MANIFEST);
    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(manifest.volumes.len());
    for e in &manifest.volumes {
        if !seen.insert(e.id.as_str()) {
            return Err(corrupt(&mpath, format!("duplicate id {}", e.id)));
        }
        let [c, d, h, w] = e.shape;
        let shape = VolumeShape::new(c, d, h, w);
        let (dpath, bytes) = read_checked(dir, &e.data_path, e.data_crc32, shape.len() * 4)?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let image = Volume::with_spacing(e.id.clone(), shape, e.spacing, data).map_err(|err| corrupt(&dpath, err.to_string()))?;
        let (lpath, classes) = read_checked(dir, &e.label_path, e.label_crc32, shape.voxels())?;
        let label = LabelMap::new(shape.dims(), e.num_classes, classes).map_err(|err| corrupt(&lpath, err.to_string()))?;
        let stored = if e.protected {
            let source = e.source_id.clone().unwrap_or_else(|| e.id.clone());
            StoredVolume::Protected(ProtectedVolume::from_stored(image, source, e.generator_fingerprint.clone()))
        } else {
            StoredVolume::Clean(image)
        };
        entries.push((stored, label));
    }
    Ok(Dataset { manifest, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, SynthSpec};
    use crate::volume::PerturbationField;

    fn data(n: usize) -> Vec<(Volume, LabelMap)> {
        generate_dataset(&SynthSpec {
            num_volumes: n,
            shape: [8, 8, 8],
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn clean_round_trip_is_bit_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("ds");
        let pairs = data(3);
        let m = save_clean(&dir, &pairs, "abc").unwrap();
        let back = load_dataset(&dir).unwrap();
        assert_eq!(back.manifest, m);
        for ((s, y), (x, y0)) in back.entries.iter().zip(&pairs) {
            assert_eq!(s, &StoredVolume::Clean(x.clone()));
            assert_eq!(y, y0);
            let raw = fs::read(dir.join(format!("data/{}.f32", x.id()))).unwrap();
            assert_eq!(raw, f32_bytes(x.data()));
        }
    }

    #[test]
    fn protected_round_trip_keeps_budget_and_provenance() {
        let tmp = tempfile::tempdir().unwrap();
        let pairs = data(2);
        let eps = 4.0 / 255.0;
        let prot: Vec<_> = pairs
            .iter()
            .map(|(x, y)| {
                let d: Vec<f32> = (0..x.data().len()).map(|i| if i % 2 == 0 { eps } else { -eps }).collect();
                let f = PerturbationField::new(x.shape(), eps, d).unwrap();
                (ProtectedVolume::protect(x, &f, Some("fp".into())).unwrap(), y.clone())
            })
            .collect();
        save_protected(&tmp.path().join("p"), &prot, "h").unwrap();
        let back = load_dataset(&tmp.path().join("p")).unwrap();
        for ((s, _), (x, _)) in back.entries.iter().zip(&pairs) {
            let StoredVolume::Protected(p) = s else { panic!("expected protected") };
            assert_eq!(p.generator_fingerprint(), Some("fp"));
            assert!(p.max_deviation(x).unwrap() <= eps + 1e-7);
        }
    }

    #[test]
    fn missing_and_damaged_files_are_named() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("ds");
        save_clean(&dir, &data(2), "h").unwrap();
        let victim = dir.join("data/vol_0001.f32");
        let mut bytes = fs::read(&victim).unwrap();
        bytes[5] ^= 1;
        fs::write(&victim, &bytes).unwrap();
        match load_dataset(&dir) {
            Err(Error::Corruption { path, .. }) => assert_eq!(path, victim),
            other => panic!("{other:?}"),
        }
        fs::remove_file(&victim).unwrap();
        assert!(matches!(load_dataset(&dir), Err(Error::Corruption { path, .. }) if path == victim));
        fs::write(&victim, &bytes[..8]).unwrap();
        assert!(matches!(load_dataset(&dir), Err(Error::Corruption { .. })));
    }

    #[test]
    fn shape_mismatch_is_rejected_before_writing() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("ds");
        let mut pairs = data(2);
        let other = generate_dataset(&SynthSpec {
            num_volumes: 1,
            shape: [8, 8, 16],
            ..Default::default()
        })
        .unwrap();
        pairs[1].1 = other[0].1.clone();
        assert!(matches!(save_clean(&dir, &pairs, "h"), Err(Error::ShapeMismatch(_))));
        assert!(!dir.exists());
        assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
    }

    #[test]
    fn refuses_to_overwrite_and_rejects_duplicates() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("ds");
        let pairs = data(1);
        save_clean(&dir, &pairs, "h").unwrap();
        assert!(save_clean(&dir, &pairs, "h").is_err());
        let dup = vec![pairs[0].clone(), pairs[0].clone()];
        assert!(save_clean(&tmp.path().join("d2"), &dup, "h").is_err());
    }

    #[test]
    fn unknown_manifest_fields_are_corruption() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("ds");
        save_clean(&dir, &data(1), "h").unwrap();
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).unwrap().replacen('{', "{\"extra\": 1,", 1);
        fs::write(&path, text).unwrap();
        assert!(matches!(load_dataset(&dir), Err(Error::Corruption { .. })));
    }
}
