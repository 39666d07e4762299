//! On-disk synthetic dataset: MSV1 files plus a JSON manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use latreg::fields::{self, LabelMap};
use latreg::grpo::{derive_seed, LabeledPair};
use latreg::io;
use latreg::objectives::hard_dice;
use latreg::synthdata::{generate_pair, SceneSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, Split};
use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const ROLES: [&str; 5] = ["moving", "fixed", "moving-labels", "fixed-labels", "true-field"];
const DATA_STREAM: u64 = 0xDA7A;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Unlabeled,
    Labeled,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 4] = [SplitName::Unlabeled, SplitName::Labeled, SplitName::Val, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Unlabeled => "unlabeled",
            SplitName::Labeled => "labeled",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }

    fn count(self, s: &Split) -> usize {
        match self {
            SplitName::Unlabeled => s.unlabeled,
            SplitName::Labeled => s.labeled,
            SplitName::Val => s.val,
            SplitName::Test => s.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the manifest directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub id: String,
    pub split: SplitName,
    pub seed: u64,
    pub files: BTreeMap<String, FileEntry>,
    /// Dice (percent) between the fixed labels and the unregistered moving
    /// labels.
    pub identity_dice: f64,
    pub true_field_njd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub pairs: usize,
    pub mean_identity_dice: f64,
    pub min_identity_dice: f64,
    pub max_true_field_njd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub seed: u64,
    /// Generating spec; each pair overrides only `seed`.
    pub scene: SceneSpec,
    pub split: Split,
    pub pairs: Vec<PairEntry>,
    pub summary: Summary,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub unlabeled: Vec<LabeledPair>,
    pub labeled: Vec<LabeledPair>,
    pub val: Vec<LabeledPair>,
    pub test: Vec<LabeledPair>,
}

pub fn data_dir(out: &Path) -> PathBuf {
    out.join("data")
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes every split to `<out>/data`. Refuses to replace an existing
/// manifest unless `force` is set.
pub fn generate(cfg: &ExperimentConfig, force: bool) -> Result<Manifest, CliError> {
    let dir = data_dir(&cfg.out);
    let manifest_path = dir.join(MANIFEST);
    if manifest_path.exists() && !force {
        return Err(CliError::Config(format!(
            "{} already exists; pass --force to overwrite",
            manifest_path.display()
        )));
    }
    let mut pairs = Vec::new();
    for split in SplitName::ALL {
        for i in 0..split.count(&cfg.split) {
            let seed = derive_seed(cfg.seed, &[DATA_STREAM, cfg.scene.seed, split as u64, i as u64]);
            let spec = SceneSpec { seed, ..cfg.scene.clone() };
            let p = generate_pair(&spec)?;
            let id = format!("{}-{i:03}", split.as_str());
            let blobs = [
                io::encode_volume(&p.moving),
                io::encode_volume(&p.fixed),
                io::encode_labels(&p.moving_labels),
                io::encode_labels(&p.fixed_labels),
                io::encode_field(&p.true_field),
            ];
            let mut files = BTreeMap::new();
            for (role, bytes) in ROLES.iter().zip(&blobs) {
                let rel = format!("{}/{id}.{role}.msv", split.as_str());
                io::write_atomic(&dir.join(&rel), bytes)?;
                files.insert(
                    role.to_string(),
                    FileEntry {
                        path: rel,
                        sha256: sha256_hex(bytes),
                    },
                );
            }
            pairs.push(PairEntry {
                id,
                split,
                seed,
                files,
                identity_dice: hard_dice(&p.fixed_labels, &p.moving_labels)?,
                true_field_njd: fields::njd_percent(&p.true_field)?,
            });
        }
    }
    let n = pairs.len();
    let summary = Summary {
        pairs: n,
        mean_identity_dice: pairs.iter().map(|p| p.identity_dice).sum::<f64>() / n.max(1) as f64,
        min_identity_dice: pairs.iter().map(|p| p.identity_dice).fold(f64::INFINITY, f64::min),
        max_true_field_njd: pairs.iter().map(|p| p.true_field_njd).fold(0.0, f64::max),
    };
    let manifest = Manifest {
        format: 1,
        seed: cfg.seed,
        scene: cfg.scene.clone(),
        split: cfg.split.clone(),
        pairs,
        summary,
    };
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    io::write_atomic(&manifest_path, text.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(out: &Path) -> Result<Manifest, CliError> {
    let path = data_dir(out).join(MANIFEST);
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::Data(format!("cannot read {} (run `generate` first): {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("invalid manifest {}: {e}", path.display())))
}

fn read_checked(dir: &Path, entry: &FileEntry) -> Result<Vec<u8>, CliError> {
    let path = dir.join(&entry.path);
    let bytes = fs::read(&path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    if sha256_hex(&bytes) != entry.sha256 {
        return Err(CliError::Data(format!("checksum mismatch for {}", path.display())));
    }
    Ok(bytes)
}

fn load_pair(dir: &Path, entry: &PairEntry) -> Result<LabeledPair, CliError> {
    let file = |role: &str| {
        entry
            .files
            .get(role)
            .ok_or_else(|| CliError::Data(format!("pair {} has no {role} file", entry.id)))
            .and_then(|f| read_checked(dir, f))
    };
    let labels = |role: &str| -> Result<LabelMap, CliError> { Ok(io::decode_labels(&file(role)?)?) };
    Ok(LabeledPair {
        id: entry.id.clone(),
        moving: io::decode_volume(&file("moving")?)?,
        fixed: io::decode_volume(&file("fixed")?)?,
        moving_labels: labels("moving-labels")?,
        fixed_labels: labels("fixed-labels")?,
    })
}

/// Loads every pair listed in the manifest, verifying checksums.
pub fn load(out: &Path) -> Result<(Manifest, Dataset), CliError> {
    let manifest = read_manifest(out)?;
    let dir = data_dir(out);
    let mut ds = Dataset {
        unlabeled: Vec::new(),
        labeled: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for entry in &manifest.pairs {
        let pair = load_pair(&dir, entry)?;
        match entry.split {
            SplitName::Unlabeled => ds.unlabeled.push(pair),
            SplitName::Labeled => ds.labeled.push(pair),
            SplitName::Val => ds.val.push(pair),
            SplitName::Test => ds.test.push(pair),
        }
    }
    Ok((manifest, ds))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(out: &Path) -> ExperimentConfig {
        ExperimentConfig {
            out: out.to_path_buf(),
            split: Split { unlabeled: 2, labeled: 1, val: 1, test: 1 },
            ..Default::default()
        }
    }

    #[test]
    fn generate_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        let m = generate(&cfg, false).unwrap();
        assert_eq!(m.pairs.len(), 5);
        assert_eq!(m.summary.max_true_field_njd, 0.0);
        let (_, ds) = load(dir.path()).unwrap();
        assert_eq!((ds.unlabeled.len(), ds.labeled.len(), ds.val.len(), ds.test.len()), (2, 1, 1, 1));
        assert!(matches!(generate(&cfg, false), Err(CliError::Config(_))));
        generate(&cfg, true).unwrap();
    }

    #[test]
    fn corrupted_file_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate(&small(dir.path()), false).unwrap();
        let victim = data_dir(dir.path()).join(&m.pairs[0].files["fixed"].path);
        let mut bytes = fs::read(&victim).unwrap();
        bytes[20] ^= 0xFF;
        fs::write(&victim, bytes).unwrap();
        assert!(matches!(load(dir.path()), Err(CliError::Data(_))));
    }
}
