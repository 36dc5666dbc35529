//! Artifact directories, score files and their metadata sidecars.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vtgan_core::data::DatasetKind;

use crate::error::{CliError, Result};
use crate::spec::{ModelKind, Profile};

pub const SPEC_FILE: &str = "spec.json";
pub const SPEC_HASH_FILE: &str = "spec.sha256";
pub const SCORES_FILE: &str = "scores.csv";
pub const LOSSES_FILE: &str = "losses.csv";
pub const RUN_FILE: &str = "run.json";

/// An output directory that refuses to overwrite existing outputs unless
/// forced.
#[derive(Debug, Clone)]
pub struct ArtifactDir {
    pub path: PathBuf,
}

impl ArtifactDir {
    pub fn prepare(path: &Path, outputs: &[&str], force: bool) -> Result<Self> {
        std::fs::create_dir_all(path).map_err(CliError::io(path))?;
        if !force {
            if let Some(existing) = outputs.iter().map(|o| path.join(o)).find(|p| p.exists()) {
                return Err(CliError::Usage(format!("{} exists; pass --force to overwrite", existing.display())));
            }
        }
        Ok(ArtifactDir { path: path.to_path_buf() })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.file(name);
        std::fs::write(&p, bytes).map_err(CliError::io(&p))?;
        Ok(p)
    }

    /// Resolved config and its hash; a directory never mixes specs.
    pub fn write_spec(&self, json: &str, hash: &str, force: bool) -> Result<()> {
        let hash_path = self.file(SPEC_HASH_FILE);
        if !force {
            if let Ok(old) = std::fs::read_to_string(&hash_path) {
                if old.trim() != hash {
                    return Err(CliError::Integrity(format!(
                        "{} holds artifacts of another spec; pass --force to replace them",
                        self.path.display()
                    )));
                }
            }
        }
        self.write(SPEC_FILE, json)?;
        self.write(SPEC_HASH_FILE, format!("{hash}\n"))?;
        Ok(())
    }
}

/// One line of a scores file. Distance-style scores leave the GAN columns empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    /// Index into the official test split.
    pub index: usize,
    /// 1 for the unknown class.
    pub label: u8,
    pub v: f64,
    pub l_r: Option<f64>,
    pub l_d: Option<f64>,
    pub restarts: Option<usize>,
}

pub fn scores_to_csv(rows: &[ScoreRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Data(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Data(e.to_string()))
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let header = r.headers().map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?.clone();
    if header.iter().collect::<Vec<_>>() != ["index", "label", "v", "l_r", "l_d", "restarts"] {
        return Err(CliError::Data(format!("{}: unexpected header {:?}", path.display(), header)));
    }
    let mut rows = Vec::new();
    for rec in r.deserialize::<ScoreRow>() {
        let row = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            CliError::Data(format!("{} line {line}: {e}", path.display()))
        })?;
        if row.label > 1 || !row.v.is_finite() {
            return Err(CliError::Data(format!("{}: bad row for test image {}", path.display(), row.index)));
        }
        rows.push(row);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMeta {
    pub spec_hash: String,
    pub dataset: DatasetKind,
    pub known: u8,
    pub unknown: u8,
    pub model: ModelKind,
    pub seed: u64,
    pub profile: Profile,
    pub side: usize,
    /// Weight of the feature term, GAN models only.
    pub lambda: Option<f64>,
    pub count: usize,
}

pub fn meta_path(scores: &Path) -> PathBuf {
    scores.with_extension("meta.json")
}

pub fn read_meta(scores: &Path) -> Result<ScoreMeta> {
    let p = meta_path(scores);
    let text = std::fs::read_to_string(&p).map_err(CliError::io(&p))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_with_empty_columns() {
        let rows = vec![
            ScoreRow { index: 3, label: 0, v: 1.25, l_r: Some(1.0), l_d: Some(2.25), restarts: Some(3) },
            ScoreRow { index: 7, label: 1, v: 0.1 + 0.2, l_r: None, l_d: None, restarts: None },
        ];
        let bytes = scores_to_csv(&rows).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.starts_with("index,label,v,l_r,l_d,restarts\n3,0,1.25,1.0,2.25,3\n7,1,"));
        let dir = std::env::temp_dir().join(format!("vtgan-csv-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("s.csv");
        std::fs::write(&p, bytes).unwrap();
        assert_eq!(read_scores(&p).unwrap(), rows);
        std::fs::write(&p, "index,label,v,l_r,l_d,restarts\n1,0,0.5,,,\n2,0,oops,,,\n").unwrap();
        let err = read_scores(&p).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
