use super::{DataError, Outcome, Source, Trajectory};
use crate::world::Configuration;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Path relative to the manifest's directory.
    pub file: String,
    pub configuration: Configuration,
    pub source: Source,
    pub outcome: Outcome,
    /// Trailing xxHash64 of the file, 16 lowercase hex digits.
    pub checksum: String,
    pub steps: usize,
    pub split: SplitTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    /// Hash of the world the trajectories were recorded in, 16 hex digits.
    pub world_hash: String,
    pub entries: Vec<ManifestEntry>,
}

pub(crate) fn hex(v: u64) -> String {
    format!("{v:016x}")
}

impl DatasetManifest {
    pub fn new(world_hash: u64) -> Self {
        Self { version: MANIFEST_VERSION, world_hash: hex(world_hash), entries: Vec::new() }
    }

    pub fn push(&mut self, file: impl Into<String>, t: &Trajectory, checksum: u64, split: SplitTag) {
        self.entries.push(ManifestEntry {
            file: file.into(),
            configuration: t.config,
            source: t.source,
            outcome: t.outcome,
            checksum: hex(checksum),
            steps: t.steps.len(),
            split,
        });
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let m: Self = serde_json::from_str(text)?;
        if m.version != MANIFEST_VERSION {
            return Err(DataError::Manifest(format!("version {} is not supported (expected {MANIFEST_VERSION})", m.version)));
        }
        let mut files = HashSet::new();
        for e in &m.entries {
            if !files.insert(e.file.as_str()) {
                return Err(DataError::Manifest(format!("{} listed twice", e.file)));
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Entries of `split`, optionally restricted to successful trajectories.
    pub fn select(&self, split: SplitTag, successful_only: bool) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split && (!successful_only || e.outcome == Outcome::Success))
    }

    /// Loads one entry and checks its checksum against the manifest.
    pub fn load_entry(&self, dir: &Path, entry: &ManifestEntry) -> Result<Trajectory, DataError> {
        let t = Trajectory::load(&dir.join(&entry.file))?;
        let sum = hex(t.checksum());
        if sum != entry.checksum {
            return Err(DataError::Manifest(format!("{}: checksum {sum}, manifest says {}", entry.file, entry.checksum)));
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::store::tests::synthetic;

    #[test]
    fn manifest_round_trip_and_checksum_verification() {
        let dir = tempfile::tempdir().unwrap();
        let t = synthetic(4, 4, 4);
        let sum = t.save(&dir.path().join("a.gzbc")).unwrap();
        let mut m = DatasetManifest::new(42);
        m.push("a.gzbc", &t, sum, SplitTag::Train);
        let back = DatasetManifest::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.load_entry(dir.path(), &back.entries[0]).unwrap(), t);
        let mut bad = back.clone();
        bad.entries[0].checksum = hex(sum ^ 1);
        assert!(bad.load_entry(dir.path(), &bad.entries[0]).is_err());
        assert!(DatasetManifest::from_json(&m.to_json().replace("\"version\": 1", "\"version\": 3")).is_err());
        assert_eq!(m.select(SplitTag::Test, false).count(), 0);
    }
}
