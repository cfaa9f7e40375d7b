//! Run manifest and the separate wall-time record.

use std::collections::BTreeMap;
use std::path::Path;

use hybrid_smpc::{Error, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";
pub const TIMING: &str = "timing.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    /// Paths relative to the output directory, sorted.
    pub artifacts: Vec<String>,
    /// Files whose content depends on wall-clock time.
    pub volatile: Vec<String>,
}

/// Deterministic record of what each command produced. Wall-times live in
/// `timing.json` next to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub versions: BTreeMap<String, String>,
    pub timing_file: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Default for RunManifest {
    fn default() -> Self {
        let versions = BTreeMap::from([
            (
                "hsmpc-cli".to_string(),
                env!("CARGO_PKG_VERSION").to_string(),
            ),
            ("hybrid-smpc".to_string(), hybrid_smpc::VERSION.to_string()),
        ]);
        Self {
            versions,
            timing_file: TIMING.into(),
            stages: BTreeMap::new(),
        }
    }
}

impl RunManifest {
    pub fn load(out: &Path) -> Result<Self> {
        let path = out.join(MANIFEST);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(&path)?;
        let mut m: Self = serde_json::from_str(&text)?;
        m.versions = Self::default().versions;
        Ok(m)
    }

    pub fn save(&self, out: &Path) -> Result<()> {
        write_json(&out.join(MANIFEST), self)
    }

    pub fn record(&mut self, stage: &str, record: StageRecord) {
        self.stages.insert(stage.to_string(), record);
    }
}

/// Wall-clock seconds per stage; never compared byte-wise.
pub fn record_wall_time(out: &Path, stage: &str, seconds: f64) -> Result<()> {
    let path = out.join(TIMING);
    let mut times: BTreeMap<String, f64> = match std::fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
        Err(e) => return Err(Error::Io(e)),
    };
    times.insert(stage.to_string(), seconds);
    write_json(&path, &times)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
