use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use trajval::experiment::SeedTree;

use crate::config::{Hyperparameters, Overrides, RunConfig, Scale};
use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub wall_clock_s: f64,
    pub finished_at: String,
    /// Hashes of the inputs the stage consumed.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub software_version: String,
    pub config_hash: String,
    pub scale: Scale,
    pub hyperparameters: Hyperparameters,
    pub seeds: SeedTree,
    pub config: RunConfig,
    /// Every artifact in the run directory with its SHA-256.
    pub artifacts: BTreeMap<String, String>,
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_hash(path: &Path) -> Result<Option<String>, CliError> {
    match fs::read(path) {
        Ok(b) => Ok(Some(sha256(&b))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub struct Run {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub manifest: RunManifest,
}

impl Run {
    /// Opens (or creates) the run directory. Without configuration flags an existing
    /// manifest supplies the configuration; otherwise the resolved configuration must
    /// match it.
    pub fn open(out: Option<PathBuf>, overrides: &Overrides) -> Result<Self, CliError> {
        let existing = |dir: &Path| -> Result<Option<RunManifest>, CliError> {
            match fs::read_to_string(dir.join(MANIFEST)) {
                Ok(t) => serde_json::from_str(&t).map(Some).map_err(|e| {
                    CliError::Integrity(format!("unreadable manifest in {}: {e}", dir.display()))
                }),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
                Err(e) => Err(e.into()),
            }
        };
        if let (Some(dir), true) = (&out, overrides.is_empty()) {
            if let Some(m) = existing(dir)? {
                m.config.experiment.validate()?;
                return Ok(Self {
                    dir: dir.clone(),
                    config: m.config.clone(),
                    manifest: m,
                });
            }
        }
        let config = RunConfig::resolve(overrides)?;
        let hash = config.hash();
        let dir = match out.or_else(|| config.output_dir.clone()) {
            Some(d) => d,
            None => {
                let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S");
                PathBuf::from("runs").join(format!("{stamp}-{}", &hash[..12]))
            }
        };
        fs::create_dir_all(&dir)?;
        let manifest = match existing(&dir)? {
            Some(m) if m.config_hash != hash => {
                return Err(CliError::Integrity(format!(
                    "{} holds a run with configuration {}, but the requested configuration hashes to {}; \
                     use a fresh --out directory",
                    dir.display(),
                    &m.config_hash[..12],
                    &hash[..12]
                )))
            }
            Some(m) => m,
            None => RunManifest {
                software_version: env!("CARGO_PKG_VERSION").to_string(),
                config_hash: hash,
                scale: overrides.scale(),
                hyperparameters: Hyperparameters::of(&config.experiment),
                seeds: config.experiment.seeds(),
                config: config.clone(),
                artifacts: BTreeMap::new(),
                stages: BTreeMap::new(),
            },
        };
        let run = Self {
            dir,
            config,
            manifest,
        };
        run.save()?;
        Ok(run)
    }

    fn save(&self) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| CliError::Numeric(e.to_string()))?;
        write_atomic(&self.dir.join(MANIFEST), format!("{text}\n").as_bytes())
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Reads an input artifact, refusing if it is missing or differs from the manifest.
    pub fn read_input(&self, name: &str) -> Result<(String, String), CliError> {
        let Some(recorded) = self.manifest.artifacts.get(name) else {
            return Err(CliError::Integrity(format!(
                "{name} is not part of this run; run the stage that produces it first"
            )));
        };
        let bytes = fs::read(self.path(name)).map_err(|e| {
            CliError::Integrity(format!(
                "{name} is listed in the manifest but unreadable: {e}"
            ))
        })?;
        let actual = sha256(&bytes);
        if &actual != recorded {
            return Err(CliError::Integrity(format!(
                "{name} has hash {} but the manifest recorded {}; it was modified after it was written. \
                 Re-run the producing stage or restore the file",
                &actual[..12],
                &recorded[..12]
            )));
        }
        let text =
            String::from_utf8(bytes).map_err(|e| CliError::Integrity(format!("{name}: {e}")))?;
        Ok((text, actual))
    }

    /// True when the stage's outputs are present and intact and its inputs are unchanged.
    pub fn up_to_date(&self, stage: &str) -> Result<bool, CliError> {
        let Some(rec) = self.manifest.stages.get(stage) else {
            return Ok(false);
        };
        for out in &rec.outputs {
            let recorded = self.manifest.artifacts.get(out);
            match (file_hash(&self.path(out))?, recorded) {
                (None, _) | (_, None) => return Ok(false),
                (Some(a), Some(r)) if &a != r => {
                    return Err(CliError::Integrity(format!(
                        "{out} differs from the hash recorded in the manifest; refusing to resume"
                    )))
                }
                _ => {}
            }
        }
        for (name, h) in &rec.inputs {
            if self.manifest.artifacts.get(name) != Some(h) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn commit(
        &mut self,
        stage: &str,
        inputs: BTreeMap<String, String>,
        outputs: Vec<(String, Vec<u8>)>,
        elapsed: Duration,
    ) -> Result<(), CliError> {
        let mut names = Vec::with_capacity(outputs.len());
        for (name, bytes) in outputs {
            write_atomic(&self.path(&name), &bytes)?;
            self.manifest.artifacts.insert(name.clone(), sha256(&bytes));
            names.push(name);
        }
        self.manifest.stages.insert(
            stage.to_string(),
            StageRecord {
                wall_clock_s: elapsed.as_secs_f64(),
                finished_at: chrono::Utc::now().to_rfc3339(),
                inputs,
                outputs: names,
            },
        );
        self.save()
    }
}
