use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{NetConfig, VelocityNet};
use crate::error::{Error, Result};
use crate::schedules::ScheduleState;
use crate::train::AdamState;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_digest: String,
    /// Completed iterations.
    pub iteration: u64,
    pub net: VelocityNet,
    pub optimizer: AdamState,
    pub rng: ChaCha8Rng,
    pub noise_rng: ChaCha8Rng,
    /// Schedule state of the stage the run is in.
    pub schedule: ScheduleState,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: Option<u32>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("checkpoint serializes")
    }

    pub fn from_slice(bytes: &[u8], context: &str) -> Result<Self> {
        let probe: VersionProbe =
            serde_json::from_slice(bytes).map_err(|e| Error::decode(context, e.to_string()))?;
        match probe.format_version {
            Some(CHECKPOINT_FORMAT_VERSION) => {}
            Some(v) => {
                return Err(Error::decode(
                    context,
                    format!("checkpoint format {v} is not supported (expected {CHECKPOINT_FORMAT_VERSION})"),
                ))
            }
            None => return Err(Error::decode(context, "missing format_version")),
        }
        let ckpt: Checkpoint = serde_json::from_slice(bytes).map_err(|e| Error::decode(context, e.to_string()))?;
        if ckpt.optimizer.m.len() != ckpt.net.params().len()
            || ckpt.optimizer.v.len() != ckpt.net.params().len()
            || ckpt
                .optimizer
                .m
                .iter()
                .chain(&ckpt.optimizer.v)
                .zip(ckpt.net.params().iter().chain(ckpt.net.params()))
                .any(|(m, p)| m.shape() != p.shape())
        {
            return Err(Error::decode(context, "optimizer moments do not match parameter shapes"));
        }
        ckpt.schedule
            .validate()
            .map_err(|e| Error::decode(context, format!("schedule state: {e}")))?;
        Ok(ckpt)
    }

    /// Writes via a temporary file and rename so a crash never leaves a
    /// truncated checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_slice(&bytes, &path.display().to_string())
    }

    /// Loads and checks that the stored network matches `expected`.
    pub fn load_for(path: &Path, expected: &NetConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        let got = ckpt.net.config();
        if got.data_dim != expected.data_dim {
            return Err(Error::config(format!(
                "checkpoint {} has data_dim {} but {} was expected",
                path.display(),
                got.data_dim,
                expected.data_dim
            )));
        }
        if got != expected {
            return Err(Error::config(format!(
                "checkpoint {} network config differs from the requested one",
                path.display()
            )));
        }
        Ok(ckpt)
    }

    /// Compares the stored config digest with `digest`. A mismatch is a
    /// config error unless `force`, which turns it into a returned warning.
    pub fn check_digest(&self, digest: &str, force: bool) -> Result<Option<String>> {
        if self.config_digest == digest {
            return Ok(None);
        }
        let msg = format!(
            "checkpoint config digest {} differs from current {}",
            short(&self.config_digest),
            short(digest)
        );
        if force {
            Ok(Some(msg))
        } else {
            Err(Error::config(format!("{msg}; pass --force to continue anyway")))
        }
    }
}

fn short(d: &str) -> &str {
    d.get(..12).unwrap_or(d)
}
