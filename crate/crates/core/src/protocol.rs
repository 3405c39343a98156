//! Files exchanged with external evaluators.
//!
//! * mask file: canonical CSV, see [`TemporalMask::to_csv`];
//! * result file: JSON object with required `ate_rmse` (meters) and
//!   `tracking_rate` (fraction in `[0, 1]`), optional `tracked_frames` and
//!   `total_frames`. Unknown keys are ignored.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{MaskError, TemporalMask};

/// Environment variable carrying the per-repetition seed.
pub const SEED_ENV: &str = "TEMPMASK_SEED";

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("malformed result file: {0}")]
    MalformedResult(String),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResultFile {
    pub ate_rmse: f64,
    pub tracking_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tracked_frames: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_frames: Option<u64>,
    /// Informational; the orchestrator recomputes USM with its own λ.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usm: Option<f64>,
}

impl ResultFile {
    pub fn parse(text: &str) -> Result<Self, ProtocolError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| ProtocolError::MalformedResult(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| ProtocolError::MalformedResult("expected a JSON object".into()))?;
        for key in ["ate_rmse", "tracking_rate"] {
            if !obj.contains_key(key) {
                return Err(ProtocolError::MalformedResult(format!("missing required key {key:?}")));
            }
        }
        let result: ResultFile =
            serde_json::from_value(value).map_err(|e| ProtocolError::MalformedResult(e.to_string()))?;
        result.validate()?;
        Ok(result)
    }

    fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |m: String| Err(ProtocolError::MalformedResult(m));
        if !(self.ate_rmse.is_finite() && self.ate_rmse >= 0.0) {
            return bad(format!("ate_rmse must be finite and non-negative, got {}", self.ate_rmse));
        }
        if !(0.0..=1.0).contains(&self.tracking_rate) {
            return bad(format!("tracking_rate must lie in [0, 1], got {}", self.tracking_rate));
        }
        if let (Some(tracked), Some(total)) = (self.tracked_frames, self.total_frames) {
            if total == 0 || tracked > total {
                return bad(format!("inconsistent frame counts {tracked}/{total}"));
            }
            let rate = tracked as f64 / total as f64;
            if (rate - self.tracking_rate).abs() > 1e-9 {
                return bad(format!(
                    "tracking_rate {} disagrees with {tracked}/{total}",
                    self.tracking_rate
                ));
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, ProtocolError> {
        Self::parse(&read_text(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<(), ProtocolError> {
        let mut text = serde_json::to_string_pretty(self).expect("result serializes");
        text.push('\n');
        write_text(path, &text)
    }
}

pub fn read_mask(path: &Path) -> Result<TemporalMask, ProtocolError> {
    Ok(TemporalMask::from_csv(&read_text(path)?)?)
}

pub fn write_mask(path: &Path, mask: &TemporalMask) -> Result<(), ProtocolError> {
    write_text(path, &mask.to_csv())
}

pub(crate) fn read_text(path: &Path) -> Result<String, ProtocolError> {
    fs::read_to_string(path).map_err(|source| ProtocolError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<(), ProtocolError> {
    fs::write(path, text).map_err(|source| ProtocolError::Io {
        path: path.display().to_string(),
        source,
    })
}
