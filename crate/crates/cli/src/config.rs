//! JSON run configuration; command-line flags override its fields.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use tumorseg::inference::BlendMode;
use tumorseg::metrics::EvalOptions;
use tumorseg::postprocess::{Connectivity, PostprocessConfig, Profile};
use tumorseg::volio::CaseSuffixes;

use crate::UsageError;

/// Overlaps accepted without `allow_any_overlap`.
pub const STANDARD_OVERLAPS: [f64; 2] = [0.5, 0.7];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Dataset root with one directory per case.
    pub data: Option<PathBuf>,
    /// Comma-separated modality suffixes, optionally followed by the segmentation suffix.
    pub suffixes: String,
    pub out: Option<PathBuf>,
    /// Fit preprocessed volumes to this shape; `null` keeps the cropped frame.
    pub patch: Option<[usize; 3]>,
    pub window: [usize; 3],
    pub overlap: f64,
    pub allow_any_overlap: bool,
    pub blend: BlendMode,
    pub checkpoints: Vec<PathBuf>,
    pub profile: Profile,
    pub thresholds: Option<[f32; 3]>,
    pub min_sizes: Option<[usize; 3]>,
    pub connectivity: Option<Connectivity>,
    pub metrics: EvalOptions,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            data: None,
            suffixes: "t1n,t1c,t2w,t2f,seg".into(),
            out: None,
            patch: None,
            window: [128, 160, 112],
            overlap: 0.5,
            allow_any_overlap: false,
            blend: BlendMode::Gaussian,
            checkpoints: Vec::new(),
            profile: Profile::Ssa,
            thresholds: None,
            min_sizes: None,
            connectivity: None,
            metrics: EvalOptions::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())).into())
    }

    pub fn postprocess(&self) -> PostprocessConfig {
        let mut c = self.profile.config();
        if let Some(t) = self.thresholds {
            c.thresholds = t;
        }
        if let Some(s) = self.min_sizes {
            c.min_sizes = s;
        }
        if let Some(k) = self.connectivity {
            c.connectivity = k;
        }
        c
    }

    pub fn case_suffixes(&self) -> anyhow::Result<CaseSuffixes> {
        Ok(CaseSuffixes::parse(&self.suffixes)?)
    }

    pub fn require_data(&self) -> anyhow::Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| UsageError("no dataset given: pass --data or set \"data\" in the config".into()).into())
    }

    pub fn require_out(&self) -> anyhow::Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| UsageError("no output directory given: pass --out or set \"out\" in the config".into()).into())
    }

    pub fn check_overlap(&self) -> anyhow::Result<()> {
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(UsageError(format!("overlap {} must lie in [0, 1)", self.overlap)).into());
        }
        if !self.allow_any_overlap && !STANDARD_OVERLAPS.contains(&self.overlap) {
            return Err(UsageError(format!(
                "overlap {} is not one of {STANDARD_OVERLAPS:?}; pass --allow-any-overlap to use it",
                self.overlap
            ))
            .into());
        }
        Ok(())
    }

    pub fn check_checkpoints(&self) -> anyhow::Result<()> {
        if self.checkpoints.is_empty() {
            return Err(UsageError("at least one --checkpoint is required".into()).into());
        }
        Ok(())
    }
}

fn triple<T: std::str::FromStr>(s: &str, what: &str) -> Result<[T; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated {what}, got {s:?}"));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(p.parse::<T>().map_err(|_| format!("{p:?} is not a valid {what}"))?);
    }
    Ok(out.try_into().ok().expect("three values"))
}

pub fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let v: [usize; 3] = triple(s, "extents")?;
    if v.contains(&0) {
        return Err(format!("extents must be positive, got {s:?}"));
    }
    Ok(v)
}

pub fn parse_sizes(s: &str) -> Result<[usize; 3], String> {
    triple(s, "sizes")
}

pub fn parse_thresholds(s: &str) -> Result<[f32; 3], String> {
    let v: [f32; 3] = triple(s, "thresholds")?;
    if v.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
        return Err(format!("thresholds must lie strictly between 0 and 1, got {s:?}"));
    }
    Ok(v)
}

pub fn parse_connectivity(s: &str) -> Result<Connectivity, String> {
    match s {
        "6" => Ok(Connectivity::Six),
        "18" => Ok(Connectivity::Eighteen),
        "26" => Ok(Connectivity::TwentySix),
        _ => Err(format!("connectivity must be 6, 18 or 26, got {s:?}")),
    }
}

pub fn parse_profile(s: &str) -> Result<Profile, String> {
    s.parse().map_err(|e: tumorseg::Error| e.to_string())
}

pub fn parse_blend(s: &str) -> Result<BlendMode, String> {
    s.parse().map_err(|e: tumorseg::Error| e.to_string())
}
