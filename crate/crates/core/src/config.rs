use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Every tunable of the pipeline. Serialized as TOML; unknown keys are
/// rejected so that typos do not silently fall back to defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// View-graph weight below which correspondences are ignored while
    /// sampling tracks.
    pub tau_w: f64,
    /// Gini–Simpson index above which a track is potentially erroneous.
    pub tau_gs: f64,
    /// Fraction of potentially erroneous tracks that makes a community
    /// ambiguous.
    pub xi: f64,
    /// Rotation consistency threshold, radians.
    pub eps_r: f64,
    /// Translation-direction consistency threshold, radians.
    pub eps_t: f64,
    pub min_tracks_per_view: usize,
    /// Scale `min_tracks_per_view` by the sampled/total track ratio.
    pub scale_min_tracks: bool,
    pub min_common_images: usize,
    /// Grid superpixel cell size in pixels.
    pub cell_size: f64,
    pub louvain_resolution: f64,
    pub seed: u64,
    /// RANSAC inlier threshold in pixels.
    pub ransac_threshold_px: f64,
    pub ransac_confidence: f64,
    pub ransac_max_iterations: usize,
    pub min_pnp_inliers: usize,
    /// Huber scale of the bundle adjustment loss, pixels.
    pub huber_px: f64,
    pub ba_max_iterations: usize,
    /// Cross-model correspondences required to keep a pairwise alignment.
    pub min_alignment_support: usize,
    /// Distinct camera pairs required to keep a pairwise alignment.
    pub min_alignment_pairs: usize,
    pub disambiguation: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            tau_w: 0.15,
            tau_gs: 0.5,
            xi: 0.2,
            eps_r: 0.15,
            eps_t: 0.35,
            min_tracks_per_view: 30,
            scale_min_tracks: false,
            min_common_images: 20,
            cell_size: 64.0,
            louvain_resolution: 1.0,
            seed: 0,
            ransac_threshold_px: 4.0,
            ransac_confidence: 0.9999,
            ransac_max_iterations: 2000,
            min_pnp_inliers: 12,
            huber_px: 2.0,
            ba_max_iterations: 50,
            min_alignment_support: 5,
            min_alignment_pairs: 10,
            disambiguation: true,
        }
    }
}

impl PipelineConfig {
    /// Thresholds for unordered, noisy photo collections.
    pub fn noisy() -> Self {
        PipelineConfig {
            tau_w: 0.05,
            tau_gs: 0.65,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidInput(format!("{name} = {v} must lie in [0, 1]")))
            }
        };
        let angle = |name: &str, v: f64| {
            if (0.0..=std::f64::consts::PI).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidInput(format!("{name} = {v} must lie in [0, pi]")))
            }
        };
        unit("tau_w", self.tau_w)?;
        unit("tau_gs", self.tau_gs)?;
        unit("xi", self.xi)?;
        angle("eps_r", self.eps_r)?;
        angle("eps_t", self.eps_t)?;
        if !(self.cell_size > 0.0) {
            return Err(Error::InvalidInput("cell_size must be positive".into()));
        }
        if !(self.louvain_resolution > 0.0) {
            return Err(Error::InvalidInput("louvain_resolution must be positive".into()));
        }
        if !(self.ransac_threshold_px > 0.0) || !(self.huber_px > 0.0) {
            return Err(Error::InvalidInput("pixel thresholds must be positive".into()));
        }
        if !(self.ransac_confidence > 0.0 && self.ransac_confidence < 1.0) {
            return Err(Error::InvalidInput("ransac_confidence must lie in (0, 1)".into()));
        }
        if self.ransac_max_iterations == 0 || self.ba_max_iterations == 0 {
            return Err(Error::InvalidInput("iteration caps must be positive".into()));
        }
        if self.min_pnp_inliers < 4 {
            return Err(Error::InvalidInput("min_pnp_inliers must be at least 4".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Threshold applied when forming image clusters.
    pub fn effective_min_tracks(&self, sampled: usize, total: usize) -> usize {
        if self.scale_min_tracks && total > 0 {
            ((self.min_tracks_per_view as f64 * sampled as f64 / total as f64).round() as usize).max(1)
        } else {
            self.min_tracks_per_view
        }
    }
}
