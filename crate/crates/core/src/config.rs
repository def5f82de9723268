//! Tracker configuration file: TOML sections mapping onto [`PipelineConfig`].
//!
//! Angles are written in degrees, everything else in SI units. Every key is
//! optional and unknown keys are rejected.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use serde::Deserialize;
use thiserror::Error;

use crate::factor_graph::{LmConfig, NoiseModel};
use crate::keypoints::{PendingChecks, PromotionConfig, SamplerConfig};
use crate::pipeline::PipelineConfig;
use crate::registration::RansacConfig;
use crate::sdf_refine::RefineConfig;
use crate::tsdf::TsdfConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("bad override {0:?}: expected section.key=value")]
    Override(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub lambda: f64,
    pub r_ideal: f64,
    pub r_min: f64,
    pub beta: f64,
    pub k: usize,
    pub rotation_trigger_deg: f64,
    pub min_visible_trigger: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let d = SamplerConfig::default();
        Self {
            lambda: d.lambda,
            r_ideal: d.r_ideal,
            r_min: d.r_min,
            beta: d.beta,
            k: d.k,
            rotation_trigger_deg: d.rotation_trigger.to_degrees(),
            min_visible_trigger: d.min_visible_trigger,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PendingSection {
    pub max_rotation_deg: f64,
    pub max_translation: f64,
    pub max_uncertainty: f64,
    pub n_streak: usize,
    pub mad_threshold: f64,
    pub min_obs: usize,
    pub max_age: usize,
}

impl Default for PendingSection {
    fn default() -> Self {
        let (c, p) = (PendingChecks::default(), PromotionConfig::default());
        Self {
            max_rotation_deg: c.max_rotation.to_degrees(),
            max_translation: c.max_translation,
            max_uncertainty: c.max_uncertainty,
            n_streak: p.n_streak,
            mad_threshold: p.mad_threshold,
            min_obs: p.min_obs,
            max_age: PipelineConfig::default().pending_max_age,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacSection {
    pub inlier_threshold: f64,
    pub max_iterations: usize,
    pub max_hypotheses: usize,
    pub min_consensus: usize,
    pub seed: u64,
    pub multi_hypothesis: bool,
}

impl Default for RansacSection {
    fn default() -> Self {
        let d = RansacConfig::default();
        Self {
            inlier_threshold: d.inlier_threshold,
            max_iterations: d.max_iterations,
            max_hypotheses: d.max_hypotheses,
            min_consensus: d.min_consensus,
            seed: d.rng_seed,
            multi_hypothesis: true,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineSection {
    pub max_outer_iterations: usize,
    pub max_inner_iterations: usize,
    pub huber_delta: f64,
    pub initial_lambda: f64,
    pub lambda_factor: f64,
    pub convergence_tol: f64,
    pub max_points: usize,
    pub seed: u64,
    pub min_gain: f64,
}

impl Default for RefineSection {
    fn default() -> Self {
        let d = RefineConfig::default();
        Self {
            max_outer_iterations: d.max_outer_iterations,
            max_inner_iterations: d.max_inner_iterations,
            huber_delta: d.huber_delta,
            initial_lambda: d.lm_initial_lambda,
            lambda_factor: d.lm_lambda_factor,
            convergence_tol: d.convergence_tol,
            max_points: d.max_points,
            seed: d.seed,
            min_gain: PipelineConfig::default().refine_min_gain,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsdfSection {
    pub voxel_size: f64,
    pub truncation: f64,
    pub padding_truncations: f64,
    pub max_dim: usize,
    pub refuse_rotation_deg: f64,
    pub refuse_translation: f64,
}

impl Default for TsdfSection {
    fn default() -> Self {
        let (d, p) = (TsdfConfig::default(), PipelineConfig::default());
        Self {
            voxel_size: d.voxel_size,
            truncation: d.truncation,
            padding_truncations: d.padding_truncations,
            max_dim: d.max_dim,
            refuse_rotation_deg: p.refuse_rotation.to_degrees(),
            refuse_translation: p.refuse_translation,
        }
    }
}

/// Factor-graph noise as standard deviations plus the solver settings.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSection {
    pub prior_sigma: f64,
    pub odometry_rotation_sigma_deg: f64,
    pub odometry_translation_sigma: f64,
    pub bearing_sigma_deg: f64,
    pub range_sigma: f64,
    pub huber_delta: f64,
    pub max_iterations: usize,
    pub initial_lambda: f64,
    pub lambda_factor: f64,
    pub max_lambda: f64,
    pub relative_tolerance: f64,
}

impl Default for GraphSection {
    fn default() -> Self {
        let (n, lm) = (NoiseModel::default(), LmConfig::default());
        Self {
            prior_sigma: n.prior[(0, 0)].sqrt(),
            odometry_rotation_sigma_deg: n.odometry[(0, 0)].sqrt().to_degrees(),
            odometry_translation_sigma: n.odometry[(3, 3)].sqrt(),
            bearing_sigma_deg: n.observation[(0, 0)].sqrt().to_degrees(),
            range_sigma: n.observation[(2, 2)].sqrt(),
            huber_delta: n.huber_delta,
            max_iterations: lm.max_iterations,
            initial_lambda: lm.initial_lambda,
            lambda_factor: lm.lambda_factor,
            max_lambda: lm.max_lambda,
            relative_tolerance: lm.relative_tolerance,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingSection {
    pub visibility_gate: f64,
    pub dense_stride: usize,
}

impl Default for TrackingSection {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self { visibility_gate: p.visibility_gate, dense_stride: p.dense_stride }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub tracking: TrackingSection,
    pub sampler: SamplerSection,
    pub pending: PendingSection,
    pub ransac: RansacSection,
    pub refine: RefineSection,
    pub tsdf: TsdfSection,
    pub graph: GraphSection,
}

impl RunConfig {
    /// Parses a config document after applying `section.key=value` overrides.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.pipeline()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml_str(&text, overrides).map_err(|e| match e {
            ConfigError::Parse(msg) => ConfigError::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// The validated pipeline configuration this file describes.
    pub fn pipeline(&self) -> Result<PipelineConfig, ConfigError> {
        let sigmas = [
            self.graph.prior_sigma,
            self.graph.odometry_rotation_sigma_deg,
            self.graph.odometry_translation_sigma,
            self.graph.bearing_sigma_deg,
            self.graph.range_sigma,
        ];
        if sigmas.iter().any(|s| !(*s > 0.0)) {
            return Err(ConfigError::Invalid("graph sigmas must be positive".into()));
        }
        let (s, p, r, f, t, g) = (&self.sampler, &self.pending, &self.ransac, &self.refine, &self.tsdf, &self.graph);
        let rot = g.odometry_rotation_sigma_deg.to_radians().powi(2);
        let trans = g.odometry_translation_sigma.powi(2);
        let bearing = g.bearing_sigma_deg.to_radians().powi(2);
        let cfg = PipelineConfig {
            sampler: SamplerConfig {
                lambda: s.lambda,
                r_ideal: s.r_ideal,
                r_min: s.r_min,
                beta: s.beta,
                k: s.k,
                rotation_trigger: s.rotation_trigger_deg.to_radians(),
                min_visible_trigger: s.min_visible_trigger,
            },
            pending: PendingChecks {
                max_rotation: p.max_rotation_deg.to_radians(),
                max_translation: p.max_translation,
                max_uncertainty: p.max_uncertainty,
            },
            promotion: PromotionConfig { n_streak: p.n_streak, mad_threshold: p.mad_threshold, min_obs: p.min_obs },
            ransac: RansacConfig {
                inlier_threshold: r.inlier_threshold,
                max_iterations: r.max_iterations,
                max_hypotheses: r.max_hypotheses,
                min_consensus: r.min_consensus,
                rng_seed: r.seed,
            },
            refine: RefineConfig {
                max_outer_iterations: f.max_outer_iterations,
                max_inner_iterations: f.max_inner_iterations,
                huber_delta: f.huber_delta,
                lm_initial_lambda: f.initial_lambda,
                lm_lambda_factor: f.lambda_factor,
                convergence_tol: f.convergence_tol,
                max_points: f.max_points,
                seed: f.seed,
            },
            tsdf: TsdfConfig {
                voxel_size: t.voxel_size,
                truncation: t.truncation,
                padding_truncations: t.padding_truncations,
                max_dim: t.max_dim,
            },
            graph_noise: NoiseModel {
                prior: Matrix6::identity() * g.prior_sigma.powi(2),
                odometry: Matrix6::from_diagonal(&Vector6::new(rot, rot, rot, trans, trans, trans)),
                observation: Matrix3::from_diagonal(&Vector3::new(bearing, bearing, g.range_sigma.powi(2))),
                huber_delta: g.huber_delta,
            },
            lm: LmConfig {
                max_iterations: g.max_iterations,
                initial_lambda: g.initial_lambda,
                lambda_factor: g.lambda_factor,
                max_lambda: g.max_lambda,
                relative_tolerance: g.relative_tolerance,
            },
            visibility_gate: self.tracking.visibility_gate,
            multi_hypothesis: r.multi_hypothesis,
            refuse_rotation: t.refuse_rotation_deg.to_radians(),
            refuse_translation: t.refuse_translation,
            pending_max_age: p.max_age,
            dense_stride: self.tracking.dense_stride,
            refine_min_gain: f.min_gain,
        };
        cfg.validate().map_err(ConfigError::Invalid)?;
        Ok(cfg)
    }
}

/// `section.key=value`; the value is read as a TOML literal, falling back to
/// a bare string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let bad = || ConfigError::Override(spec.to_string());
    let (path, raw) = spec.split_once('=').ok_or_else(bad)?;
    let (section, key) = path.trim().split_once('.').ok_or_else(bad)?;
    if section.is_empty() || key.is_empty() || key.contains('.') {
        return Err(bad());
    }
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    entry.as_table_mut().ok_or_else(bad)?.insert(key.to_string(), value);
    Ok(())
}
