//! Flat key=value config files and the resolved run manifest.
//!
//! Lines are `key=value`; `#` starts a comment. Unknown keys are errors so
//! typos cannot silently fall back to defaults.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: expected key=value, got '{text}'")]
    Syntax { line: usize, text: String },
    #[error("unknown key '{0}'")]
    UnknownKey(String),
    #[error("key '{key}': cannot parse '{value}' as {want}")]
    BadValue {
        key: String,
        value: String,
        want: &'static str,
    },
}

/// Deformation parameterization requested by a config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeformKind {
    /// Screw-axis field.
    Se3,
    /// Displacement field.
    Trans,
    /// No deformation at all (rigid baseline).
    None,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub kind: DeformKind,
    pub steps: usize,
    pub batch_rays: usize,
    pub n_coarse: usize,
    pub n_fine: usize,
    pub lr: f64,
    pub warp_depth: usize,
    pub warp_width: usize,
    pub warp_skip: usize,
    pub tpl_depth: usize,
    pub tpl_width: usize,
    pub tpl_skip: usize,
    pub m_warp: usize,
    pub m_tpl: usize,
    pub m_dir: usize,
    pub code_dim: usize,
    pub psi_dim: usize,
    pub per_camera_psi: bool,
    /// Elastic weight lambda; 0 disables the term.
    pub lambda: f64,
    /// Background weight mu; 0 disables the term.
    pub mu: f64,
    pub elastic_scale: f64,
    /// Ray-sample budget per step for the elastic term.
    pub elastic_samples: usize,
    pub bg_subsample: usize,
    pub bg_jitter: f64,
    pub bg_robust_alpha: f64,
    pub bg_robust_c: f64,
    /// Appendix robust background form; plain L2 distance when false.
    pub bg_robust: bool,
    /// Coarse-to-fine annealing on the warp encoding; fixed at m when off.
    pub c2f: bool,
    /// Fraction of training over which alpha reaches m.
    pub anneal_fraction: f64,
    pub seed: u64,
    pub val_every: usize,
    pub ckpt_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            kind: DeformKind::Se3,
            steps: 1500,
            batch_rays: 96,
            n_coarse: 12,
            n_fine: 12,
            lr: 1e-3,
            warp_depth: 6,
            warp_width: 32,
            warp_skip: 4,
            tpl_depth: 4,
            tpl_width: 48,
            tpl_skip: 2,
            m_warp: 6,
            m_tpl: 6,
            m_dir: 2,
            code_dim: 8,
            psi_dim: 8,
            per_camera_psi: true,
            lambda: 1e-3,
            mu: 1e-3,
            elastic_scale: 0.03,
            elastic_samples: 192,
            bg_subsample: 512,
            bg_jitter: 0.001,
            bg_robust_alpha: -2.0,
            bg_robust_c: 0.001,
            bg_robust: true,
            c2f: true,
            anneal_fraction: 0.4,
            seed: 1,
            val_every: 250,
            ckpt_every: 500,
        }
    }
}

fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

macro_rules! take {
    ($map:ident, $key:literal, $slot:expr, $ty:literal) => {
        if let Some(v) = $map.remove($key) {
            $slot = v.parse().map_err(|_| ConfigError::BadValue {
                key: $key.to_string(),
                value: v.clone(),
                want: $ty,
            })?;
        }
    };
}

impl TrainConfig {
    /// Parses a key=value config over the defaults.
    pub fn from_str(text: &str) -> Result<TrainConfig, ConfigError> {
        let mut map = parse_kv(text)?;
        let mut cfg = TrainConfig::default();
        if let Some(v) = map.remove("kind") {
            cfg.kind = match v.as_str() {
                "se3" => DeformKind::Se3,
                "trans" => DeformKind::Trans,
                "none" => DeformKind::None,
                _ => {
                    return Err(ConfigError::BadValue {
                        key: "kind".into(),
                        value: v,
                        want: "se3|trans|none",
                    })
                }
            };
        }
        take!(map, "steps", cfg.steps, "usize");
        take!(map, "batch_rays", cfg.batch_rays, "usize");
        take!(map, "n_coarse", cfg.n_coarse, "usize");
        take!(map, "n_fine", cfg.n_fine, "usize");
        take!(map, "lr", cfg.lr, "f64");
        take!(map, "warp_depth", cfg.warp_depth, "usize");
        take!(map, "warp_width", cfg.warp_width, "usize");
        take!(map, "warp_skip", cfg.warp_skip, "usize");
        take!(map, "tpl_depth", cfg.tpl_depth, "usize");
        take!(map, "tpl_width", cfg.tpl_width, "usize");
        take!(map, "tpl_skip", cfg.tpl_skip, "usize");
        take!(map, "m_warp", cfg.m_warp, "usize");
        take!(map, "m_tpl", cfg.m_tpl, "usize");
        take!(map, "m_dir", cfg.m_dir, "usize");
        take!(map, "code_dim", cfg.code_dim, "usize");
        take!(map, "psi_dim", cfg.psi_dim, "usize");
        take!(map, "per_camera_psi", cfg.per_camera_psi, "bool");
        take!(map, "lambda", cfg.lambda, "f64");
        take!(map, "mu", cfg.mu, "f64");
        take!(map, "elastic_scale", cfg.elastic_scale, "f64");
        take!(map, "elastic_samples", cfg.elastic_samples, "usize");
        take!(map, "bg_subsample", cfg.bg_subsample, "usize");
        take!(map, "bg_jitter", cfg.bg_jitter, "f64");
        take!(map, "bg_robust_alpha", cfg.bg_robust_alpha, "f64");
        take!(map, "bg_robust_c", cfg.bg_robust_c, "f64");
        take!(map, "bg_robust", cfg.bg_robust, "bool");
        take!(map, "c2f", cfg.c2f, "bool");
        take!(map, "anneal_fraction", cfg.anneal_fraction, "f64");
        take!(map, "seed", cfg.seed, "u64");
        take!(map, "val_every", cfg.val_every, "usize");
        take!(map, "ckpt_every", cfg.ckpt_every, "usize");
        if let Some(k) = map.into_keys().next() {
            return Err(ConfigError::UnknownKey(k));
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<TrainConfig, ConfigError> {
        Self::from_str(&std::fs::read_to_string(path)?)
    }

    /// Serializes every resolved value back to key=value form; written
    /// alongside outputs so runs are reproducible from the manifest alone.
    pub fn to_kv(&self) -> String {
        let kind = match self.kind {
            DeformKind::Se3 => "se3",
            DeformKind::Trans => "trans",
            DeformKind::None => "none",
        };
        format!(
            "kind={kind}\nsteps={}\nbatch_rays={}\nn_coarse={}\nn_fine={}\nlr={}\n\
             warp_depth={}\nwarp_width={}\nwarp_skip={}\ntpl_depth={}\ntpl_width={}\ntpl_skip={}\n\
             m_warp={}\nm_tpl={}\nm_dir={}\ncode_dim={}\npsi_dim={}\nper_camera_psi={}\n\
             lambda={}\nmu={}\nelastic_scale={}\nelastic_samples={}\n\
             bg_subsample={}\nbg_jitter={}\nbg_robust_alpha={}\nbg_robust_c={}\nbg_robust={}\n\
             c2f={}\nanneal_fraction={}\nseed={}\nval_every={}\nckpt_every={}\n",
            self.steps,
            self.batch_rays,
            self.n_coarse,
            self.n_fine,
            self.lr,
            self.warp_depth,
            self.warp_width,
            self.warp_skip,
            self.tpl_depth,
            self.tpl_width,
            self.tpl_skip,
            self.m_warp,
            self.m_tpl,
            self.m_dir,
            self.code_dim,
            self.psi_dim,
            self.per_camera_psi,
            self.lambda,
            self.mu,
            self.elastic_scale,
            self.elastic_samples,
            self.bg_subsample,
            self.bg_jitter,
            self.bg_robust_alpha,
            self.bg_robust_c,
            self.bg_robust,
            self.c2f,
            self.anneal_fraction,
            self.seed,
            self.val_every,
            self.ckpt_every,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_kv() {
        let cfg = TrainConfig::default();
        let back = TrainConfig::from_str(&cfg.to_kv()).unwrap();
        assert_eq!(format!("{cfg:?}"), format!("{back:?}"));
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let cfg = TrainConfig::from_str("# comment\n\nsteps=42 # trailing\nkind=trans\n").unwrap();
        assert_eq!(cfg.steps, 42);
        assert_eq!(cfg.kind, DeformKind::Trans);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            TrainConfig::from_str("stepz=10\n"),
            Err(ConfigError::UnknownKey(_))
        ));
    }

    #[test]
    fn bad_values_name_the_key() {
        let err = TrainConfig::from_str("steps=abc\n").unwrap_err();
        assert!(err.to_string().contains("steps"));
    }
}
