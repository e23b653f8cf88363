use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::models::{ForestParams, MapInit, NoiseSpec, MIN_TRAINING_ROWS};
use crate::quantile::QuantileMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Wcp,
    Aci,
    End2end,
    SetLevel,
    ClusterLevel,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Wcp,
        Method::Aci,
        Method::End2end,
        Method::SetLevel,
        Method::ClusterLevel,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Wcp => "wcp",
            Method::Aci => "aci",
            Method::End2end => "end2end",
            Method::SetLevel => "set_level",
            Method::ClusterLevel => "cluster_level",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// Cluster count per module validation set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KClusters {
    /// `ceil(n / 10)`, about ten rows per cluster.
    #[default]
    Auto,
    Fixed(usize),
}

impl KClusters {
    pub fn resolve(self, n: usize) -> usize {
        match self {
            KClusters::Auto => n.div_ceil(10).max(1),
            KClusters::Fixed(k) => k,
        }
    }
}

impl FromStr for KClusters {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "auto" => Ok(KClusters::Auto),
            other => other
                .parse()
                .map(KClusters::Fixed)
                .map_err(|_| Error::Config(format!("k_clusters must be \"auto\" or a count, got {s:?}"))),
        }
    }
}

impl fmt::Display for KClusters {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KClusters::Auto => f.write_str("auto"),
            KClusters::Fixed(k) => write!(f, "{k}"),
        }
    }
}

impl Serialize for KClusters {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            KClusters::Auto => s.serialize_str("auto"),
            KClusters::Fixed(k) => s.serialize_u64(*k as u64),
        }
    }
}

impl<'de> Deserialize<'de> for KClusters {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(usize),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(k) => Ok(KClusters::Fixed(k)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Everything that determines an experiment's output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub trials: usize,
    pub n_train: usize,
    pub n_cal_upstream: usize,
    pub n_cal_downstream: usize,
    pub n_cal_end2end: usize,
    pub n_test: usize,
    pub alphas: Vec<f64>,
    pub noise_mean: f64,
    pub noise_std: f64,
    pub methods: Vec<Method>,
    pub k_clusters: KClusters,
    /// Quantile overflow rule for the cluster-level calibrator.
    pub quantile_mode: QuantileMode,
    pub input_dim: usize,
    pub intermediate_dim: usize,
    pub nonlinear: bool,
    pub map_init: MapInit,
    pub n_trees: usize,
    pub min_leaf: usize,
    pub max_features: Option<usize>,
    pub aci_gamma: f64,
    /// Trial-level worker threads; 0 uses every core.
    pub workers: usize,
    pub out: Option<PathBuf>,
    /// Optional per-cluster diagnostics CSV.
    pub diagnostics: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            trials: 50,
            n_train: 500,
            n_cal_upstream: 500,
            n_cal_downstream: 500,
            n_cal_end2end: 500,
            n_test: 5000,
            alphas: vec![0.5, 0.6, 0.7, 0.8, 0.9],
            noise_mean: 0.0,
            noise_std: 1.0,
            methods: Method::ALL.to_vec(),
            k_clusters: KClusters::Auto,
            quantile_mode: QuantileMode::Clamped,
            input_dim: 64,
            intermediate_dim: 32,
            nonlinear: false,
            map_init: MapInit::Uniform,
            n_trees: 100,
            min_leaf: 5,
            max_features: None,
            aci_gamma: 0.005,
            workers: 0,
            out: None,
            diagnostics: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(format!("bad config: {e}")))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn noise(&self) -> NoiseSpec {
        NoiseSpec {
            mean: self.noise_mean,
            std: self.noise_std,
        }
    }

    pub fn forest(&self) -> ForestParams {
        ForestParams {
            n_trees: self.n_trees,
            min_leaf: self.min_leaf,
            max_features: self.max_features,
            max_depth: None,
        }
    }

    pub fn k_upstream(&self) -> usize {
        self.k_clusters.resolve(self.n_cal_upstream)
    }

    pub fn k_downstream(&self) -> usize {
        self.k_clusters.resolve(self.n_cal_downstream)
    }

    /// Requested methods in canonical output order, without duplicates.
    pub fn ordered_methods(&self) -> Vec<Method> {
        Method::ALL
            .into_iter()
            .filter(|m| self.methods.contains(m))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        for (name, v) in [
            ("n_cal_upstream", self.n_cal_upstream),
            ("n_cal_downstream", self.n_cal_downstream),
            ("n_cal_end2end", self.n_cal_end2end),
            ("n_test", self.n_test),
            ("input_dim", self.input_dim),
            ("intermediate_dim", self.intermediate_dim),
            ("n_trees", self.n_trees),
            ("min_leaf", self.min_leaf),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.n_train < MIN_TRAINING_ROWS {
            return bad(format!(
                "n_train must be at least {MIN_TRAINING_ROWS}, got {}",
                self.n_train
            ));
        }
        if self.alphas.is_empty() {
            return bad("alphas must not be empty".into());
        }
        if let Some(a) = self.alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return bad(format!("alpha {a} outside (0, 1)"));
        }
        if self.methods.is_empty() {
            return bad("methods must not be empty".into());
        }
        if self.max_features == Some(0) {
            return bad("max_features must be at least 1".into());
        }
        if !(self.aci_gamma.is_finite() && self.aci_gamma >= 0.0) {
            return bad(format!("aci_gamma must be >= 0, got {}", self.aci_gamma));
        }
        self.noise().validate()?;
        if self.methods.contains(&Method::ClusterLevel) {
            let (kf, kg) = (self.k_upstream(), self.k_downstream());
            if kf == 0 || kg == 0 {
                return bad("k_clusters must be at least 1".into());
            }
            if kf > self.n_cal_upstream || kg > self.n_cal_downstream {
                return bad(format!(
                    "k_clusters {} exceeds calibration size ({} upstream, {} downstream)",
                    self.k_clusters, self.n_cal_upstream, self.n_cal_downstream
                ));
            }
        }
        Ok(())
    }
}
