//! Synthetic cascaded systems: random linear oracles, a noisy learned
//! upstream module, and the downstream regressor.

mod dataset;
mod forest;

pub use dataset::{read_dataset_csv, write_dataset_csv, Dataset};
pub use forest::{fit_regressor, ForestParams, RandomForest, MIN_TRAINING_ROWS};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{mix, mix_bits};

/// Learned or oracle map from inputs to intermediate vectors.
pub trait UpstreamModel: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn predict(&self, x: &[f64]) -> Vec<f64>;
}

/// Learned or oracle map from intermediate vectors to a scalar.
pub trait Regressor: Send + Sync {
    fn input_dim(&self) -> usize;
    fn predict(&self, y: &[f64]) -> f64;
}

/// Entry distribution of the random oracle maps, scaled by fan-in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapInit {
    /// `U(-1/sqrt(cols), 1/sqrt(cols))`, the usual dense-layer default.
    #[default]
    Uniform,
    /// `N(0, 1/cols)`.
    Gaussian,
}

impl std::str::FromStr for MapInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "uniform" => Ok(MapInit::Uniform),
            "gaussian" => Ok(MapInit::Gaussian),
            other => Err(Error::Config(format!(
                "map_init must be uniform or gaussian, got {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for MapInit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MapInit::Uniform => "uniform",
            MapInit::Gaussian => "gaussian",
        })
    }
}

/// Row-major dense map `R^cols -> R^rows`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl LinearMap {
    pub fn random(rows: usize, cols: usize, init: MapInit, rng: &mut impl Rng) -> Self {
        let scale = (1.0 / cols as f64).sqrt();
        let entries = match init {
            MapInit::Gaussian => (0..rows * cols)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            MapInit::Uniform => {
                let u = Uniform::new_inclusive(-scale, scale).expect("positive scale");
                (0..rows * cols).map(|_| rng.sample(u)).collect()
            }
        };
        LinearMap {
            rows,
            cols,
            entries,
        }
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.cols);
        self.entries
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub mean: f64,
    pub std: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            mean: 0.0,
            std: 1.0,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.std.is_finite() && self.std >= 0.0 && self.mean.is_finite()) {
            return Err(Error::Config(format!(
                "noise needs finite mean and nonnegative std, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.mean == 0.0 && self.std == 0.0
    }
}

/// Ground-truth upstream process `y = A x`.
#[derive(Debug, Clone)]
pub struct OracleUpstream {
    pub map: LinearMap,
}

impl UpstreamModel for OracleUpstream {
    fn input_dim(&self) -> usize {
        self.map.cols
    }
    fn output_dim(&self) -> usize {
        self.map.rows
    }
    fn predict(&self, x: &[f64]) -> Vec<f64> {
        self.map.apply(x)
    }
}

/// Ground-truth downstream process: `z = b . y`, or `z = b . tanh(y)`.
#[derive(Debug, Clone)]
pub struct OracleDownstream {
    pub weights: Vec<f64>,
    pub nonlinear: bool,
}

impl Regressor for OracleDownstream {
    fn input_dim(&self) -> usize {
        self.weights.len()
    }
    fn predict(&self, y: &[f64]) -> f64 {
        if self.nonlinear {
            self.weights.iter().zip(y).map(|(b, v)| b * v.tanh()).sum()
        } else {
            self.weights.iter().zip(y).map(|(b, v)| b * v).sum()
        }
    }
}

/// The learned upstream module: the oracle plus a Gaussian perturbation.
///
/// The perturbation is a deterministic function of the input bits and
/// the module seed, so the module behaves like a fixed (imperfect)
/// predictor: evaluating it twice on the same input gives the same
/// output, while distinct inputs get independent noise draws.
#[derive(Debug, Clone)]
pub struct NoisyUpstream {
    pub oracle: OracleUpstream,
    pub noise: NoiseSpec,
    pub seed: u64,
}

impl NoisyUpstream {
    fn noise_for(&self, x: &[f64]) -> ChaCha8Rng {
        let key = x.iter().fold(self.seed, |h, v| mix_bits(h, v.to_bits()));
        ChaCha8Rng::seed_from_u64(key)
    }
}

impl UpstreamModel for NoisyUpstream {
    fn input_dim(&self) -> usize {
        self.oracle.input_dim()
    }
    fn output_dim(&self) -> usize {
        self.oracle.output_dim()
    }
    fn predict(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.oracle.predict(x);
        if self.noise.is_zero() {
            return y;
        }
        let mut rng = self.noise_for(x);
        let normal = Normal::new(self.noise.mean, self.noise.std)
            .expect("noise spec validated at construction");
        for v in &mut y {
            *v += rng.sample(normal);
        }
        y
    }
}

/// Oracle pair plus the learned upstream module. The learned downstream
/// module is trained separately on data from the system.
#[derive(Debug, Clone)]
pub struct CascadeSystem {
    pub oracle_f: OracleUpstream,
    pub oracle_g: OracleDownstream,
    pub f_hat: NoisyUpstream,
    pub input_dim: usize,
    pub intermediate_dim: usize,
    pub seed: u64,
}

pub fn gen_system(
    seed: u64,
    input_dim: usize,
    intermediate_dim: usize,
    noise: NoiseSpec,
    nonlinear: bool,
) -> Result<CascadeSystem> {
    gen_system_with(seed, input_dim, intermediate_dim, noise, nonlinear, MapInit::default())
}

pub fn gen_system_with(
    seed: u64,
    input_dim: usize,
    intermediate_dim: usize,
    noise: NoiseSpec,
    nonlinear: bool,
    init: MapInit,
) -> Result<CascadeSystem> {
    if input_dim == 0 || intermediate_dim == 0 {
        return Err(Error::Config(format!(
            "dimensions must be positive, got m={input_dim} l={intermediate_dim}"
        )));
    }
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let oracle_f = OracleUpstream {
        map: LinearMap::random(intermediate_dim, input_dim, init, &mut rng),
    };
    let b = LinearMap::random(1, intermediate_dim, init, &mut rng);
    let oracle_g = OracleDownstream {
        weights: b.entries,
        nonlinear,
    };
    let f_hat = NoisyUpstream {
        oracle: oracle_f.clone(),
        noise,
        seed: mix(seed, 0x5eed),
    };
    Ok(CascadeSystem {
        oracle_f,
        oracle_g,
        f_hat,
        input_dim,
        intermediate_dim,
        seed,
    })
}

impl CascadeSystem {
    /// Draws `n` rows with `x ~ N(0, I)`, `y = f(x)`, `y_hat = f_hat(x)`,
    /// `z = g(y)`.
    pub fn gen_dataset(&self, n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ds = Dataset::with_capacity(n);
        for _ in 0..n {
            let x: Vec<f64> = (0..self.input_dim)
                .map(|_| rng.sample(StandardNormal))
                .collect();
            let y = self.oracle_f.predict(&x);
            let y_hat = self.f_hat.predict(&x);
            let z = self.oracle_g.predict(&y);
            ds.push(x, y, y_hat, z);
        }
        ds
    }
}

pub fn gen_dataset(sys: &CascadeSystem, n: usize, seed: u64) -> Dataset {
    sys.gen_dataset(n, seed)
}
