//! Multi-output quantile networks.
//!
//! The two-stage network predicts quantiles of returns standardised by the
//! cross-sectional average volatility σ̄_t (stage I) and rescales them with
//! σ̄_t times a positive market factor from a small second network fed with
//! market-wide inputs (stage II):
//!
//! ```text
//! Q̃ = f(x),   σ̂ᴹ = g(z),   Q = max(Q̃ · σ̄ · σ̂ᴹ, −1)
//! ```
//!
//! Both heads are trained jointly on the sum of their pinball losses. The
//! benchmark networks map `x` straight to raw quantiles (or to a mean, for
//! the squared-error variant).

mod records;
mod train;

pub use records::{read_forecasts, write_forecasts, ForecastRecord};
pub use train::{
    build_dataset, epochs_for, forecast_origins, predict_records, run_schedule, train_ensemble, train_member, Dataset,
    EarlyStopping, Ensemble, MemberReport, Refit, RowSelection, Schedule, ScheduleOutput, StopDecision, TrainConfig,
    WindowReport,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Mode, ParamStore, Sequential, Tensor2};
use crate::taus::TauGrid;
use crate::Rng;

/// Pinball loss `ρ_τ(ξ)`: `τξ` for `ξ ≥ 0`, `(τ − 1)ξ` otherwise.
pub fn pinball(tau: f64, xi: f64) -> Result<f64> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Input(format!("tau {tau} outside (0, 1)")));
    }
    Ok(rho(tau, xi))
}

#[inline]
pub(crate) fn rho(tau: f64, xi: f64) -> f64 {
    if xi >= 0.0 {
        tau * xi
    } else {
        (tau - 1.0) * xi
    }
}

/// Derivative of `ρ_τ(y − q)` with respect to `q`, using the `ξ ≥ 0` branch
/// at the kink.
#[inline]
fn drho_dq(tau: f64, xi: f64) -> f64 {
    if xi >= 0.0 {
        -tau
    } else {
        1.0 - tau
    }
}

/// `(1/B)(1/K) Σ_i Σ_τ [ρ_τ(r_i − Q_iτ) + ρ_τ(r̃_i − Q̃_iτ)]`.
pub fn aggregated_loss(r: &[f64], r_std: &[f64], q_raw: &Tensor2, q_std: &Tensor2, taus: &TauGrid) -> Result<f64> {
    check_heads(r, q_raw, taus)?;
    check_heads(r_std, q_std, taus)?;
    Ok(head_loss(r, q_raw, taus) + head_loss(r_std, q_std, taus))
}

/// Pinball loss of a single head, averaged over rows and levels.
pub fn raw_head_loss(r: &[f64], q: &Tensor2, taus: &TauGrid) -> Result<f64> {
    check_heads(r, q, taus)?;
    Ok(head_loss(r, q, taus))
}

fn check_heads(r: &[f64], q: &Tensor2, taus: &TauGrid) -> Result<()> {
    if q.rows() != r.len() {
        return Err(Error::Dimension {
            context: "loss rows",
            expected: r.len(),
            got: q.rows(),
        });
    }
    if q.cols() != taus.len() {
        return Err(Error::Dimension {
            context: "loss quantile columns",
            expected: taus.len(),
            got: q.cols(),
        });
    }
    Ok(())
}

fn head_loss(r: &[f64], q: &Tensor2, taus: &TauGrid) -> f64 {
    if r.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for (i, &y) in r.iter().enumerate() {
        for (&t, &qv) in taus.levels().iter().zip(q.row(i)) {
            total += rho(t, y - qv);
        }
    }
    total / (r.len() * taus.len()) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    TwoStage,
    /// Linear map from inputs to raw quantiles.
    Lnn,
    /// One hidden layer of `benchmark_width`.
    OneHidden,
    /// Two hidden layers of `benchmark_width`.
    TwoHidden,
    /// Two hidden layers and a single mean output trained on squared error.
    TwoHiddenMse,
}

/// Floor of the standardised head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdFloor {
    /// The standardised value of a −100% return, `−1/σ̄`.
    Return,
    /// A fixed floor of −1 on the standardised scale.
    Unit,
}

impl StdFloor {
    fn value(self, sigma_bar: f64) -> f64 {
        match self {
            StdFloor::Return => -1.0 / sigma_bar,
            StdFloor::Unit => -1.0,
        }
    }
}

impl Architecture {
    pub fn is_quantile(self) -> bool {
        self != Architecture::TwoHiddenMse
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub architecture: Architecture,
    /// Hidden widths of the standardised-quantile network.
    pub stage_hidden: Vec<usize>,
    /// Hidden widths of the market network.
    pub market_hidden: Vec<usize>,
    pub benchmark_width: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub batch_norm: bool,
    /// L1 coefficients of the first dense layers of the quantile network,
    /// in order; later layers are unpenalised.
    pub l1: Vec<f64>,
    /// L2 coefficient of the first market layer.
    pub market_l2: f64,
    pub std_floor: StdFloor,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::TwoStage,
            stage_hidden: vec![128, 128, 4, 128, 128],
            market_hidden: vec![8],
            benchmark_width: 128,
            dropout: 0.2,
            leaky_slope: 0.01,
            batch_norm: true,
            l1: vec![1e-4, 1e-5],
            market_l2: 1e-5,
            std_floor: StdFloor::Return,
        }
    }
}

impl NetConfig {
    pub fn benchmark(architecture: Architecture) -> Self {
        Self {
            architecture,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if self.l1.iter().any(|&c| !(c >= 0.0)) || !(self.market_l2 >= 0.0) {
            return Err(Error::Config("penalties must be >= 0".into()));
        }
        let widths = self.stage_hidden.iter().chain(&self.market_hidden);
        if widths.copied().any(|w| w == 0) || self.benchmark_width == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    fn hidden(&self) -> Vec<usize> {
        match self.architecture {
            Architecture::TwoStage => self.stage_hidden.clone(),
            Architecture::Lnn => vec![],
            Architecture::OneHidden => vec![self.benchmark_width],
            Architecture::TwoHidden | Architecture::TwoHiddenMse => vec![self.benchmark_width; 2],
        }
    }

    /// Dense, [batch-norm], leaky ReLU, [dropout] per hidden width, then a
    /// plain dense output layer.
    fn block_specs(&self, hidden: &[usize], out: usize, l1: &[f64], l2_first: f64) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        for (j, &w) in hidden.iter().chain(std::iter::once(&out)).enumerate() {
            specs.push(LayerSpec::Dense {
                width: w,
                l1: l1.get(j).copied().unwrap_or(0.0),
                l2: if j == 0 { l2_first } else { 0.0 },
            });
            if j == hidden.len() {
                break;
            }
            if self.batch_norm {
                specs.push(LayerSpec::BatchNorm);
            }
            specs.push(LayerSpec::LeakyRelu {
                slope: self.leaky_slope,
            });
            if self.dropout > 0.0 {
                specs.push(LayerSpec::Dropout { rate: self.dropout });
            }
        }
        specs
    }
}

/// Shift making the market output equal one at a zero pre-activation.
pub fn unit_softplus_shift() -> f64 {
    (std::f64::consts::E - 1.0).ln()
}

/// Forward pass results.
#[derive(Debug, Clone, PartialEq)]
pub struct NetOutput {
    /// Standardised quantiles, floored as configured.
    pub std: Tensor2,
    /// Raw quantiles (or the mean, for the squared-error network), floored
    /// at −1 for quantile networks.
    pub raw: Tensor2,
    /// Market factor σ̂ᴹ per row; ones for benchmarks.
    pub scale: Vec<f64>,
    /// Unfloored output of the quantile network.
    stage: Tensor2,
    sigma_bar: Vec<f64>,
}

/// A quantile network together with its parameters.
#[derive(Debug, Clone)]
pub struct QuantileNet {
    pub config: NetConfig,
    pub taus: TauGrid,
    stage: Sequential,
    market: Option<Sequential>,
    pub store: ParamStore,
}

impl QuantileNet {
    pub fn new(config: &NetConfig, taus: &TauGrid, x_width: usize, z_width: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::seeded(seed);
        let mut store = ParamStore::new();
        let out = if config.architecture.is_quantile() {
            taus.len()
        } else {
            1
        };
        let specs = config.block_specs(&config.hidden(), out, &config.l1, 0.0);
        let stage = Sequential::build("stage", x_width, &specs, &mut store, &mut rng)?;
        let market = if config.architecture == Architecture::TwoStage {
            let mut specs = config.block_specs(&config.market_hidden, 1, &[], config.market_l2);
            specs.push(LayerSpec::Softplus {
                shift: unit_softplus_shift(),
            });
            Some(Sequential::build("market", z_width, &specs, &mut store, &mut rng)?)
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            taus: taus.clone(),
            stage,
            market,
            store,
        })
    }

    pub fn x_width(&self) -> usize {
        self.stage.input_width()
    }

    /// Market input width; zero for benchmarks.
    pub fn z_width(&self) -> usize {
        self.market.as_ref().map_or(0, Sequential::input_width)
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture
    }

    pub fn forward(
        &mut self,
        x: &Tensor2,
        z: &Tensor2,
        sigma_bar: &[f64],
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<NetOutput> {
        if sigma_bar.len() != x.rows() {
            return Err(Error::Dimension {
                context: "sigma_bar rows",
                expected: x.rows(),
                got: sigma_bar.len(),
            });
        }
        if let Some(s) = sigma_bar.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::Input(format!("sigma_bar must be positive, got {s}")));
        }
        let stage = self.stage.forward(&mut self.store, x, mode, rng)?;
        let quantile = self.config.architecture.is_quantile();
        let floor = |v: f64| if quantile { v.max(-1.0) } else { v };
        let (scale, raw) = match &mut self.market {
            Some(m) => {
                if z.rows() != x.rows() {
                    return Err(Error::Dimension {
                        context: "market input rows",
                        expected: x.rows(),
                        got: z.rows(),
                    });
                }
                let scale = m.forward(&mut self.store, z, mode, rng)?.into_vec();
                let mut raw = stage.clone();
                for (i, row) in (0..raw.rows()).map(|i| (i, sigma_bar[i] * scale[i])) {
                    raw.row_mut(i).iter_mut().for_each(|v| *v = floor(*v * row));
                }
                (scale, raw)
            }
            None => (vec![1.0; x.rows()], stage.map(floor)),
        };
        let std = if self.market.is_some() {
            let mut s = stage.clone();
            for i in 0..s.rows() {
                let f = self.config.std_floor.value(sigma_bar[i]);
                s.row_mut(i).iter_mut().for_each(|v| *v = v.max(f));
            }
            s
        } else {
            let mut s = raw.clone();
            for i in 0..s.rows() {
                s.row_mut(i).iter_mut().for_each(|v| *v /= sigma_bar[i]);
            }
            s
        };
        Ok(NetOutput {
            std,
            raw,
            scale,
            stage,
            sigma_bar: sigma_bar.to_vec(),
        })
    }

    /// Training objective for realised returns `r`: both pinball heads for
    /// the two-stage network, the raw head for quantile benchmarks and the
    /// mean squared error for the mean network.
    pub fn loss(&self, out: &NetOutput, r: &[f64]) -> Result<f64> {
        match self.config.architecture {
            Architecture::TwoStage => {
                let r_std: Vec<f64> = r.iter().zip(&out.sigma_bar).map(|(r, s)| r / s).collect();
                aggregated_loss(r, &r_std, &out.raw, &out.std, &self.taus)
            }
            Architecture::TwoHiddenMse => {
                let n = r.len().max(1) as f64;
                Ok(r.iter().zip(out.raw.data()).map(|(y, m)| (y - m).powi(2)).sum::<f64>() / n)
            }
            _ => raw_head_loss(r, &out.raw, &self.taus),
        }
    }

    /// Loss gradient with respect to the quantile network output and the
    /// market factor.
    fn loss_grad(&self, out: &NetOutput, r: &[f64]) -> (Tensor2, Vec<f64>) {
        let (b, k) = out.stage.shape();
        let mut g = Tensor2::zeros(b, k);
        let mut g_scale = vec![0.0; b];
        let taus = self.taus.levels();
        match self.config.architecture {
            Architecture::TwoStage => {
                let c = 1.0 / (b * k) as f64;
                for i in 0..b {
                    let sb = out.sigma_bar[i];
                    let m = out.scale[i];
                    let rs = r[i] / sb;
                    let f = self.config.std_floor.value(sb);
                    let mut gs = 0.0;
                    for j in 0..k {
                        let s = out.stage.get(i, j);
                        let mut gij = 0.0;
                        if s > f {
                            gij += c * drho_dq(taus[j], rs - s);
                        }
                        let q = s * sb * m;
                        if q > -1.0 {
                            let d = c * drho_dq(taus[j], r[i] - q);
                            gij += d * sb * m;
                            gs += d * s * sb;
                        }
                        g.set(i, j, gij);
                    }
                    g_scale[i] = gs;
                }
            }
            Architecture::TwoHiddenMse => {
                for i in 0..b {
                    g.set(i, 0, 2.0 * (out.stage.get(i, 0) - r[i]) / b as f64);
                }
            }
            _ => {
                let c = 1.0 / (b * k) as f64;
                for i in 0..b {
                    for j in 0..k {
                        let s = out.stage.get(i, j);
                        if s > -1.0 {
                            g.set(i, j, c * drho_dq(taus[j], r[i] - s));
                        }
                    }
                }
            }
        }
        (g, g_scale)
    }

    /// Accumulates parameter gradients of [`QuantileNet::loss`] for the most
    /// recent forward pass. Penalties are applied by the optimiser.
    pub fn backward(&mut self, out: &NetOutput, r: &[f64]) -> Result<()> {
        if r.len() != out.stage.rows() {
            return Err(Error::Dimension {
                context: "backward targets",
                expected: out.stage.rows(),
                got: r.len(),
            });
        }
        let (g, g_scale) = self.loss_grad(out, r);
        self.stage.backward(&mut self.store, &g)?;
        if let Some(m) = &mut self.market {
            let gs = Tensor2::from_vec(g_scale.len(), 1, g_scale)?;
            m.backward(&mut self.store, &gs)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
