//! Quantile level grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered quantile levels in (0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauGrid(Vec<f64>);

impl TauGrid {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Input("empty tau grid".into()));
        }
        for &t in &levels {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Input(format!("tau {t} outside (0,1)")));
            }
        }
        if levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Input("tau grid must be strictly increasing".into()));
        }
        Ok(Self(levels))
    }

    /// The 37-level grid used throughout: dense in both tails, 5% steps in the body.
    pub fn standard() -> Self {
        let mut t = vec![0.00005, 0.0001, 0.001, 0.005];
        t.extend([0.01, 0.02, 0.03, 0.04, 0.05]);
        t.extend([0.075, 0.1]);
        t.extend((3..=16).map(|i| i as f64 * 0.05));
        t.extend([0.85, 0.9, 0.925]);
        t.extend([0.95, 0.96, 0.97, 0.98, 0.99]);
        t.extend([0.995, 0.999, 0.9999, 0.99995]);
        // 0.05 * i drifts in the last bit; round to the intended decimals.
        let t = t.into_iter().map(|x| (x * 1e6_f64).round() / 1e6).collect();
        Self(t)
    }

    pub fn levels(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the level closest to `tau`, if one lies within 1e-9.
    pub fn position(&self, tau: f64) -> Option<usize> {
        self.0.iter().position(|&t| (t - tau).abs() < 1e-9)
    }
}

impl Default for TauGrid {
    fn default() -> Self {
        Self::standard()
    }
}
