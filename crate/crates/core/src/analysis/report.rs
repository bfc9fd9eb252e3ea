//! Serializable evaluation reports. JSON documents share the shape
//! `{kind, model, params, rows}`.

use serde::{Deserialize, Serialize};

use super::attack::AttackKind;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepParams {
    pub attack: AttackKind,
    pub split: String,
    pub batch: usize,
    pub eps_normalize: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub eps: f64,
    /// Percent correct.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsSweepReport {
    pub kind: String,
    pub model: String,
    pub params: SweepParams,
    pub rows: Vec<SweepRow>,
}

impl EpsSweepReport {
    pub const KIND: &'static str = "eps-sweep";

    pub fn validate(&self) -> Result<()> {
        if self.kind != Self::KIND {
            return Err(Error::Input(format!("report kind `{}`", self.kind)));
        }
        if self.rows.first().map(|r| r.eps) != Some(0.0) {
            return Err(Error::Input("sweep must start with an ε = 0 row".into()));
        }
        if self.rows.windows(2).any(|w| w[1].eps <= w[0].eps) {
            return Err(Error::Input(
                "sweep ε values must be strictly increasing".into(),
            ));
        }
        if self
            .rows
            .iter()
            .any(|r| !(0.0..=100.0).contains(&r.accuracy))
        {
            return Err(Error::Input("accuracy outside [0, 100]".into()));
        }
        Ok(())
    }

    pub fn accuracy_at(&self, eps: f64) -> Option<f64> {
        self.rows.iter().find(|r| r.eps == eps).map(|r| r.accuracy)
    }

    pub fn clean_accuracy(&self) -> f64 {
        self.rows[0].accuracy
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s).map_err(|e| Error::Input(e.to_string()))?;
        r.validate()?;
        Ok(r)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("eps,accuracy\n");
        for r in &self.rows {
            out.push_str(&format!("{},{}\n", r.eps, r.accuracy));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumParams {
    pub samples: usize,
    pub top_k: usize,
    /// Layer index the encoder ends at.
    pub cut: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRow {
    /// 1-based rank of the singular value.
    pub index: usize,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub kind: String,
    pub model: String,
    pub params: SpectrumParams,
    pub rows: Vec<SpectrumRow>,
}

impl SpectrumReport {
    pub const KIND: &'static str = "spectrum";

    pub fn new(model: String, params: SpectrumParams, sigma: &[f64]) -> Self {
        SpectrumReport {
            kind: Self::KIND.into(),
            model,
            params,
            rows: sigma
                .iter()
                .enumerate()
                .map(|(i, &s)| SpectrumRow {
                    index: i + 1,
                    sigma: s,
                })
                .collect(),
        }
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.sigma).collect()
    }

    /// Sum of σ over the 1-based inclusive rank range `from..=to`, clipped
    /// to the available values.
    pub fn band_sum(&self, from: usize, to: usize) -> f64 {
        self.rows
            .iter()
            .filter(|r| (from..=to).contains(&r.index))
            .map(|r| r.sigma)
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.iter().any(|r| !(r.sigma >= 0.0)) {
            return Err(Error::Input("negative singular value".into()));
        }
        if self.rows.windows(2).any(|w| w[1].sigma > w[0].sigma) {
            return Err(Error::Input("spectrum is not non-increasing".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s).map_err(|e| Error::Input(e.to_string()))?;
        r.validate()?;
        Ok(r)
    }

    /// Two columns: `index,sigma`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,sigma\n");
        for r in &self.rows {
            out.push_str(&format!("{},{}\n", r.index, r.sigma));
        }
        out
    }
}
