//! Equation systems: Burgers, decaying/forced incompressible NSE, and shear
//! flow with a passive scalar.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowKind {
    Burgers,
    Decaying,
    Forced,
    Shear,
}

impl FlowKind {
    pub fn is_nse(self) -> bool {
        !matches!(self, FlowKind::Burgers)
    }

    pub fn has_scalar(self) -> bool {
        matches!(self, FlowKind::Shear)
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "burgers" => Ok(FlowKind::Burgers),
            "decaying" => Ok(FlowKind::Decaying),
            "forced" => Ok(FlowKind::Forced),
            "shear" => Ok(FlowKind::Shear),
            other => Err(Error::InvalidArgument(format!("unknown flow kind {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FlowKind::Burgers => "burgers",
            FlowKind::Decaying => "decaying",
            FlowKind::Forced => "forced",
            FlowKind::Shear => "shear",
        }
    }
}

/// Kolmogorov forcing: steady body force `chi * sin(k_f * y)` on the
/// x-velocity plus linear drag `-alpha * u` on both components.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Forcing {
    pub amplitude: f64,
    pub wavenumber: f64,
    pub drag: f64,
}

impl Default for Forcing {
    fn default() -> Self {
        Forcing { amplitude: 1.0, wavenumber: 4.0, drag: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EquationSystem {
    pub kind: FlowKind,
    /// Kinematic viscosity; 1/Re for the NSE cases.
    pub viscosity: f64,
    /// Scalar diffusivity, shear flow only.
    pub diffusivity: Option<f64>,
    /// Forcing spec, forced flow only.
    pub forcing: Option<Forcing>,
}

impl EquationSystem {
    pub fn burgers(viscosity: f64) -> Result<Self> {
        Self::validate(EquationSystem {
            kind: FlowKind::Burgers,
            viscosity,
            diffusivity: None,
            forcing: None,
        })
    }

    pub fn decaying(reynolds: f64) -> Result<Self> {
        Self::validate(EquationSystem {
            kind: FlowKind::Decaying,
            viscosity: 1.0 / reynolds,
            diffusivity: None,
            forcing: None,
        })
    }

    pub fn forced(reynolds: f64, forcing: Forcing) -> Result<Self> {
        Self::validate(EquationSystem {
            kind: FlowKind::Forced,
            viscosity: 1.0 / reynolds,
            diffusivity: None,
            forcing: Some(forcing),
        })
    }

    pub fn shear(reynolds: f64, diffusivity: f64) -> Result<Self> {
        Self::validate(EquationSystem {
            kind: FlowKind::Shear,
            viscosity: 1.0 / reynolds,
            diffusivity: Some(diffusivity),
            forcing: None,
        })
    }

    fn validate(sys: EquationSystem) -> Result<Self> {
        if !(sys.viscosity > 0.0) {
            return Err(Error::InvalidArgument("viscosity must be > 0".into()));
        }
        if let Some(d) = sys.diffusivity {
            if !(d > 0.0) {
                return Err(Error::InvalidArgument("diffusivity must be > 0".into()));
            }
        }
        Ok(sys)
    }
}
