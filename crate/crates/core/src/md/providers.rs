use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{MdError, Result};
use crate::geometry::{GeometryError, Structure, Vec3};
use crate::io::{IoError, OraclePotential};
use crate::model::{Model, ModelError};
use crate::tensor::Real;

/// Source of forces for the integrator.
pub trait ForceProvider {
    fn name(&self) -> &str;

    /// Potential energy (eV, NaN when the provider has none) and forces
    /// (eV/Å).
    fn evaluate(&mut self, s: &Structure) -> Result<(f64, Vec<Vec3>)>;
}

impl ForceProvider for OraclePotential {
    fn name(&self) -> &str {
        "oracle"
    }

    fn evaluate(&mut self, s: &Structure) -> Result<(f64, Vec<Vec3>)> {
        self.energy_forces(s).map_err(|e| match e {
            IoError::Geometry(g) => MdError::from(g),
            other => MdError::Provider(other.to_string()),
        })
    }
}

/// Direct force predictions of a trained network. The neighbor graph is
/// rebuilt on every call.
#[derive(Debug, Clone)]
pub struct ModelForces<T: Real> {
    pub model: Model<T>,
}

impl<T: Real> ForceProvider for ModelForces<T> {
    fn name(&self) -> &str {
        "model"
    }

    fn evaluate(&mut self, s: &Structure) -> Result<(f64, Vec<Vec3>)> {
        match self.model.predict(s) {
            Ok(p) => Ok((p.energy, p.forces)),
            Err(ModelError::Geometry(g @ GeometryError::Overlap { .. })) => Err(MdError::from(g)),
            Err(ModelError::NonFinite) => Err(MdError::NonFinite { time: f64::NAN }),
            Err(e) => Err(MdError::Provider(e.to_string())),
        }
    }
}

/// Independent Gaussian force components with standard deviation `scale`
/// (eV/Å), unrelated to the configuration.
#[derive(Debug, Clone)]
pub struct RandomForces {
    pub scale: f64,
    rng: ChaCha8Rng,
}

impl RandomForces {
    pub fn new(scale: f64, seed: u64) -> Self {
        RandomForces {
            scale,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl ForceProvider for RandomForces {
    fn name(&self) -> &str {
        "random"
    }

    fn evaluate(&mut self, s: &Structure) -> Result<(f64, Vec<Vec3>)> {
        let mut draw = || self.rng.sample::<f64, _>(StandardNormal) * self.scale;
        let f = (0..s.len())
            .map(|_| Vec3::new(draw(), draw(), draw()))
            .collect();
        Ok((f64::NAN, f))
    }
}
