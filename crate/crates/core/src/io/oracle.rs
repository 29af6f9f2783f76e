use serde::{Deserialize, Serialize};

use super::{IoError, Result};
use crate::geometry::{build_neighbor_list, Structure, Vec3};

/// Analytic pair interaction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PairParams {
    /// `4ε((σ/r)¹² − (σ/r)⁶)`
    Lj { epsilon: f64, sigma: f64 },
    /// `D_e (1 − e^{−a(r − r_e)})² − D_e`
    Morse { d_e: f64, a: f64, r_e: f64 },
}

impl PairParams {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            PairParams::Lj { epsilon, sigma } => epsilon > 0.0 && sigma > 0.0,
            PairParams::Morse { d_e, a, r_e } => d_e > 0.0 && a > 0.0 && r_e > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(IoError::Invalid(format!("pair parameters must be positive: {self:?}")))
        }
    }

    /// Unshifted energy and its radial derivative.
    pub fn eval(&self, r: f64) -> (f64, f64) {
        match *self {
            PairParams::Lj { epsilon, sigma } => {
                let s6 = (sigma / r).powi(6);
                let s12 = s6 * s6;
                (4.0 * epsilon * (s12 - s6), 24.0 * epsilon * (s6 - 2.0 * s12) / r)
            }
            PairParams::Morse { d_e, a, r_e } => {
                let x = (-a * (r - r_e)).exp();
                (d_e * (1.0 - x) * (1.0 - x) - d_e, 2.0 * d_e * a * x * (1.0 - x))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeciesPair {
    pub species: [u32; 2],
    pub params: PairParams,
}

/// Truncated pair potential used as ground truth. Every periodic image
/// within the cutoff contributes, so cells smaller than twice the cutoff are
/// handled exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OraclePotential {
    pub default: PairParams,
    #[serde(default)]
    pub pairs: Vec<SpeciesPair>,
    pub cutoff: f64,
    /// Subtract the pair energy at the cutoff so the energy is continuous.
    pub shift: bool,
}

impl OraclePotential {
    pub fn lj(epsilon: f64, sigma: f64, cutoff: f64) -> Result<Self> {
        let p = OraclePotential {
            default: PairParams::Lj { epsilon, sigma },
            pairs: Vec::new(),
            cutoff,
            shift: true,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn morse(d_e: f64, a: f64, r_e: f64, cutoff: f64) -> Result<Self> {
        let p = OraclePotential {
            default: PairParams::Morse { d_e, a, r_e },
            pairs: Vec::new(),
            cutoff,
            shift: true,
        };
        p.validate()?;
        Ok(p)
    }

    /// Liquid argon: ε = 0.0104 eV, σ = 3.4 Å, cutoff 2.5σ.
    pub fn argon() -> Self {
        OraclePotential {
            default: PairParams::Lj {
                epsilon: 0.0104,
                sigma: 3.4,
            },
            pairs: Vec::new(),
            cutoff: 8.5,
            shift: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff > 0.0 && self.cutoff.is_finite()) {
            return Err(IoError::Invalid(format!("cutoff {}", self.cutoff)));
        }
        self.default.validate()?;
        for p in &self.pairs {
            p.params.validate()?;
        }
        Ok(())
    }

    pub fn params(&self, za: u32, zb: u32) -> &PairParams {
        self.pairs
            .iter()
            .find(|p| p.species == [za, zb] || p.species == [zb, za])
            .map(|p| &p.params)
            .unwrap_or(&self.default)
    }

    /// Shifted pair energy and radial derivative; zero beyond the cutoff.
    pub fn pair(&self, za: u32, zb: u32, r: f64) -> (f64, f64) {
        if r > self.cutoff {
            return (0.0, 0.0);
        }
        let p = self.params(za, zb);
        let (e, de) = p.eval(r);
        let shift = if self.shift { p.eval(self.cutoff).0 } else { 0.0 };
        (e - shift, de)
    }

    /// Total energy (eV) and forces `−∇E` (eV/Å).
    pub fn energy_forces(&self, s: &Structure) -> Result<(f64, Vec<Vec3>)> {
        let g = build_neighbor_list(s, self.cutoff, usize::MAX)?;
        let mut energy = 0.0;
        let mut forces = vec![Vec3::zeros(); s.len()];
        for k in 0..g.n_edges() {
            let (i, j) = (g.edge_dst[k], g.edge_src[k]);
            let r = g.edge_len[k];
            let (e, de) = self.pair(s.atomic_numbers[i], s.atomic_numbers[j], r);
            energy += 0.5 * e;
            // edge_vec = r_i − r_j, so ∂r/∂r_i = edge_vec / r.
            forces[i] -= g.edge_vec[k] * (de / r);
        }
        Ok((energy, forces))
    }

    /// Returns `s` with oracle energy and force labels attached.
    pub fn label(&self, s: &Structure) -> Result<Structure> {
        let (e, f) = self.energy_forces(s)?;
        let mut out = s.clone();
        out.energy = Some(e);
        out.forces = Some(f);
        Ok(out)
    }
}
