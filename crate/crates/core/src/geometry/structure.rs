use super::{GeometryError, Mat3, Result, Vec3, MIN_CELL_VOLUME};

/// Periodic cell; rows of `matrix` are the lattice vectors (Å).
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    matrix: Mat3,
    // (Mᵀ)⁻¹, maps Cartesian to fractional coordinates.
    to_frac: Mat3,
}

impl Cell {
    pub fn new(matrix: Mat3) -> Result<Self> {
        let det = matrix.determinant();
        if !det.is_finite() || det.abs() <= MIN_CELL_VOLUME {
            return Err(GeometryError::SingularCell(det));
        }
        let to_frac = matrix
            .transpose()
            .try_inverse()
            .ok_or(GeometryError::SingularCell(det))?;
        Ok(Cell { matrix, to_frac })
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        Self::new(Mat3::from_row_slice(&[
            rows[0][0], rows[0][1], rows[0][2], rows[1][0], rows[1][1], rows[1][2], rows[2][0],
            rows[2][1], rows[2][2],
        ]))
    }

    pub fn cubic(length: f64) -> Result<Self> {
        Self::new(Mat3::from_diagonal_element(length))
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.matrix
    }

    pub fn lattice_vector(&self, k: usize) -> Vec3 {
        self.matrix.row(k).transpose()
    }

    pub fn volume(&self) -> f64 {
        self.matrix.determinant().abs()
    }

    /// Distance between opposite faces for each lattice direction.
    pub fn heights(&self) -> [f64; 3] {
        let a = [
            self.lattice_vector(0),
            self.lattice_vector(1),
            self.lattice_vector(2),
        ];
        let v = self.volume();
        [
            v / a[1].cross(&a[2]).norm(),
            v / a[2].cross(&a[0]).norm(),
            v / a[0].cross(&a[1]).norm(),
        ]
    }

    pub fn to_fractional(&self, r: &Vec3) -> Vec3 {
        self.to_frac * r
    }

    pub fn to_cartesian(&self, f: &Vec3) -> Vec3 {
        self.matrix.transpose() * f
    }

    /// `Σ sₖ aₖ` for an integer lattice shift.
    pub fn shift_vector(&self, s: [i32; 3]) -> Vec3 {
        let m = &self.matrix;
        let (a, b, c) = (s[0] as f64, s[1] as f64, s[2] as f64);
        Vec3::new(
            a * m[(0, 0)] + b * m[(1, 0)] + c * m[(2, 0)],
            a * m[(0, 1)] + b * m[(1, 1)] + c * m[(2, 1)],
            a * m[(0, 2)] + b * m[(1, 2)] + c * m[(2, 2)],
        )
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        let m = &self.matrix;
        [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ]
    }
}

/// Extra per-atom column carried through file round trips untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomArray {
    pub name: String,
    /// Property type code (`S`, `R`, `I`, `L`).
    pub kind: char,
    pub columns: usize,
    /// Row-major raw tokens, `n_atoms * columns` entries.
    pub values: Vec<String>,
}

/// An atomic configuration with optional periodic cell and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Structure {
    pub atomic_numbers: Vec<u32>,
    pub positions: Vec<Vec3>,
    pub cell: Option<Cell>,
    pub pbc: [bool; 3],
    /// Reference energy (eV).
    pub energy: Option<f64>,
    /// Reference forces (eV/Å).
    pub forces: Option<Vec<Vec3>>,
    /// Unrecognised comment-line entries, in file order.
    pub info: Vec<(String, String)>,
    pub arrays: Vec<AtomArray>,
}

impl Structure {
    /// Open-boundary structure.
    pub fn molecule(atomic_numbers: Vec<u32>, positions: Vec<Vec3>) -> Result<Self> {
        Self::new(atomic_numbers, positions, None, [false; 3])
    }

    pub fn periodic(atomic_numbers: Vec<u32>, positions: Vec<Vec3>, cell: Cell) -> Result<Self> {
        Self::new(atomic_numbers, positions, Some(cell), [true; 3])
    }

    pub fn new(
        atomic_numbers: Vec<u32>,
        positions: Vec<Vec3>,
        cell: Option<Cell>,
        pbc: [bool; 3],
    ) -> Result<Self> {
        let s = Structure {
            atomic_numbers,
            positions,
            cell,
            pbc,
            energy: None,
            forces: None,
            info: Vec::new(),
            arrays: Vec::new(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_labels(mut self, energy: Option<f64>, forces: Option<Vec<Vec3>>) -> Result<Self> {
        self.energy = energy;
        self.forces = forces;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.positions.len();
        let bad = |msg: String| Err(GeometryError::InvalidStructure(msg));
        if m == 0 {
            return bad("structure has no atoms".into());
        }
        if self.atomic_numbers.len() != m {
            return bad(format!(
                "{} atomic numbers for {} positions",
                self.atomic_numbers.len(),
                m
            ));
        }
        if self.atomic_numbers.contains(&0) {
            return bad("atomic numbers must be ≥ 1".into());
        }
        if self.positions.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return bad("non-finite position".into());
        }
        if self.is_periodic() && self.cell.is_none() {
            return bad("periodic axes require a cell".into());
        }
        if let Some(f) = &self.forces {
            if f.len() != m {
                return bad(format!("{} force rows for {} atoms", f.len(), m));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn is_periodic(&self) -> bool {
        self.pbc.iter().any(|&p| p)
    }

    /// Minimum-image displacement `r_j − r_i`.
    pub fn displacement(&self, i: usize, j: usize) -> Vec3 {
        super::minimum_image(
            self.positions[j] - self.positions[i],
            self.cell.as_ref(),
            self.pbc,
        )
    }

    /// Wraps positions into the home cell along periodic axes and returns
    /// the integer image shift applied to each atom.
    pub fn wrap(&mut self) -> Vec<[i32; 3]> {
        let mut shifts = vec![[0i32; 3]; self.len()];
        let Some(cell) = &self.cell else {
            return shifts;
        };
        for (p, s) in self.positions.iter_mut().zip(shifts.iter_mut()) {
            let f = cell.to_fractional(p);
            let mut moved = false;
            for k in 0..3 {
                if self.pbc[k] {
                    let w = f[k].floor();
                    if w != 0.0 {
                        s[k] = w as i32;
                        moved = true;
                    }
                }
            }
            if moved {
                *p -= cell.shift_vector(*s);
            }
        }
        shifts
    }

    /// Rigid rotation of positions, cell and force labels by `rot`.
    pub fn rotated(&self, rot: &Mat3) -> Result<Self> {
        let mut out = self.clone();
        for p in &mut out.positions {
            *p = rot * *p;
        }
        if let Some(f) = &mut out.forces {
            for v in f.iter_mut() {
                *v = rot * *v;
            }
        }
        if let Some(c) = &self.cell {
            out.cell = Some(Cell::new(c.matrix() * rot.transpose())?);
        }
        Ok(out)
    }

    pub fn translated(&self, t: &Vec3) -> Self {
        let mut out = self.clone();
        for p in &mut out.positions {
            *p += t;
        }
        out
    }
}
