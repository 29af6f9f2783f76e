//! Random structures and symmetry checks shared by the model and oracle
//! test suites.

use nalgebra::{Rotation3, Unit};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::{Cell, Mat3, Structure, Vec3};

/// Energy and forces of a structure.
pub type Evaluation = (f64, Vec<Vec3>);

fn place(rng: &mut ChaCha8Rng, m: usize, min_dist: f64, sample: impl Fn(&mut ChaCha8Rng) -> Vec3, dist: impl Fn(&Vec3, &Vec3) -> f64) -> Vec<Vec3> {
    let mut pos: Vec<Vec3> = Vec::with_capacity(m);
    while pos.len() < m {
        let p = sample(rng);
        if pos.iter().all(|q| dist(&p, q) >= min_dist) {
            pos.push(p);
        }
    }
    pos
}

/// Open-boundary cluster of `m` atoms with random species drawn from
/// `species`, about `volume_per_atom` Å³ each and no pair closer than
/// `min_dist`.
pub fn random_molecule(
    rng: &mut ChaCha8Rng,
    m: usize,
    species: &[u32],
    volume_per_atom: f64,
    min_dist: f64,
) -> Structure {
    let side = (m as f64 * volume_per_atom).cbrt();
    let pos = place(
        rng,
        m,
        min_dist,
        |r| Vec3::new(r.random_range(0.0..side), r.random_range(0.0..side), r.random_range(0.0..side)),
        |a, b| (a - b).norm(),
    );
    let z = (0..m).map(|_| species[rng.random_range(0..species.len())]).collect();
    Structure::molecule(z, pos).expect("valid cluster")
}

/// Random triclinic cell holding `m` atoms, no periodic pair closer than
/// `min_dist`.
pub fn random_periodic(
    rng: &mut ChaCha8Rng,
    m: usize,
    species: &[u32],
    volume_per_atom: f64,
    min_dist: f64,
) -> Structure {
    let side = (m as f64 * volume_per_atom).cbrt().max(2.0 * min_dist);
    let mut rows = [[0.0; 3]; 3];
    for (k, row) in rows.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = if c == k {
                side * rng.random_range(0.9..1.1)
            } else {
                side * rng.random_range(-0.15..0.15)
            };
        }
    }
    let cell = Cell::from_rows(rows).expect("regular cell");
    let c2 = cell.clone();
    let pos = place(
        rng,
        m,
        min_dist,
        |r| cell.to_cartesian(&Vec3::new(r.random(), r.random(), r.random())),
        |a, b| crate::geometry::minimum_image(b - a, Some(&c2), [true; 3]).norm(),
    );
    let z = (0..m).map(|_| species[rng.random_range(0..species.len())]).collect();
    Structure::periodic(z, pos, cell).expect("valid crystal")
}

/// Uniform random rotation, composed with a reflection when `reflect`.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, reflect: bool) -> Mat3 {
    let axis = Unit::new_normalize(Vec3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ));
    let r = Rotation3::from_axis_angle(&axis, rng.random_range(0.0..std::f64::consts::TAU)).into_inner();
    if reflect {
        -r
    } else {
        r
    }
}

/// Worst relative energy change and absolute force-component error under
/// the O(3) element `rot` followed by a translation.
pub fn symmetry_error<E>(
    eval: &mut impl FnMut(&Structure) -> Result<Evaluation, E>,
    s: &Structure,
    rot: &Mat3,
    shift: &Vec3,
) -> Result<(f64, f64), E> {
    let (e0, f0) = eval(s)?;
    let moved = s.rotated(rot).expect("orthogonal map keeps the cell regular").translated(shift);
    let (e1, f1) = eval(&moved)?;
    let de = (e1 - e0).abs() / e0.abs().max(1e-300);
    let df = f0
        .iter()
        .zip(&f1)
        .map(|(a, b)| (rot * a - b).amax())
        .fold(0.0, f64::max);
    Ok((de, df))
}

/// Relative deviation of `E(k copies) / (k E(s))` from one, for copies of an
/// open cluster separated by `gap` Å.
pub fn extensivity_error<E>(
    eval: &mut impl FnMut(&Structure) -> Result<Evaluation, E>,
    s: &Structure,
    k: usize,
    gap: f64,
) -> Result<f64, E> {
    let (e1, _) = eval(s)?;
    let mut z = Vec::new();
    let mut pos = Vec::new();
    for c in 0..k {
        z.extend(&s.atomic_numbers);
        pos.extend(s.positions.iter().map(|p| p + Vec3::new(gap * c as f64, 0.0, 0.0)));
    }
    let big = Structure::molecule(z, pos).expect("copies of a valid cluster");
    let (ek, _) = eval(&big)?;
    Ok((ek - k as f64 * e1).abs() / (k as f64 * e1).abs().max(1e-300))
}
