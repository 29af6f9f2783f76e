use std::cmp::Ordering;
use std::collections::HashMap;

use super::{Cell, GeometryError, Result, Structure, Vec3, R_MIN};

/// Directed interaction graph. Edge `k` carries the message from
/// `edge_src[k]` (j) to `edge_dst[k]` (i) with `edge_vec[k] = r_i − r_j`
/// for the specific periodic image of j given by `edge_shift[k]`.
///
/// Edges are grouped by destination in ascending order; within one
/// destination they are sorted by (length, source, shift).
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub n_nodes: usize,
    pub edge_src: Vec<usize>,
    pub edge_dst: Vec<usize>,
    pub edge_shift: Vec<[i32; 3]>,
    pub edge_vec: Vec<Vec3>,
    pub edge_len: Vec<f64>,
}

impl Graph {
    pub fn n_edges(&self) -> usize {
        self.edge_src.len()
    }

    pub fn in_degree(&self) -> Vec<usize> {
        let mut d = vec![0; self.n_nodes];
        for &i in &self.edge_dst {
            d[i] += 1;
        }
        d
    }
}

#[derive(Debug, Clone)]
struct Candidate {
    src: usize,
    shift: [i32; 3],
    vec: Vec3,
    len: f64,
}

fn candidate_order(a: &Candidate, b: &Candidate) -> Ordering {
    a.len
        .total_cmp(&b.len)
        .then(a.src.cmp(&b.src))
        .then(a.shift.cmp(&b.shift))
}

/// `r_i − (r_j + s·A)`. Both neighbor routines use this exact expression so
/// their outputs agree bit for bit.
#[inline]
fn edge_vector(s: &Structure, i: usize, j: usize, shift: [i32; 3]) -> Vec3 {
    let d = s.positions[i] - s.positions[j];
    match &s.cell {
        Some(cell) if shift != [0, 0, 0] => d - cell.shift_vector(shift),
        _ => d,
    }
}

fn check_params(cutoff: f64, max_neighbors: usize) -> Result<()> {
    if !(cutoff > 0.0 && cutoff.is_finite()) {
        return Err(GeometryError::InvalidParameters(format!(
            "cutoff must be positive, got {cutoff}"
        )));
    }
    if max_neighbors == 0 {
        return Err(GeometryError::InvalidParameters(
            "max_neighbors must be ≥ 1".into(),
        ));
    }
    Ok(())
}

/// Fractional coordinates (Cartesian when there is no cell), integer wrap
/// offsets along periodic axes and per-axis plane spacing.
struct Frame {
    frac: Vec<Vec3>,
    wrap: Vec<[i32; 3]>,
    heights: [f64; 3],
    periodic: [bool; 3],
}

impl Frame {
    fn new(s: &Structure) -> Self {
        let periodic = if s.cell.is_some() { s.pbc } else { [false; 3] };
        let (mut frac, heights): (Vec<Vec3>, [f64; 3]) = match &s.cell {
            Some(c) => (
                s.positions.iter().map(|p| c.to_fractional(p)).collect(),
                c.heights(),
            ),
            None => (s.positions.clone(), [1.0; 3]),
        };
        let mut wrap = vec![[0i32; 3]; frac.len()];
        for (f, w) in frac.iter_mut().zip(wrap.iter_mut()) {
            for k in 0..3 {
                if periodic[k] {
                    let fl = f[k].floor();
                    w[k] = fl as i32;
                    f[k] -= fl;
                    // Rounding can land exactly on 1.0.
                    if f[k] >= 1.0 {
                        f[k] -= 1.0;
                        w[k] += 1;
                    }
                }
            }
        }
        Frame {
            frac,
            wrap,
            heights,
            periodic,
        }
    }
}

fn finish(s: &Structure, max_neighbors: usize, per_node: Vec<Vec<Candidate>>) -> Result<Graph> {
    let mut g = Graph {
        n_nodes: s.len(),
        edge_src: Vec::new(),
        edge_dst: Vec::new(),
        edge_shift: Vec::new(),
        edge_vec: Vec::new(),
        edge_len: Vec::new(),
    };
    for (i, mut cands) in per_node.into_iter().enumerate() {
        cands.sort_by(candidate_order);
        if let Some(c) = cands.first() {
            if c.len < R_MIN {
                return Err(GeometryError::Overlap {
                    i,
                    j: c.src,
                    distance: c.len,
                });
            }
        }
        cands.truncate(max_neighbors);
        for c in cands {
            g.edge_src.push(c.src);
            g.edge_dst.push(i);
            g.edge_shift.push(c.shift);
            g.edge_vec.push(c.vec);
            g.edge_len.push(c.len);
        }
    }
    Ok(g)
}

/// Radius graph with a per-node cap, built from linked-cell bins.
///
/// Every periodic image within `cutoff` is considered, including images of
/// the atom itself, so cells smaller than the cutoff are handled. When more
/// than `max_neighbors` candidates fall inside the cutoff the closest are
/// kept, ties broken by (source index, shift).
pub fn build_neighbor_list(s: &Structure, cutoff: f64, max_neighbors: usize) -> Result<Graph> {
    check_params(cutoff, max_neighbors)?;
    s.validate()?;
    let frame = Frame::new(s);
    let m = s.len();

    // Bin geometry per axis: bin width in the frame's coordinate, number of
    // bins, reach in bins, and the open-axis origin.
    let mut width = [0.0f64; 3];
    let mut nbins = [1i64; 3];
    let mut reach = [1i64; 3];
    let mut origin = [0.0f64; 3];
    for k in 0..3 {
        let h = frame.heights[k];
        if frame.periodic[k] {
            let n = ((h / cutoff).floor() as i64).max(1);
            nbins[k] = n;
            width[k] = 1.0 / n as f64;
            reach[k] = (cutoff / (width[k] * h)).ceil() as i64;
        } else {
            let lo = frame.frac.iter().map(|f| f[k]).fold(f64::INFINITY, f64::min);
            origin[k] = lo;
            width[k] = cutoff / h;
            reach[k] = 1;
        }
    }
    let bin_of = |f: &Vec3| -> [i64; 3] {
        let mut b = [0i64; 3];
        for k in 0..3 {
            let raw = ((f[k] - origin[k]) / width[k]).floor() as i64;
            b[k] = if frame.periodic[k] {
                raw.clamp(0, nbins[k] - 1)
            } else {
                raw
            };
        }
        b
    };

    let mut bins: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    let atom_bin: Vec<[i64; 3]> = frame.frac.iter().map(bin_of).collect();
    for (j, b) in atom_bin.iter().enumerate() {
        bins.entry(*b).or_default().push(j);
    }

    let cutoff_sq = cutoff * cutoff;
    let mut per_node: Vec<Vec<Candidate>> = Vec::with_capacity(m);
    for i in 0..m {
        let bi = atom_bin[i];
        let mut cands = Vec::new();
        for da in -reach[0]..=reach[0] {
            for db in -reach[1]..=reach[1] {
                for dc in -reach[2]..=reach[2] {
                    let mut key = [0i64; 3];
                    let mut q = [0i32; 3];
                    for (k, d) in [da, db, dc].into_iter().enumerate() {
                        let t = bi[k] + d;
                        if frame.periodic[k] {
                            key[k] = t.rem_euclid(nbins[k]);
                            q[k] = t.div_euclid(nbins[k]) as i32;
                        } else {
                            key[k] = t;
                        }
                    }
                    let Some(members) = bins.get(&key) else {
                        continue;
                    };
                    for &j in members {
                        let mut shift = [0i32; 3];
                        for k in 0..3 {
                            shift[k] = q[k] + frame.wrap[i][k] - frame.wrap[j][k];
                        }
                        if i == j && shift == [0, 0, 0] {
                            continue;
                        }
                        let vec = edge_vector(s, i, j, shift);
                        let n2 = vec.norm_squared();
                        if n2 <= cutoff_sq {
                            let len = n2.sqrt();
                            if len <= cutoff {
                                cands.push(Candidate { src: j, shift, vec, len });
                            }
                        }
                    }
                }
            }
        }
        per_node.push(cands);
    }
    finish(s, max_neighbors, per_node)
}

/// Reference O(M² × shifts) enumeration with the same output contract as
/// [`build_neighbor_list`].
pub fn brute_force_neighbors(s: &Structure, cutoff: f64, max_neighbors: usize) -> Result<Graph> {
    check_params(cutoff, max_neighbors)?;
    s.validate()?;
    let frame = Frame::new(s);
    let m = s.len();
    let mut span = [0i32; 3];
    for k in 0..3 {
        if frame.periodic[k] {
            span[k] = (cutoff / frame.heights[k]).ceil() as i32 + 1;
        }
    }
    let cutoff_sq = cutoff * cutoff;
    let mut per_node = Vec::with_capacity(m);
    for i in 0..m {
        let mut cands = Vec::new();
        for j in 0..m {
            let base: [i32; 3] = std::array::from_fn(|k| frame.wrap[i][k] - frame.wrap[j][k]);
            for a in -span[0]..=span[0] {
                for b in -span[1]..=span[1] {
                    for c in -span[2]..=span[2] {
                        let shift = [base[0] + a, base[1] + b, base[2] + c];
                        if i == j && shift == [0, 0, 0] {
                            continue;
                        }
                        let vec = edge_vector(s, i, j, shift);
                        let n2 = vec.norm_squared();
                        if n2 <= cutoff_sq {
                            let len = n2.sqrt();
                            if len <= cutoff {
                                cands.push(Candidate { src: j, shift, vec, len });
                            }
                        }
                    }
                }
            }
        }
        per_node.push(cands);
    }
    finish(s, max_neighbors, per_node)
}

/// Neighbor list built at `cutoff + skin` and reused until some atom has
/// moved more than half the skin since the last build.
#[derive(Debug, Clone)]
pub struct VerletList {
    cutoff: f64,
    skin: f64,
    reference: Vec<Vec3>,
    cell: Option<Cell>,
    graph: Graph,
    rebuilds: usize,
}

impl VerletList {
    pub fn new(s: &Structure, cutoff: f64, skin: f64) -> Result<Self> {
        if skin.is_nan() || skin < 0.0 {
            return Err(GeometryError::InvalidParameters(format!("skin {skin}")));
        }
        let graph = build_neighbor_list(s, cutoff + skin, usize::MAX)?;
        Ok(VerletList {
            cutoff,
            skin,
            reference: s.positions.clone(),
            cell: s.cell.clone(),
            graph,
            rebuilds: 1,
        })
    }

    pub fn rebuilds(&self) -> usize {
        self.rebuilds
    }

    fn stale(&self, s: &Structure) -> bool {
        if s.len() != self.reference.len() || s.cell != self.cell {
            return true;
        }
        let limit = 0.25 * self.skin * self.skin;
        s.positions
            .iter()
            .zip(&self.reference)
            .any(|(p, r)| (p - r).norm_squared() > limit)
    }

    /// Pairs of `s` within the true cutoff (no neighbor cap). Positions must
    /// not have been re-wrapped since the last build.
    pub fn update(&mut self, s: &Structure) -> Result<Graph> {
        if self.stale(s) {
            *self = Self::new(s, self.cutoff, self.skin).map(|mut v| {
                v.rebuilds = self.rebuilds + 1;
                v
            })?;
        }
        let g = &self.graph;
        let mut per_node: Vec<Vec<Candidate>> = vec![Vec::new(); s.len()];
        for k in 0..g.n_edges() {
            let (i, j, shift) = (g.edge_dst[k], g.edge_src[k], g.edge_shift[k]);
            let vec = edge_vector(s, i, j, shift);
            let len = vec.norm();
            if len <= self.cutoff {
                per_node[i].push(Candidate { src: j, shift, vec, len });
            }
        }
        finish(s, usize::MAX, per_node)
    }
}
