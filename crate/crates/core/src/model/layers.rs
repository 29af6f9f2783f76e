//! Network building blocks recorded on a [`Tape`].
//!
//! Scalar node features are `[n, F]`, vector node features `[n, 3, F]`.

use std::f64::consts::PI;

use super::params::{GlobalParams, LayerParams, Mlp, ReadoutParams, UpdateParams};
use crate::tensor::{Real, Result, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy)]
pub struct NodeState {
    pub scalars: Var,
    pub vectors: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct GlobalState {
    /// `[G, F]`
    pub scalar: Var,
    /// `[G, 3, F]`
    pub vector: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct Messages {
    pub scalar: Var,
    pub vector: Var,
}

/// Edge data of a batch already placed on the tape.
#[derive(Debug, Clone)]
pub struct EdgeInputs<'a> {
    pub n_nodes: usize,
    pub src: &'a [usize],
    pub dst: &'a [usize],
    /// `[E, K]` radial basis values.
    pub basis: Var,
    /// `[E, 3]` unit vectors along `r_i − r_j`.
    pub dir: Var,
}

/// `½(cos(πr/D) + 1)` inside the cutoff, zero beyond.
pub fn cosine_envelope(r: f64, cutoff: f64) -> f64 {
    if r < cutoff {
        0.5 * ((PI * r / cutoff).cos() + 1.0)
    } else {
        0.0
    }
}

/// Gaussian radial basis with `k` centres evenly spaced on `[0, cutoff]` and
/// width `γ = 1/(2Δμ²)`. Returns `lengths.len() × k` values, row-major.
pub fn rbf_expand(lengths: &[f64], k: usize, cutoff: f64, envelope: bool) -> Vec<f64> {
    let step = cutoff / (k.max(2) - 1) as f64;
    let gamma = 1.0 / (2.0 * step * step);
    let mut out = Vec::with_capacity(lengths.len() * k);
    for &r in lengths {
        let fc = if envelope {
            cosine_envelope(r, cutoff)
        } else {
            1.0
        };
        for j in 0..k {
            let d = r - j as f64 * step;
            let v = (-gamma * d * d).exp() * fc;
            // Zero the far tails.
            out.push(if v < 1e-30 { 0.0 } else { v });
        }
    }
    out
}

pub fn mlp<T: Real>(tape: &mut Tape<T>, x: Var, p: &Mlp<Var>) -> Result<Var> {
    let h = tape.linear(x, p.w1)?;
    let h = tape.add_bias(h, p.b1)?;
    let h = tape.silu(h)?;
    let y = tape.linear(h, p.w2)?;
    tape.add_bias(y, p.b2)
}

/// Looks up embedding rows for atomic numbers and starts every vector
/// feature at zero.
pub fn embed<T: Real>(tape: &mut Tape<T>, embedding: Var, z: &[u32]) -> Result<NodeState> {
    let shape = tape.shape(embedding).to_vec();
    let (vocab, f) = (shape[0], shape[1]);
    let mut rows = Vec::with_capacity(z.len());
    for &zi in z {
        let r = (zi as usize).wrapping_sub(1);
        if r >= vocab {
            return Err(TensorError::Index {
                op: "embed",
                index: zi as usize,
                limit: vocab,
            });
        }
        rows.push(r);
    }
    let scalars = tape.gather(embedding, &rows)?;
    let vectors = tape.constant(Tensor::zeros(&[z.len(), 3, f]));
    Ok(NodeState { scalars, vectors })
}

/// Filtered neighbor messages:
/// `m_i = Σ_j (W_h x_j) ∘ λ_h(r_ij)` and
/// `m⃗_i = Σ_j x⃗_j ∘ (W_u x_j ∘ λ_u) + (W_v x_j ∘ λ_v) ⊗ r̂_ij`.
pub fn local_message_pass<T: Real>(
    tape: &mut Tape<T>,
    state: NodeState,
    edges: &EdgeInputs<'_>,
    p: &LayerParams<Var>,
) -> Result<Messages> {
    let n = edges.n_nodes;
    let filter = |tape: &mut Tape<T>, w: Var, rbf: Var| -> Result<Var> {
        let h = tape.linear(state.scalars, w)?;
        let hj = tape.gather(h, edges.src)?;
        let lam = tape.linear(edges.basis, rbf)?;
        tape.mul(hj, lam)
    };
    let gh = filter(tape, p.w_h, p.rbf_h)?;
    let scalar = tape.segment_sum(gh, edges.dst, n)?;

    let gu = filter(tape, p.w_u, p.rbf_u)?;
    let vj = tape.gather(state.vectors, edges.src)?;
    let carried = tape.scale_vectors(vj, gu)?;
    let gv = filter(tape, p.w_v, p.rbf_v)?;
    let radial = tape.outer(gv, edges.dir)?;
    let per_edge = tape.add(carried, radial)?;
    let vector = tape.segment_sum(per_edge, edges.dst, n)?;
    Ok(Messages { scalar, vector })
}

/// `Σ_c a[:, c, :] ∘ b[:, c, :]` for two `[n, 3, F]` tensors.
fn spatial_dot<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let s = tape.shape(a).to_vec();
    let (n, f) = (s[0], s[2]);
    let prod = tape.mul(a, b)?;
    let flat = tape.reshape(prod, &[3 * n, f])?;
    let seg: Vec<usize> = (0..3 * n).map(|r| r / 3).collect();
    tape.segment_sum(flat, &seg, n)
}

/// Node update from the aggregated messages.
///
/// The gated variant replaces the node state with
/// `x = W_s s + tanh(W_g s) ∘ m`, `x⃗ = (U m⃗) ∘ (W_h2 s)` where
/// `s = m ⊕ ‖V m⃗‖`. The residual variant adds the messages to the state
/// and applies a PaiNN-style mixing block.
pub fn local_message_update<T: Real>(
    tape: &mut Tape<T>,
    state: NodeState,
    msg: Messages,
    p: &UpdateParams<Var>,
) -> Result<NodeState> {
    match p {
        UpdateParams::Nmu { w_s, w_g, w_h2, u, v } => {
            let vm = tape.linear(msg.vector, *v)?;
            let vn = tape.norm_spatial(vm)?;
            let s = tape.concat(msg.scalar, vn)?;
            let lin = tape.linear(s, *w_s)?;
            let g = tape.linear(s, *w_g)?;
            let g = tape.tanh(g)?;
            let gated = tape.mul(g, msg.scalar)?;
            let scalars = tape.add(lin, gated)?;
            let um = tape.linear(msg.vector, *u)?;
            let h2 = tape.linear(s, *w_h2)?;
            let vectors = tape.scale_vectors(um, h2)?;
            Ok(NodeState { scalars, vectors })
        }
        UpdateParams::Painn { u, v, mlp: m } => {
            let f = tape.shape(state.scalars)[1];
            let x = tape.add(state.scalars, msg.scalar)?;
            let vec = tape.add(state.vectors, msg.vector)?;
            let uv = tape.linear(vec, *u)?;
            let vv = tape.linear(vec, *v)?;
            let vn = tape.norm_spatial(vv)?;
            let s = tape.concat(x, vn)?;
            let a = mlp(tape, s, m)?;
            let a_vv = tape.slice_cols(a, 0, f)?;
            let a_sv = tape.slice_cols(a, f, f)?;
            let a_ss = tape.slice_cols(a, 2 * f, f)?;
            let dot = spatial_dot(tape, uv, vv)?;
            let mixed = tape.mul(a_sv, dot)?;
            let x = tape.add(x, a_ss)?;
            let scalars = tape.add(x, mixed)?;
            let dv = tape.scale_vectors(uv, a_vv)?;
            let vectors = tape.add(vec, dv)?;
            Ok(NodeState { scalars, vectors })
        }
    }
}

/// Pushes the graph-level state back into every node:
/// `x_i += φ(x_i ⊕ x_G)`, `x⃗_i += W_dist (x⃗_i + x⃗_G)`.
pub fn global_distribute<T: Real>(
    tape: &mut Tape<T>,
    state: NodeState,
    global: GlobalState,
    node_graph: &[usize],
    p: &GlobalParams<Var>,
) -> Result<NodeState> {
    let xg = tape.gather(global.scalar, node_graph)?;
    let s = tape.concat(state.scalars, xg)?;
    let phi = mlp(tape, s, &p.mlp_dist)?;
    let scalars = tape.add(state.scalars, phi)?;
    let vg = tape.gather(global.vector, node_graph)?;
    let sum = tape.add(state.vectors, vg)?;
    let dv = tape.linear(sum, p.w_dist)?;
    let vectors = tape.add(state.vectors, dv)?;
    Ok(NodeState { scalars, vectors })
}

/// Refreshes the graph-level state from per-graph node means:
/// `x_G += φ(mean x ⊕ x_G)`, `x⃗_G += W_agg (mean x⃗ + x⃗_G)`.
pub fn global_aggregate<T: Real>(
    tape: &mut Tape<T>,
    state: NodeState,
    global: GlobalState,
    node_graph: &[usize],
    n_graphs: usize,
    p: &GlobalParams<Var>,
) -> Result<GlobalState> {
    let mx = tape.segment_mean(state.scalars, node_graph, n_graphs)?;
    let s = tape.concat(mx, global.scalar)?;
    let phi = mlp(tape, s, &p.mlp_agg)?;
    let scalar = tape.add(global.scalar, phi)?;
    let mv = tape.segment_mean(state.vectors, node_graph, n_graphs)?;
    let sum = tape.add(mv, global.vector)?;
    let dv = tape.linear(sum, p.w_agg)?;
    let vector = tape.add(global.vector, dv)?;
    Ok(GlobalState { scalar, vector })
}

/// Per-atom energies `[n, 1]` and direct forces `[n, 3]`.
pub fn readout<T: Real>(
    tape: &mut Tape<T>,
    state: NodeState,
    p: &ReadoutParams<Var>,
) -> Result<(Var, Var)> {
    let n = tape.shape(state.scalars)[0];
    let e = mlp(tape, state.scalars, &p.mlp_energy)?;
    let f = tape.linear(state.vectors, p.w_f)?;
    let f = tape.reshape(f, &[n, 3])?;
    Ok((e, f))
}

/// Initial global state, the shared trainable scalar broadcast to every graph
/// and a zero vector.
pub fn global_init<T: Real>(
    tape: &mut Tape<T>,
    init: Var,
    n_graphs: usize,
) -> Result<GlobalState> {
    let f = tape.shape(init)[1];
    let scalar = tape.gather(init, &vec![0; n_graphs])?;
    let vector = tape.constant(Tensor::zeros(&[n_graphs, 3, f]));
    Ok(GlobalState { scalar, vector })
}
