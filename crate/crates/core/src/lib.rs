//! Lightweight equivariant graph neural network interatomic potential.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors with a reverse-mode tape;
//! * [`geometry`]: structures, periodic cells and neighbor lists;
//! * [`model`]: the equivariant network with direct force readout;
//! * [`training`]: loss, Adam, dataset fitting, evaluation and checkpoints;
//! * [`md`]: Langevin / velocity Verlet dynamics over any force provider;
//! * [`analysis`]: RDF, h(r), MSD diffusivity and stability time;
//! * [`io`]: extended XYZ, element data, analytic pair potentials and dataset
//!   generation.

pub mod tensor;
pub mod geometry;
pub mod model;
pub mod training;
pub mod md;
pub mod io;
pub mod analysis;
#[doc(hidden)]
pub mod testing;

/// Independent seed for a named subsystem, derived from one root seed.
pub fn derive_seed(root: u64, stream: &str) -> u64 {
    // FNV-1a over the label, mixed with the root through splitmix64.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = root ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
