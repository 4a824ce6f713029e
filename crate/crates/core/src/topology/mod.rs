//! Exact combinatorial topology of voxel masks and fields.
//!
//! Foreground is 26-connected and its complement 6-connected, which is the
//! pairing under which voxel connectivity agrees with the homology of the
//! closed-cube complex.

mod components;
mod euler;
mod persistence;

pub use components::{connected_components, ComponentLabels, Connectivity};
pub use euler::{betti_numbers, cavity_count, euler_characteristic, BettiTriple};
pub use persistence::{
    betti1_at_half, persistence, PersistenceDiagram, PersistenceError, PersistencePair,
};

pub(crate) use components::{components_with_peaks, label_where};
pub(crate) use persistence::compute as persistence_unchecked;
