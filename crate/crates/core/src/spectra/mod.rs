//! Noise spectral densities and their free-probability transforms.

mod density;
mod potential;
mod transforms;

pub(crate) use density::sample_eigenvalues_with;
pub use density::{
    build_builtin_density, read_density_csv, sample_eigenvalues, standardize, write_density_csv,
    Affine, BuiltinKind, EdgeShape, SpectralDensity, QUAD_NODES,
};
pub use potential::{potential_derivative_from_density, Potential, Provenance};
pub use transforms::{
    effective_coupling, hilbert_pv, pushforward_law, r_transform, stieltjes_derivative,
    stieltjes_transform, EffectiveCoupling, PushforwardLaw, UpperEdge, DIAGONAL_GAP,
};
