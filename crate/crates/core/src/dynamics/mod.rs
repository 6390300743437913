//! Reference solvers on the periodic unit square and the trajectory dataset.

mod dataset;
mod diffusion;
mod field;
mod ic;
mod spectral;
mod vorticity;

pub use dataset::{
    make_dataset, simulate_one, split_indices, DatasetConfig, DatasetManifest, Split, Splits, TrajectoryDataset,
    MIN_TRAJECTORIES,
};
pub use diffusion::simulate_diffusion_advection;
pub use field::{node_coord, FieldSnapshot, PdeKind, Physics, Trajectory};
pub use ic::{random_ic, IC_MODES};
pub use spectral::Fft2;
pub use vorticity::{kinetic_energy, simulate_vorticity, simulate_vorticity_substepped, CFL_LIMIT, MAX_GRID};
