//! Wave-aware latency modeling and runtime configuration for tile-based
//! GPU kernels.
//!
//! The pipeline runs offline to online:
//!
//! 1. [`kernel`] projects logical workloads onto physical `(G, L)`
//!    coordinates under each macro (tiling) config.
//! 2. [`plan`] and [`profile`] sample the `(G, L)` plane sparsely along wave
//!    boundaries and measure every feasible micro config there.
//! 3. [`model`] fits one bilinear latency model per `<macro, wave>` bucket
//!    plus an extrapolation model, and caches the best micro config per
//!    loop anchor.
//! 4. [`tuner`] picks a macro by predicted latency and a micro by nearest
//!    loop anchor, without measuring anything.
//!
//! [`sim`] is a discrete-event model of greedy block dispatch; it serves as
//! the measurement backend and as the brute-force oracle in [`eval`].

pub mod error;
pub mod eval;
pub mod kernel;
pub mod lstsq;
pub mod model;
pub mod plan;
pub mod profile;
pub mod registry;
pub mod seed;
pub mod sim;
pub mod tuner;

pub use error::{Error, Result};
pub use kernel::{
    instantiate_workload, map_workload, physical_coords, wave_count, GridShape, HardwareSpec,
    KernelFamily, KernelWorkload, MacroConfig, MicroConfig, PhysicalCoords, Tiles,
};
pub use model::{
    build_dual_tables, fit_bucket, load_tables, predict, save_tables, BilinearCoeffs, DualTable,
    TableSet,
};
pub use plan::{build_plan, select_grid_point, GridPoint, PlanParams, SamplingPlan};
pub use profile::{
    run_profile, CsvReplayBackend, ExternalCommandBackend, MeasurementBackend, ProfileRecord,
    SimulatorBackend,
};
pub use registry::ConfigRegistry;
pub use sim::{oracle_best, BlockLatency, SimMachine, SyntheticGround};
pub use tuner::{predict_latency, tune, BaselinePredictor, Regime, Tuned};
