//! Machine-learning-corrected semi-Lagrangian level-set advection on adaptive quadtrees.

pub mod advect;
pub mod bench;
pub mod dataset;
pub mod error;
pub mod field_ops;
pub mod grid;
pub mod hybrid;
pub mod interp;
pub mod neural;
pub mod preprocess;
pub mod real;
pub mod sampling;

pub use error::{Error, Result};
pub use grid::{build_grid, GridConfig, LatticeKey, QuadtreeGrid};
pub use real::{Point2, Real};

pub type Grid = QuadtreeGrid<f64>;
pub type GridF32 = QuadtreeGrid<f32>;
pub type State = advect::SimulationState<f64>;
pub type Packet = sampling::DataPacket<f64>;
pub type Model = neural::Mlp<f64>;
pub type ModelF32 = neural::Mlp<f32>;
