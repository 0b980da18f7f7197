//! Discrete denoising diffusion over finite alphabets with a reverse process
//! built from learned single-site conditionals.

pub mod dist;
pub mod error;
pub mod experiment;
pub mod forward;
pub mod io;
pub mod metrics;
pub mod models;
pub mod neurise;
pub mod reverse;
pub mod seed;
pub mod state;
pub mod theory;

pub use dist::{EmpiricalDistribution, ExactDistribution, Pmf, SampleSet};
pub use error::{Error, Result};
pub use forward::NoiseSchedule;
pub use models::{EnergyModel, GibbsModel, IsingModel, PottsModel};
pub use reverse::{ConditionalOracle, ExactOracle, ReverseInit};
pub use state::{Alphabet, Configuration, Guard, Site, StateSpace};
