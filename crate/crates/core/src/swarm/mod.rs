//! Binary particle swarm search over feature masks.

pub mod fitness;
pub mod params;
pub mod pso;

pub use fitness::{build_subsets, eval_fitness, fitness_value, Fitness, FitnessReport, FitnessSpec, SubsetPlan};
pub use params::{ParamBounds, PsoParams};
pub use pso::{binarize, run, update_scalar, IterationMetric, PsoConfig, PsoOutcome, SwarmState};

#[derive(Debug, thiserror::Error)]
pub enum SwarmError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Feature(#[from] crate::features::FeatureError),
}

/// Adjusts (w, c1, c2) from the recent iteration history.
pub trait ParamTuner {
    fn tune(&mut self, current: PsoParams, window: &[IterationMetric]) -> PsoParams;
}

/// Keeps the parameters fixed.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoopTuner;

impl ParamTuner for NoopTuner {
    fn tune(&mut self, current: PsoParams, _window: &[IterationMetric]) -> PsoParams {
        current
    }
}
