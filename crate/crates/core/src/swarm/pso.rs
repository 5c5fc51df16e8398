//! Swarm state, velocity/position update and the tuned search loop.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fitness::{Fitness, FitnessReport};
use super::params::PsoParams;
use super::{ParamTuner, SwarmError};

/// Most recent iterations handed to the tuner.
pub const WINDOW: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PsoConfig {
    pub particles: usize,
    pub iterations: usize,
    pub v_max: f64,
    pub seed: u64,
}

impl Default for PsoConfig {
    fn default() -> Self {
        Self {
            particles: 10,
            iterations: 50,
            v_max: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetric {
    pub iteration: usize,
    pub best_fitness: f64,
    pub accuracy: f64,
    pub selected: usize,
    pub params: PsoParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwarmState {
    pub positions: Vec<Vec<f64>>,
    pub velocities: Vec<Vec<f64>>,
    pub pbest: Vec<Vec<f64>>,
    pub pbest_fit: Vec<f64>,
    pub gbest: Vec<f64>,
    pub gbest_fit: f64,
    pub gbest_report: Option<FitnessReport>,
    pub iteration: usize,
}

/// `x > 0.5`, strictly.
pub fn binarize(x: &[f64]) -> Vec<bool> {
    x.iter().map(|&v| v > 0.5).collect()
}

/// One coordinate of the update; returns `(v', x')`.
#[allow(clippy::too_many_arguments)]
pub fn update_scalar(
    v: f64,
    x: f64,
    p: f64,
    g: f64,
    params: &PsoParams,
    r1: f64,
    r2: f64,
    v_max: f64,
) -> (f64, f64) {
    let v_new = (params.w * v + params.c1 * r1 * (p - x) + params.c2 * r2 * (g - x)).clamp(-v_max, v_max);
    (v_new, (x + v_new).clamp(0.0, 1.0))
}

impl SwarmState {
    /// Positions uniform in [0, 1], velocities uniform in [-0.1, 0.1].
    pub fn init(particles: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let mut positions = Vec::with_capacity(particles);
        let mut velocities = Vec::with_capacity(particles);
        for _ in 0..particles {
            positions.push((0..dim).map(|_| rng.random::<f64>()).collect::<Vec<_>>());
            velocities.push((0..dim).map(|_| rng.random_range(-0.1..=0.1)).collect());
        }
        Self {
            pbest: positions.clone(),
            pbest_fit: vec![f64::INFINITY; particles],
            gbest: positions.first().cloned().unwrap_or_default(),
            gbest_fit: f64::INFINITY,
            gbest_report: None,
            positions,
            velocities,
            iteration: 0,
        }
    }

    /// Fresh `r1`, `r2` per particle and dimension, drawn in that order.
    pub fn step(&mut self, params: &PsoParams, v_max: f64, rng: &mut impl Rng) {
        for i in 0..self.positions.len() {
            for d in 0..self.positions[i].len() {
                let r1: f64 = rng.random();
                let r2: f64 = rng.random();
                let (v, x) = update_scalar(
                    self.velocities[i][d],
                    self.positions[i][d],
                    self.pbest[i][d],
                    self.gbest[d],
                    params,
                    r1,
                    r2,
                    v_max,
                );
                self.velocities[i][d] = v;
                self.positions[i][d] = x;
            }
        }
    }

    /// Scores every particle (concurrently) and merges bests in particle
    /// order; only strict improvements replace a best.
    pub fn evaluate(&mut self, fitness: &dyn Fitness) {
        let reports: Vec<FitnessReport> = self
            .positions
            .par_iter()
            .map(|x| fitness.evaluate(&binarize(x)))
            .collect();
        for (i, r) in reports.into_iter().enumerate() {
            if r.value < self.pbest_fit[i] {
                self.pbest_fit[i] = r.value;
                self.pbest[i] = self.positions[i].clone();
            }
            if r.value < self.gbest_fit {
                self.gbest_fit = r.value;
                self.gbest = self.positions[i].clone();
                self.gbest_report = Some(r);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsoOutcome {
    pub mask: Vec<bool>,
    pub best: FitnessReport,
    pub history: Vec<IterationMetric>,
    pub final_params: PsoParams,
}

/// Each iteration scores the swarm, updates bests, records a metric, moves
/// the particles and, past the sixth iteration, lets the tuner revise the
/// coefficients used by the next move. With zero iterations the random
/// initialization is scored once and nothing is recorded.
pub fn run(
    fitness: &dyn Fitness,
    config: &PsoConfig,
    initial: PsoParams,
    tuner: &mut dyn ParamTuner,
) -> Result<PsoOutcome, SwarmError> {
    if config.particles == 0 || fitness.dim() == 0 {
        return Err(SwarmError::Config(
            "the swarm needs at least one particle and one feature".into(),
        ));
    }
    if !(config.v_max > 0.0) {
        return Err(SwarmError::Config(format!("v_max {} must be positive", config.v_max)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = SwarmState::init(config.particles, fitness.dim(), &mut rng);
    let mut params = initial;
    let mut window: VecDeque<IterationMetric> = VecDeque::with_capacity(WINDOW);
    let mut history = Vec::with_capacity(config.iterations);
    if config.iterations == 0 {
        state.evaluate(fitness);
    }
    for t in 1..=config.iterations {
        state.evaluate(fitness);
        state.iteration = t;
        let best = state.gbest_report.as_ref().expect("evaluated");
        let metric = IterationMetric {
            iteration: t,
            best_fitness: state.gbest_fit,
            accuracy: best.accuracy(),
            selected: best.selected,
            params,
        };
        log::debug!("pso iteration {t}: best {:.6}", state.gbest_fit);
        if window.len() == WINDOW {
            window.pop_front();
        }
        window.push_back(metric.clone());
        history.push(metric);
        state.step(&params, config.v_max, &mut rng);
        if t > WINDOW {
            params = tuner.tune(params, window.make_contiguous());
        }
    }
    Ok(PsoOutcome {
        mask: binarize(&state.gbest),
        best: state.gbest_report.expect("evaluated"),
        history,
        final_params: params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::swarm::fitness::fitness_value;
    use crate::swarm::NoopTuner;

    #[test]
    fn hand_update() {
        let p = PsoParams { w: 0.5, c1: 2.0, c2: 1.5 };
        let (v, x) = update_scalar(0.1, 0.6, 0.7, 0.8, &p, 0.5, 0.5, 0.5);
        assert!((v - 0.30).abs() < 1e-12);
        assert!((x - 0.90).abs() < 1e-12);
        let (v, _) = update_scalar(0.2, 0.4, 0.4, 0.4, &p, 0.3, 0.9, 0.5);
        assert_eq!(v, 0.5 * 0.2);
        let fast = PsoParams { w: 0.9, c1: 3.0, c2: 3.0 };
        assert_eq!(update_scalar(0.0, 0.0, 0.3, 0.3, &fast, 1.0, 0.0, 0.5).0, 0.5);
    }

    #[test]
    fn strict_threshold() {
        assert_eq!(binarize(&[0.5, 0.5 + 1e-9, 0.0, 1.0]), vec![false, true, false, true]);
    }

    struct Missed(Vec<usize>, usize);

    impl Fitness for Missed {
        fn dim(&self) -> usize {
            self.1
        }
        fn evaluate(&self, mask: &[bool]) -> FitnessReport {
            let missed = self.0.iter().filter(|&&d| !mask[d]).count();
            let sel = mask.iter().filter(|&&m| m).count();
            fitness_value(&[missed as f64 / self.0.len() as f64], 0.0, 0.0, sel, mask.len())
        }
    }

    #[test]
    fn zero_iterations_returns_initial_best() {
        let f = Missed(vec![1, 2], 6);
        let cfg = PsoConfig { iterations: 0, seed: 3, ..PsoConfig::default() };
        let out = run(&f, &cfg, PsoParams::default(), &mut NoopTuner).unwrap();
        assert!(out.history.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let init = SwarmState::init(10, 6, &mut rng);
        let best = init
            .positions
            .iter()
            .map(|x| f.evaluate(&binarize(x)).value)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(out.best.value, best);
    }

    #[test]
    fn deterministic_and_monotone() {
        let f = Missed(vec![0, 5, 9], 12);
        let cfg = PsoConfig { iterations: 20, seed: 11, ..PsoConfig::default() };
        let a = run(&f, &cfg, PsoParams::default(), &mut NoopTuner).unwrap();
        let b = run(&f, &cfg, PsoParams::default(), &mut NoopTuner).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.history.len(), 20);
        assert!(a.history.windows(2).all(|w| w[1].best_fitness <= w[0].best_fitness));
    }

    #[test]
    fn state_stays_bounded() {
        let f = Missed(vec![0], 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = SwarmState::init(5, 8, &mut rng);
        s.evaluate(&f);
        let p = PsoParams { w: 0.9, c1: 3.0, c2: 3.0 };
        for _ in 0..50 {
            s.step(&p, 0.5, &mut rng);
            s.evaluate(&f);
            for (x, v) in s.positions.iter().zip(&s.velocities) {
                assert!(x.iter().all(|&x| (0.0..=1.0).contains(&x)));
                assert!(v.iter().all(|&v| (-0.5..=0.5).contains(&v)));
            }
        }
    }

    struct Recorder(Vec<usize>);

    impl ParamTuner for Recorder {
        fn tune(&mut self, current: PsoParams, window: &[IterationMetric]) -> PsoParams {
            assert!(window.len() <= WINDOW);
            self.0.push(window.last().unwrap().iteration);
            current
        }
    }

    #[test]
    fn tuner_called_after_sixth_iteration() {
        let f = Missed(vec![0], 4);
        let mut rec = Recorder(Vec::new());
        let cfg = PsoConfig { iterations: 9, ..PsoConfig::default() };
        run(&f, &cfg, PsoParams::default(), &mut rec).unwrap();
        assert_eq!(rec.0, vec![7, 8, 9]);
    }
}
