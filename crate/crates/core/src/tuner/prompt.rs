use crate::swarm::{IterationMetric, PsoParams};

/// Instantiates the tuning prompt. Numbers use Rust's shortest round-trip
/// formatting, so identical inputs always give identical text.
pub fn build_prompt(current: &PsoParams, window: &[IterationMetric]) -> String {
    let mut s = format!(
        "Current PSO parameters: w={:?}, c1={:?}, c2={:?}. Recent 6 iterations:\n",
        current.w, current.c1, current.c2
    );
    for m in window {
        s.push_str(&format!(
            "iteration={}, fitness={:?}, accuracy={:?}, features={}, w={:?}, c1={:?}, c2={:?}\n",
            m.iteration, m.best_fitness, m.accuracy, m.selected, m.params.w, m.params.c1, m.params.c2
        ));
    }
    s.push_str(
        "with fitness and feature counts. Objective: Minimize fitness (classification error rate + \
         the number of selected features). Analyze convergence trend and suggest specific numerical \
         adjustments for w, c1, c2.",
    );
    s
}
