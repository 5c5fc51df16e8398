use serde::{Deserialize, Serialize};

/// Inertia, cognitive and social coefficients of the velocity update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsoParams {
    pub w: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for PsoParams {
    fn default() -> Self {
        Self {
            w: 0.5,
            c1: 2.0,
            c2: 1.5,
        }
    }
}

/// Closed intervals each coefficient must stay within.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamBounds {
    pub w: (f64, f64),
    pub c1: (f64, f64),
    pub c2: (f64, f64),
}

impl Default for ParamBounds {
    fn default() -> Self {
        Self {
            w: (0.2, 0.9),
            c1: (0.5, 3.0),
            c2: (0.5, 3.0),
        }
    }
}

impl ParamBounds {
    pub fn contains(&self, p: &PsoParams) -> bool {
        let inside = |v: f64, (lo, hi): (f64, f64)| v.is_finite() && v >= lo && v <= hi;
        inside(p.w, self.w) && inside(p.c1, self.c1) && inside(p.c2, self.c2)
    }
}
