//! Directive grammar, case-insensitive, plain decimals only:
//!
//! - `increase <p> by <x>` / `decrease <p> by <x>`
//! - `set <p> to <x>`
//! - `<p> = <x>`
//!
//! `<p>` is `w`, `c1` or `c_1`, `c2` or `c_2`. For each parameter the
//! earliest directive in the text wins.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::swarm::{ParamBounds, PsoParams};

const PARAM: &str = r"\$?(?P<p>w|c_?1|c_?2)\$?";
const NUMBER: &str = r"(?P<x>[+-]?(?:\d+(?:\.\d*)?|\.\d+))(?P<exp>[eE][+-]?\d+)?";

static PATTERNS: LazyLock<Vec<(Kind, Regex)>> = LazyLock::new(|| {
    let build = |body: String| Regex::new(&format!("(?i){body}")).expect("static pattern");
    vec![
        (Kind::Increase, build(format!(r"\bincrease\s+{PARAM}\s+by\s+{NUMBER}"))),
        (Kind::Decrease, build(format!(r"\bdecrease\s+{PARAM}\s+by\s+{NUMBER}"))),
        (Kind::Set, build(format!(r"\bset\s+{PARAM}\s+to\s+{NUMBER}"))),
        (Kind::Assign, build(format!(r"(?:^|[^a-z0-9_]){PARAM}\s*=\s*{NUMBER}"))),
    ]
});

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Increase,
    Decrease,
    Set,
    Assign,
}

/// A parsed instruction for one coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Directive {
    /// Add this amount.
    Shift(f64),
    /// Replace with this value.
    Set(f64),
}

impl Directive {
    pub fn delta(self, current: f64) -> f64 {
        match self {
            Directive::Shift(d) => d,
            Directive::Set(x) => x - current,
        }
    }

    pub fn apply(self, current: f64) -> f64 {
        match self {
            Directive::Shift(d) => current + d,
            Directive::Set(x) => x,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Advice {
    pub w: Option<Directive>,
    pub c1: Option<Directive>,
    pub c2: Option<Directive>,
    pub raw: String,
}

impl Advice {
    pub fn parsed_any(&self) -> bool {
        self.w.is_some() || self.c1.is_some() || self.c2.is_some()
    }

    /// `(dw, dc1, dc2)` relative to `current`; unparsed entries are zero.
    pub fn deltas(&self, current: &PsoParams) -> (f64, f64, f64) {
        let d = |dir: Option<Directive>, v: f64| dir.map_or(0.0, |x| x.delta(v));
        (d(self.w, current.w), d(self.c1, current.c1), d(self.c2, current.c2))
    }
}

/// Pure: the same text always yields the same advice.
pub fn parse_advice(response: &str, _current: &PsoParams) -> Advice {
    let mut best: [Option<(usize, Directive)>; 3] = [None, None, None];
    for (kind, re) in PATTERNS.iter() {
        for cap in re.captures_iter(response) {
            if cap.name("exp").is_some() {
                continue;
            }
            let p = cap.name("p").expect("group").as_str().to_ascii_lowercase();
            let slot = match p.as_str() {
                "w" => 0,
                "c1" | "c_1" => 1,
                _ => 2,
            };
            let Ok(x) = cap.name("x").expect("group").as_str().parse::<f64>() else {
                continue;
            };
            let dir = match kind {
                Kind::Increase => Directive::Shift(x),
                Kind::Decrease => Directive::Shift(-x),
                Kind::Set | Kind::Assign => Directive::Set(x),
            };
            let at = cap.name("p").expect("group").start();
            if best[slot].is_none_or(|(pos, _)| at < pos) {
                best[slot] = Some((at, dir));
            }
        }
    }
    Advice {
        w: best[0].map(|b| b.1),
        c1: best[1].map(|b| b.1),
        c2: best[2].map(|b| b.1),
        raw: response.to_string(),
    }
}

/// Applies every parsed directive, or none: if nothing parsed or any
/// resulting value leaves its bounds, `current` comes back unchanged.
pub fn apply_advice(current: &PsoParams, advice: &Advice, bounds: &ParamBounds) -> PsoParams {
    if !advice.parsed_any() {
        return *current;
    }
    let pick = |dir: Option<Directive>, v: f64| dir.map_or(v, |d| d.apply(v));
    let candidate = PsoParams {
        w: pick(advice.w, current.w),
        c1: pick(advice.c1, current.c1),
        c2: pick(advice.c2, current.c2),
    };
    if bounds.contains(&candidate) {
        candidate
    } else {
        *current
    }
}
