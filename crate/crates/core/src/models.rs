//! Root-cause belief, latency and token-cost models used by the policies.
//!
//! Distances are normalized: for an error at `e`, a rollback to `c` covers
//! `x = (e - c) / e` of the program and reaches every root cause whose
//! normalized distance `d` is below `x`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::proto::Offset;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("rollback point {c} is not before error offset {e}")]
    Domain { c: Offset, e: Offset },
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("invalid belief: {0}")]
    Belief(String),
}

/// Discrete distribution over normalized root-cause distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Belief {
    /// `(d_center, mass)`, centers strictly increasing in `[0, 1]`.
    bins: Vec<(f64, f64)>,
}

/// One row of a prior histogram file: the bin covers `(previous d_max, d_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub d_max: f64,
    pub mass: f64,
}

/// Masses of the built-in prior over ten equal-width bins, front-loaded
/// near the error with a long tail.
pub const DEFAULT_PRIOR_MASSES: [f64; 10] = [0.25, 0.15, 0.10, 0.08, 0.08, 0.08, 0.08, 0.06, 0.06, 0.06];

impl Belief {
    /// Builds a belief, normalizing the masses.
    pub fn new(bins: Vec<(f64, f64)>) -> Result<Self, ModelError> {
        if bins.is_empty() {
            return Err(ModelError::Belief("no bins".into()));
        }
        for w in bins.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(ModelError::Belief("bin centers must strictly increase".into()));
            }
        }
        if bins.iter().any(|(d, m)| !(0.0..=1.0).contains(d) || *m < 0.0 || !m.is_finite()) {
            return Err(ModelError::Belief("centers must lie in [0,1] and masses be non-negative".into()));
        }
        let total: f64 = bins.iter().map(|b| b.1).sum();
        if total <= 0.0 {
            return Err(ModelError::Belief("total mass is zero".into()));
        }
        Ok(Belief { bins: bins.into_iter().map(|(d, m)| (d, m / total)).collect() })
    }

    /// Equal-width histogram over `[0, 1]` with the given masses.
    pub fn equal_width(masses: &[f64]) -> Result<Self, ModelError> {
        let n = masses.len() as f64;
        Self::new(masses.iter().enumerate().map(|(i, m)| ((i as f64 + 0.5) / n, *m)).collect())
    }

    pub fn uniform(n: usize) -> Self {
        Self::equal_width(&vec![1.0; n.max(1)]).expect("uniform belief")
    }

    pub fn default_prior() -> Self {
        Self::equal_width(&DEFAULT_PRIOR_MASSES).expect("default prior")
    }

    /// Bins from histogram rows; each bin is centered in its interval.
    pub fn from_histogram(rows: &[HistogramRow]) -> Result<Self, ModelError> {
        let mut lo = 0.0;
        let mut bins = Vec::with_capacity(rows.len());
        for r in rows {
            if r.d_max <= lo || r.d_max > 1.0 {
                return Err(ModelError::Belief(format!("bad d_max {}", r.d_max)));
            }
            bins.push(((lo + r.d_max) / 2.0, r.mass));
            lo = r.d_max;
        }
        Self::new(bins)
    }

    /// Reads a JSON array of `{d_max, mass}` rows.
    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|e| ModelError::Belief(e.to_string()))?;
        let rows: Vec<HistogramRow> = serde_json::from_str(&text).map_err(|e| ModelError::Belief(e.to_string()))?;
        Self::from_histogram(&rows)
    }

    pub fn bins(&self) -> &[(f64, f64)] {
        &self.bins
    }

    pub fn masses(&self) -> Vec<f64> {
        self.bins.iter().map(|b| b.1).collect()
    }

    /// Π(x): mass of root causes with `d < x`.
    pub fn reach(&self, x: f64) -> f64 {
        self.bins.iter().filter(|(d, _)| *d < x).map(|b| b.1).sum()
    }

    pub fn total(&self) -> f64 {
        self.bins.iter().map(|b| b.1).sum()
    }
}

/// x(c, e) = (e − c) / e.
pub fn norm_distance(c: Offset, e: Offset) -> Result<f64, ModelError> {
    if c >= e {
        return Err(ModelError::Domain { c, e });
    }
    Ok((e - c) as f64 / e as f64)
}

/// q · Π(x(c, e)).
pub fn p_success(c: Offset, e: Offset, belief: &Belief, q: f64) -> Result<f64, ModelError> {
    Ok(q * belief.reach(norm_distance(c, e)?))
}

/// Posterior after a failed attempt that rolled back a fraction `x_f`.
pub fn cond_fail_x(belief: &Belief, x_f: f64, q: f64) -> Belief {
    let scaled: Vec<(f64, f64)> =
        belief.bins.iter().map(|&(d, m)| if d < x_f { (d, m * (1.0 - q)) } else { (d, m) }).collect();
    let total: f64 = scaled.iter().map(|b| b.1).sum();
    if total <= 0.0 {
        log::warn!("failure at x={x_f} with q={q} leaves no mass; collapsing to the deepest bin");
        let n = scaled.len();
        return Belief { bins: scaled.into_iter().enumerate().map(|(i, (d, _))| (d, if i + 1 == n { 1.0 } else { 0.0 })).collect() };
    }
    Belief { bins: scaled.into_iter().map(|(d, m)| (d, m / total)).collect() }
}

/// Posterior after a failed attempt from `c_f` against the error at `e`.
pub fn cond_fail(belief: &Belief, c_f: Offset, e: Offset, q: f64) -> Result<Belief, ModelError> {
    Ok(cond_fail_x(belief, norm_distance(c_f, e)?, q))
}

/// Generator and checker speed constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModelParams {
    /// Generator speed, bytes/s.
    pub s_g: f64,
    /// Generator startup delay, s.
    pub d_g: f64,
    /// Checker speed, bytes/s.
    pub s_c: f64,
    /// Checkpoint interval, bytes.
    pub f_c: f64,
    /// Stall per materialized checkpoint, s.
    pub l_s: f64,
    /// Checker startup overhead, s.
    pub d_c: f64,
    /// Success probability of an attempt that reaches the root cause.
    pub q: f64,
}

impl Default for CostModelParams {
    fn default() -> Self {
        CostModelParams { s_g: 179.0, d_g: 0.25, s_c: 3150.0, f_c: 256.0, l_s: 0.002, d_c: 0.01, q: 0.5 }
    }
}

impl CostModelParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |what: &str| Err(ModelError::Param(what.to_string()));
        if !(self.s_g > 0.0) || !(self.s_c > 0.0) {
            return bad("speeds must be positive");
        }
        if !(self.f_c > 0.0) {
            return bad("checkpoint interval must be positive");
        }
        if self.d_g < 0.0 || self.d_c < 0.0 || self.l_s < 0.0 {
            return bad("delays must be non-negative");
        }
        if !(self.q > 0.0 && self.q <= 1.0) {
            return bad("q must lie in (0, 1]");
        }
        Ok(())
    }

    /// L_G(n) = n / S_G + D_G.
    pub fn l_g(&self, n: f64) -> f64 {
        n / self.s_g + self.d_g
    }

    /// L_C(n) = n / S_C + L_S · n / f_C + D_C.
    pub fn l_c(&self, n: f64) -> f64 {
        n / self.s_c + self.l_s * n / self.f_c + self.d_c
    }

    /// L(c, e) = max(L_G(e − c), L_C(e − a_c)).
    pub fn latency(&self, c: Offset, e: Offset, a_c: Offset) -> Result<f64, ModelError> {
        check_span(c, e, a_c)?;
        Ok(self.l_g((e - c) as f64).max(self.l_c((e - a_c) as f64)))
    }

    /// C_T(c, e) = (e − c) + S_G · (L(c, e) − L_G(e − c)).
    pub fn token_cost(&self, c: Offset, e: Offset, a_c: Offset) -> Result<f64, ModelError> {
        let lat = self.latency(c, e, a_c)?;
        let n = (e - c) as f64;
        Ok(n + self.s_g * (lat - self.l_g(n)))
    }
}

fn check_span(c: Offset, e: Offset, a_c: Offset) -> Result<(), ModelError> {
    if c >= e {
        return Err(ModelError::Domain { c, e });
    }
    if a_c > c {
        return Err(ModelError::Param(format!("checkpoint {a_c} lies past rollback point {c}")));
    }
    Ok(())
}

/// The error a repair episode is currently targeting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorTarget {
    pub offset: Offset,
    pub category: String,
}

/// Whether `new` counts as progress past the current target.
pub fn is_top_level(new: &ErrorTarget, cur: Option<&ErrorTarget>, theta: u64, use_cat: bool) -> bool {
    let Some(cur) = cur else {
        return true;
    };
    let far = new.offset > cur.offset && new.offset - cur.offset > theta;
    far && (!use_cat || new.category != cur.category)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-9 * b.abs().max(1.0)
    }

    fn uniform4() -> Belief {
        Belief::new(vec![(0.125, 0.25), (0.375, 0.25), (0.625, 0.25), (0.875, 0.25)]).unwrap()
    }

    #[test]
    fn normalized_distance() {
        assert_eq!(norm_distance(0, 100).unwrap(), 1.0);
        assert!(close(norm_distance(60, 100).unwrap(), 0.4));
        assert!(norm_distance(100, 100).is_err());
    }

    #[test]
    fn success_probability() {
        assert!(close(p_success(50, 100, &uniform4(), 0.5).unwrap(), 0.25));
        assert!(close(p_success(0, 100, &uniform4(), 1.0).unwrap(), 1.0));
        let deep = Belief::new(vec![(0.5, 1.0)]).unwrap();
        assert_eq!(p_success(99, 100, &deep, 0.7).unwrap(), 0.0);
    }

    #[test]
    fn cond_fail_examples() {
        let post = cond_fail_x(&uniform4(), 0.5, 0.5);
        let want = [1.0 / 6.0, 1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0];
        for (m, w) in post.masses().iter().zip(want) {
            assert!(close(*m, w));
        }
        assert_eq!(cond_fail_x(&uniform4(), 0.5, 0.0), uniform4());
        assert_eq!(cond_fail_x(&uniform4(), 0.0, 0.5), uniform4());
    }

    #[test]
    fn cond_fail_with_no_surviving_mass() {
        let post = cond_fail_x(&uniform4(), 1.0, 1.0);
        assert_eq!(post.masses(), vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn latency_components() {
        let p = CostModelParams { s_g: 250.0, d_g: 0.2, s_c: 3000.0, f_c: 300.0, l_s: 0.05, d_c: 0.1, q: 0.5 };
        assert!(close(p.l_g(500.0), 2.2));
        assert!(close(p.l_c(900.0), 0.55));
        assert!(close(p.latency(500, 1000, 100).unwrap(), 2.2));
    }

    #[test]
    fn token_cost_examples() {
        let p = CostModelParams::default();
        let free = CostModelParams { s_c: 1e12, l_s: 0.0, d_c: 0.0, ..p };
        assert!(close(free.token_cost(600, 1000, 0).unwrap(), 400.0));
        let lag = CostModelParams { s_g: 400.0, d_g: 0.0, s_c: 500.0, l_s: 0.0, d_c: 0.0, ..p };
        assert!(close(lag.token_cost(600, 1000, 0).unwrap(), 800.0));
        assert!(close(free.token_cost(600, 1000, 600).unwrap(), 400.0));
    }

    #[test]
    fn top_level_rule() {
        let cur = ErrorTarget { offset: 100, category: "type_mismatch".into() };
        let t = |off, cat: &str| ErrorTarget { offset: off, category: cat.into() };
        assert!(is_top_level(&t(180, "syntax_error"), Some(&cur), 50, true));
        assert!(!is_top_level(&t(120, "syntax_error"), Some(&cur), 50, true));
        assert!(!is_top_level(&t(180, "type_mismatch"), Some(&cur), 50, true));
        assert!(is_top_level(&t(180, "type_mismatch"), Some(&cur), 50, false));
        assert!(is_top_level(&t(5, "x"), None, 50, true));
    }

    #[test]
    fn default_prior_shape() {
        let p = Belief::default_prior();
        assert!(close(p.total(), 1.0));
        assert_eq!(p.bins().len(), 10);
        assert!(close(p.bins()[0].0, 0.05));
        let u = Belief::uniform(5);
        assert!(u.masses().iter().all(|m| close(*m, 0.2)));
    }

    #[test]
    fn histogram_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prior.json");
        std::fs::write(&path, r#"[{"d_max":0.2,"mass":0.5},{"d_max":1.0,"mass":0.5}]"#).unwrap();
        let b = Belief::load(&path).unwrap();
        assert_eq!(b.bins(), &[(0.1, 0.5), (0.6, 0.5)]);
        assert!(Belief::from_histogram(&[HistogramRow { d_max: 0.5, mass: 0.0 }]).is_err());
    }
}
