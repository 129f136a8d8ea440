//! Central finite-difference gradient checking.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::scalar::Real;
use crate::tensor::{BitPattern, Tensor};

/// Which coordinates of the input to probe.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampling {
    All,
    /// `count` distinct coordinates drawn uniformly.
    Random { count: usize, seed: u64 },
    /// The `count` coordinates with the largest analytic gradient magnitude.
    ///
    /// Finite differences in `f32` have an absolute noise floor of roughly
    /// `eps * |f| / step`, so tiny gradients cannot be resolved to a relative
    /// tolerance; this picks coordinates where the comparison is meaningful.
    LargestGradient { count: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub sampling: Sampling,
}

impl GradCheckConfig {
    pub fn new(step: f64, tolerance: f64) -> Self {
        Self { step, tolerance, sampling: Sampling::All}
    }

    pub fn sampling(mut self, sampling: Sampling) -> Self {
        self.sampling = sampling;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    /// One-sided differences disagree at every step size: the function has a
    /// kink here and the analytic value is a subgradient.
    pub kink: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    /// Maximum relative error over checked, differentiable coordinates.
    pub max_rel_err: f64,
    pub pass: bool,
    pub coords: Vec<CoordCheck>,
}

impl CheckReport {
    pub fn kinks(&self) -> impl Iterator<Item = &CoordCheck> {
        self.coords.iter().filter(|c| c.kink)
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of the scalar `f(x)` with central differences.
///
/// `f` receives a fresh graph and the leaf holding `x`, and must return a
/// scalar node. It is evaluated twice at `x` first; differing values are
/// reported as [`Error::NonDeterministic`].
pub fn grad_check<S, F>(mut f: F, x: &Tensor<S>, cfg: &GradCheckConfig) -> Result<CheckReport>
where
    S: Real + BitPattern,
    F: FnMut(&mut Graph<S>, Var) -> Result<Var>,
{
    if !(cfg.step > 0.0) {
        return Err(Error::Config(alloc::format!("step must be positive, got {}", cfg.step)));
    }
    let mut g = Graph::new();
    let xv = g.param(x)?;
    let out = f(&mut g, xv)?;
    let f0 = g.scalar(out)?;
    g.backward(out)?;
    let analytic: Vec<f64> = g.grad(xv)?.iter().map(|v| v.as_f64()).collect();

    let mut eval = |data: &[S]| -> Result<S> {
        let mut g = Graph::new();
        let t = Tensor::new(x.shape().to_vec(), data.to_vec())?;
        let v = g.constant(&t)?;
        let out = f(&mut g, v)?;
        g.scalar(out)
    };
    let again = eval(x.data())?;
    if again.bits() != f0.bits() {
        return Err(Error::NonDeterministic { first: f0.as_f64(), second: again.as_f64() });
    }

    let coords = select(&analytic, cfg.sampling);
    let mut work = x.data().to_vec();
    let mut diff = |i: usize, h: f64, work: &mut Vec<S>| -> Result<(f64, f64, f64)> {
        let orig = work[i];
        let plus = orig + S::lit(h);
        let minus = orig - S::lit(h);
        work[i] = plus;
        let fp = eval(work)?.as_f64();
        work[i] = minus;
        let fm = eval(work)?.as_f64();
        work[i] = orig;
        // use the representable step, not the requested one
        Ok((fp, fm, (plus - orig).as_f64().max((orig - minus).as_f64()).max(f64::MIN_POSITIVE)))
    };

    let mut report = Vec::with_capacity(coords.len());
    let mut max_rel = 0.0f64;
    let base = f0.as_f64();
    for i in coords {
        let (fp, fm, h) = diff(i, cfg.step, &mut work)?;
        let numeric = (fp - fm) / (2.0 * h);
        let rel = relative_error(analytic[i], numeric);
        let mut kink = false;
        if rel >= cfg.tolerance {
            let gap = ((fp - base) - (base - fm)).abs() / h;
            let (fp2, fm2, h2) = diff(i, cfg.step / 2.0, &mut work)?;
            let gap2 = ((fp2 - base) - (base - fm2)).abs() / h2;
            let scale = ((fp - base) / h).abs().max(((base - fm) / h).abs()).max(1e-8);
            // smooth functions halve the one-sided gap when the step halves
            kink = gap > 0.1 * scale && gap2 > 0.75 * gap;
        }
        if !kink {
            max_rel = max_rel.max(rel);
        }
        report.push(CoordCheck { index: i, analytic: analytic[i], numeric, rel_err: rel, kink });
    }
    Ok(CheckReport { max_rel_err: max_rel, pass: max_rel < cfg.tolerance, coords: report })
}

fn select(analytic: &[f64], sampling: Sampling) -> Vec<usize> {
    let n = analytic.len();
    match sampling {
        Sampling::All => (0..n).collect(),
        Sampling::Random { count, seed } => {
            let mut idx: Vec<usize> = (0..n).collect();
            Rng::new(seed).shuffle(&mut idx);
            idx.truncate(count.min(n));
            idx
        }
        Sampling::LargestGradient { count } => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| analytic[b].abs().total_cmp(&analytic[a].abs()).then(a.cmp(&b)));
            idx.truncate(count.min(n));
            idx
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::<f64>::vector(vec![0.5, -1.0, 2.0]);
        let report = grad_check(
            |g, x| {
                let y = g.scale(x, 3.0)?;
                g.sum(y)
            },
            &x,
            &GradCheckConfig::new(1e-3, 1e-6),
        )
        .unwrap();
        assert!(report.pass);
        assert!(report.max_rel_err < 1e-9);
        assert_eq!(report.coords.len(), 3);
    }

    #[test]
    fn relu_kink_is_flagged_not_failed() {
        let x = Tensor::<f64>::vector(vec![0.0, 1.5]);
        let report = grad_check(
            |g, x| {
                let y = g.relu(x)?;
                g.sum(y)
            },
            &x,
            &GradCheckConfig::new(1e-3, 1e-6),
        )
        .unwrap();
        assert!(report.pass);
        let kinks: Vec<_> = report.kinks().map(|c| c.index).collect();
        assert_eq!(kinks, vec![0]);
    }

    #[test]
    fn quadratic_passes() {
        let x = Tensor::<f64>::vector(vec![0.3, -0.7]);
        let report = grad_check(
            |g, x| {
                let y = g.mul(x, x)?;
                g.sum(y)
            },
            &x,
            &GradCheckConfig::new(1e-5, 1e-6),
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
        assert_eq!(relative_error(1.0, 2.0), 0.5);
    }

    #[test]
    fn nondeterminism_detected() {
        let x = Tensor::<f64>::vector(vec![1.0]);
        let mut calls = 0.0;
        let err = grad_check(
            |g, x| {
                calls += 1.0;
                let y = g.scale(x, calls)?;
                g.sum(y)
            },
            &x,
            &GradCheckConfig::new(1e-3, 1e-3),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }

    #[test]
    fn sampling_modes() {
        let a = [0.1, -5.0, 0.0, 3.0];
        assert_eq!(select(&a, Sampling::LargestGradient { count: 2 }), vec![1, 3]);
        let r = select(&a, Sampling::Random { count: 3, seed: 1 });
        assert_eq!(r.len(), 3);
        assert_eq!(select(&a, Sampling::All).len(), 4);
    }
}
