//! Central finite-difference verification of analytic gradients.

use super::rng::RngStream;
use super::tensor::Tensor;
use crate::error::{GramError, Result};

#[derive(Clone, Debug)]
pub struct CheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Number of scalar coordinates sampled across all tensors.
    pub samples: usize,
    pub seed: u64,
    /// Denominator floor for the relative error, so coordinates whose true
    /// gradient is zero are judged by absolute error at that scale.
    pub floor: f64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig { step: 1e-3, tolerance: 1e-3, samples: 200, seed: 0, floor: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct CheckEntry {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub entries: Vec<CheckEntry>,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }

    pub fn worst(&self) -> Option<&CheckEntry> {
        self.entries.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` against central differences of `f` at `params`.
///
/// `f` must be a deterministic function of the parameters; it is evaluated
/// twice at the base point and a mismatch is reported as a usage error.
/// When there are fewer coordinates than `cfg.samples`, all are checked.
pub fn finite_diff_check(
    params: &mut [Tensor<f64>],
    analytic: &[Tensor<f64>],
    mut f: impl FnMut(&[Tensor<f64>]) -> Result<f64>,
    cfg: &CheckConfig,
) -> Result<CheckReport> {
    if params.len() != analytic.len() || params.iter().zip(analytic).any(|(p, g)| p.shape() != g.shape()) {
        return Err(GramError::config("analytic gradients do not match parameter shapes"));
    }
    let base = f(params)?;
    if base.to_bits() != f(params)?.to_bits() {
        return Err(GramError::usage("finite-difference check needs a deterministic function"));
    }

    let total: usize = params.iter().map(Tensor::len).sum();
    let coords: Vec<(usize, usize)> = if total <= cfg.samples {
        params.iter().enumerate().flat_map(|(t, p)| (0..p.len()).map(move |i| (t, i))).collect()
    } else {
        let mut rng = RngStream::new(cfg.seed, 0);
        let offsets: Vec<usize> = params
            .iter()
            .scan(0, |acc, p| {
                let o = *acc;
                *acc += p.len();
                Some(o)
            })
            .collect();
        (0..cfg.samples)
            .map(|_| {
                let flat = rng.below(total);
                let t = offsets.iter().rposition(|&o| o <= flat).expect("offset");
                (t, flat - offsets[t])
            })
            .collect()
    };

    let mut entries = Vec::with_capacity(coords.len());
    for (t, i) in coords {
        let orig = params[t].data()[i];
        params[t].data_mut()[i] = orig + cfg.step;
        let plus = f(params);
        params[t].data_mut()[i] = orig - cfg.step;
        let minus = f(params);
        params[t].data_mut()[i] = orig;
        let numeric = (plus? - minus?) / (2.0 * cfg.step);
        let a = analytic[t].data()[i];
        entries.push(CheckEntry { tensor: t, index: i, analytic: a, numeric, rel_err: relative_error(a, numeric, cfg.floor) });
    }
    let max_rel_err = entries.iter().map(|e| e.rel_err).fold(0.0, f64::max);
    Ok(CheckReport { entries, max_rel_err, tolerance: cfg.tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let mut p = vec![Tensor::new(vec![1], vec![3.0]).unwrap()];
        let g = vec![Tensor::new(vec![1], vec![6.0]).unwrap()];
        let report = finite_diff_check(&mut p, &g, |p| Ok(p[0].data()[0].powi(2)), &CheckConfig::default()).unwrap();
        assert!((report.entries[0].numeric - 6.0).abs() < 1e-4);
        assert!(report.passed());
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut p = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
        let g = vec![Tensor::zeros(&[3])];
        let report = finite_diff_check(&mut p, &g, |_| Ok(4.0), &CheckConfig::default()).unwrap();
        assert!(report.entries.iter().all(|e| e.numeric == 0.0 && e.analytic == 0.0));
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        let mut p = vec![Tensor::new(vec![1], vec![1.0]).unwrap()];
        let g = vec![Tensor::zeros(&[1])];
        let mut calls = 0.0;
        let out = finite_diff_check(
            &mut p,
            &g,
            |_| {
                calls += 1.0;
                Ok(calls)
            },
            &CheckConfig::default(),
        );
        assert!(matches!(out, Err(GramError::Usage(_))));
    }
}
