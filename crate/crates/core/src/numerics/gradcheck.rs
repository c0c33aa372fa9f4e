//! Central finite-difference check of autodiff gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamSet;
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Number of coordinates sampled; all coordinates when larger than the bundle.
    pub samples: usize,
    pub seed: u64,
    /// Denominator floor for the relative error.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            samples: 100,
            seed: 0,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// Compares `analytic` against central differences of `f` around `params`
/// on randomly sampled coordinates.
pub fn finite_diff_check<F>(
    f: F,
    params: &ParamSet,
    analytic: &ParamSet,
    tolerance: f64,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    params.check_same_layout(analytic)?;
    let mut coords: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(name, t)| (0..t.len()).map(move |i| (name.clone(), i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    coords.shuffle(&mut rng);
    coords.truncate(opts.samples);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        tolerance,
    };
    let mut probe = params.clone();
    for (name, i) in coords {
        let base = params.tensor(&name)?.data()[i];
        probe.get_mut(&name).expect("layout checked").data_mut()[i] = base + opts.step;
        let up = f(&probe)?;
        probe.get_mut(&name).expect("layout checked").data_mut()[i] = base - opts.step;
        let down = f(&probe)?;
        probe.get_mut(&name).expect("layout checked").data_mut()[i] = base;

        let numeric = (up - down) / (2.0 * opts.step);
        let exact = analytic.tensor(&name)?.data()[i];
        let denom = numeric.abs().max(exact.abs()).max(opts.floor);
        let err = (numeric - exact).abs() / denom;
        report.checked += 1;
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(err);
            report.worst = Some((name, i));
        }
    }
    Ok(report)
}
