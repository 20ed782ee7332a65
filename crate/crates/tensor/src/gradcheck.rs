//! Central finite-difference gradient checking.
//!
//! The checker only ever evaluates the loss forward; it never touches the
//! tape's backward rules, so it is an independent oracle for them.

use rand::seq::index::sample;
use rand::Rng;

use crate::{ParamId, ParamSet, Result};

/// Step for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared on an absolute scale of this size.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn len(&self) -> usize {
        self.probes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probes.is_empty()
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the gradients already accumulated in `params` against central
/// differences of `loss` at up to `probes` randomly chosen scalars (all of
/// them when fewer exist).
pub fn check<R, F>(params: &ParamSet, probes: usize, rng: &mut R, mut loss: F) -> Result<GradCheckReport>
where
    R: Rng + ?Sized,
    F: FnMut(&ParamSet) -> Result<f64>,
{
    let mut offsets = Vec::with_capacity(params.len());
    let mut total = 0;
    for (_, _, t) in params.iter() {
        offsets.push(total);
        total += t.numel();
    }
    let chosen: Vec<usize> = if total <= probes {
        (0..total).collect()
    } else {
        let mut v = sample(rng, total, probes).into_vec();
        v.sort_unstable();
        v
    };
    let mut work = params.clone();
    let mut report = GradCheckReport::default();
    for flat in chosen {
        let p = offsets.partition_point(|&o| o <= flat) - 1;
        let id = ParamId(p);
        let index = flat - offsets[p];
        let analytic = params.get(id).grad().expect("parameters carry gradients")[index];
        let orig = work.get(id).data()[index];
        work.get_mut(id).data_mut()[index] = orig + FD_STEP;
        let up = loss(&work)?;
        work.get_mut(id).data_mut()[index] = orig - FD_STEP;
        let down = loss(&work)?;
        work.get_mut(id).data_mut()[index] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        report.probes.push(Probe {
            param: params.name(id).to_string(),
            index,
            analytic,
            numeric,
            rel_error: rel_error(analytic, numeric),
        });
    }
    Ok(report)
}
