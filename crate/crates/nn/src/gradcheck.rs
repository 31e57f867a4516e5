//! Central finite-difference verification of [`Tape::backward`].

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::NnError;
use crate::param::ParamStore;
use crate::tape::{Mode, Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Coordinates sampled per parameter (all of them when smaller).
    pub max_coords: usize,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Denominator floor of the relative error, so that gradients at the
    /// level of finite-difference round-off are compared absolutely.
    pub abs_floor: f64,
    pub mode: Mode,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: 100,
            tolerance: 1e-4,
            abs_floor: 1e-6,
            mode: Mode::Train,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamReport {
    pub name: String,
    pub checked: usize,
    /// Coordinates skipped because the `±step` evaluations crossed a ReLU
    /// or max-pool kink.
    pub excluded_kinks: usize,
    /// Checked coordinates whose gradients were both below `abs_floor`.
    pub below_floor: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn total_checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic gradients of the scalar produced by `model_fn` with
/// central differences, on up to `max_coords` random coordinates of every
/// trainable parameter. Existing gradients in `store` are cleared.
pub fn finite_diff_check<F, E>(store: &mut ParamStore, model_fn: F, cfg: &GradCheckConfig) -> Result<GradCheckReport, E>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var, E>,
    E: From<NnError>,
{
    let eval = |store: &ParamStore| -> Result<(f64, Option<u64>), E> {
        let mut tape = Tape::new(cfg.mode).with_kink_tracking();
        let out = model_fn(store, &mut tape)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(NnError::NotScalar(tape.shape(out).to_vec()).into());
        }
        Ok((v[0], tape.kink_fingerprint()))
    };

    store.zero_grad();
    let mut tape = Tape::new(cfg.mode).with_kink_tracking();
    let loss = model_fn(store, &mut tape)?;
    let base_kinks = tape.kink_fingerprint();
    tape.backward(loss, store)?;
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut reports = Vec::new();
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let n = store.tensor(id).numel();
        let analytic: Vec<f64> = store
            .tensor(id)
            .grad()
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = if n <= cfg.max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, cfg.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let mut report = ParamReport {
            name: store.get(id).name.clone(),
            checked: 0,
            excluded_kinks: 0,
            below_floor: 0,
            max_rel_err: 0.0,
            passed: true,
        };
        for i in coords {
            let orig = store.tensor(id).data()[i];
            store.get_mut(id).tensor.data_mut()[i] = orig + cfg.step;
            let (fp, kp) = eval(store)?;
            store.get_mut(id).tensor.data_mut()[i] = orig - cfg.step;
            let (fm, km) = eval(store)?;
            store.get_mut(id).tensor.data_mut()[i] = orig;
            if kp != base_kinks || km != base_kinks {
                report.excluded_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * cfg.step);
            let err = relative_error(analytic[i], numeric, cfg.abs_floor);
            report.max_rel_err = report.max_rel_err.max(err);
            report.checked += 1;
            if analytic[i].abs().max(numeric.abs()) < cfg.abs_floor {
                report.below_floor += 1;
            }
        }
        report.passed = report.max_rel_err <= cfg.tolerance;
        reports.push(report);
    }
    Ok(GradCheckReport {
        tolerance: cfg.tolerance,
        params: reports,
    })
}
