//! Forward integration of learned models and the error metrics used to
//! judge them.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::form::SemiDiscreteForm;
use crate::learner::LearnedModel;
use crate::refsim::{SnapshotSet, Trajectory};

/// Max-norm beyond which a forecast is flagged as blown up.
pub const BLOWUP_GUARD: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    /// States up to (excluding) the step that crossed the guard.
    pub traj: Trajectory,
    pub blowup_step: Option<usize>,
}

impl Forecast {
    pub fn blew_up(&self) -> bool {
        self.blowup_step.is_some()
    }
}

/// Explicit Euler on `form`, the scheme used to generate training data.
pub fn integrate_form(form: &SemiDiscreteForm, u0: &[f64], dt: f64, steps: usize, guard: f64) -> Result<Forecast> {
    if !(dt > 0.0) {
        return Err(Error::config("dt_seconds", "time step must be positive"));
    }
    let n = form.n();
    if u0.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: u0.len(),
        });
    }
    let mut states: Vec<f64> = Vec::with_capacity(n * (steps + 1));
    let mut rhs: Vec<f64> = Vec::with_capacity(n * (steps + 1));
    let mut u = u0.to_vec();
    let mut f = vec![0.0; n];
    let mut blowup_step = None;
    for k in 0..=steps {
        if u.iter().any(|v| !v.is_finite() || v.abs() > guard) {
            blowup_step = Some(k);
            break;
        }
        form.rhs_into(&u, &mut f)?;
        states.extend_from_slice(&u);
        rhs.extend_from_slice(&f);
        if k < steps {
            for (ui, fi) in u.iter_mut().zip(&f) {
                *ui += dt * fi;
            }
        }
    }
    let nt = states.len() / n.max(1);
    Ok(Forecast {
        traj: Trajectory {
            times: (0..nt).map(|k| k as f64 * dt).collect(),
            states: DMatrix::from_vec(n, nt, states),
            rhs: DMatrix::from_vec(n, nt, rhs),
        },
        blowup_step,
    })
}

pub fn integrate_model(model: &LearnedModel, u0: &[f64], dt: f64, steps: usize) -> Result<Forecast> {
    integrate_form(&model.form()?, u0, dt, steps, BLOWUP_GUARD)
}

fn check_aligned(reference: &Trajectory, model: &Trajectory) -> Result<usize> {
    if reference.n_dofs() != model.n_dofs() {
        return Err(Error::Dimension {
            expected: reference.n_dofs(),
            got: model.n_dofs(),
        });
    }
    let k = model.n_times();
    if k > reference.n_times() {
        return Err(Error::Dimension {
            expected: reference.n_times(),
            got: k,
        });
    }
    for j in 0..k {
        let (a, b) = (reference.times[j], model.times[j]);
        if (a - b).abs() > 1e-9 * a.abs().max(1.0) {
            return Err(Error::InsufficientData(format!("time {j} differs: {a} vs {b}")));
        }
    }
    Ok(k)
}

/// `e_u(t) = |u - u^m|^2 / |u|^2` over the model's time steps; `None`
/// where the reference norm is zero.
pub fn relative_error_series(reference: &Trajectory, model: &Trajectory) -> Result<Vec<Option<f64>>> {
    let k = check_aligned(reference, model)?;
    Ok((0..k)
        .map(|j| {
            let (mut num, mut den) = (0.0, 0.0);
            for (u, um) in reference.state(j).iter().zip(model.state(j)) {
                num += (u - um) * (u - um);
                den += u * u;
            }
            (den > 0.0).then(|| num / den)
        })
        .collect())
}

/// `|U - U^m|_F / |U|_F` over the model's time steps.
pub fn frobenius_ratio(reference: &Trajectory, model: &Trajectory) -> Result<f64> {
    let k = check_aligned(reference, model)?;
    let (mut num, mut den) = (0.0, 0.0);
    for j in 0..k {
        for (u, um) in reference.state(j).iter().zip(model.state(j)) {
            num += (u - um) * (u - um);
            den += u * u;
        }
    }
    if den == 0.0 {
        return Err(Error::InsufficientData("reference trajectory is identically zero".into()));
    }
    Ok((num / den).sqrt())
}

/// Total space-time error over the full reference window; a blown-up or
/// truncated forecast is reported as infinite.
pub fn total_error(reference: &Trajectory, forecast: &Forecast) -> Result<f64> {
    if forecast.blew_up() || forecast.traj.n_times() < reference.n_times() {
        check_aligned(reference, &forecast.traj)?;
        return Ok(f64::INFINITY);
    }
    frobenius_ratio(reference, &forecast.traj)
}

/// Sum over snapshots and DOFs of `(udot - f^m(u))^2` on raw data.
pub fn training_error(snap: &SnapshotSet, model: &LearnedModel) -> Result<f64> {
    let form = model.form()?;
    training_error_form(snap, &form)
}

pub fn training_error_form(snap: &SnapshotSet, form: &SemiDiscreteForm) -> Result<f64> {
    let n = snap.n_dofs();
    let mut f = vec![0.0; n];
    let mut acc = 0.0;
    for j in 0..snap.n_times() {
        form.rhs_into(snap.traj.state(j), &mut f)?;
        for (i, fi) in f.iter().enumerate() {
            let r = snap.traj.rhs[(i, j)] - fi;
            acc += r * r;
        }
    }
    Ok(acc)
}

/// Mean coefficient per offset of block `block`, multiplied by `dx`.
pub fn averaged_stencil(model: &LearnedModel, block: usize, dx: f64) -> Result<Vec<f64>> {
    if model.grid.is_2d() {
        return Err(Error::InvalidGrid("averaged stencils are defined for 1-D models".into()));
    }
    let op = model.operators.get(block).ok_or(Error::Index {
        dof: block,
        n: model.operators.len(),
    })?;
    Ok(op.mean_row().values().map(|v| v * dx).collect())
}

pub fn max_state_norm(traj: &Trajectory) -> f64 {
    (0..traj.n_times())
        .map(|j| traj.state(j).iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub times: Vec<f64>,
    pub e_u: Vec<Option<f64>>,
    pub eps_xt: f64,
    pub e_train: f64,
    /// End of the training window; later times are extrapolation.
    pub train_end: f64,
    pub blowup_step: Option<usize>,
    /// `max_t |u^m(t)| / |u(0)|`.
    pub growth: f64,
}

/// Forecast `model` from the reference initial state across the whole
/// reference window and score it.
pub fn evaluate(model: &LearnedModel, reference: &SnapshotSet, training: &SnapshotSet) -> Result<(Forecast, ErrorReport)> {
    evaluate_with(model, reference, training, BLOWUP_GUARD)
}

/// [`evaluate`] with an explicit blow-up guard.
pub fn evaluate_with(
    model: &LearnedModel,
    reference: &SnapshotSet,
    training: &SnapshotSet,
    guard: f64,
) -> Result<(Forecast, ErrorReport)> {
    let steps = reference.n_times() - 1;
    let u0 = reference.traj.state(0);
    let forecast = integrate_form(&model.form()?, u0, reference.meta.dt, steps, guard)?;
    let e_u = relative_error_series(&reference.traj, &forecast.traj)?;
    let eps_xt = total_error(&reference.traj, &forecast)?;
    let e_train = training_error(training, model)?;
    let norm0 = u0.iter().map(|v| v * v).sum::<f64>().sqrt();
    let growth = if forecast.blew_up() {
        f64::INFINITY
    } else {
        max_state_norm(&forecast.traj) / norm0
    };
    let report = ErrorReport {
        times: forecast.traj.times.clone(),
        e_u,
        eps_xt,
        e_train,
        train_end: training.traj.times.last().copied().unwrap_or(0.0),
        blowup_step: forecast.blowup_step,
        growth,
    };
    Ok((forecast, report))
}
