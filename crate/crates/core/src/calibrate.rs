//! Calibration of the semiempirical coefficients (a, b, c) per beam.
//!
//! Each beam's coefficients are fitted independently by minimizing the sum of
//! squared log-transparency residuals over a set of reference measurements
//! (known material, known area density, measured α). The fit is a damped
//! Gauss–Newton iteration on log-coefficients, which keeps all three
//! coefficients strictly positive without constraints; the Jacobian is
//! evaluated by central differences and the 3×3 normal equations are solved
//! directly.
//!
//! Three measurements spanning three distinct materials are required; the
//! canonical design uses graphite, iron, and lead slabs at λ = 100 g/cm²,
//! which separate the photoelectric, Compton, and pair contributions well.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{Beam, ForwardModel, PairParams, SemiParams};
use crate::xsec::Attenuator;

/// Canonical calibration design: (z, λ in g/cm²) for graphite, iron, lead.
pub const CANONICAL_DESIGN: [(u32, f64); 3] = [(6, 100.0), (26, 100.0), (82, 100.0)];

/// Convergence threshold on the damped log-parameter step (max-norm).
const STEP_TOL: f64 = 1e-10;
/// Iteration cap for the Gauss–Newton loop.
const MAX_ITERATIONS: usize = 200;
/// Relative step for the central-difference Jacobian in log-parameter space.
const JACOBIAN_STEP: f64 = 1e-6;

/// One reference measurement: a slab of known composition and area density
/// together with the measured log transparencies in both beams.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationMeasurement {
    pub material: Attenuator,
    pub lambda_g_cm2: f64,
    pub alpha_h: f64,
    pub alpha_l: f64,
}

impl CalibrationMeasurement {
    fn validate(&self) -> Result<()> {
        if !self.lambda_g_cm2.is_finite() || self.lambda_g_cm2 < 0.0 {
            return Err(Error::NegativeValue(format!(
                "calibration area density {}",
                self.lambda_g_cm2
            )));
        }
        for (name, a) in [("alpha_h", self.alpha_h), ("alpha_l", self.alpha_l)] {
            if !a.is_finite() || a < 0.0 {
                return Err(Error::NegativeValue(format!("calibration {name} = {a}")));
            }
        }
        Ok(())
    }
}

/// Load calibration measurements from a JSON array.
pub fn load_measurements(path: impl AsRef<Path>) -> Result<Vec<CalibrationMeasurement>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let meas: Vec<CalibrationMeasurement> =
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
    Ok(meas)
}

/// Save calibration measurements as a JSON array.
pub fn save_measurements(
    meas: &[CalibrationMeasurement],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(meas).expect("measurement serialization");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Evaluate exact model log transparencies for a design of (material, λ)
/// pairs, producing synthetic calibration measurements.
pub fn synthesize_measurements(
    fm: &ForwardModel,
    design: &[(Attenuator, f64)],
) -> Result<Vec<CalibrationMeasurement>> {
    design
        .iter()
        .map(|(material, lambda)| {
            let layers = [(material.clone(), *lambda)];
            Ok(CalibrationMeasurement {
                material: material.clone(),
                lambda_g_cm2: *lambda,
                alpha_h: fm.alpha_heterogeneous(Beam::H, &layers)?,
                alpha_l: fm.alpha_heterogeneous(Beam::L, &layers)?,
            })
        })
        .collect()
}

/// Synthetic measurements on the canonical graphite/iron/lead design.
pub fn canonical_measurements(fm: &ForwardModel) -> Result<Vec<CalibrationMeasurement>> {
    let design: Vec<(Attenuator, f64)> = CANONICAL_DESIGN
        .iter()
        .map(|&(z, lambda)| (Attenuator::Element(z as f64), lambda))
        .collect();
    synthesize_measurements(fm, &design)
}

/// Per-measurement precomputation: raw attenuation components on the beam
/// grid plus the detected weights, so each trial evaluation is a single
/// fused quadrature.
struct BeamDesignRow {
    pe: Vec<f64>,
    cs: Vec<f64>,
    pp: Vec<f64>,
    lambda: f64,
    alpha: f64,
}

fn design_rows(
    fm: &ForwardModel,
    beam: Beam,
    meas: &[CalibrationMeasurement],
) -> Result<Vec<BeamDesignRow>> {
    let centers = fm.beam(beam).grid().centers().to_vec();
    meas.iter()
        .map(|m| {
            let mut pe = Vec::with_capacity(centers.len());
            let mut cs = Vec::with_capacity(centers.len());
            let mut pp = Vec::with_capacity(centers.len());
            for &e in &centers {
                let c = fm.lib().mu_attenuator(&m.material, e)?;
                pe.push(c.pe);
                cs.push(c.cs);
                pp.push(c.pp);
            }
            let alpha = match beam {
                Beam::H => m.alpha_h,
                Beam::L => m.alpha_l,
            };
            Ok(BeamDesignRow { pe, cs, pp, lambda: m.lambda_g_cm2, alpha })
        })
        .collect()
}

/// α̃ for one design row under trial coefficients; mirrors the forward
/// evaluation kernel's summation order so a perfect fit reproduces the
/// model's α exactly.
fn alpha_trial(row: &BeamDesignRow, q: &[f64], q_sum: f64, p: &SemiParams) -> f64 {
    let mut s0 = 0.0;
    for j in 0..q.len() {
        let mu = p.a * row.pe[j] + p.b * row.cs[j] + p.c * row.pp[j];
        s0 += q[j] * (-mu * row.lambda).exp();
    }
    -(s0 / q_sum).ln()
}

fn residuals(rows: &[BeamDesignRow], q: &[f64], q_sum: f64, u: &[f64; 3]) -> Vec<f64> {
    let p = SemiParams { a: u[0].exp(), b: u[1].exp(), c: u[2].exp() };
    rows.iter().map(|row| alpha_trial(row, q, q_sum, &p) - row.alpha).collect()
}

fn sse(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

/// Solve a 3×3 linear system by Gaussian elimination with partial pivoting.
fn solve3(a: [[f64; 3]; 3], b: [f64; 3]) -> Result<[f64; 3]> {
    let mut m = [[0.0f64; 4]; 3];
    let scale = a
        .iter()
        .flat_map(|row| row.iter())
        .fold(0.0f64, |acc, v| acc.max(v.abs()));
    for i in 0..3 {
        m[i][..3].copy_from_slice(&a[i]);
        m[i][3] = b[i];
    }
    for col in 0..3 {
        let pivot = (col..3)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .expect("non-empty range");
        if m[pivot][col].abs() <= 1e-14 * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::SingularJacobian);
        }
        m.swap(col, pivot);
        for row in col + 1..3 {
            let f = m[row][col] / m[col][col];
            for k in col..4 {
                m[row][k] -= f * m[col][k];
            }
        }
    }
    let mut x = [0.0f64; 3];
    for col in (0..3).rev() {
        let mut acc = m[col][3];
        for k in col + 1..3 {
            acc -= m[col][k] * x[k];
        }
        x[col] = acc / m[col][col];
    }
    Ok(x)
}

fn fit_beam(rows: &[BeamDesignRow], q: &[f64], q_sum: f64) -> Result<SemiParams> {
    let mut u = [0.0f64; 3];
    let mut r = residuals(rows, q, q_sum, &u);
    let mut current_sse = sse(&r);
    for _ in 0..MAX_ITERATIONS {
        // Central-difference Jacobian of the residual vector w.r.t. u.
        let n = rows.len();
        let mut jac = vec![[0.0f64; 3]; n];
        for k in 0..3 {
            let mut up = u;
            let mut um = u;
            up[k] += JACOBIAN_STEP;
            um[k] -= JACOBIAN_STEP;
            let rp = residuals(rows, q, q_sum, &up);
            let rm = residuals(rows, q, q_sum, &um);
            for i in 0..n {
                jac[i][k] = (rp[i] - rm[i]) / (2.0 * JACOBIAN_STEP);
            }
        }
        // Normal equations JᵀJ δ = −Jᵀr.
        let mut a = [[0.0f64; 3]; 3];
        let mut g = [0.0f64; 3];
        for i in 0..n {
            for p in 0..3 {
                g[p] -= jac[i][p] * r[i];
                for qq in 0..3 {
                    a[p][qq] += jac[i][p] * jac[i][qq];
                }
            }
        }
        let delta = solve3(a, g)?;

        // Backtracking damping: halve the step until the objective does not
        // increase.
        let mut t = 1.0;
        let (u_next, r_next, sse_next) = loop {
            let cand = [u[0] + t * delta[0], u[1] + t * delta[1], u[2] + t * delta[2]];
            let rc = residuals(rows, q, q_sum, &cand);
            let sc = sse(&rc);
            if sc <= current_sse || t < 1e-12 {
                break (cand, rc, sc);
            }
            t *= 0.5;
        };
        let step = delta.iter().fold(0.0f64, |acc, d| acc.max((t * d).abs()));
        if sse_next <= current_sse {
            u = u_next;
            r = r_next;
            current_sse = sse_next;
        }
        if step < STEP_TOL {
            let p = SemiParams { a: u[0].exp(), b: u[1].exp(), c: u[2].exp() };
            p.validate()?;
            return Ok(p);
        }
    }
    Err(Error::NonConvergence { what: "calibration fit", iterations: MAX_ITERATIONS })
}

/// Fit per-beam semiempirical coefficients from reference measurements.
///
/// The forward model supplies the cross-section library and beam pair; its
/// current coefficients are ignored. Requires at least three measurements
/// spanning at least three distinct materials.
pub fn fit_calibration(
    fm: &ForwardModel,
    meas: &[CalibrationMeasurement],
) -> Result<PairParams> {
    if meas.len() < 3 {
        return Err(Error::InsufficientCalibration(meas.len()));
    }
    for m in meas {
        m.validate()?;
    }
    let distinct: BTreeSet<String> = meas.iter().map(|m| m.material.describe()).collect();
    if distinct.len() < 3 {
        return Err(Error::InsufficientCalibration(distinct.len()));
    }

    let mut fitted = [SemiParams::unity(), SemiParams::unity()];
    for (slot, beam) in Beam::BOTH.iter().enumerate() {
        let rows = design_rows(fm, *beam, meas)?;
        let q = fm.beam(*beam).detected_weights();
        let q_sum = fm.beam(*beam).detected_sum();
        fitted[slot] = fit_beam(&rows, q, q_sum)?;
    }
    Ok(PairParams { h: fitted[0], l: fitted[1] })
}
