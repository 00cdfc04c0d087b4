//! χ² reconstruction of per-pixel λ and per-segment Z from dual-energy
//! measurements, driven by the precomputed attenuation lookup tables.
//!
//! For a segment C of pixels with measurements (α_H,k, α_L,k) and
//! uncertainties (σ_H,k, σ_L,k), the objective at a shared atomic number Z is
//!
//! ```text
//! χ²(λ, Z) = Σ_k [ (α̃_H(λ_k,Z) − α_H,k)²/σ²_H,k + (α̃_L(λ_k,Z) − α_L,k)²/σ²_L,k ].
//! ```
//!
//! Pixels couple only through the shared Z, so the Hessian in λ is diagonal and
//! each λ_k is refined by an independent safeguarded Newton iteration using
//! tabulated ∂α̃/∂λ and ∂²α̃/∂λ². Z is swept exhaustively over 1..=100: a full
//! solve at Z = 1 seeds warm-started solves for Z ≥ 2 that almost always
//! accept a single Newton step (iteration continues only while the proposal
//! exceeds the sweep tolerance), the χ²(Z) profile is recorded, and its best
//! one or two strict local minima are polished and reported — two minima is
//! the dual-solution degeneracy of high-Z materials.
//!
//! The same machinery supports two-pass shield stripping (solve the shield
//! region, rebuild the forward model with the shield exponent folded into the
//! beam weights, solve the object region under the hardened tables) and
//! seeded noise ensembles with per-pixel median/σ statistics.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::forward::{
    build_lookup, AttenuationLookup, Beam, ForwardModel, LookupGrid, LookupRow, SATURATION_RATIO,
};
use crate::image::{
    DualEnergyImage, PlaneSet, FLAG_CENSORED, FLAG_CLAMPED, FLAG_NONCONVERGED, FLAG_SATURATED,
};
use crate::par;
use crate::phantom::{apply_noise, derive_subseed};
use crate::segment::{felzenszwalb_segment, SegmentLabelMap, SegmentParams};
use crate::xsec::{Attenuator, Z_MAX};

/// Per-pixel Newton convergence tolerance on |Δλ|, g/cm².
pub const NEWTON_TOL: f64 = 1e-6;
/// Iteration cap per pixel.
pub const NEWTON_MAX_ITERS: usize = 50;
/// Convergence tolerance on the Newton proposal for warm-started sweep
/// solves. Warm starts land within one step of the root almost everywhere,
/// so the sweep usually stops right after the first update; pixels whose
/// follow-up proposal still exceeds this keep iterating, which bounds the
/// sweep λ within 1e-4 g/cm² of full convergence everywhere.
pub const WARM_SWEEP_TOL: f64 = 5e-5;

/// α above which a pixel is censored (transparency at the saturation floor).
pub fn censor_alpha() -> f64 {
    -SATURATION_RATIO.ln()
}

/// Measurements of one segment, split into active pixels (solved) and
/// censored pixels (flagged, excluded from χ²).
#[derive(Debug, Clone)]
pub struct SegmentMeasurements {
    /// Image indices of active pixels, ascending.
    pub pixel_indices: Vec<u32>,
    pub alpha_h: Vec<f64>,
    pub alpha_l: Vec<f64>,
    pub inv_var_h: Vec<f64>,
    pub inv_var_l: Vec<f64>,
    /// Image indices of censored pixels with their censor flags.
    pub censored: Vec<(u32, u8)>,
}

impl SegmentMeasurements {
    /// Extract the given pixels from an image, censoring masked-out,
    /// non-finite, and saturated measurements.
    pub fn from_image(img: &DualEnergyImage, indices: &[u32]) -> SegmentMeasurements {
        let cutoff = censor_alpha();
        let mut m = SegmentMeasurements {
            pixel_indices: Vec::with_capacity(indices.len()),
            alpha_h: Vec::with_capacity(indices.len()),
            alpha_l: Vec::with_capacity(indices.len()),
            inv_var_h: Vec::with_capacity(indices.len()),
            inv_var_l: Vec::with_capacity(indices.len()),
            censored: Vec::new(),
        };
        for &idx in indices {
            let i = idx as usize;
            let (ah, al) = (img.alpha_h[i], img.alpha_l[i]);
            if img.mask[i] == 0 || !ah.is_finite() || !al.is_finite() {
                m.censored.push((idx, FLAG_CENSORED));
                continue;
            }
            if ah > cutoff || al > cutoff {
                m.censored.push((idx, FLAG_CENSORED | FLAG_SATURATED));
                continue;
            }
            m.pixel_indices.push(idx);
            m.alpha_h.push(ah);
            m.alpha_l.push(al);
            m.inv_var_h.push(1.0 / (img.sigma_h[i] * img.sigma_h[i]));
            m.inv_var_l.push(1.0 / (img.sigma_l[i] * img.sigma_l[i]));
        }
        m
    }

    pub fn n_active(&self) -> usize {
        self.pixel_indices.len()
    }

    pub fn n_total(&self) -> usize {
        self.pixel_indices.len() + self.censored.len()
    }

    /// Subtract fixed per-beam α offsets (shield stripping pass 2). The
    /// result may be negative for thin objects under noise; the solver then
    /// clamps λ to 0 and flags the pixel.
    pub fn with_offsets(&self, offset_h: f64, offset_l: f64) -> SegmentMeasurements {
        let mut m = self.clone();
        for v in &mut m.alpha_h {
            *v -= offset_h;
        }
        for v in &mut m.alpha_l {
            *v -= offset_l;
        }
        m
    }
}

/// Pixel indices of a half-open rectangle [x0, x1) × [y0, y1).
pub fn rect_region(width: usize, height: usize, rect: (usize, usize, usize, usize)) -> Vec<u32> {
    let (x0, y0, x1, y1) = rect;
    let (x1, y1) = (x1.min(width), y1.min(height));
    let mut out = Vec::new();
    for y in y0..y1 {
        for x in x0..x1 {
            out.push((y * width + x) as u32);
        }
    }
    out
}

/// χ² of a segment at fixed integer `z` and per-active-pixel `lambdas`.
pub fn chi2(
    lookup: &AttenuationLookup,
    meas: &SegmentMeasurements,
    lambdas: &[f64],
    z: u32,
) -> Result<f64> {
    if lambdas.len() != meas.n_active() {
        return Err(Error::InvalidImage(format!(
            "{} lambdas for {} active pixels",
            lambdas.len(),
            meas.n_active()
        )));
    }
    let row_h = lookup.row(Beam::H, z)?;
    let row_l = lookup.row(Beam::L, z)?;
    let mut sum = 0.0;
    for k in 0..lambdas.len() {
        let lam = lambdas[k];
        if !lam.is_finite() || lam < 0.0 || lam > lookup.grid.lambda_max {
            return Err(Error::OutOfRange {
                what: "lambda",
                value: lam,
                min: 0.0,
                max: lookup.grid.lambda_max,
            });
        }
        let rh = row_h.alpha(lam) - meas.alpha_h[k];
        let rl = row_l.alpha(lam) - meas.alpha_l[k];
        sum += rh * rh * meas.inv_var_h[k] + rl * rl * meas.inv_var_l[k];
    }
    Ok(sum)
}

/// Per-pixel analytic gradient and (diagonal) Hessian of χ² at the state:
/// `g_k = ∂χ²/∂λ_k`, `h_k = ∂²χ²/∂λ_k²`. Cross terms are identically zero
/// because the objective is a sum of per-pixel terms.
pub fn chi2_gradient_hessian(
    lookup: &AttenuationLookup,
    meas: &SegmentMeasurements,
    lambdas: &[f64],
    z: u32,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if lambdas.len() != meas.n_active() {
        return Err(Error::InvalidImage(format!(
            "{} lambdas for {} active pixels",
            lambdas.len(),
            meas.n_active()
        )));
    }
    let row_h = lookup.row(Beam::H, z)?;
    let row_l = lookup.row(Beam::L, z)?;
    let mut g = Vec::with_capacity(lambdas.len());
    let mut h = Vec::with_capacity(lambdas.len());
    for k in 0..lambdas.len() {
        let lam = lambdas[k];
        if !lam.is_finite() || lam < 0.0 || lam > lookup.grid.lambda_max {
            return Err(Error::OutOfRange {
                what: "lambda",
                value: lam,
                min: 0.0,
                max: lookup.grid.lambda_max,
            });
        }
        let (ah, d1h, d2h) = row_h.eval3(lam);
        let (al, d1l, d2l) = row_l.eval3(lam);
        let rh = ah - meas.alpha_h[k];
        let rl = al - meas.alpha_l[k];
        let (ivh, ivl) = (meas.inv_var_h[k], meas.inv_var_l[k]);
        g.push(2.0 * (rh * d1h * ivh + rl * d1l * ivl));
        h.push(2.0 * ((d1h * d1h + rh * d2h) * ivh + (d1l * d1l + rl * d2l) * ivl));
    }
    Ok((g, h))
}

/// One pixel's objective derivatives at λ: (gradient, full curvature,
/// Gauss-Newton curvature). The GN part is strictly positive (d1 > 0 on the
/// whole table) and backs the Newton step wherever the full curvature loses
/// positivity far from the solution.
#[inline]
fn pixel_state(
    row_h: &LookupRow<'_>,
    row_l: &LookupRow<'_>,
    ah: f64,
    al: f64,
    ivh: f64,
    ivl: f64,
    lam: f64,
) -> (f64, f64, f64) {
    let (mh, d1h, d2h) = row_h.eval3(lam);
    let (ml, d1l, d2l) = row_l.eval3(lam);
    let rh = mh - ah;
    let rl = ml - al;
    let g = 2.0 * (rh * d1h * ivh + rl * d1l * ivl);
    let gn = 2.0 * (d1h * d1h * ivh + d1l * d1l * ivl);
    let h = gn + 2.0 * (rh * d2h * ivh + rl * d2l * ivl);
    (g, h, gn)
}

/// Safeguarded Newton minimization of one pixel's χ² term in λ, cast as a
/// bracketed root-find on the gradient: χ² is strictly convex in λ, so g is
/// increasing with at most one root in [0, λmax]. Each iterate tightens a
/// sign bracket and Newton proposals leaving it fall back to bisection, so
/// the iteration cannot stall or cycle.
///
/// Returns (λ, flags, iterations used). `single_step` stops at the relaxed
/// [`WARM_SWEEP_TOL`] instead of [`NEWTON_TOL`]: a good warm start then
/// accepts exactly one Newton update, while pixels the single step cannot
/// finish keep iterating until the proposal is small.
#[allow(clippy::too_many_arguments)]
fn newton_pixel(
    row_h: &LookupRow<'_>,
    row_l: &LookupRow<'_>,
    ah: f64,
    al: f64,
    ivh: f64,
    ivl: f64,
    lambda_max: f64,
    init: f64,
    single_step: bool,
) -> (f64, u8, usize) {
    let tol = if single_step { WARM_SWEEP_TOL } else { NEWTON_TOL };
    let mut lam = init.clamp(0.0, lambda_max);
    let (mut lo, mut hi) = (0.0f64, lambda_max);
    let (mut g, mut h, mut gn) = pixel_state(row_h, row_l, ah, al, ivh, ivl, lam);
    let mut flags = 0u8;
    let mut iters = 0usize;
    let mut converged = false;
    loop {
        let curv = if h > 0.0 { h } else { gn };
        let step = if curv > 0.0 { -g / curv } else { 0.0 };
        if !step.is_finite() || step.abs() <= tol {
            converged = true;
            break;
        }
        if g > 0.0 {
            hi = lam;
        } else {
            lo = lam;
        }
        if hi - lo <= NEWTON_TOL {
            // The root lies outside [0, λmax] (bound-pinned pixel) or the
            // bracket has collapsed onto it.
            converged = true;
            break;
        }
        if iters >= NEWTON_MAX_ITERS {
            break;
        }
        iters += 1;
        let mut cand = lam + step;
        if !(cand > lo && cand < hi) {
            cand = 0.5 * (lo + hi);
        }
        lam = cand;
        let s = pixel_state(row_h, row_l, ah, al, ivh, ivl, lam);
        g = s.0;
        h = s.1;
        gn = s.2;
    }
    if !converged {
        flags |= FLAG_NONCONVERGED;
    }
    // Pinned against a bound: the iterate sits within a collapsed bracket of
    // the table edge with the gradient still pointing outside, so the true
    // root lies beyond [0, λmax] and this λ is a constraint artifact, not a
    // stationary point.
    const GRAD_EPS: f64 = 1e-12;
    let edge = 2.0 * NEWTON_TOL;
    if (lam <= edge && g > GRAD_EPS) || (lam >= lambda_max - edge && g < -GRAD_EPS) {
        flags |= FLAG_CLAMPED;
    }
    (lam, flags, iters)
}

/// Result of [`newton_lambda`]: converged per-active-pixel λ with flags.
#[derive(Debug, Clone)]
pub struct NewtonResult {
    pub lambdas: Vec<f64>,
    pub flags: Vec<u8>,
    /// Maximum Newton iterations used by any pixel.
    pub max_iterations: usize,
}

/// Fully-converged per-pixel Newton λ estimates at fixed `z` from the given
/// initial values (which must lie inside the table range).
pub fn newton_lambda(
    lookup: &AttenuationLookup,
    meas: &SegmentMeasurements,
    z: u32,
    init: &[f64],
) -> Result<NewtonResult> {
    if init.len() != meas.n_active() {
        return Err(Error::InvalidImage(format!(
            "{} initial lambdas for {} active pixels",
            init.len(),
            meas.n_active()
        )));
    }
    let row_h = lookup.row(Beam::H, z)?;
    let row_l = lookup.row(Beam::L, z)?;
    let lambda_max = lookup.grid.lambda_max;
    let mut out = NewtonResult {
        lambdas: Vec::with_capacity(init.len()),
        flags: Vec::with_capacity(init.len()),
        max_iterations: 0,
    };
    for k in 0..init.len() {
        let l0 = init[k];
        if !l0.is_finite() || l0 < 0.0 || l0 > lambda_max {
            return Err(Error::OutOfRange { what: "lambda", value: l0, min: 0.0, max: lambda_max });
        }
        let (lam, flags, iters) = newton_pixel(
            &row_h,
            &row_l,
            meas.alpha_h[k],
            meas.alpha_l[k],
            meas.inv_var_h[k],
            meas.inv_var_l[k],
            lambda_max,
            l0,
            false,
        );
        out.lambdas.push(lam);
        out.flags.push(flags);
        out.max_iterations = out.max_iterations.max(iters);
    }
    Ok(out)
}

/// Thin-target initial guess at `z`: λ₀ = α_H / (∂α̃_H/∂λ)(0, z), which is
/// exact as λ → 0 and starts below the root because α̃ is concave in λ.
fn init_lambda(lookup: &AttenuationLookup, meas: &SegmentMeasurements, z: u32) -> Result<Vec<f64>> {
    let row_h = lookup.row(Beam::H, z)?;
    let d1_0 = row_h.eval3(0.0).1;
    let lambda_max = lookup.grid.lambda_max;
    Ok(meas.alpha_h.iter().map(|&ah| (ah.max(0.0) / d1_0).clamp(0.0, lambda_max)).collect())
}

/// Sweep z = 1..=100: full Newton at z = 1, then warm-started solves.
/// Calls `visit(z, lambdas, flags, chi2_z)` after each z; χ² excludes
/// non-converged pixels (censored from the sum, flagged in output).
fn sweep<F: FnMut(u32, &[f64], &[u8], f64)>(
    lookup: &AttenuationLookup,
    meas: &SegmentMeasurements,
    single_step: bool,
    mut visit: F,
) -> Result<()> {
    let n = meas.n_active();
    let lambda_max = lookup.grid.lambda_max;
    let mut lambdas = init_lambda(lookup, meas, 1)?;
    let mut flags = vec![0u8; n];
    for z in 1..=Z_MAX {
        let row_h = lookup.row(Beam::H, z)?;
        let row_l = lookup.row(Beam::L, z)?;
        let mut chi = 0.0;
        let mut any = false;
        for k in 0..n {
            let (lam, fl, _) = newton_pixel(
                &row_h,
                &row_l,
                meas.alpha_h[k],
                meas.alpha_l[k],
                meas.inv_var_h[k],
                meas.inv_var_l[k],
                lambda_max,
                lambdas[k],
                single_step && z > 1,
            );
            lambdas[k] = lam;
            flags[k] = fl;
            if fl & FLAG_NONCONVERGED == 0 {
                let rh = row_h.alpha(lam) - meas.alpha_h[k];
                let rl = row_l.alpha(lam) - meas.alpha_l[k];
                chi += rh * rh * meas.inv_var_h[k] + rl * rl * meas.inv_var_l[k];
                any = true;
            }
        }
        let chi = if any { chi } else { f64::INFINITY };
        visit(z, &lambdas, &flags, chi);
    }
    Ok(())
}

/// Per-z λ snapshots of the sweep, for warm-start diagnostics: element `z−1`
/// holds the per-active-pixel λ after solving atomic number `z`.
pub fn sweep_lambdas(
    lookup: &AttenuationLookup,
    meas: &SegmentMeasurements,
    single_step: bool,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(Z_MAX as usize);
    sweep(lookup, meas, single_step, |_z, lams, _flags, _chi| out.push(lams.to_vec()))?;
    Ok(out)
}

/// One reported (Z, λ, χ²) solution of a segment.
#[derive(Debug, Clone)]
pub struct ZSolution {
    pub z: u32,
    /// Total χ² over converged active pixels.
    pub chi2: f64,
    /// Per-active-pixel λ, aligned with `SegmentMeasurements::pixel_indices`.
    pub lambdas: Vec<f64>,
    /// Per-active-pixel χ² contributions.
    pub chi2_pixels: Vec<f64>,
    /// Per-active-pixel solver flags.
    pub flags: Vec<u8>,
}

/// Solutions of one segment: the best one or two strict local minima of the
/// χ²(Z) profile, ascending in Z.
#[derive(Debug, Clone)]
pub struct SegmentSolution {
    pub solutions: Vec<ZSolution>,
    pub degenerate: bool,
    /// χ²(z) for z = 1..=100 from the warm-started sweep.
    pub chi2_profile: Vec<f64>,
}

/// Indices (0-based) of strict local minima of `profile`, boundaries
/// included with one-sided comparison. Useful for checking the at-most-two-
/// minima property of χ²(Z) profiles.
pub fn strict_local_minima(profile: &[f64]) -> Vec<usize> {
    let n = profile.len();
    let mut out = Vec::new();
    for i in 0..n {
        let below_prev = i == 0 || profile[i] < profile[i - 1];
        let below_next = i + 1 == n || profile[i] < profile[i + 1];
        if below_prev && below_next {
            out.push(i);
        }
    }
    out
}

/// Interior strict local minima only: both neighbors exist and are strictly
/// greater. A one-sided dip at z = 1 or z = 100 is a domain edge, not a
/// solution-degeneracy signature — the residual never changes sign there —
/// so edges qualify only through the global argmin.
fn interior_strict_minima(profile: &[f64]) -> Vec<usize> {
    let n = profile.len();
    (1..n.saturating_sub(1))
        .filter(|&i| profile[i] < profile[i - 1] && profile[i] < profile[i + 1])
        .collect()
}

/// Fully solve one z: fresh thin-target init, converged Newton, χ² pieces.
fn solve_at_z(
    lookup: &AttenuationLookup,
    meas: &SegmentMeasurements,
    z: u32,
) -> Result<ZSolution> {
    let init = init_lambda(lookup, meas, z)?;
    let newton = newton_lambda(lookup, meas, z, &init)?;
    let row_h = lookup.row(Beam::H, z)?;
    let row_l = lookup.row(Beam::L, z)?;
    let mut chi2_pixels = Vec::with_capacity(meas.n_active());
    let mut total = 0.0;
    for k in 0..meas.n_active() {
        let lam = newton.lambdas[k];
        let rh = row_h.alpha(lam) - meas.alpha_h[k];
        let rl = row_l.alpha(lam) - meas.alpha_l[k];
        let term = rh * rh * meas.inv_var_h[k] + rl * rl * meas.inv_var_l[k];
        chi2_pixels.push(term);
        if newton.flags[k] & FLAG_NONCONVERGED == 0 {
            total += term;
        }
    }
    Ok(ZSolution { z, chi2: total, lambdas: newton.lambdas, chi2_pixels, flags: newton.flags })
}

/// Estimate the shared Z (one or two candidates) and per-pixel λ of one
/// segment by the warm-started exhaustive sweep.
pub fn solve_segment(
    lookup: &AttenuationLookup,
    meas: &SegmentMeasurements,
) -> Result<SegmentSolution> {
    if meas.n_active() == 0 {
        return Err(Error::EmptySegment);
    }
    let mut profile = Vec::with_capacity(Z_MAX as usize);
    sweep(lookup, meas, true, |_z, _lams, _flags, chi| profile.push(chi))?;

    let argmin = profile
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).expect("finite or inf chi2"))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let mut candidates = interior_strict_minima(&profile);
    if !candidates.contains(&argmin) {
        // Edge or plateau global optimum joins the candidate set.
        candidates.push(argmin);
    }
    // Keep the best two by χ², report ascending in z.
    candidates.sort_by(|&a, &b| {
        profile[a].partial_cmp(&profile[b]).expect("comparable chi2").then(a.cmp(&b))
    });
    candidates.truncate(2);
    candidates.sort_unstable();

    let mut solutions = Vec::with_capacity(candidates.len());
    for zi in candidates {
        solutions.push(solve_at_z(lookup, meas, (zi + 1) as u32)?);
    }
    // A χ²(z) dip where every pixel's λ is pinned against the table edge is
    // a boundary artifact (the stack is out of table range at that z), not a
    // model explanation of the data; drop such candidates unless nothing
    // else survives.
    let pinned =
        |s: &ZSolution| s.flags.iter().all(|&f| f & FLAG_CLAMPED != 0);
    if solutions.iter().any(|s| !pinned(s)) {
        solutions.retain(|s| !pinned(s));
    }
    let degenerate = solutions.len() == 2;
    Ok(SegmentSolution { solutions, degenerate, chi2_profile: profile })
}

/// Per-segment outcome within a full-image reconstruction.
#[derive(Debug, Clone)]
pub struct SegmentOutcome {
    pub label: u32,
    pub n_pixels: usize,
    pub n_censored: usize,
    pub measurements: SegmentMeasurements,
    pub solution: SegmentSolution,
}

/// Full-image reconstruction: label map, per-segment solutions, and the
/// assembled display planes (lower-Z solution convention).
#[derive(Debug, Clone)]
pub struct ReconResult {
    pub width: usize,
    pub height: usize,
    pub pixel_pitch_cm: f64,
    pub model_hash: String,
    pub labels: SegmentLabelMap,
    pub segments: Vec<SegmentOutcome>,
    pub lambda: Vec<f64>,
    pub z_low: Vec<f64>,
    /// NaN where the segment solution is unique.
    pub z_high: Vec<f64>,
    pub chi2: Vec<f64>,
    pub flags: Vec<u8>,
}

/// JSON-facing per-solution summary.
#[derive(Debug, Clone, Serialize)]
pub struct SolutionReport {
    pub z: u32,
    pub chi2: f64,
    pub mean_lambda: f64,
}

/// JSON-facing per-segment summary.
#[derive(Debug, Clone, Serialize)]
pub struct SegmentReport {
    pub label: u32,
    pub n_pixels: usize,
    pub n_censored: usize,
    pub degenerate: bool,
    pub solutions: Vec<SolutionReport>,
}

impl ReconResult {
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-segment JSON report entries, ascending by label.
    pub fn report(&self) -> Vec<SegmentReport> {
        self.segments
            .iter()
            .map(|seg| SegmentReport {
                label: seg.label,
                n_pixels: seg.n_pixels,
                n_censored: seg.n_censored,
                degenerate: seg.solution.degenerate,
                solutions: seg
                    .solution
                    .solutions
                    .iter()
                    .map(|s| SolutionReport {
                        z: s.z,
                        chi2: s.chi2,
                        mean_lambda: if s.lambdas.is_empty() {
                            f64::NAN
                        } else {
                            s.lambdas.iter().sum::<f64>() / s.lambdas.len() as f64
                        },
                    })
                    .collect(),
            })
            .collect()
    }

    /// Assembled planes in the shared binary container.
    pub fn to_planes(&self) -> PlaneSet {
        let mut ps = PlaneSet::new(self.width, self.height, self.pixel_pitch_cm);
        ps.push_plane("lambda", self.lambda.clone()).expect("plane size");
        ps.push_plane("z_low", self.z_low.clone()).expect("plane size");
        ps.push_plane("z_high_or_nan", self.z_high.clone()).expect("plane size");
        ps.push_plane("chi2_per_pixel", self.chi2.clone()).expect("plane size");
        ps.push_plane("flags", self.flags.iter().map(|&f| f as f64).collect())
            .expect("plane size");
        ps.push_plane("labels", self.labels.labels.iter().map(|&l| l as f64).collect())
            .expect("plane size");
        ps.meta.insert("model_hash".into(), self.model_hash.clone());
        ps.meta.insert("n_segments".into(), self.segments.len().to_string());
        ps
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_planes().save(path)
    }
}

/// Reconstruct every segment of a labeled image against the lookup tables.
pub fn reconstruct(
    img: &DualEnergyImage,
    lookup: &AttenuationLookup,
    labels: &SegmentLabelMap,
) -> Result<ReconResult> {
    img.validate()?;
    if labels.width != img.width || labels.height != img.height {
        return Err(Error::GridMismatch(format!(
            "label map {}x{} vs image {}x{}",
            labels.width, labels.height, img.width, img.height
        )));
    }
    let n_seg = labels.n_segments();
    let meas: Vec<SegmentMeasurements> = (0..n_seg)
        .map(|l| SegmentMeasurements::from_image(img, labels.pixels_of(l as u32)))
        .collect();
    let solved: Vec<Result<SegmentSolution>> =
        par::map_indexed(n_seg, |s| solve_segment(lookup, &meas[s]));

    let n = img.len();
    let mut out = ReconResult {
        width: img.width,
        height: img.height,
        pixel_pitch_cm: img.pixel_pitch_cm,
        model_hash: lookup.model_hash.clone(),
        labels: labels.clone(),
        segments: Vec::with_capacity(n_seg),
        lambda: vec![f64::NAN; n],
        z_low: vec![f64::NAN; n],
        z_high: vec![f64::NAN; n],
        chi2: vec![f64::NAN; n],
        flags: vec![0u8; n],
    };
    for (label, (m, sol)) in meas.into_iter().zip(solved).enumerate() {
        let sol = sol?;
        let display = &sol.solutions[0];
        let z_low = display.z as f64;
        let z_high = if sol.degenerate { sol.solutions[1].z as f64 } else { f64::NAN };
        for k in 0..m.n_active() {
            let i = m.pixel_indices[k] as usize;
            out.lambda[i] = display.lambdas[k];
            out.chi2[i] = display.chi2_pixels[k];
            out.flags[i] = display.flags[k];
            out.z_low[i] = z_low;
            out.z_high[i] = z_high;
        }
        for &(idx, fl) in &m.censored {
            let i = idx as usize;
            out.flags[i] = fl;
            out.z_low[i] = z_low;
            out.z_high[i] = z_high;
        }
        out.segments.push(SegmentOutcome {
            label: label as u32,
            n_pixels: m.n_total(),
            n_censored: m.censored.len(),
            measurements: m,
            solution: sol,
        });
    }
    Ok(out)
}

/// Pass-1 shield estimate.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ShieldEstimate {
    pub lambda_shield: f64,
    pub z_shield: u32,
}

/// Two-pass shield-stripping outcome: the shield estimate, its pass-1
/// solution, the α offsets folded out, and pass-2 object solutions (one per
/// requested region) under the hardened tables.
#[derive(Debug, Clone)]
pub struct StrippedSolution {
    pub shield: ShieldEstimate,
    pub shield_solution: SegmentSolution,
    pub alpha_offset_h: f64,
    pub alpha_offset_l: f64,
    pub object_measurements: Vec<SegmentMeasurements>,
    pub object_solutions: Vec<SegmentSolution>,
}

/// Two-pass shield stripping over any number of object regions sharing one
/// shield region.
///
/// Pass 1 solves the shield region with the plain tables; λ_shield is the
/// mean converged λ over its active pixels and Z_shield the best-χ² solution.
/// Pass 2 folds exp(−μ̃(E, Z_shield)·λ_shield) into the beam weights, builds
/// fresh tables for the hardened model on `pass2_grid`, subtracts the
/// shield-only α offsets from the object measurements, and solves each
/// object region. Negative stripped λ clamps to 0 with a flag.
pub fn strip_shield_reconstruct_many(
    img: &DualEnergyImage,
    fm: &ForwardModel,
    lookup: &AttenuationLookup,
    pass2_grid: LookupGrid,
    shield_region: &[u32],
    object_regions: &[Vec<u32>],
) -> Result<StrippedSolution> {
    if shield_region.is_empty() {
        return Err(Error::EmptySegment);
    }
    let shield_set: std::collections::HashSet<u32> = shield_region.iter().copied().collect();
    for region in object_regions {
        if region.iter().any(|i| shield_set.contains(i)) {
            return Err(Error::InvalidImage(
                "shield and object regions overlap".into(),
            ));
        }
    }

    let shield_meas = SegmentMeasurements::from_image(img, shield_region);
    let shield_solution = solve_segment(lookup, &shield_meas)?;
    let best = shield_solution
        .solutions
        .iter()
        .min_by(|a, b| a.chi2.partial_cmp(&b.chi2).expect("finite chi2").then(a.z.cmp(&b.z)))
        .expect("at least one solution");
    let lambda_shield =
        best.lambdas.iter().sum::<f64>() / best.lambdas.len() as f64;
    if !(lambda_shield >= 0.0) || lambda_shield >= lookup.grid.lambda_max * 0.999 {
        return Err(Error::Opaque { lambda: lambda_shield, z: best.z as f64 });
    }
    let shield = ShieldEstimate { lambda_shield, z_shield: best.z };

    let hardened = fm.with_shield(&Attenuator::Element(shield.z_shield as f64), lambda_shield)?;
    let lookup2 = build_lookup(&hardened.model, pass2_grid)?;

    let mut object_measurements = Vec::with_capacity(object_regions.len());
    let mut object_solutions = Vec::with_capacity(object_regions.len());
    for region in object_regions {
        let meas = SegmentMeasurements::from_image(img, region)
            .with_offsets(hardened.alpha_offset_h, hardened.alpha_offset_l);
        let sol = solve_segment(&lookup2, &meas)?;
        object_measurements.push(meas);
        object_solutions.push(sol);
    }
    Ok(StrippedSolution {
        shield,
        shield_solution,
        alpha_offset_h: hardened.alpha_offset_h,
        alpha_offset_l: hardened.alpha_offset_l,
        object_measurements,
        object_solutions,
    })
}

/// Single-object convenience wrapper around [`strip_shield_reconstruct_many`].
pub fn strip_shield_reconstruct(
    img: &DualEnergyImage,
    fm: &ForwardModel,
    lookup: &AttenuationLookup,
    pass2_grid: LookupGrid,
    shield_region: &[u32],
    object_region: &[u32],
) -> Result<StrippedSolution> {
    strip_shield_reconstruct_many(
        img,
        fm,
        lookup,
        pass2_grid,
        shield_region,
        &[object_region.to_vec()],
    )
}

/// Ensemble configuration: noise width, run count, master seed, segmentation.
#[derive(Debug, Clone, Copy)]
pub struct EnsembleConfig {
    pub noise_fraction: f64,
    pub n_runs: usize,
    pub seed: u64,
    pub segment: SegmentParams,
}

/// Pixel-wise ensemble statistics over reconstructed runs.
#[derive(Debug, Clone)]
pub struct EnsembleStats {
    pub width: usize,
    pub height: usize,
    pub pixel_pitch_cm: f64,
    pub n_runs: usize,
    /// Run indices that failed to reconstruct (excluded from statistics).
    pub failed_runs: Vec<usize>,
    pub median_z_low: Vec<f64>,
    pub std_z_low: Vec<f64>,
    pub median_lambda: Vec<f64>,
    /// Median of the higher-Z solution over runs where one exists; NaN
    /// where no run was degenerate.
    pub median_z_high: Vec<f64>,
}

impl EnsembleStats {
    pub fn to_planes(&self) -> PlaneSet {
        let mut ps = PlaneSet::new(self.width, self.height, self.pixel_pitch_cm);
        ps.push_plane("median_z_low", self.median_z_low.clone()).expect("plane size");
        ps.push_plane("std_z_low", self.std_z_low.clone()).expect("plane size");
        ps.push_plane("median_lambda", self.median_lambda.clone()).expect("plane size");
        ps.push_plane("median_z_high", self.median_z_high.clone()).expect("plane size");
        ps.meta.insert("n_runs".into(), self.n_runs.to_string());
        ps.meta.insert("n_failed".into(), self.failed_runs.len().to_string());
        ps
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_planes().save(path)
    }
}

/// Median of the finite entries of `vals` (consumed); NaN when empty.
fn median_in_place(vals: &mut Vec<f64>) -> f64 {
    vals.retain(|v| v.is_finite());
    if vals.is_empty() {
        return f64::NAN;
    }
    vals.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = vals.len();
    if n % 2 == 1 {
        vals[n / 2]
    } else {
        0.5 * (vals[n / 2 - 1] + vals[n / 2])
    }
}

/// Sample standard deviation of the finite entries; 0 with fewer than two.
fn sample_std(vals: &[f64]) -> f64 {
    let finite: Vec<f64> = vals.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.len() < 2 {
        return 0.0;
    }
    let n = finite.len() as f64;
    let mean = finite.iter().sum::<f64>() / n;
    let ss = finite.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    (ss / (n - 1.0)).sqrt()
}

/// Reconstruct `n_runs` independently-noised realizations of an ideal image
/// and aggregate pixel-wise statistics. Run r's noise seed derives from the
/// master seed on stream 1, so results are reproducible and independent of
/// execution order; failed runs are excluded and reported.
pub fn ensemble_stats(
    ideal: &DualEnergyImage,
    lookup: &AttenuationLookup,
    cfg: &EnsembleConfig,
) -> Result<EnsembleStats> {
    if cfg.n_runs == 0 {
        return Err(Error::OutOfRange {
            what: "n_runs",
            value: 0.0,
            min: 1.0,
            max: f64::INFINITY,
        });
    }
    ideal.validate()?;
    let n = ideal.len();
    let mut z_runs: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_runs);
    let mut lam_runs: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_runs);
    let mut zh_runs: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_runs);
    let mut failed_runs = Vec::new();
    for run in 0..cfg.n_runs {
        let run_seed = derive_subseed(cfg.seed, 1, run as u64);
        let outcome = apply_noise(ideal, cfg.noise_fraction, run_seed)
            .and_then(|img| {
                let labels = felzenszwalb_segment(&img, &cfg.segment)?;
                reconstruct(&img, lookup, &labels)
            });
        match outcome {
            Ok(rec) => {
                z_runs.push(rec.z_low);
                lam_runs.push(rec.lambda);
                zh_runs.push(rec.z_high);
            }
            Err(_) => failed_runs.push(run),
        }
    }
    if z_runs.is_empty() {
        return Err(Error::NonConvergence { what: "ensemble runs", iterations: cfg.n_runs });
    }

    let mut out = EnsembleStats {
        width: ideal.width,
        height: ideal.height,
        pixel_pitch_cm: ideal.pixel_pitch_cm,
        n_runs: cfg.n_runs,
        failed_runs,
        median_z_low: vec![f64::NAN; n],
        std_z_low: vec![f64::NAN; n],
        median_lambda: vec![f64::NAN; n],
        median_z_high: vec![f64::NAN; n],
    };
    let mut scratch = Vec::with_capacity(z_runs.len());
    for i in 0..n {
        scratch.clear();
        scratch.extend(z_runs.iter().map(|r| r[i]));
        out.std_z_low[i] = sample_std(&scratch);
        out.median_z_low[i] = median_in_place(&mut scratch);

        scratch.clear();
        scratch.extend(lam_runs.iter().map(|r| r[i]));
        out.median_lambda[i] = median_in_place(&mut scratch);

        scratch.clear();
        scratch.extend(zh_runs.iter().map(|r| r[i]));
        out.median_z_high[i] = median_in_place(&mut scratch);
    }
    Ok(out)
}
