//! Semiempirical forward transparency model and its (λ, Z) lookup tables.
//!
//! For a beam with detected per-bin weights q = d·w, the model log
//! transparency of a homogeneous attenuator is
//!
//! ```text
//! α̃(λ, z) = −ln( Σ q·exp(−μ̃(E, z)·λ) / Σ q ),
//! μ̃(E, z) = a·μ_PE + b·μ_CS + c·μ_PP,
//! ```
//!
//! with per-beam calibration coefficients (a, b, c). The λ-derivatives come
//! from the same quadrature: ∂α̃/∂λ is the attenuated-spectrum mean of μ̃
//! (positive), and ∂²α̃/∂λ² = (mean μ̃)² − mean(μ̃²) is the negative variance
//! of μ̃ under the attenuated weights. Heterogeneous stacks add their
//! μ̃(E)·λ exponents per bin.
//!
//! [`build_lookup`] tabulates α and both derivatives for both beams over a
//! dense λ grid × integer z = 1..=100 and serializes to a `ZRLUT001` binary
//! container keyed by a content hash of the model.

use std::fs;
use std::io::Read;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};
use sha2::Digest;

use crate::beam::BeamModel;
use crate::error::{Error, Result};
use crate::par;
use crate::xsec::{Attenuator, CrossSectionLibrary, MuComponents, Z_MAX};

/// Transparency ratio below which a lookup cell is flagged saturated and a
/// measured pixel is treated as censored.
pub const SATURATION_RATIO: f64 = 1e-12;
/// Transparency ratio below which direct evaluation refuses to produce α.
pub const OPAQUE_RATIO: f64 = 1e-300;

/// Which beam of the dual-energy pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Beam {
    H,
    L,
}

impl Beam {
    pub const BOTH: [Beam; 2] = [Beam::H, Beam::L];
}

/// Semiempirical coefficients (a, b, c) for one beam.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemiParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl SemiParams {
    pub fn unity() -> Self {
        SemiParams { a: 1.0, b: 1.0, c: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("a", self.a), ("b", self.b), ("c", self.c)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::NegativeValue(format!("semiempirical coefficient {name} = {v}")));
            }
        }
        Ok(())
    }
}

/// Calibrated coefficients for the beam pair; serializes to the params JSON
/// `{"h": {"a": …, "b": …, "c": …}, "l": {…}}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairParams {
    pub h: SemiParams,
    pub l: SemiParams,
}

impl PairParams {
    pub fn unity() -> Self {
        PairParams { h: SemiParams::unity(), l: SemiParams::unity() }
    }

    pub fn beam(&self, beam: Beam) -> SemiParams {
        match beam {
            Beam::H => self.h,
            Beam::L => self.l,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("params serialization: {e}")))?;
        fs::write(path, json.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let params: PairParams =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        params.h.validate()?;
        params.l.validate()?;
        Ok(params)
    }
}

/// Per-bin μ̃ vectors for one attenuator under both beams.
#[derive(Debug, Clone)]
pub struct BinnedAttenuator {
    pub h: Vec<f64>,
    pub l: Vec<f64>,
}

impl BinnedAttenuator {
    pub fn beam(&self, beam: Beam) -> &[f64] {
        match beam {
            Beam::H => &self.h,
            Beam::L => &self.l,
        }
    }
}

/// Per-bin partial coefficients of one integer-z element over the shared
/// energy grid, filled lazily; weighting and fractional blending read from
/// these rows instead of re-interpolating the raw tables.
#[derive(Debug)]
struct ComponentBins {
    pe: Vec<f64>,
    cs: Vec<f64>,
    pp: Vec<f64>,
}

impl ComponentBins {
    fn at(&self, i: usize) -> MuComponents {
        MuComponents { pe: self.pe[i], cs: self.cs[i], pp: self.pp[i] }
    }
}

/// The calibrated dual-energy forward model: cross sections + beam pair +
/// per-beam semiempirical coefficients.
#[derive(Debug, Clone)]
pub struct ForwardModel {
    lib: Arc<CrossSectionLibrary>,
    beam_h: BeamModel,
    beam_l: BeamModel,
    params: PairParams,
    /// Lazy per-element component rows on the shared grid. Valid only for
    /// this (library, grid) pair; derived models that keep both may share it.
    zcache: Arc<Vec<OnceLock<ComponentBins>>>,
}

impl ForwardModel {
    /// Assemble and validate: both beams must share one energy grid and the
    /// coefficients must be positive and finite.
    pub fn new(
        lib: Arc<CrossSectionLibrary>,
        beam_h: BeamModel,
        beam_l: BeamModel,
        params: PairParams,
    ) -> Result<Self> {
        let zcache = Arc::new((0..Z_MAX).map(|_| OnceLock::new()).collect());
        ForwardModel::with_cache(lib, beam_h, beam_l, params, zcache)
    }

    fn with_cache(
        lib: Arc<CrossSectionLibrary>,
        beam_h: BeamModel,
        beam_l: BeamModel,
        params: PairParams,
        zcache: Arc<Vec<OnceLock<ComponentBins>>>,
    ) -> Result<Self> {
        if !beam_h.grid().matches(beam_l.grid()) {
            return Err(Error::GridMismatch("beam H vs beam L grids".into()));
        }
        params.h.validate()?;
        params.l.validate()?;
        Ok(ForwardModel { lib, beam_h, beam_l, params, zcache })
    }

    pub fn lib(&self) -> &CrossSectionLibrary {
        &self.lib
    }

    pub fn lib_arc(&self) -> Arc<CrossSectionLibrary> {
        Arc::clone(&self.lib)
    }

    pub fn beam(&self, beam: Beam) -> &BeamModel {
        match beam {
            Beam::H => &self.beam_h,
            Beam::L => &self.beam_l,
        }
    }

    pub fn params(&self) -> PairParams {
        self.params
    }

    /// Replace the coefficients (used by calibration iterations). The
    /// component cache carries over: it depends only on library and grid.
    pub fn with_params(&self, params: PairParams) -> Result<Self> {
        ForwardModel::with_cache(
            self.lib_arc(),
            self.beam_h.clone(),
            self.beam_l.clone(),
            params,
            Arc::clone(&self.zcache),
        )
    }

    /// Semiempirical μ̃(E, z) for one beam at one energy, cm²/g.
    pub fn mu_tilde(&self, beam: Beam, z: f64, e: f64) -> Result<f64> {
        let c = self.lib.mu_components_fractional(z, e)?;
        let p = self.params.beam(beam);
        Ok(p.a * c.pe + p.b * c.cs + p.c * c.pp)
    }

    /// μ̃ for any attenuator (fractional element or compound).
    pub fn mu_tilde_attenuator(&self, beam: Beam, target: &Attenuator, e: f64) -> Result<f64> {
        let c = self.lib.mu_attenuator(target, e)?;
        let p = self.params.beam(beam);
        Ok(p.a * c.pe + p.b * c.cs + p.c * c.pp)
    }

    /// μ̃ evaluated at every bin center for both beams, cached for hot loops.
    pub fn bin_attenuator(&self, target: &Attenuator) -> Result<BinnedAttenuator> {
        match target {
            Attenuator::Element(z) => self.element_bins(*z),
            Attenuator::Compound(m) => {
                let rows: Vec<(&ComponentBins, f64)> = m
                    .fractions
                    .iter()
                    .map(|&(z, w)| Ok((self.zbins(z)?, w)))
                    .collect::<Result<_>>()?;
                let n = self.grid_len();
                let mut h = Vec::with_capacity(n);
                let mut l = Vec::with_capacity(n);
                let (ph, pl) = (self.params.h, self.params.l);
                for i in 0..n {
                    let mut c = MuComponents { pe: 0.0, cs: 0.0, pp: 0.0 };
                    for &(row, w) in &rows {
                        let e = row.at(i);
                        c.pe += w * e.pe;
                        c.cs += w * e.cs;
                        c.pp += w * e.pp;
                    }
                    h.push(ph.a * c.pe + ph.b * c.cs + ph.c * c.pp);
                    l.push(pl.a * c.pe + pl.b * c.cs + pl.c * c.pp);
                }
                Ok(BinnedAttenuator { h, l })
            }
        }
    }

    fn grid_len(&self) -> usize {
        self.beam_h.grid().centers().len()
    }

    /// Cached per-bin components for integer `z`, computed on first use.
    fn zbins(&self, z: u32) -> Result<&ComponentBins> {
        if z < 1 || z > Z_MAX {
            return Err(Error::OutOfRange {
                what: "z",
                value: z as f64,
                min: 1.0,
                max: Z_MAX as f64,
            });
        }
        let slot = &self.zcache[(z - 1) as usize];
        if let Some(bins) = slot.get() {
            return Ok(bins);
        }
        let centers = self.beam_h.grid().centers();
        let mut pe = Vec::with_capacity(centers.len());
        let mut cs = Vec::with_capacity(centers.len());
        let mut pp = Vec::with_capacity(centers.len());
        for &e in centers {
            let c = self.lib.mu_components(z, e)?;
            pe.push(c.pe);
            cs.push(c.cs);
            pp.push(c.pp);
        }
        let _ = slot.set(ComponentBins { pe, cs, pp });
        Ok(slot.get().expect("slot was just filled"))
    }

    /// Both-beam μ̃ bins at (possibly fractional) element z, from the cache.
    fn element_bins(&self, z: f64) -> Result<BinnedAttenuator> {
        if !z.is_finite() || z < 1.0 || z > Z_MAX as f64 {
            return Err(Error::OutOfRange { what: "z", value: z, min: 1.0, max: Z_MAX as f64 });
        }
        let lo = z.floor() as u32;
        let n = self.grid_len();
        let mut h = Vec::with_capacity(n);
        let mut l = Vec::with_capacity(n);
        let (ph, pl) = (self.params.h, self.params.l);
        if lo as f64 == z {
            let row = self.zbins(lo)?;
            for i in 0..n {
                let c = row.at(i);
                h.push(ph.a * c.pe + ph.b * c.cs + ph.c * c.pp);
                l.push(pl.a * c.pe + pl.b * c.cs + pl.c * c.pp);
            }
        } else {
            let t = z - lo as f64;
            let row_lo = self.zbins(lo)?;
            let row_hi = self.zbins(lo + 1)?;
            for i in 0..n {
                let c = MuComponents::blend_fractional(row_lo.at(i), row_hi.at(i), t);
                h.push(ph.a * c.pe + ph.b * c.cs + ph.c * c.pp);
                l.push(pl.a * c.pe + pl.b * c.cs + pl.c * c.pp);
            }
        }
        Ok(BinnedAttenuator { h, l })
    }

    /// Model log transparency α̃(λ, z) for a homogeneous attenuator.
    pub fn alpha_model(&self, beam: Beam, lambda: f64, z: f64) -> Result<f64> {
        let (alpha, _, _) = self.alpha_with_derivatives(beam, lambda, z)?;
        Ok(alpha)
    }

    /// ∂α̃/∂λ: the attenuated-spectrum-weighted mean of μ̃ (always positive).
    pub fn alpha_d1(&self, beam: Beam, lambda: f64, z: f64) -> Result<f64> {
        let (_, d1, _) = self.alpha_with_derivatives(beam, lambda, z)?;
        Ok(d1)
    }

    /// ∂²α̃/∂λ²: (mean μ̃)² − mean(μ̃²) under attenuated weights (≤ 0).
    pub fn alpha_d2(&self, beam: Beam, lambda: f64, z: f64) -> Result<f64> {
        let (_, _, d2) = self.alpha_with_derivatives(beam, lambda, z)?;
        Ok(d2)
    }

    /// α̃ and both λ-derivatives in one quadrature pass.
    pub fn alpha_with_derivatives(&self, beam: Beam, lambda: f64, z: f64) -> Result<(f64, f64, f64)> {
        let mu = self.mu_bins_single(beam, z)?;
        self.eval_mu_lambda(beam, &mu, lambda, z)
    }

    /// α̃ and derivatives from a prebuilt μ̃ bin vector.
    pub fn eval_binned(
        &self,
        beam: Beam,
        bins: &BinnedAttenuator,
        lambda: f64,
    ) -> Result<(f64, f64, f64)> {
        self.eval_mu_lambda(beam, bins.beam(beam), lambda, f64::NAN)
    }

    /// Log transparency of a layered stack: exponents add per bin.
    pub fn alpha_heterogeneous(&self, beam: Beam, layers: &[(Attenuator, f64)]) -> Result<f64> {
        let binned: Vec<(BinnedAttenuator, f64)> = layers
            .iter()
            .map(|(t, lam)| Ok((self.bin_attenuator(t)?, *lam)))
            .collect::<Result<_>>()?;
        let refs: Vec<(&BinnedAttenuator, f64)> = binned.iter().map(|(b, l)| (b, *l)).collect();
        self.alpha_stack(beam, &refs)
    }

    /// Log transparency of a layered stack from prebuilt μ̃ vectors.
    pub fn alpha_stack(&self, beam: Beam, layers: &[(&BinnedAttenuator, f64)]) -> Result<f64> {
        for &(_, lam) in layers {
            validate_lambda(lam)?;
        }
        let bm = self.beam(beam);
        let q = bm.detected_weights();
        let n = q.len();
        let mut s0 = 0.0;
        for i in 0..n {
            let mut ex = 0.0;
            for &(bins, lam) in layers {
                ex += bins.beam(beam)[i] * lam;
            }
            s0 += q[i] * (-ex).exp();
        }
        let ratio = s0 / bm.detected_sum();
        if !(ratio > OPAQUE_RATIO) {
            return Err(Error::Opaque { lambda: f64::NAN, z: f64::NAN });
        }
        Ok(-ratio.ln())
    }

    /// Both-beam α for a stack, as (α_H, α_L).
    pub fn alpha_pair_stack(&self, layers: &[(&BinnedAttenuator, f64)]) -> Result<(f64, f64)> {
        Ok((self.alpha_stack(Beam::H, layers)?, self.alpha_stack(Beam::L, layers)?))
    }

    /// Derive the shield-stripped model: the spectrum of each beam is
    /// hardened by the fixed shield exponent exp(−μ̃_shield·λ_shield) and the
    /// shield-only log transparencies are returned as additive α offsets.
    ///
    /// For any object (λ, z), `α_total = offset + α_hardened(λ, z)` exactly,
    /// so subtracting the offsets from measured planes reduces two-layer
    /// reconstruction to the homogeneous problem under the hardened model.
    pub fn with_shield(&self, shield: &Attenuator, lambda_shield: f64) -> Result<ShieldedModel> {
        validate_lambda(lambda_shield)?;
        let bins = self.bin_attenuator(shield)?;
        let offset_h = self.alpha_stack(Beam::H, &[(&bins, lambda_shield)])?;
        let offset_l = self.alpha_stack(Beam::L, &[(&bins, lambda_shield)])?;
        let harden = |bm: &BeamModel, mu: &[f64]| -> Result<BeamModel> {
            let mut w: Vec<f64> = bm
                .spectrum
                .weights
                .iter()
                .zip(mu)
                .map(|(wi, m)| wi * (-m * lambda_shield).exp())
                .collect();
            let sum: f64 = w.iter().sum();
            if !(sum > 0.0) {
                return Err(Error::Opaque { lambda: lambda_shield, z: f64::NAN });
            }
            for wi in &mut w {
                *wi /= sum;
            }
            let spectrum = crate::beam::Spectrum::new(
                bm.spectrum.grid.clone(),
                w,
                bm.spectrum.endpoint_mev,
            )?;
            BeamModel::new(spectrum, bm.response.clone())
        };
        let model = ForwardModel::with_cache(
            self.lib_arc(),
            harden(&self.beam_h, &bins.h)?,
            harden(&self.beam_l, &bins.l)?,
            self.params,
            Arc::clone(&self.zcache),
        )?;
        Ok(ShieldedModel { model, alpha_offset_h: offset_h, alpha_offset_l: offset_l })
    }

    /// Hex content hash over cross sections, both beams, and coefficients.
    pub fn content_hash(&self) -> String {
        let mut hasher = sha2::Sha256::new();
        hasher.update(b"zrecon-model-v1");
        for z in self.lib.zs() {
            let rec = self.lib.element(z).expect("listed z present");
            hasher.update(z.to_le_bytes());
            for col in [&rec.energies, &rec.mu_pe, &rec.mu_cs, &rec.mu_pp] {
                for v in col.iter() {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
        self.beam_h.hash_into(&mut hasher);
        self.beam_l.hash_into(&mut hasher);
        for p in [self.params.h, self.params.l] {
            for v in [p.a, p.b, p.c] {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }

    fn mu_bins_single(&self, beam: Beam, z: f64) -> Result<Vec<f64>> {
        let bins = self.element_bins(z)?;
        Ok(match beam {
            Beam::H => bins.h,
            Beam::L => bins.l,
        })
    }

    fn eval_mu_lambda(&self, beam: Beam, mu: &[f64], lambda: f64, z: f64) -> Result<(f64, f64, f64)> {
        validate_lambda(lambda)?;
        let bm = self.beam(beam);
        let q = bm.detected_weights();
        debug_assert_eq!(q.len(), mu.len());
        let mut s0 = 0.0;
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for (qi, mi) in q.iter().zip(mu) {
            let t = qi * (-mi * lambda).exp();
            s0 += t;
            let tm = t * mi;
            s1 += tm;
            s2 += tm * mi;
        }
        let ratio = s0 / bm.detected_sum();
        if !(ratio > OPAQUE_RATIO) {
            return Err(Error::Opaque { lambda, z });
        }
        let d1 = s1 / s0;
        let d2 = d1 * d1 - s2 / s0;
        Ok((-ratio.ln(), d1, d2))
    }
}

/// A shield-hardened forward model plus the fixed shield α offsets.
#[derive(Debug, Clone)]
pub struct ShieldedModel {
    pub model: ForwardModel,
    pub alpha_offset_h: f64,
    pub alpha_offset_l: f64,
}

fn validate_lambda(lambda: f64) -> Result<()> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::OutOfRange { what: "lambda", value: lambda, min: 0.0, max: f64::INFINITY });
    }
    Ok(())
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

// ---------------------------------------------------------------------------
// Lookup tables
// ---------------------------------------------------------------------------

/// λ grid for the lookup tables; z always covers 1..=100 in integer steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LookupGrid {
    pub lambda_max: f64,
    pub lambda_step: f64,
}

impl Default for LookupGrid {
    fn default() -> Self {
        LookupGrid { lambda_max: 300.0, lambda_step: 0.5 }
    }
}

impl LookupGrid {
    pub fn n_lambda(&self) -> usize {
        (self.lambda_max / self.lambda_step).round() as usize + 1
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda_max.is_finite() || self.lambda_max <= 0.0 {
            return Err(Error::NegativeValue("lookup lambda_max".into()));
        }
        if !self.lambda_step.is_finite() || self.lambda_step <= 0.0 || self.lambda_step > self.lambda_max {
            return Err(Error::NegativeValue("lookup lambda_step".into()));
        }
        Ok(())
    }
}

/// Number of tabulated elements (z = 1..=100).
pub const LOOKUP_N_Z: usize = crate::xsec::Z_MAX as usize;

/// One beam's three tables, each row-major `[z − 1][lambda index]`.
#[derive(Debug, Clone)]
pub struct BeamTables {
    pub alpha: Vec<f64>,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
}

/// Dense α/∂α/∂²α tables over (λ, z) for both beams.
#[derive(Debug, Clone)]
pub struct AttenuationLookup {
    pub grid: LookupGrid,
    pub n_lambda: usize,
    pub model_hash: String,
    pub h: BeamTables,
    pub l: BeamTables,
    /// (z, λ index) cells whose transparency ratio fell below
    /// [`SATURATION_RATIO`]; values are still stored.
    pub saturated: Vec<(u32, u32)>,
}

/// Zero-cost per-(beam, z) row view with inline linear interpolation.
#[derive(Debug, Clone, Copy)]
pub struct LookupRow<'a> {
    alpha: &'a [f64],
    d1: &'a [f64],
    d2: &'a [f64],
    inv_step: f64,
    lambda_max: f64,
}

impl<'a> LookupRow<'a> {
    /// Interpolated (α, ∂α/∂λ, ∂²α/∂λ²) at `lambda ∈ [0, lambda_max]`.
    #[inline]
    pub fn eval3(&self, lambda: f64) -> (f64, f64, f64) {
        debug_assert!(lambda >= 0.0 && lambda <= self.lambda_max);
        let x = lambda * self.inv_step;
        let i = (x as usize).min(self.alpha.len() - 2);
        let t = x - i as f64;
        let lerp = |v: &[f64]| v[i] + (v[i + 1] - v[i]) * t;
        (lerp(self.alpha), lerp(self.d1), lerp(self.d2))
    }

    /// Interpolated α only.
    #[inline]
    pub fn alpha(&self, lambda: f64) -> f64 {
        debug_assert!(lambda >= 0.0 && lambda <= self.lambda_max);
        let x = lambda * self.inv_step;
        let i = (x as usize).min(self.alpha.len() - 2);
        let t = x - i as f64;
        self.alpha[i] + (self.alpha[i + 1] - self.alpha[i]) * t
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }
}

impl AttenuationLookup {
    fn tables(&self, beam: Beam) -> &BeamTables {
        match beam {
            Beam::H => &self.h,
            Beam::L => &self.l,
        }
    }

    /// Row view for integer `z`.
    pub fn row(&self, beam: Beam, z: u32) -> Result<LookupRow<'_>> {
        if z < 1 || z as usize > LOOKUP_N_Z {
            return Err(Error::OutOfRange { what: "z", value: z as f64, min: 1.0, max: LOOKUP_N_Z as f64 });
        }
        let t = self.tables(beam);
        let n = self.n_lambda;
        let off = (z as usize - 1) * n;
        Ok(LookupRow {
            alpha: &t.alpha[off..off + n],
            d1: &t.d1[off..off + n],
            d2: &t.d2[off..off + n],
            inv_step: 1.0 / self.grid.lambda_step,
            lambda_max: self.grid.lambda_max,
        })
    }

    /// Interpolated (α, d1, d2) with range checking on λ.
    pub fn eval(&self, beam: Beam, lambda: f64, z: u32) -> Result<(f64, f64, f64)> {
        if !lambda.is_finite() || lambda < 0.0 || lambda > self.grid.lambda_max {
            return Err(Error::OutOfRange {
                what: "lambda",
                value: lambda,
                min: 0.0,
                max: self.grid.lambda_max,
            });
        }
        Ok(self.row(beam, z)?.eval3(lambda))
    }
}

/// Tabulate the model over the λ grid × z = 1..=100 for both beams.
///
/// Grid-point values are the direct quadrature outputs (bit-for-bit), so the
/// lookup is a pure caching layer plus linear interpolation between knots.
pub fn build_lookup(fm: &ForwardModel, grid: LookupGrid) -> Result<AttenuationLookup> {
    grid.validate()?;
    let n_lambda = grid.n_lambda();
    let model_hash = fm.content_hash();

    struct Column {
        alpha_h: Vec<f64>,
        alpha_l: Vec<f64>,
        d1_h: Vec<f64>,
        d1_l: Vec<f64>,
        d2_h: Vec<f64>,
        d2_l: Vec<f64>,
        saturated: Vec<(u32, u32)>,
    }

    let columns: Vec<Result<Column>> = par::map_indexed(LOOKUP_N_Z, |zi| {
        let z = (zi + 1) as u32;
        let bins = fm.bin_attenuator(&Attenuator::Element(z as f64))?;
        let mut col = Column {
            alpha_h: Vec::with_capacity(n_lambda),
            alpha_l: Vec::with_capacity(n_lambda),
            d1_h: Vec::with_capacity(n_lambda),
            d1_l: Vec::with_capacity(n_lambda),
            d2_h: Vec::with_capacity(n_lambda),
            d2_l: Vec::with_capacity(n_lambda),
            saturated: Vec::new(),
        };
        for i in 0..n_lambda {
            let lambda = i as f64 * grid.lambda_step;
            let (ah, d1h, d2h) = fm.eval_binned(Beam::H, &bins, lambda)?;
            let (al, d1l, d2l) = fm.eval_binned(Beam::L, &bins, lambda)?;
            if (-ah).exp() < SATURATION_RATIO || (-al).exp() < SATURATION_RATIO {
                col.saturated.push((z, i as u32));
            }
            col.alpha_h.push(ah);
            col.alpha_l.push(al);
            col.d1_h.push(d1h);
            col.d1_l.push(d1l);
            col.d2_h.push(d2h);
            col.d2_l.push(d2l);
        }
        Ok(col)
    });

    let mut h = BeamTables {
        alpha: Vec::with_capacity(LOOKUP_N_Z * n_lambda),
        d1: Vec::with_capacity(LOOKUP_N_Z * n_lambda),
        d2: Vec::with_capacity(LOOKUP_N_Z * n_lambda),
    };
    let mut l = h.clone();
    let mut saturated = Vec::new();
    for col in columns {
        let col = col?;
        h.alpha.extend_from_slice(&col.alpha_h);
        h.d1.extend_from_slice(&col.d1_h);
        h.d2.extend_from_slice(&col.d2_h);
        l.alpha.extend_from_slice(&col.alpha_l);
        l.d1.extend_from_slice(&col.d1_l);
        l.d2.extend_from_slice(&col.d2_l);
        saturated.extend_from_slice(&col.saturated);
    }
    Ok(AttenuationLookup { grid, n_lambda, model_hash, h, l, saturated })
}

// ---------------------------------------------------------------------------
// ZRLUT001 binary container
// ---------------------------------------------------------------------------

const LOOKUP_MAGIC: &[u8; 8] = b"ZRLUT001";

#[derive(Serialize, Deserialize)]
struct LookupHeader {
    lambda_max: f64,
    lambda_step: f64,
    n_lambda: usize,
    n_z: usize,
    model_hash: String,
    /// Array order after the header; each is row-major [z][lambda] f64 LE.
    arrays: Vec<String>,
    saturated: Vec<(u32, u32)>,
}

/// Serialize the lookup: 8-byte magic, u64 LE header length, JSON header,
/// then six row-major little-endian f64 arrays
/// (α_H, α_L, d1_H, d1_L, d2_H, d2_L).
pub fn save_lookup(lut: &AttenuationLookup, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = LookupHeader {
        lambda_max: lut.grid.lambda_max,
        lambda_step: lut.grid.lambda_step,
        n_lambda: lut.n_lambda,
        n_z: LOOKUP_N_Z,
        model_hash: lut.model_hash.clone(),
        arrays: ["alpha_h", "alpha_l", "d1_h", "d1_l", "d2_h", "d2_l"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        saturated: lut.saturated.clone(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Format(format!("lookup header serialization: {e}")))?;
    let mut buf = Vec::with_capacity(16 + header_json.len() + 6 * lut.h.alpha.len() * 8);
    buf.extend_from_slice(LOOKUP_MAGIC);
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for arr in [&lut.h.alpha, &lut.l.alpha, &lut.h.d1, &lut.l.d1, &lut.h.d2, &lut.l.d2] {
        for v in arr.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

/// Deserialize a `ZRLUT001` container written by [`save_lookup`].
pub fn load_lookup(path: impl AsRef<Path>) -> Result<AttenuationLookup> {
    let path = path.as_ref();
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != LOOKUP_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected ZRLUT001",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes).map_err(|e| Error::io(path, e))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    if header_len > 1 << 30 {
        return Err(Error::Format(format!("implausible header length {header_len}")));
    }
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json).map_err(|e| Error::io(path, e))?;
    let header: LookupHeader = serde_json::from_slice(&header_json)
        .map_err(|e| Error::parse(path, format!("lookup header: {e}")))?;
    if header.n_z != LOOKUP_N_Z {
        return Err(Error::Format(format!("n_z {} unsupported", header.n_z)));
    }
    let expected = ["alpha_h", "alpha_l", "d1_h", "d1_l", "d2_h", "d2_l"];
    if header.arrays != expected {
        return Err(Error::Format(format!("unexpected array list {:?}", header.arrays)));
    }
    let n = header.n_z * header.n_lambda;
    let mut read_array = || -> Result<Vec<f64>> {
        let mut bytes = vec![0u8; n * 8];
        file.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    };
    let alpha_h = read_array()?;
    let alpha_l = read_array()?;
    let d1_h = read_array()?;
    let d1_l = read_array()?;
    let d2_h = read_array()?;
    let d2_l = read_array()?;
    let grid = LookupGrid { lambda_max: header.lambda_max, lambda_step: header.lambda_step };
    grid.validate()?;
    if grid.n_lambda() != header.n_lambda {
        return Err(Error::Format("n_lambda inconsistent with grid".into()));
    }
    Ok(AttenuationLookup {
        grid,
        n_lambda: header.n_lambda,
        model_hash: header.model_hash,
        h: BeamTables { alpha: alpha_h, d1: d1_h, d2: d2_h },
        l: BeamTables { alpha: alpha_l, d1: d1_l, d2: d2_l },
        saturated: header.saturated,
    })
}

// ---------------------------------------------------------------------------

/// Standard model wiring used by the CLI and tests: default grid, 9/6 MeV
/// endpoints, 1 cm steel filtration, 3 cm CdWO₄ crystal.
pub fn standard_model(lib: Arc<CrossSectionLibrary>, params: PairParams) -> Result<ForwardModel> {
    let grid = crate::beam::EnergyGrid::default_beam_grid();
    let response = crate::beam::gen_detector_response(&grid, 3.0, &lib)?;
    let spec_h = crate::beam::gen_bremsstrahlung(&grid, 9.0, 1.0, &lib)?;
    let spec_l = crate::beam::gen_bremsstrahlung(&grid, 6.0, 1.0, &lib)?;
    let beam_h = BeamModel::new(spec_h, response.clone())?;
    let beam_l = BeamModel::new(spec_l, response)?;
    ForwardModel::new(lib, beam_h, beam_l, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::xsec::synthetic_library;

    fn model() -> ForwardModel {
        standard_model(Arc::new(synthetic_library()), PairParams::unity()).unwrap()
    }

    #[test]
    fn mu_tilde_unity_params_is_component_sum() {
        let fm = model();
        let c = fm.lib().mu_components(26, 1.0).unwrap();
        let got = fm.mu_tilde(Beam::H, 26.0, 1.0).unwrap();
        assert!((got - c.total()).abs() <= 1e-15 * c.total());
    }

    #[test]
    fn mu_tilde_weights_components() {
        let lib = Arc::new(synthetic_library());
        let params = PairParams {
            h: SemiParams { a: 1.1, b: 0.9, c: 1.05 },
            l: SemiParams { a: 0.8, b: 1.2, c: 0.95 },
        };
        let fm = standard_model(lib, params).unwrap();
        let c = fm.lib().mu_components(82, 4.0).unwrap();
        let got = fm.mu_tilde(Beam::L, 82.0, 4.0).unwrap();
        let expect = 0.8 * c.pe + 1.2 * c.cs + 0.95 * c.pp;
        assert!((got - expect).abs() <= 1e-15 * expect);
    }

    #[test]
    fn alpha_zero_lambda_is_exactly_zero() {
        let fm = model();
        for z in [1.0, 26.0, 55.5, 92.0] {
            for beam in Beam::BOTH {
                assert_eq!(fm.alpha_model(beam, 0.0, z).unwrap(), 0.0, "z={z}");
            }
        }
    }

    #[test]
    fn alpha_strictly_increasing_in_lambda() {
        let fm = model();
        for beam in Beam::BOTH {
            let mut prev = 0.0;
            for i in 1..=40 {
                let a = fm.alpha_model(beam, i as f64 * 5.0, 26.0).unwrap();
                assert!(a > prev, "alpha not increasing at lambda={}", i as f64 * 5.0);
                prev = a;
            }
        }
    }

    #[test]
    fn independent_quadrature_oracle() {
        // Re-derive α(100, 26) for both beams with an explicitly written-out
        // quadrature over the bins, sharing nothing with the model's kernel.
        let fm = model();
        for beam in Beam::BOTH {
            let bm = fm.beam(beam);
            let p = fm.params().beam(beam);
            let mut num = 0.0;
            let mut den = 0.0;
            for (i, &e) in bm.grid().centers().iter().enumerate() {
                let c = fm.lib().mu_components(26, e).unwrap();
                let mu = p.a * c.pe + p.b * c.cs + p.c * c.pp;
                let q = bm.spectrum.weights[i] * bm.response.values[i];
                num += q * (-mu * 100.0).exp();
                den += q;
            }
            let oracle = -(num / den).ln();
            let got = fm.alpha_model(beam, 100.0, 26.0).unwrap();
            assert!(
                (got - oracle).abs() <= 1e-10 * oracle.abs(),
                "{beam:?}: {got} vs oracle {oracle}"
            );
        }
    }

    #[test]
    fn monochromatic_beer_lambert() {
        // A single positive bin must reduce α to exactly μ̃λ and derivatives
        // to (μ̃, 0).
        let lib = Arc::new(synthetic_library());
        let grid = crate::beam::EnergyGrid::uniform(1.0, 1.3, 3).unwrap();
        let mut w = vec![0.0; 3];
        w[1] = 1.0;
        let spec = crate::beam::Spectrum::new(grid.clone(), w.clone(), 2.0).unwrap();
        let resp = crate::beam::DetectorResponse::new(grid.clone(), vec![1.0; 3]).unwrap();
        let bm_h = BeamModel::new(spec.clone(), resp.clone()).unwrap();
        let bm_l = BeamModel::new(spec, resp).unwrap();
        let fm = ForwardModel::new(lib, bm_h, bm_l, PairParams::unity()).unwrap();
        let e = grid.centers()[1];
        let mu = fm.mu_tilde(Beam::H, 26.0, e).unwrap();
        for lambda in [0.5, 7.0, 42.0] {
            let (a, d1, d2) = fm.alpha_with_derivatives(Beam::H, lambda, 26.0).unwrap();
            assert!((a - mu * lambda).abs() <= 1e-12 * (mu * lambda));
            assert!((a / lambda - mu).abs() <= 1e-12 * mu, "alpha/lambda constant");
            assert!((d1 - mu).abs() <= 1e-12 * mu);
            assert!(d2.abs() <= 1e-18);
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let fm = model();
        let h = 1e-2;
        for &(lambda, z) in &[(5.0, 6.0), (40.0, 26.0), (120.0, 47.3), (200.0, 92.0)] {
            for beam in Beam::BOTH {
                let (a0, d1, d2) = fm.alpha_with_derivatives(beam, lambda, z).unwrap();
                let ap = fm.alpha_model(beam, lambda + h, z).unwrap();
                let am = fm.alpha_model(beam, lambda - h, z).unwrap();
                let fd1 = (ap - am) / (2.0 * h);
                let fd2 = (ap - 2.0 * a0 + am) / (h * h);
                assert!((fd1 - d1).abs() <= 1e-6 * d1.abs(), "d1 at ({lambda},{z}): {fd1} vs {d1}");
                assert!(
                    (fd2 - d2).abs() <= 1e-4 * (d2.abs() + 1e-12),
                    "d2 at ({lambda},{z}): {fd2} vs {d2}"
                );
                assert!(d1 > 0.0);
                assert!(d2 <= 0.0);
            }
        }
    }

    #[test]
    fn heterogeneous_layers_are_additive_in_exponent() {
        let fm = model();
        let z26 = Attenuator::Element(26.0);
        let a_split = fm
            .alpha_heterogeneous(Beam::H, &[(z26.clone(), 30.0), (z26.clone(), 12.5)])
            .unwrap();
        let a_joint = fm.alpha_model(Beam::H, 42.5, 26.0).unwrap();
        assert!((a_split - a_joint).abs() <= 1e-12 * a_joint);
    }

    #[test]
    fn heterogeneous_stack_matches_handwritten_oracle() {
        let fm = model();
        let layers =
            [(Attenuator::Element(26.0), 20.0), (Attenuator::Element(82.0), 15.0)];
        let got = fm.alpha_heterogeneous(Beam::L, &layers).unwrap();
        let bm = fm.beam(Beam::L);
        let p = fm.params().l;
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &e) in bm.grid().centers().iter().enumerate() {
            let c26 = fm.lib().mu_components(26, e).unwrap();
            let c82 = fm.lib().mu_components(82, e).unwrap();
            let mu26 = p.a * c26.pe + p.b * c26.cs + p.c * c26.pp;
            let mu82 = p.a * c82.pe + p.b * c82.cs + p.c * c82.pp;
            let q = bm.detected_weights()[i];
            num += q * (-(mu26 * 20.0 + mu82 * 15.0)).exp();
            den += q;
        }
        let oracle = -(num / den).ln();
        assert!((got - oracle).abs() <= 1e-10 * oracle.abs());
    }

    #[test]
    fn shielded_model_decomposition_is_exact() {
        let fm = model();
        let shield = Attenuator::Element(26.0);
        let sh = fm.with_shield(&shield, 100.0).unwrap();
        for &(z, lam) in &[(6.0, 76.0), (82.0, 79.0), (50.0, 73.0)] {
            for (beam, offset) in
                [(Beam::H, sh.alpha_offset_h), (Beam::L, sh.alpha_offset_l)]
            {
                let total = fm
                    .alpha_heterogeneous(
                        beam,
                        &[(shield.clone(), 100.0), (Attenuator::Element(z), lam)],
                    )
                    .unwrap();
                let via = offset + sh.model.alpha_model(beam, lam, z).unwrap();
                assert!(
                    (total - via).abs() <= 1e-10 * total.abs(),
                    "{beam:?} z={z}: {total} vs {via}"
                );
            }
        }
    }

    #[test]
    fn zero_shield_is_identity() {
        let fm = model();
        let sh = fm.with_shield(&Attenuator::Element(26.0), 0.0).unwrap();
        assert_eq!(sh.alpha_offset_h, 0.0);
        assert_eq!(sh.alpha_offset_l, 0.0);
        let a = fm.alpha_model(Beam::H, 50.0, 26.0).unwrap();
        let b = sh.model.alpha_model(Beam::H, 50.0, 26.0).unwrap();
        assert!((a - b).abs() <= 1e-12 * a);
    }

    #[test]
    fn lambda_validation() {
        let fm = model();
        assert!(matches!(
            fm.alpha_model(Beam::H, -1.0, 26.0),
            Err(Error::OutOfRange { .. })
        ));
        assert!(fm.alpha_model(Beam::H, f64::NAN, 26.0).is_err());
    }

    #[test]
    fn lookup_grid_points_bit_exact_and_interp_close() {
        let fm = model();
        let grid = LookupGrid { lambda_max: 60.0, lambda_step: 0.5 };
        let lut = build_lookup(&fm, grid).unwrap();
        for &(z, i) in &[(26u32, 40usize), (82, 99), (1, 0), (100, 120)] {
            let lambda = i as f64 * grid.lambda_step;
            let (a, d1, d2) = lut.eval(Beam::H, lambda, z).unwrap();
            let (ea, ed1, ed2) = fm.alpha_with_derivatives(Beam::H, lambda, z as f64).unwrap();
            assert_eq!(a, ea, "alpha grid point z={z} i={i}");
            assert_eq!(d1, ed1);
            assert_eq!(d2, ed2);
        }
        // Between knots: linear interpolation of α within 1e-4 absolute.
        for &(z, lambda) in &[(26u32, 10.25), (82, 39.75), (55, 57.1)] {
            let (a, _, _) = lut.eval(Beam::L, lambda, z).unwrap();
            let direct = fm.alpha_model(Beam::L, lambda, z as f64).unwrap();
            assert!((a - direct).abs() <= 1e-4, "interp error {} at z={z}", a - direct);
        }
    }

    #[test]
    fn lookup_monotone_and_signed_derivatives() {
        let fm = model();
        let lut = build_lookup(&fm, LookupGrid { lambda_max: 80.0, lambda_step: 1.0 }).unwrap();
        for z in [1u32, 26, 64, 100] {
            for beam in Beam::BOTH {
                let row = lut.row(beam, z).unwrap();
                let mut prev = f64::NEG_INFINITY;
                for i in 0..lut.n_lambda {
                    let lambda = i as f64;
                    let (a, d1, d2) = row.eval3(lambda);
                    assert!(a > prev, "alpha monotone z={z}");
                    assert!(d1 > 0.0);
                    assert!(d2 <= 0.0);
                    prev = a;
                }
                assert_eq!(row.eval3(0.0).0, 0.0, "alpha(0) exact zero");
            }
        }
    }

    #[test]
    fn lookup_round_trip_bitwise() {
        let fm = model();
        let lut = build_lookup(&fm, LookupGrid { lambda_max: 30.0, lambda_step: 0.5 }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tables.zrlut");
        save_lookup(&lut, &p).unwrap();
        let back = load_lookup(&p).unwrap();
        assert_eq!(back.model_hash, lut.model_hash);
        assert_eq!(back.n_lambda, lut.n_lambda);
        assert_eq!(back.h.alpha, lut.h.alpha);
        assert_eq!(back.l.alpha, lut.l.alpha);
        assert_eq!(back.h.d1, lut.h.d1);
        assert_eq!(back.l.d1, lut.l.d1);
        assert_eq!(back.h.d2, lut.h.d2);
        assert_eq!(back.l.d2, lut.l.d2);
        assert_eq!(back.saturated, lut.saturated);
        // Re-serializing produces identical bytes (no timestamps).
        let p2 = dir.path().join("tables2.zrlut");
        save_lookup(&back, &p2).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn lookup_rejects_out_of_range_lambda() {
        let fm = model();
        let lut = build_lookup(&fm, LookupGrid { lambda_max: 10.0, lambda_step: 1.0 }).unwrap();
        assert!(lut.eval(Beam::H, 10.0, 26).is_ok());
        assert!(matches!(lut.eval(Beam::H, 10.5, 26), Err(Error::OutOfRange { .. })));
        assert!(matches!(lut.eval(Beam::H, -0.5, 26), Err(Error::OutOfRange { .. })));
        assert!(lut.eval(Beam::H, 5.0, 0).is_err());
        assert!(lut.eval(Beam::H, 5.0, 101).is_err());
    }

    #[test]
    fn model_hash_distinguishes_params() {
        let lib = Arc::new(synthetic_library());
        let fm1 = standard_model(Arc::clone(&lib), PairParams::unity()).unwrap();
        let p2 = PairParams {
            h: SemiParams { a: 1.0, b: 1.0, c: 1.0 },
            l: SemiParams { a: 1.0, b: 1.0, c: 1.0000001 },
        };
        let fm2 = standard_model(lib, p2).unwrap();
        assert_ne!(fm1.content_hash(), fm2.content_hash());
        assert_eq!(fm1.content_hash(), fm1.content_hash());
    }

    #[test]
    fn params_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("params.json");
        let params = PairParams {
            h: SemiParams { a: 1.02, b: 0.98, c: 1.11 },
            l: SemiParams { a: 0.93, b: 1.07, c: 0.89 },
        };
        params.save(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"h\""), "expected h key in {text}");
        assert!(text.contains("\"l\""));
        let back = PairParams::load(&p).unwrap();
        assert_eq!(back, params);
    }
}
