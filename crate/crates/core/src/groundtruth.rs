//! Effective (λ_eff, z_eff) ground truth for arbitrary measurements.
//!
//! A heterogeneous pixel has no single true (λ, z); its *effective* values
//! are defined by exact matching of both model log transparencies:
//!
//! ```text
//! α̃_H(λ_eff, z_eff) = α_H*    and    α̃_L(λ_eff, z_eff) = α_L*.
//! ```
//!
//! For each candidate z the first equation has a unique λ(z) because α̃ is
//! strictly increasing and unbounded in λ; substituting it into the second
//! gives the scalar residual r(z) = α̃_L(λ(z), z) − α_L*. Roots of r over
//! z ∈ [1, 100] (scanned at step 0.25, then bisected) are the effective
//! solutions — at most two in practice, reflecting the high-Z transparency
//! fold that makes mid-70s and low-90s materials radiographically similar.

use crate::error::{Error, Result};
use crate::forward::{Beam, BinnedAttenuator, ForwardModel};
use crate::xsec::Z_MAX;

/// z-scan step for locating sign changes of the matching residual.
pub const Z_SCAN_STEP: f64 = 0.25;
/// Matching tolerance: every reported solution reproduces both α targets to
/// better than this.
pub const ALPHA_MATCH_TOL: f64 = 1e-6;

/// One effective solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectivePoint {
    pub z_eff: f64,
    pub lambda_eff: f64,
}

/// Effective solutions for one measurement: one or two points, ascending in
/// z_eff; `degenerate` iff two.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveSolution {
    pub solutions: Vec<EffectivePoint>,
    pub degenerate: bool,
}

impl EffectiveSolution {
    /// The lower-z solution (display convention).
    pub fn low(&self) -> EffectivePoint {
        self.solutions[0]
    }

    /// The higher-z solution when degenerate.
    pub fn high(&self) -> Option<EffectivePoint> {
        if self.degenerate { Some(self.solutions[1]) } else { None }
    }
}

/// Reusable effective-solution solver with the z-scan attenuation vectors
/// cached once per model (the per-call cost is then a handful of quadratures
/// per scanned z).
pub struct EffectiveSolver<'a> {
    fm: &'a ForwardModel,
    z_grid: Vec<f64>,
    bins: Vec<BinnedAttenuator>,
}

impl<'a> EffectiveSolver<'a> {
    pub fn new(fm: &'a ForwardModel) -> Result<Self> {
        let n = ((Z_MAX as f64 - 1.0) / Z_SCAN_STEP).round() as usize + 1;
        let z_grid: Vec<f64> = (0..n).map(|i| 1.0 + i as f64 * Z_SCAN_STEP).collect();
        let bins = z_grid
            .iter()
            .map(|&z| fm.bin_attenuator(&crate::xsec::Attenuator::Element(z)))
            .collect::<Result<Vec<_>>>()?;
        Ok(EffectiveSolver { fm, z_grid, bins })
    }

    pub fn model(&self) -> &ForwardModel {
        self.fm
    }

    /// Solve α̃_H(λ, z) = `target` for λ at fixed binned z.
    ///
    /// α̃ is strictly increasing and concave in λ, so Newton iterations from
    /// below converge monotonically without overshoot.
    fn lambda_for_target(&self, bins: &BinnedAttenuator, target: f64, warm: f64) -> Result<f64> {
        debug_assert!(target > 0.0);
        let mut lambda = warm.max(0.0);
        // Ensure the start lies below the root (tangent stays below target).
        let (mut alpha, mut d1, _) = self.fm.eval_binned(Beam::H, bins, lambda)?;
        while alpha > target {
            lambda *= 0.5;
            if lambda < 1e-12 {
                lambda = 0.0;
                let e = self.fm.eval_binned(Beam::H, bins, 0.0)?;
                alpha = e.0;
                d1 = e.1;
                break;
            }
            let e = self.fm.eval_binned(Beam::H, bins, lambda)?;
            alpha = e.0;
            d1 = e.1;
        }
        for _ in 0..200 {
            let gap = target - alpha;
            if gap.abs() <= 1e-13 * target.max(1.0) {
                return Ok(lambda);
            }
            lambda += gap / d1;
            let e = self.fm.eval_binned(Beam::H, bins, lambda)?;
            alpha = e.0;
            d1 = e.1;
        }
        Err(Error::NonConvergence { what: "lambda matching", iterations: 200 })
    }

    /// Residual r(z) of the low-beam equation after λ has matched the high
    /// beam, given prebuilt bins for this z. Returns (r, λ(z)).
    fn residual_binned(
        &self,
        bins: &BinnedAttenuator,
        target_h: f64,
        target_l: f64,
        warm: f64,
    ) -> Result<(f64, f64)> {
        let lambda = self.lambda_for_target(bins, target_h, warm)?;
        let (alpha_l, _, _) = self.fm.eval_binned(Beam::L, bins, lambda)?;
        Ok((alpha_l - target_l, lambda))
    }

    /// Residual at an arbitrary (possibly fractional) z, building bins on the
    /// fly; used during bisection refinement.
    fn residual_at(&self, z: f64, target_h: f64, target_l: f64, warm: f64) -> Result<(f64, f64)> {
        let bins = self.fm.bin_attenuator(&crate::xsec::Attenuator::Element(z))?;
        self.residual_binned(&bins, target_h, target_l, warm)
    }

    /// All effective solutions for one (α_H*, α_L*) measurement.
    pub fn solve(&self, target_h: f64, target_l: f64) -> Result<EffectiveSolution> {
        if !(target_h > 0.0) || !target_h.is_finite() {
            return Err(Error::OutOfRange { what: "alpha_h_target", value: target_h, min: f64::MIN_POSITIVE, max: f64::INFINITY });
        }
        if !(target_l > 0.0) || !target_l.is_finite() {
            return Err(Error::OutOfRange { what: "alpha_l_target", value: target_l, min: f64::MIN_POSITIVE, max: f64::INFINITY });
        }

        // Scan the z grid, reusing the previous λ as a warm start (λ(z) is
        // continuous in z).
        let n = self.z_grid.len();
        let mut residuals = Vec::with_capacity(n);
        let mut lambdas = Vec::with_capacity(n);
        let mut warm = 0.0;
        for i in 0..n {
            let (r, lambda) = self.residual_binned(&self.bins[i], target_h, target_l, warm)?;
            residuals.push(r);
            lambdas.push(lambda);
            warm = lambda;
        }

        // Roots: near-exact zeros at grid points plus sign-change brackets.
        const GRID_ZERO: f64 = 1e-9;
        let mut roots: Vec<(f64, f64)> = Vec::new();
        for i in 0..n {
            if residuals[i].abs() <= GRID_ZERO {
                roots.push((self.z_grid[i], lambdas[i]));
            }
        }
        for i in 0..n - 1 {
            let (r0, r1) = (residuals[i], residuals[i + 1]);
            if r0.abs() <= GRID_ZERO || r1.abs() <= GRID_ZERO {
                continue;
            }
            if r0.signum() != r1.signum() {
                let root = self.refine_root(
                    self.z_grid[i],
                    self.z_grid[i + 1],
                    r0,
                    r1,
                    target_h,
                    target_l,
                    lambdas[i],
                )?;
                roots.push(root);
            }
        }

        roots.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite z"));
        roots.dedup_by(|a, b| (a.0 - b.0).abs() < 1e-6);
        if roots.is_empty() {
            return Err(Error::NoSolution);
        }
        roots.truncate(2);
        let solutions: Vec<EffectivePoint> =
            roots.iter().map(|&(z, l)| EffectivePoint { z_eff: z, lambda_eff: l }).collect();
        let degenerate = solutions.len() == 2;
        Ok(EffectiveSolution { solutions, degenerate })
    }

    /// Refine a bracketed root of r(z) with the Illinois variant of false
    /// position: secant steps with stale-endpoint damping keep the bracket
    /// shrinking while converging superlinearly. Each evaluation builds a
    /// fractional-z μ̃ table, so iteration count matters.
    #[allow(clippy::too_many_arguments)]
    fn refine_root(
        &self,
        mut z_a: f64,
        mut z_b: f64,
        mut r_a: f64,
        mut r_b: f64,
        target_h: f64,
        target_l: f64,
        warm: f64,
    ) -> Result<(f64, f64)> {
        let mut lambda = warm;
        let mut stale = false;
        for _ in 0..60 {
            let denom = r_b - r_a;
            let mut z_c =
                if denom != 0.0 { z_b - r_b * (z_b - z_a) / denom } else { 0.5 * (z_a + z_b) };
            let (lo, hi) = if z_a < z_b { (z_a, z_b) } else { (z_b, z_a) };
            if !(z_c > lo && z_c < hi) {
                z_c = 0.5 * (lo + hi);
            }
            let (r_c, l) = self.residual_at(z_c, target_h, target_l, lambda)?;
            lambda = l;
            if r_c.abs() <= 1e-10 || (hi - lo) <= 1e-9 {
                return Ok((z_c, lambda));
            }
            if r_c.signum() == r_b.signum() {
                // Same side as the newest endpoint: the old endpoint goes
                // stale; damp it so the secant cannot pin to one side.
                z_b = z_c;
                r_b = r_c;
                if stale {
                    r_a *= 0.5;
                }
                stale = true;
            } else {
                z_a = z_b;
                r_a = r_b;
                z_b = z_c;
                r_b = r_c;
                stale = false;
            }
        }
        Ok((0.5 * (z_a + z_b), lambda))
    }
}

/// One-shot effective solve; builds the scan cache, so prefer
/// [`EffectiveSolver`] for repeated queries against one model.
pub fn solve_effective(
    fm: &ForwardModel,
    alpha_h_target: f64,
    alpha_l_target: f64,
) -> Result<EffectiveSolution> {
    EffectiveSolver::new(fm)?.solve(alpha_h_target, alpha_l_target)
}

/// Per-pixel effective ground truth of a scene. Air pixels carry the empty
/// sentinel λ_eff = 0 with undefined (NaN) z; degenerate pixels carry both
/// z solutions, lower first, with λ_eff taken from the lower-z solution.
#[derive(Debug, Clone)]
pub struct GroundTruthMap {
    pub width: usize,
    pub height: usize,
    pub pixel_pitch_cm: f64,
    pub lambda_eff: Vec<f64>,
    pub z_low: Vec<f64>,
    /// NaN where the solution is unique.
    pub z_high: Vec<f64>,
}

impl GroundTruthMap {
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_planes(&self) -> crate::image::PlaneSet {
        let mut ps =
            crate::image::PlaneSet::new(self.width, self.height, self.pixel_pitch_cm);
        ps.push_plane("lambda_eff", self.lambda_eff.clone()).expect("plane size");
        ps.push_plane("z_eff_low", self.z_low.clone()).expect("plane size");
        ps.push_plane("z_eff_high_or_nan", self.z_high.clone()).expect("plane size");
        ps
    }

    pub fn from_planes(ps: &crate::image::PlaneSet) -> Result<Self> {
        Ok(GroundTruthMap {
            width: ps.width,
            height: ps.height,
            pixel_pitch_cm: ps.pixel_pitch_cm,
            lambda_eff: ps.plane("lambda_eff")?.to_vec(),
            z_low: ps.plane("z_eff_low")?.to_vec(),
            z_high: ps.plane("z_eff_high_or_nan")?.to_vec(),
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_planes().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_planes(&crate::image::PlaneSet::load(path)?)
    }
}

/// Compute the effective ground truth of every pixel of a scene.
///
/// The scene is rendered noiselessly, identical measurements are solved
/// once, and solutions are scattered back to pixels.
pub fn ground_truth_map(
    scene: &crate::phantom::Scene,
    fm: &ForwardModel,
) -> Result<GroundTruthMap> {
    let (img, _) = crate::phantom::render_ideal(scene, fm)?;
    let solver = EffectiveSolver::new(fm)?;

    let n = img.len();
    let mut pair_ids: Vec<u32> = Vec::with_capacity(n);
    let mut unique: std::collections::HashMap<(u64, u64), u32> = std::collections::HashMap::new();
    let mut unique_pairs: Vec<(f64, f64)> = Vec::new();
    for i in 0..n {
        let key = (img.alpha_h[i].to_bits(), img.alpha_l[i].to_bits());
        let next_id = unique_pairs.len() as u32;
        let id = *unique.entry(key).or_insert_with(|| {
            unique_pairs.push((img.alpha_h[i], img.alpha_l[i]));
            next_id
        });
        pair_ids.push(id);
    }

    let solved: Vec<Result<(f64, f64, f64)>> =
        crate::par::map_indexed(unique_pairs.len(), |u| {
            let (ah, al) = unique_pairs[u];
            if ah == 0.0 && al == 0.0 {
                return Ok((0.0, f64::NAN, f64::NAN));
            }
            let sol = solver.solve(ah, al)?;
            let low = sol.low();
            let high = sol.high().map(|p| p.z_eff).unwrap_or(f64::NAN);
            Ok((low.lambda_eff, low.z_eff, high))
        });
    let solved = solved.into_iter().collect::<Result<Vec<_>>>()?;

    let mut out = GroundTruthMap {
        width: img.width,
        height: img.height,
        pixel_pitch_cm: img.pixel_pitch_cm,
        lambda_eff: vec![0.0; n],
        z_low: vec![f64::NAN; n],
        z_high: vec![f64::NAN; n],
    };
    for i in 0..n {
        let (l, zl, zh) = solved[pair_ids[i] as usize];
        out.lambda_eff[i] = l;
        out.z_low[i] = zl;
        out.z_high[i] = zh;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{standard_model, PairParams};
    use crate::xsec::{synthetic_library, Attenuator};
    use std::sync::Arc;

    fn model() -> ForwardModel {
        standard_model(Arc::new(synthetic_library()), PairParams::unity()).unwrap()
    }

    #[test]
    fn element_round_trip_is_exact() {
        let fm = model();
        let solver = EffectiveSolver::new(&fm).unwrap();
        for &(z, lambda) in &[(6.0, 30.0), (26.0, 79.0), (47.0, 50.0)] {
            let ah = fm.alpha_model(Beam::H, lambda, z).unwrap();
            let al = fm.alpha_model(Beam::L, lambda, z).unwrap();
            let sol = solver.solve(ah, al).unwrap();
            let hit = sol
                .solutions
                .iter()
                .find(|p| (p.z_eff - z).abs() < 1e-3)
                .unwrap_or_else(|| panic!("z={z} not among {:?}", sol.solutions));
            assert!((hit.lambda_eff - lambda).abs() <= 1e-6 * lambda, "lambda for z={z}");
        }
    }

    #[test]
    fn solutions_reproduce_both_targets() {
        let fm = model();
        let solver = EffectiveSolver::new(&fm).unwrap();
        // A heterogeneous stack: iron + lead.
        let layers =
            [(Attenuator::Element(26.0), 20.0), (Attenuator::Element(82.0), 30.0)];
        let ah = fm.alpha_heterogeneous(Beam::H, &layers).unwrap();
        let al = fm.alpha_heterogeneous(Beam::L, &layers).unwrap();
        let sol = solver.solve(ah, al).unwrap();
        assert!(!sol.solutions.is_empty() && sol.solutions.len() <= 2);
        for p in &sol.solutions {
            let mh = fm.alpha_model(Beam::H, p.lambda_eff, p.z_eff).unwrap();
            let ml = fm.alpha_model(Beam::L, p.lambda_eff, p.z_eff).unwrap();
            assert!((mh - ah).abs() < ALPHA_MATCH_TOL, "alpha_h mismatch {}", mh - ah);
            assert!((ml - al).abs() < ALPHA_MATCH_TOL, "alpha_l mismatch {}", ml - al);
        }
        // Ascending order.
        if sol.degenerate {
            assert!(sol.solutions[0].z_eff < sol.solutions[1].z_eff);
        }
    }

    #[test]
    fn rejects_nonpositive_targets() {
        let fm = model();
        assert!(solve_effective(&fm, 0.0, 1.0).is_err());
        assert!(solve_effective(&fm, 1.0, -0.1).is_err());
    }

    #[test]
    fn same_z_layers_are_additive() {
        let fm = model();
        let layers =
            [(Attenuator::Element(13.0), 25.0), (Attenuator::Element(13.0), 17.5)];
        let ah = fm.alpha_heterogeneous(Beam::H, &layers).unwrap();
        let al = fm.alpha_heterogeneous(Beam::L, &layers).unwrap();
        let sol = solve_effective(&fm, ah, al).unwrap();
        assert!(!sol.degenerate);
        assert!((sol.low().z_eff - 13.0).abs() < 1e-3);
        assert!((sol.low().lambda_eff - 42.5).abs() < 1e-6);
    }

    /// Dense-scan oracle: brute-force r(z) at step 0.01 using only public
    /// forward evaluations, bisecting λ for the H match.
    fn dense_scan_roots(fm: &ForwardModel, ah: f64, al: f64, z_max: f64) -> Vec<f64> {
        let r = |z: f64| -> f64 {
            let bins = fm.bin_attenuator(&Attenuator::Element(z)).unwrap();
            let alpha_h = |lam: f64| fm.eval_binned(Beam::H, &bins, lam).unwrap().0;
            let (mut lo, mut hi) = (0.0f64, 1.0f64);
            while alpha_h(hi) < ah {
                hi *= 2.0;
            }
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                if alpha_h(mid) < ah {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            fm.eval_binned(Beam::L, &bins, 0.5 * (lo + hi)).unwrap().0 - al
        };
        let mut roots = Vec::new();
        let mut z = 1.0;
        let mut prev = r(z);
        while z < z_max {
            let z_next = z + 0.01;
            let cur = r(z_next);
            if prev == 0.0 {
                roots.push(z);
            } else if prev.signum() != cur.signum() {
                roots.push(z + 0.01 * prev.abs() / (prev.abs() + cur.abs()));
            }
            prev = cur;
            z = z_next;
        }
        roots
    }

    #[test]
    fn low_z_mix_matches_dense_scan_oracle() {
        let fm = model();
        // A polyethylene-like stack: carbon plus hydrogen layers.
        let layers =
            [(Attenuator::Element(6.0), 20.0), (Attenuator::Element(1.0), 5.0)];
        let ah = fm.alpha_heterogeneous(Beam::H, &layers).unwrap();
        let al = fm.alpha_heterogeneous(Beam::L, &layers).unwrap();
        let sol = solve_effective(&fm, ah, al).unwrap();
        assert!(!sol.degenerate);
        let z = sol.low().z_eff;
        assert!(z > 1.0 && z < 6.0, "mix z_eff {z} should fall between constituents");
        let oracle = dense_scan_roots(&fm, ah, al, 20.0);
        assert_eq!(oracle.len(), 1);
        assert!((oracle[0] - z).abs() < 0.01, "oracle {} vs solver {z}", oracle[0]);
    }

    #[test]
    fn homogeneous_round_trip_across_random_samples() {
        use rand::{Rng, SeedableRng};
        let fm = model();
        let solver = EffectiveSolver::new(&fm).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed);
        for _ in 0..200 {
            let z = rng.gen_range(1..=100u32) as f64;
            let lambda = rng.gen_range(5.0..200.0);
            let ah = fm.alpha_model(Beam::H, lambda, z).unwrap();
            let al = fm.alpha_model(Beam::L, lambda, z).unwrap();
            let sol = solver.solve(ah, al).unwrap();
            assert!(sol.solutions.len() <= 2);
            let hit = sol
                .solutions
                .iter()
                .find(|p| (p.z_eff - z).abs() < 1e-3)
                .unwrap_or_else(|| panic!("z={z} λ={lambda} missing from {sol:?}"));
            assert!(
                (hit.lambda_eff - lambda).abs() <= 1e-6 * lambda.max(1.0),
                "λ mismatch at z={z}: {} vs {lambda}",
                hit.lambda_eff
            );
        }
    }

    #[test]
    fn ground_truth_map_of_a_simple_scene() {
        use crate::phantom::{Canvas, Primitive, Scene, Shape};
        let fm = model();
        let scene = Scene {
            canvas: Canvas { width_cm: 10.0, height_cm: 6.0 },
            pixel_pitch_cm: 0.5,
            primitives: vec![Primitive {
                shape: Shape::Rectangle {
                    x0_cm: 2.0,
                    y0_cm: 2.0,
                    width_cm: 4.0,
                    height_cm: 2.0,
                    depth_cm: 10.0,
                },
                material: Attenuator::Element(26.0),
                density_g_cm3: 7.9,
            }],
        };
        let gt = ground_truth_map(&scene, &fm).unwrap();
        assert_eq!((gt.width, gt.height), (20, 12));
        // Air pixel: empty sentinel.
        let air = gt.z_low[0];
        assert!(air.is_nan());
        assert_eq!(gt.lambda_eff[0], 0.0);
        // Box pixel: single-material identity.
        let i = 5 * gt.width + 6; // center (3.25, 2.75) cm
        assert!((gt.z_low[i] - 26.0).abs() < 0.05, "z {}", gt.z_low[i]);
        assert!((gt.lambda_eff[i] - 79.0).abs() < 1e-3);
        assert!(gt.z_high[i].is_nan());
        // Container round trip through the plane container.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.zri");
        gt.save(&path).unwrap();
        let loaded = GroundTruthMap::load(&path).unwrap();
        assert_eq!(loaded.z_low[i].to_bits(), gt.z_low[i].to_bits());
        assert_eq!(loaded.z_high[0].to_bits(), gt.z_high[0].to_bits());
    }
}

