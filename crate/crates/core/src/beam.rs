//! Discrete energy grids, source spectra, and detector response.
//!
//! The transparency model is defined directly on a binned energy grid:
//! spectral weights absorb bin widths, and every integral is the midpoint sum
//! Σ d·w·f over bins. Parameterized generators produce a filtered
//! Kramers-like bremsstrahlung spectrum and a CdWO₄ scintillator absorption
//! response; both can also round-trip through a small CSV format carrying an
//! `# endpoint_MeV=` comment.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::xsec::{CrossSectionLibrary, Material};

/// Density of the steel beam filter, g/cm³.
pub const STEEL_DENSITY: f64 = 7.874;
/// Density of the CdWO₄ scintillator crystal, g/cm³.
pub const CDWO4_DENSITY: f64 = 7.9;

/// Contiguous, non-overlapping energy bins in MeV.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyGrid {
    centers: Vec<f64>,
    widths: Vec<f64>,
}

impl EnergyGrid {
    /// Validated grid from explicit bin centers and widths. Bins must be
    /// strictly ascending and contiguous (edge mismatch ≤ 1e-9 MeV).
    pub fn new(centers: Vec<f64>, widths: Vec<f64>) -> Result<Self> {
        if centers.is_empty() || centers.len() != widths.len() {
            return Err(Error::GridMismatch(format!(
                "centers/widths lengths {} vs {}",
                centers.len(),
                widths.len()
            )));
        }
        for i in 0..centers.len() {
            if !centers[i].is_finite() || centers[i] <= 0.0 {
                return Err(Error::NegativeValue(format!("bin center {i}")));
            }
            if !widths[i].is_finite() || widths[i] <= 0.0 {
                return Err(Error::NegativeValue(format!("bin width {i}")));
            }
            if i > 0 {
                if centers[i - 1] >= centers[i] {
                    return Err(Error::NonAscendingGrid(i));
                }
                let upper = centers[i - 1] + 0.5 * widths[i - 1];
                let lower = centers[i] - 0.5 * widths[i];
                if (upper - lower).abs() > 1e-9 {
                    return Err(Error::GridMismatch(format!(
                        "bins {i} not contiguous: edge gap {}",
                        lower - upper
                    )));
                }
            }
        }
        Ok(EnergyGrid { centers, widths })
    }

    /// Uniform bins of width `(e_hi - e_lo)/n_bins` covering [e_lo, e_hi].
    pub fn uniform(e_lo: f64, e_hi: f64, n_bins: usize) -> Result<Self> {
        if n_bins == 0 || !(e_hi > e_lo) || e_lo <= 0.0 {
            return Err(Error::GridMismatch(format!("uniform grid [{e_lo}, {e_hi}] x {n_bins}")));
        }
        let w = (e_hi - e_lo) / n_bins as f64;
        let centers = (0..n_bins).map(|i| e_lo + (i as f64 + 0.5) * w).collect();
        EnergyGrid::new(centers, vec![w; n_bins])
    }

    /// Default dual-energy grid: 10 keV bins spanning 0.05–9 MeV.
    pub fn default_beam_grid() -> Self {
        EnergyGrid::uniform(0.05, 9.0, 895).expect("default grid is valid")
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn widths(&self) -> &[f64] {
        &self.widths
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Grids compatible for pairing: same length and identical centers/widths
    /// within 1e-12 relative.
    pub fn matches(&self, other: &EnergyGrid) -> bool {
        self.centers.len() == other.centers.len()
            && self
                .centers
                .iter()
                .zip(&other.centers)
                .all(|(a, b)| (a - b).abs() <= 1e-12 * a.abs().max(1.0))
            && self
                .widths
                .iter()
                .zip(&other.widths)
                .all(|(a, b)| (a - b).abs() <= 1e-12 * a.abs().max(1.0))
    }
}

/// Source spectrum on an energy grid. Weights are per-bin (widths absorbed)
/// and non-negative, with zero weight above the endpoint and at least one
/// positive entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub grid: EnergyGrid,
    pub weights: Vec<f64>,
    pub endpoint_mev: f64,
}

impl Spectrum {
    pub fn new(grid: EnergyGrid, weights: Vec<f64>, endpoint_mev: f64) -> Result<Self> {
        if weights.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "spectrum weights {} vs grid {}",
                weights.len(),
                grid.len()
            )));
        }
        if !endpoint_mev.is_finite() || endpoint_mev <= 0.0 {
            return Err(Error::NegativeValue("spectrum endpoint".into()));
        }
        let mut any_positive = false;
        for (i, &w) in weights.iter().enumerate() {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::NegativeValue(format!("spectrum weight {i}")));
            }
            if w > 0.0 {
                if grid.centers()[i] > endpoint_mev {
                    return Err(Error::DegenerateModel(format!(
                        "positive weight above endpoint at bin {i}"
                    )));
                }
                any_positive = true;
            }
        }
        if !any_positive {
            return Err(Error::DegenerateModel("spectrum is identically zero".into()));
        }
        Ok(Spectrum { grid, weights, endpoint_mev })
    }
}

/// Detector energy response on an energy grid (arbitrary units, ≥ 0).
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorResponse {
    pub grid: EnergyGrid,
    pub values: Vec<f64>,
}

impl DetectorResponse {
    pub fn new(grid: EnergyGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "response values {} vs grid {}",
                values.len(),
                grid.len()
            )));
        }
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::NegativeValue(format!("response value {i}")));
            }
        }
        Ok(DetectorResponse { grid, values })
    }
}

/// One beam: a spectrum paired with a detector response on the same grid,
/// with the per-bin products cached for quadrature.
#[derive(Debug, Clone)]
pub struct BeamModel {
    pub spectrum: Spectrum,
    pub response: DetectorResponse,
    /// Per-bin detected weight q = d·w.
    q: Vec<f64>,
    q_sum: f64,
}

impl BeamModel {
    /// Pair a spectrum with a response. Rejects mismatched grids and
    /// degenerate pairings where no bin has positive detected weight (e.g. an
    /// all-zero response).
    pub fn new(spectrum: Spectrum, response: DetectorResponse) -> Result<Self> {
        if !spectrum.grid.matches(&response.grid) {
            return Err(Error::GridMismatch("spectrum vs response grids".into()));
        }
        let q: Vec<f64> =
            spectrum.weights.iter().zip(&response.values).map(|(w, d)| w * d).collect();
        let q_sum: f64 = q.iter().sum();
        if !(q_sum > 0.0) {
            return Err(Error::DegenerateModel(
                "detected spectrum d·w is identically zero".into(),
            ));
        }
        Ok(BeamModel { spectrum, response, q, q_sum })
    }

    pub fn grid(&self) -> &EnergyGrid {
        &self.spectrum.grid
    }

    /// Per-bin detected weights d·w.
    pub fn detected_weights(&self) -> &[f64] {
        &self.q
    }

    /// Σ d·w, the open-beam normalization.
    pub fn detected_sum(&self) -> f64 {
        self.q_sum
    }

    /// Feed the beam's defining bytes into a hash (grid, weights, endpoint,
    /// response) so dependent artifacts can carry a content hash.
    pub fn hash_into(&self, hasher: &mut sha2::Sha256) {
        use sha2::Digest;
        for v in self
            .spectrum
            .grid
            .centers()
            .iter()
            .chain(self.spectrum.grid.widths())
            .chain(&self.spectrum.weights)
            .chain(std::iter::once(&self.spectrum.endpoint_mev))
            .chain(&self.response.values)
        {
            hasher.update(v.to_le_bytes());
        }
    }
}

/// Midpoint-rule quadrature of per-bin integrand values against the detected
/// spectrum: Σ d·w·f. Exact for the discrete model by definition.
pub fn weighted_integral(spectrum: &Spectrum, response: &DetectorResponse, f: &[f64]) -> Result<f64> {
    if !spectrum.grid.matches(&response.grid) {
        return Err(Error::GridMismatch("spectrum vs response grids".into()));
    }
    if f.len() != spectrum.weights.len() {
        return Err(Error::GridMismatch(format!(
            "integrand length {} vs grid {}",
            f.len(),
            spectrum.weights.len()
        )));
    }
    Ok(spectrum
        .weights
        .iter()
        .zip(&response.values)
        .zip(f)
        .map(|((w, d), fv)| w * d * fv)
        .sum())
}

/// Kramers-like filtered bremsstrahlung: unnormalized weight
/// `(endpoint − E)/E · exp(−μ_Fe(E)·ρ_Fe·filter_cm)` for `E < endpoint`, zero
/// above, normalized to unit sum. The filter attenuates with the total
/// (pe+cs+pp) steel coefficient from `lib`.
pub fn gen_bremsstrahlung(
    grid: &EnergyGrid,
    endpoint_mev: f64,
    filter_cm_steel: f64,
    lib: &CrossSectionLibrary,
) -> Result<Spectrum> {
    if !endpoint_mev.is_finite() || endpoint_mev <= 0.0 {
        return Err(Error::NegativeValue("bremsstrahlung endpoint".into()));
    }
    if !filter_cm_steel.is_finite() || filter_cm_steel < 0.0 {
        return Err(Error::NegativeValue("filter thickness".into()));
    }
    let mut weights = Vec::with_capacity(grid.len());
    for &e in grid.centers() {
        if e >= endpoint_mev {
            weights.push(0.0);
            continue;
        }
        let mu = lib.mu_components(26, e)?.total();
        let atten = (-mu * STEEL_DENSITY * filter_cm_steel).exp();
        weights.push((endpoint_mev - e) / e * atten);
    }
    let sum: f64 = weights.iter().sum();
    if !(sum > 0.0) {
        return Err(Error::DegenerateModel(format!(
            "endpoint {endpoint_mev} MeV leaves no positive bins on the grid"
        )));
    }
    for w in &mut weights {
        *w /= sum;
    }
    Spectrum::new(grid.clone(), weights, endpoint_mev)
}

/// CdWO₄ scintillator absorption response `D(E) = E·(1 − exp(−μ(E)·ρ·length))`.
/// A zero crystal length yields the all-zero response (rejected downstream at
/// beam pairing); negative lengths are errors.
pub fn gen_detector_response(
    grid: &EnergyGrid,
    crystal_cm: f64,
    lib: &CrossSectionLibrary,
) -> Result<DetectorResponse> {
    if !crystal_cm.is_finite() || crystal_cm < 0.0 {
        return Err(Error::NegativeValue("crystal length".into()));
    }
    let cdwo4 = Material::from_formula("CdWO4", &[(48, 1.0), (74, 1.0), (8, 4.0)])?;
    let mut values = Vec::with_capacity(grid.len());
    for &e in grid.centers() {
        let mu = lib.mu_material(&cdwo4, e)?.total();
        values.push(e * (1.0 - (-mu * CDWO4_DENSITY * crystal_cm).exp()));
    }
    DetectorResponse::new(grid.clone(), values)
}

// ---------------------------------------------------------------------------
// CSV round trip
// ---------------------------------------------------------------------------

/// Write a spectrum as CSV: `# endpoint_MeV=` comment, `energy_MeV,weight`
/// header, one row per bin. The grid must be uniform (the reader rebuilds bin
/// widths from center spacing).
pub fn save_spectrum(spectrum: &Spectrum, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    out.push_str(&format!("# endpoint_MeV={:.17e}\n", spectrum.endpoint_mev));
    out.push_str("energy_MeV,weight\n");
    for (e, w) in spectrum.grid.centers().iter().zip(&spectrum.weights) {
        out.push_str(&format!("{e:.17e},{w:.17e}\n"));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Read a spectrum CSV written by [`save_spectrum`]; centers must be uniformly
/// spaced (bin width inferred from spacing).
pub fn load_spectrum(path: impl AsRef<Path>) -> Result<Spectrum> {
    let path = path.as_ref();
    let (comments, rows) = read_csv_rows(path, "energy_MeV,weight")?;
    let endpoint = comments
        .iter()
        .find_map(|c| c.strip_prefix("endpoint_MeV=").map(str::trim))
        .ok_or_else(|| Error::parse(path, "missing # endpoint_MeV= comment"))?
        .parse::<f64>()
        .map_err(|e| Error::parse(path, format!("endpoint_MeV: {e}")))?;
    let (centers, weights): (Vec<f64>, Vec<f64>) = rows.into_iter().unzip();
    let grid = uniform_grid_from_centers(path, centers)?;
    Spectrum::new(grid, weights, endpoint)
}

/// Write a detector response as CSV with header `energy_MeV,response`.
pub fn save_response(response: &DetectorResponse, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    out.push_str("energy_MeV,response\n");
    for (e, v) in response.grid.centers().iter().zip(&response.values) {
        out.push_str(&format!("{e:.17e},{v:.17e}\n"));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Read a detector response CSV written by [`save_response`].
pub fn load_response(path: impl AsRef<Path>) -> Result<DetectorResponse> {
    let path = path.as_ref();
    let (_, rows) = read_csv_rows(path, "energy_MeV,response")?;
    let (centers, values): (Vec<f64>, Vec<f64>) = rows.into_iter().unzip();
    let grid = uniform_grid_from_centers(path, centers)?;
    DetectorResponse::new(grid, values)
}

fn read_csv_rows(path: &Path, header: &str) -> Result<(Vec<String>, Vec<(f64, f64)>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut comments = Vec::new();
    let mut rows = Vec::new();
    let mut saw_header = false;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(c) = line.strip_prefix('#') {
            comments.push(c.trim().to_string());
            continue;
        }
        if !saw_header {
            if line != header {
                return Err(Error::parse(path, format!("line {}: expected header {header}", lineno + 1)));
            }
            saw_header = true;
            continue;
        }
        let mut fields = line.split(',');
        let parse = |s: Option<&str>, what: &str| -> Result<f64> {
            s.ok_or_else(|| Error::parse(path, format!("line {}: missing {what}", lineno + 1)))?
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::parse(path, format!("line {}: {what}: {e}", lineno + 1)))
        };
        let e = parse(fields.next(), "energy")?;
        let v = parse(fields.next(), "value")?;
        if fields.next().is_some() {
            return Err(Error::parse(path, format!("line {}: too many columns", lineno + 1)));
        }
        rows.push((e, v));
    }
    if !saw_header {
        return Err(Error::parse(path, "missing header row"));
    }
    Ok((comments, rows))
}

fn uniform_grid_from_centers(path: &Path, centers: Vec<f64>) -> Result<EnergyGrid> {
    if centers.len() < 2 {
        return Err(Error::parse(path, "need at least 2 bins"));
    }
    let w = centers[1] - centers[0];
    for i in 1..centers.len() {
        let d = centers[i] - centers[i - 1];
        if (d - w).abs() > 1e-9 {
            return Err(Error::parse(path, format!("non-uniform bin spacing at row {i}")));
        }
    }
    let n = centers.len();
    EnergyGrid::new(centers, vec![w; n])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::xsec::synthetic_library;

    fn lib() -> CrossSectionLibrary {
        synthetic_library()
    }

    #[test]
    fn default_grid_shape() {
        let g = EnergyGrid::default_beam_grid();
        assert_eq!(g.len(), 895);
        assert!((g.centers()[0] - 0.055).abs() < 1e-12);
        assert!((g.centers()[894] - 8.995).abs() < 1e-12);
        assert!((g.widths()[0] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn grid_rejects_gaps_and_disorder() {
        assert!(EnergyGrid::new(vec![1.0, 0.9], vec![0.1, 0.1]).is_err());
        // Non-contiguous: gap between bins.
        assert!(EnergyGrid::new(vec![1.0, 2.0], vec![0.1, 0.1]).is_err());
        // Contiguous pair is fine.
        assert!(EnergyGrid::new(vec![1.0, 1.1], vec![0.1, 0.1]).is_ok());
    }

    #[test]
    fn bremsstrahlung_unit_sum_and_endpoint_cutoff() {
        let lib = lib();
        let grid = EnergyGrid::default_beam_grid();
        for endpoint in [9.0, 6.0] {
            let s = gen_bremsstrahlung(&grid, endpoint, 1.0, &lib).unwrap();
            let sum: f64 = s.weights.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "sum {sum}");
            for (e, w) in grid.centers().iter().zip(&s.weights) {
                if *e >= endpoint {
                    assert_eq!(*w, 0.0, "bin at {e} MeV above endpoint {endpoint}");
                } else {
                    assert!(*w > 0.0);
                }
            }
        }
    }

    #[test]
    fn filter_suppression_matches_exponential_ratio() {
        let lib = lib();
        let grid = EnergyGrid::default_beam_grid();
        let unfiltered = gen_bremsstrahlung(&grid, 9.0, 0.0, &lib).unwrap();
        let filtered = gen_bremsstrahlung(&grid, 9.0, 1.0, &lib).unwrap();
        // Ratios are exp(−μρt) up to one common normalization constant, so
        // ratio(i)/ratio(j) must equal exp(−(μ_i−μ_j)ρt) exactly (to fp).
        let (i, j) = (5, 600);
        let mu_i = lib.mu_components(26, grid.centers()[i]).unwrap().total();
        let mu_j = lib.mu_components(26, grid.centers()[j]).unwrap().total();
        let got = (filtered.weights[i] / unfiltered.weights[i])
            / (filtered.weights[j] / unfiltered.weights[j]);
        let expect = (-(mu_i - mu_j) * STEEL_DENSITY).exp();
        assert!((got - expect).abs() <= 1e-12 * expect, "{got} vs {expect}");
        // And the filter really bites at low energy.
        assert!(got < 0.2);
    }

    #[test]
    fn detector_response_bounds() {
        let lib = lib();
        let grid = EnergyGrid::default_beam_grid();
        let d = gen_detector_response(&grid, 3.0, &lib).unwrap();
        for (e, v) in grid.centers().iter().zip(&d.values) {
            // At very low energy the absorption factor rounds to exactly 1,
            // so the bound is ≤ E globally and strict where absorption < 1.
            assert!(*v >= 0.0 && *v <= *e, "response at {e} MeV is {v}");
        }
        let i2 = grid.centers().iter().position(|&e| e > 2.0).unwrap();
        assert!(d.values[i2] < grid.centers()[i2], "response at 2 MeV strictly below E");
        // A 300 cm crystal absorbs essentially everything at low energy:
        // response within 1% of E for E ≤ 1 MeV.
        let thick = gen_detector_response(&grid, 300.0, &lib).unwrap();
        for (e, v) in grid.centers().iter().zip(&thick.values) {
            if *e <= 1.0 {
                assert!((v - e).abs() <= 0.01 * e, "thick crystal at {e}: {v}");
            }
        }
    }

    #[test]
    fn zero_crystal_rejected_at_pairing() {
        let lib = lib();
        let grid = EnergyGrid::default_beam_grid();
        let d = gen_detector_response(&grid, 0.0, &lib).unwrap();
        assert!(d.values.iter().all(|&v| v == 0.0));
        let s = gen_bremsstrahlung(&grid, 9.0, 1.0, &lib).unwrap();
        assert!(matches!(BeamModel::new(s, d), Err(Error::DegenerateModel(_))));
    }

    #[test]
    fn weighted_integral_is_linear() {
        let lib = lib();
        let grid = EnergyGrid::default_beam_grid();
        let s = gen_bremsstrahlung(&grid, 9.0, 1.0, &lib).unwrap();
        let d = gen_detector_response(&grid, 3.0, &lib).unwrap();
        let n = grid.len();
        let f: Vec<f64> = (0..n).map(|i| (i as f64 * 0.01).sin() + 1.5).collect();
        let g: Vec<f64> = (0..n).map(|i| (i as f64 * 0.003).cos() * 0.5).collect();
        let (a, b) = (1.75, -0.6);
        let combo: Vec<f64> = f.iter().zip(&g).map(|(x, y)| a * x + b * y).collect();
        let lhs = weighted_integral(&s, &d, &combo).unwrap();
        let rhs = a * weighted_integral(&s, &d, &f).unwrap() + b * weighted_integral(&s, &d, &g).unwrap();
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn spectrum_csv_round_trip() {
        let lib = lib();
        let grid = EnergyGrid::default_beam_grid();
        let s = gen_bremsstrahlung(&grid, 6.0, 1.0, &lib).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("phi_l.csv");
        save_spectrum(&s, &p).unwrap();
        let back = load_spectrum(&p).unwrap();
        assert_eq!(back.endpoint_mev, s.endpoint_mev);
        assert_eq!(back.weights, s.weights);
        assert!(back.grid.matches(&s.grid));

        let d = gen_detector_response(&grid, 3.0, &lib).unwrap();
        let p = dir.path().join("resp.csv");
        save_response(&d, &p).unwrap();
        let back = load_response(&p).unwrap();
        assert_eq!(back.values, d.values);
    }

    #[test]
    fn spectrum_validation() {
        let grid = EnergyGrid::uniform(0.05, 9.0, 10).unwrap();
        // Positive weight above endpoint is rejected.
        let w = vec![1.0; 10];
        assert!(Spectrum::new(grid.clone(), w, 1.0).is_err());
        // All-zero is rejected.
        assert!(Spectrum::new(grid.clone(), vec![0.0; 10], 9.0).is_err());
        // Negative weight is rejected.
        let mut w = vec![1.0; 10];
        w[3] = -0.5;
        assert!(Spectrum::new(grid, w, 9.0).is_err());
    }
}
