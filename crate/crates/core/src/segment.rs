//! Graph-based segmentation of dual-energy images.
//!
//! Reconstruction assigns one atomic number per pixel cluster, so pixels must
//! first be grouped into segments of similar material. [`felzenszwalb_segment`]
//! runs the classic efficient graph-based segmentation on the 8-connected
//! pixel grid with edge weight equal to the Euclidean distance in the
//! (α_H, α_L) plane (in units of α·10³) after Gaussian pre-smoothing, then
//! merges undersized segments into their nearest neighbors and splits the
//! result into 4-connected components so every reported segment is a single
//! 4-connected region of at least `min_size` pixels.
//!
//! Everything is deterministic: edge ties are broken by lexicographic pixel
//! order and labels are assigned in row-major order of first occurrence.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{DualEnergyImage, PlaneSet};

/// Scale from α differences to edge-weight units (α·10³), chosen so the
/// default merge threshold `k` is an integer-friendly magnitude.
pub const FEATURE_SCALE: f64 = 1e3;

/// Segmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentParams {
    /// Gaussian pre-smoothing width in pixels.
    pub sigma_smooth: f64,
    /// Felzenszwalb merge threshold in α·10³ units (τ(C) = k/|C|).
    pub k: f64,
    /// Minimum segment size in pixels; smaller segments merge into their
    /// nearest neighbor.
    pub min_size: usize,
}

impl Default for SegmentParams {
    fn default() -> Self {
        SegmentParams { sigma_smooth: 0.8, k: 50.0, min_size: 16 }
    }
}

impl SegmentParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_smooth > 0.0) || !self.sigma_smooth.is_finite() {
            return Err(Error::OutOfRange {
                what: "sigma_smooth",
                value: self.sigma_smooth,
                min: f64::MIN_POSITIVE,
                max: f64::INFINITY,
            });
        }
        if !(self.k > 0.0) || !self.k.is_finite() {
            return Err(Error::OutOfRange {
                what: "k",
                value: self.k,
                min: f64::MIN_POSITIVE,
                max: f64::INFINITY,
            });
        }
        if self.min_size == 0 {
            return Err(Error::OutOfRange {
                what: "min_size",
                value: 0.0,
                min: 1.0,
                max: f64::INFINITY,
            });
        }
        Ok(())
    }
}

/// A dense per-pixel labeling: labels run 0..n_segments−1 and each segment's
/// pixel list is stored ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentLabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    segments: Vec<Vec<u32>>,
}

impl SegmentLabelMap {
    /// Build from a raw label plane, re-indexing to dense labels in row-major
    /// first-occurrence order.
    pub fn from_labels(width: usize, height: usize, raw: &[u32]) -> Result<Self> {
        if raw.len() != width * height {
            return Err(Error::InvalidImage(format!(
                "label plane has {} values, expected {}",
                raw.len(),
                width * height
            )));
        }
        let mut dense: std::collections::HashMap<u32, u32> = std::collections::HashMap::new();
        let mut labels = Vec::with_capacity(raw.len());
        let mut segments: Vec<Vec<u32>> = Vec::new();
        for (i, &r) in raw.iter().enumerate() {
            let next = segments.len() as u32;
            let lab = *dense.entry(r).or_insert_with(|| {
                segments.push(Vec::new());
                next
            });
            labels.push(lab);
            segments[lab as usize].push(i as u32);
        }
        Ok(SegmentLabelMap { width, height, labels, segments })
    }

    pub fn n_segments(&self) -> usize {
        self.segments.len()
    }

    /// Ascending pixel indices belonging to `label`.
    pub fn pixels_of(&self, label: u32) -> &[u32] {
        &self.segments[label as usize]
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Check the structural invariants: dense labels covering every pixel,
    /// each segment 4-connected and at least `min_size` pixels.
    pub fn validate(&self, min_size: usize) -> Result<()> {
        let n = self.len();
        if self.labels.len() != n {
            return Err(Error::InvalidImage(format!(
                "label plane has {} values, expected {n}",
                self.labels.len()
            )));
        }
        let mut counts = vec![0usize; self.segments.len()];
        for &l in &self.labels {
            let l = l as usize;
            if l >= self.segments.len() {
                return Err(Error::InvalidImage(format!("label {l} out of range")));
            }
            counts[l] += 1;
        }
        for (l, seg) in self.segments.iter().enumerate() {
            if seg.len() != counts[l] {
                return Err(Error::InvalidImage(format!(
                    "segment {l} index lists {} pixels, labels say {}",
                    seg.len(),
                    counts[l]
                )));
            }
            if seg.is_empty() {
                return Err(Error::InvalidImage(format!("label {l} has no pixels")));
            }
            if seg.len() < min_size.min(n) {
                return Err(Error::InvalidImage(format!(
                    "segment {l} has {} pixels, min_size is {min_size}",
                    seg.len()
                )));
            }
            if !self.is_4_connected(seg) {
                return Err(Error::InvalidImage(format!("segment {l} is not 4-connected")));
            }
        }
        Ok(())
    }

    fn is_4_connected(&self, seg: &[u32]) -> bool {
        if seg.len() <= 1 {
            return true;
        }
        let member: std::collections::HashSet<u32> = seg.iter().copied().collect();
        let mut seen = std::collections::HashSet::with_capacity(seg.len());
        let mut stack = vec![seg[0]];
        seen.insert(seg[0]);
        while let Some(p) = stack.pop() {
            let (x, y) = (p as usize % self.width, p as usize / self.width);
            let mut push = |q: u32| {
                if member.contains(&q) && seen.insert(q) {
                    stack.push(q);
                }
            };
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < self.width {
                push(p + 1);
            }
            if y > 0 {
                push(p - self.width as u32);
            }
            if y + 1 < self.height {
                push(p + self.width as u32);
            }
        }
        seen.len() == seg.len()
    }

    /// Export as a one-plane container (labels stored as exact f64 integers).
    pub fn to_planes(&self) -> PlaneSet {
        let mut ps = PlaneSet::new(self.width, self.height, 0.0);
        // Plane containers carry a pitch; labels are unitless, use 1 px = 1.
        ps.pixel_pitch_cm = 1.0;
        ps.push_plane("labels", self.labels.iter().map(|&l| l as f64).collect())
            .expect("plane size matches");
        ps.meta.insert("n_segments".into(), self.n_segments().to_string());
        ps
    }

    pub fn from_planes(ps: &PlaneSet) -> Result<Self> {
        let plane = ps.plane("labels")?;
        let mut raw = Vec::with_capacity(plane.len());
        for (i, &v) in plane.iter().enumerate() {
            if !v.is_finite() || v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
                return Err(Error::Format(format!("non-integer label {v} at pixel {i}")));
            }
            raw.push(v as u32);
        }
        SegmentLabelMap::from_labels(ps.width, ps.height, &raw)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_planes().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_planes(&PlaneSet::load(path)?)
    }

    /// Write `x,y,label` CSV rows in row-major order.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "x,y,label")?;
        for y in 0..self.height {
            for x in 0..self.width {
                writeln!(out, "{x},{y},{}", self.labels[y * self.width + x])?;
            }
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_csv(&mut w).map_err(|e| Error::io(path, e))
    }
}

/// Union-find with path halving; carries component sizes and the
/// Felzenszwalb merge thresholds Int(C) + k/|C|.
struct Forest {
    parent: Vec<u32>,
    size: Vec<u32>,
}

impl Forest {
    fn new(n: usize) -> Self {
        Forest::with_sizes(vec![1; n])
    }

    /// Start from pre-populated component sizes (used by the min-size merge,
    /// where each node is a 4-connected component of known pixel count).
    fn with_sizes(size: Vec<u32>) -> Self {
        Forest { parent: (0..size.len() as u32).collect(), size }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let gp = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = gp;
            x = gp;
        }
        x
    }

    /// Union by size; returns the surviving root.
    fn union(&mut self, a: u32, b: u32) -> u32 {
        let (big, small) =
            if self.size[a as usize] >= self.size[b as usize] { (a, b) } else { (b, a) };
        self.parent[small as usize] = big;
        self.size[big as usize] += self.size[small as usize];
        big
    }
}

/// One undirected grid edge (a < b in pixel index order).
#[derive(Debug, Clone, Copy)]
struct Edge {
    w: f64,
    a: u32,
    b: u32,
}

fn sort_edges(edges: &mut [Edge]) {
    edges.sort_unstable_by(|p, q| {
        p.w.partial_cmp(&q.w)
            .expect("finite edge weights")
            .then(p.a.cmp(&q.a))
            .then(p.b.cmp(&q.b))
    });
}

/// Truncated, renormalized Gaussian smoothing (separable, radius ⌈3σ⌉).
/// Border positions renormalize over the in-bounds taps, so smoothing a
/// constant plane returns it unchanged and a constant offset passes through.
fn smooth_plane(src: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let kernel: Vec<f64> =
        (-radius..=radius).map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp()).collect();

    let mut tmp = vec![0.0; src.len()];
    for y in 0..height {
        let row = y * width;
        for x in 0..width {
            let mut acc = 0.0;
            let mut norm = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let xx = x as isize + ki as isize - radius;
                if xx >= 0 && (xx as usize) < width {
                    acc += kv * src[row + xx as usize];
                    norm += kv;
                }
            }
            tmp[row + x] = acc / norm;
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            let mut norm = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let yy = y as isize + ki as isize - radius;
                if yy >= 0 && (yy as usize) < height {
                    acc += kv * tmp[yy as usize * width + x];
                    norm += kv;
                }
            }
            out[y * width + x] = acc / norm;
        }
    }
    out
}

/// Partition a dual-energy image into material-like segments.
///
/// Masked-out pixels participate with the open-beam feature (0, 0) so the
/// partition still covers every pixel; callers skip them downstream. All
/// unmasked pixels must be finite ([`DualEnergyImage::validate`]).
pub fn felzenszwalb_segment(
    img: &DualEnergyImage,
    params: &SegmentParams,
) -> Result<SegmentLabelMap> {
    img.validate()?;
    params.validate()?;
    let (width, height) = (img.width, img.height);
    let n = width * height;

    let feature = |plane: &[f64]| -> Vec<f64> {
        let masked: Vec<f64> = (0..n)
            .map(|i| if img.mask[i] != 0 { plane[i] } else { 0.0 })
            .collect();
        smooth_plane(&masked, width, height, params.sigma_smooth)
    };
    let fh = feature(&img.alpha_h);
    let fl = feature(&img.alpha_l);

    let weight = |a: usize, b: usize| -> f64 {
        let dh = fh[a] - fh[b];
        let dl = fl[a] - fl[b];
        FEATURE_SCALE * (dh * dh + dl * dl).sqrt()
    };

    // Undirected grid edges: 4-connected first, then the two diagonals.
    let mut edges4 = Vec::with_capacity(2 * n);
    let mut diag = Vec::with_capacity(2 * n);
    for y in 0..height {
        for x in 0..width {
            let p = y * width + x;
            if x + 1 < width {
                edges4.push(Edge { w: weight(p, p + 1), a: p as u32, b: (p + 1) as u32 });
            }
            if y + 1 < height {
                let q = p + width;
                edges4.push(Edge { w: weight(p, q), a: p as u32, b: q as u32 });
                if x + 1 < width {
                    diag.push(Edge { w: weight(p, q + 1), a: p as u32, b: (q + 1) as u32 });
                }
                if x > 0 {
                    diag.push(Edge { w: weight(p, q - 1), a: p as u32, b: (q - 1) as u32 });
                }
            }
        }
    }

    // Stage 1: Felzenszwalb on the 8-connected graph. A merge is allowed
    // while the joining edge is no heavier than each side's internal
    // variation credit Int(C) + k/|C| (edges arrive ascending, so Int(C) is
    // simply the weight of the last edge merged into C).
    let mut all: Vec<Edge> = edges4.iter().chain(diag.iter()).copied().collect();
    drop(diag);
    sort_edges(&mut all);
    let mut forest = Forest::new(n);
    let mut threshold = vec![params.k; n];
    for e in &all {
        let ra = forest.find(e.a);
        let rb = forest.find(e.b);
        if ra != rb && e.w <= threshold[ra as usize].min(threshold[rb as usize]) {
            let r = forest.union(ra, rb);
            threshold[r as usize] = e.w + params.k / forest.size[r as usize] as f64;
        }
    }
    drop(all);

    // Stage 2: split into 4-connected components (diagonal-only bridges are
    // not acceptable segments), then merge undersized components into their
    // nearest neighbor by walking the 4-connected edges cheapest-first.
    let mut comp = vec![u32::MAX; n];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..n {
        if comp[start] != u32::MAX {
            continue;
        }
        let root = forest.find(start as u32);
        comp[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (x, y) = (p % width, p / width);
            let mut visit = |q: usize| {
                if comp[q] == u32::MAX && forest.find(q as u32) == root {
                    comp[q] = next;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < width {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - width);
            }
            if y + 1 < height {
                visit(p + width);
            }
        }
        next += 1;
    }

    sort_edges(&mut edges4);
    let mut pixel_counts = vec![0u32; next as usize];
    for &c in &comp {
        pixel_counts[c as usize] += 1;
    }
    let mut merged = Forest::with_sizes(pixel_counts);
    for e in &edges4 {
        let ra = merged.find(comp[e.a as usize]);
        let rb = merged.find(comp[e.b as usize]);
        if ra != rb
            && ((merged.size[ra as usize] as usize) < params.min_size
                || (merged.size[rb as usize] as usize) < params.min_size)
        {
            merged.union(ra, rb);
        }
    }

    let raw: Vec<u32> = comp.iter().map(|&c| merged.find(c)).collect();
    SegmentLabelMap::from_labels(width, height, &raw)
}
