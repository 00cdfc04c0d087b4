//! Dual-energy image planes and the `ZRIMG001` binary plane container.
//!
//! A [`DualEnergyImage`] carries the two measured log-transparency planes with
//! their per-pixel uncertainties and a validity mask. All multi-plane
//! artifacts (radiographs, ground-truth maps, reconstruction outputs, label
//! maps) share one on-disk container: an 8-byte magic, a little-endian u64
//! header length, a deterministic JSON header, and the named planes as
//! little-endian f64 arrays in row-major order. Headers carry content hashes
//! of upstream inputs instead of timestamps so identical inputs always
//! produce byte-identical files.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Pixel excluded from χ² sums (saturated or non-finite input).
pub const FLAG_CENSORED: u8 = 1;
/// Newton iteration did not converge for this pixel.
pub const FLAG_NONCONVERGED: u8 = 2;
/// λ was clamped to the physical range (e.g. negative stripped λ → 0).
pub const FLAG_CLAMPED: u8 = 4;
/// Measured transparency at or below the saturation ratio.
pub const FLAG_SATURATED: u8 = 8;

/// Default fractional noise width (σ = fraction·α).
pub const DEFAULT_NOISE_FRACTION: f64 = 0.1;
/// Floor applied to σ planes so open-beam pixels keep finite weight.
pub const SIGMA_FLOOR: f64 = 1e-3;

/// Default per-pixel uncertainty: max(fraction·α, floor).
pub fn default_sigma(alpha: f64, fraction: f64) -> f64 {
    (fraction * alpha).max(SIGMA_FLOOR)
}

/// A dual-energy radiograph: α planes, uncertainty planes, validity mask.
///
/// Planes are row-major with `idx = y * width + x`; mask is 1 for valid
/// pixels and 0 for pixels to be ignored everywhere downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEnergyImage {
    pub width: usize,
    pub height: usize,
    pub pixel_pitch_cm: f64,
    pub alpha_h: Vec<f64>,
    pub alpha_l: Vec<f64>,
    pub sigma_h: Vec<f64>,
    pub sigma_l: Vec<f64>,
    pub mask: Vec<u8>,
}

impl DualEnergyImage {
    /// An all-valid zero image (open beam) with floor uncertainties.
    pub fn open_beam(width: usize, height: usize, pixel_pitch_cm: f64) -> Self {
        let n = width * height;
        DualEnergyImage {
            width,
            height,
            pixel_pitch_cm,
            alpha_h: vec![0.0; n],
            alpha_l: vec![0.0; n],
            sigma_h: vec![SIGMA_FLOOR; n],
            sigma_l: vec![SIGMA_FLOOR; n],
            mask: vec![1; n],
        }
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y * self.width + x
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::InvalidImage("image has zero pixels".into()));
        }
        if !(self.pixel_pitch_cm > 0.0) || !self.pixel_pitch_cm.is_finite() {
            return Err(Error::InvalidImage(format!(
                "pixel pitch {} must be positive",
                self.pixel_pitch_cm
            )));
        }
        for (name, plane) in [
            ("alpha_h", &self.alpha_h),
            ("alpha_l", &self.alpha_l),
            ("sigma_h", &self.sigma_h),
            ("sigma_l", &self.sigma_l),
        ] {
            if plane.len() != n {
                return Err(Error::InvalidImage(format!(
                    "plane {name} has {} values, expected {n}",
                    plane.len()
                )));
            }
        }
        if self.mask.len() != n {
            return Err(Error::InvalidImage(format!(
                "mask has {} values, expected {n}",
                self.mask.len()
            )));
        }
        for i in 0..n {
            if self.mask[i] == 0 {
                continue;
            }
            if !self.alpha_h[i].is_finite()
                || !self.alpha_l[i].is_finite()
                || self.alpha_h[i] < 0.0
                || self.alpha_l[i] < 0.0
            {
                return Err(Error::InvalidImage(format!(
                    "non-finite or negative alpha at pixel {i} under valid mask"
                )));
            }
            if !(self.sigma_h[i] > 0.0) || !(self.sigma_l[i] > 0.0) {
                return Err(Error::InvalidImage(format!(
                    "non-positive sigma at pixel {i} under valid mask"
                )));
            }
        }
        Ok(())
    }

    /// Convert to the generic plane container (mask stored as a 0/1 plane).
    pub fn to_planes(&self) -> PlaneSet {
        let mask: Vec<f64> = self.mask.iter().map(|&m| m as f64).collect();
        PlaneSet {
            width: self.width,
            height: self.height,
            pixel_pitch_cm: self.pixel_pitch_cm,
            planes: vec![
                ("alpha_h".into(), self.alpha_h.clone()),
                ("alpha_l".into(), self.alpha_l.clone()),
                ("sigma_h".into(), self.sigma_h.clone()),
                ("sigma_l".into(), self.sigma_l.clone()),
                ("mask".into(), mask),
            ],
            meta: BTreeMap::new(),
        }
    }

    pub fn from_planes(planes: &PlaneSet) -> Result<Self> {
        let img = DualEnergyImage {
            width: planes.width,
            height: planes.height,
            pixel_pitch_cm: planes.pixel_pitch_cm,
            alpha_h: planes.plane("alpha_h")?.to_vec(),
            alpha_l: planes.plane("alpha_l")?.to_vec(),
            sigma_h: planes.plane("sigma_h")?.to_vec(),
            sigma_l: planes.plane("sigma_l")?.to_vec(),
            mask: planes.plane("mask")?.iter().map(|&v| (v != 0.0) as u8).collect(),
        };
        img.validate()?;
        Ok(img)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_planes().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_planes(&PlaneSet::load(path)?)
    }
}

/// Magic prefix of the plane container format.
pub const IMAGE_MAGIC: &[u8; 8] = b"ZRIMG001";

#[derive(Debug, Serialize, Deserialize)]
struct PlaneHeader {
    width: usize,
    height: usize,
    pixel_pitch_cm: f64,
    planes: Vec<String>,
    meta: BTreeMap<String, String>,
}

/// Ordered named f64 planes over one pixel grid plus a deterministic
/// string-to-string metadata map.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneSet {
    pub width: usize,
    pub height: usize,
    pub pixel_pitch_cm: f64,
    pub planes: Vec<(String, Vec<f64>)>,
    pub meta: BTreeMap<String, String>,
}

impl PlaneSet {
    pub fn new(width: usize, height: usize, pixel_pitch_cm: f64) -> Self {
        PlaneSet { width, height, pixel_pitch_cm, planes: Vec::new(), meta: BTreeMap::new() }
    }

    pub fn push_plane(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<()> {
        let name = name.into();
        if values.len() != self.width * self.height {
            return Err(Error::InvalidImage(format!(
                "plane {name} has {} values, expected {}",
                values.len(),
                self.width * self.height
            )));
        }
        if self.planes.iter().any(|(n, _)| *n == name) {
            return Err(Error::InvalidImage(format!("duplicate plane name {name}")));
        }
        self.planes.push((name, values));
        Ok(())
    }

    pub fn plane(&self, name: &str) -> Result<&[f64]> {
        self.planes
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::Format(format!("missing plane {name}")))
    }

    fn encode(&self) -> Vec<u8> {
        let header = PlaneHeader {
            width: self.width,
            height: self.height,
            pixel_pitch_cm: self.pixel_pitch_cm,
            planes: self.planes.iter().map(|(n, _)| n.clone()).collect(),
            meta: self.meta.clone(),
        };
        let header_json = serde_json::to_vec(&header).expect("header serialization");
        let mut out = Vec::with_capacity(
            16 + header_json.len() + self.planes.len() * self.width * self.height * 8,
        );
        out.extend_from_slice(IMAGE_MAGIC);
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        for (_, values) in &self.planes {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// SHA-256 of the full encoded container, as lowercase hex.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.encode());
        format!("{:x}", hasher.finalize())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.encode();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;

        if bytes.len() < 16 || &bytes[..8] != IMAGE_MAGIC {
            return Err(Error::parse(path, "not a ZRIMG001 plane container"));
        }
        let header_len =
            u64::from_le_bytes(bytes[8..16].try_into().expect("8-byte slice")) as usize;
        let body_start = 16 + header_len;
        if bytes.len() < body_start {
            return Err(Error::parse(path, "truncated header"));
        }
        let header: PlaneHeader = serde_json::from_slice(&bytes[16..body_start])
            .map_err(|e| Error::parse(path, e.to_string()))?;
        let n = header.width * header.height;
        let expected = body_start + header.planes.len() * n * 8;
        if bytes.len() != expected {
            return Err(Error::parse(
                path,
                format!("expected {expected} bytes, found {}", bytes.len()),
            ));
        }
        let mut planes = Vec::with_capacity(header.planes.len());
        let mut offset = body_start;
        for name in header.planes {
            let mut values = Vec::with_capacity(n);
            for i in 0..n {
                let start = offset + i * 8;
                values.push(f64::from_le_bytes(
                    bytes[start..start + 8].try_into().expect("8-byte slice"),
                ));
            }
            offset += n * 8;
            planes.push((name, values));
        }
        Ok(PlaneSet {
            width: header.width,
            height: header.height,
            pixel_pitch_cm: header.pixel_pitch_cm,
            planes,
            meta: header.meta,
        })
    }
}
