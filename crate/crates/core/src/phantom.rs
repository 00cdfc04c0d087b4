//! Declarative 2-D scenes, noiseless rendering, and the noise model.
//!
//! A [`Scene`] is a list of primitives on a centimeter canvas sampled at
//! pixel centers under a parallel beam. Rectangles contribute
//! density × depth along the beam; discs model balls and contribute the
//! analytic chord density × 2√(r² − d²) at center offset d. Rendering
//! produces the exact per-pixel material stack (a [`PathLengthMap`]) and the
//! noiseless dual-energy image through the forward model; identical stacks
//! are evaluated once.
//!
//! Noise resamples each α from Normal(α, fraction·α), clamped at zero, with
//! one counter-derived RNG stream per pixel so results are byte-identical
//! regardless of how work is scheduled.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::ForwardModel;
use crate::image::{default_sigma, DualEnergyImage, DEFAULT_NOISE_FRACTION};
use crate::par;
use crate::xsec::{Attenuator, Material};

/// Default pixel pitch for desk-scale phantoms, cm.
pub const DEFAULT_PIXEL_PITCH: f64 = 0.5;

/// Canvas extent in centimeters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Canvas {
    pub width_cm: f64,
    pub height_cm: f64,
}

/// Primitive geometry. Rectangles carry an explicit beam depth; discs are
/// balls whose depth is the chord at the sampled offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Shape {
    Rectangle { x0_cm: f64, y0_cm: f64, width_cm: f64, height_cm: f64, depth_cm: f64 },
    Disc { cx_cm: f64, cy_cm: f64, r_cm: f64 },
}

/// One scene primitive: geometry, composition, mass density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    #[serde(flatten)]
    pub shape: Shape,
    pub material: Attenuator,
    pub density_g_cm3: f64,
}

impl Primitive {
    /// Area density contributed at exact scene coordinates, g/cm².
    pub fn lambda_at(&self, x_cm: f64, y_cm: f64) -> f64 {
        match self.shape {
            Shape::Rectangle { x0_cm, y0_cm, width_cm, height_cm, depth_cm } => {
                if x_cm >= x0_cm
                    && x_cm < x0_cm + width_cm
                    && y_cm >= y0_cm
                    && y_cm < y0_cm + height_cm
                {
                    self.density_g_cm3 * depth_cm
                } else {
                    0.0
                }
            }
            Shape::Disc { cx_cm, cy_cm, r_cm } => {
                let d2 = (x_cm - cx_cm).powi(2) + (y_cm - cy_cm).powi(2);
                if d2 < r_cm * r_cm {
                    self.density_g_cm3 * 2.0 * (r_cm * r_cm - d2).sqrt()
                } else {
                    0.0
                }
            }
        }
    }
}

/// A declarative 2-D scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub canvas: Canvas,
    pub pixel_pitch_cm: f64,
    pub primitives: Vec<Primitive>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.canvas.width_cm, self.canvas.height_cm);
        if !(w > 0.0) || !(h > 0.0) || !w.is_finite() || !h.is_finite() {
            return Err(Error::InvalidScene(format!("canvas {w} x {h} cm")));
        }
        if !(self.pixel_pitch_cm > 0.0) || !self.pixel_pitch_cm.is_finite() {
            return Err(Error::InvalidScene(format!("pixel pitch {}", self.pixel_pitch_cm)));
        }
        self.grid_dims()?;
        const EDGE_TOL: f64 = 1e-9;
        for (i, p) in self.primitives.iter().enumerate() {
            if !(p.density_g_cm3 > 0.0) || !p.density_g_cm3.is_finite() {
                return Err(Error::InvalidScene(format!(
                    "primitive {i}: density {} g/cm3",
                    p.density_g_cm3
                )));
            }
            let bounds_ok = match p.shape {
                Shape::Rectangle { x0_cm, y0_cm, width_cm, height_cm, depth_cm } => {
                    if !(width_cm > 0.0) || !(height_cm > 0.0) || !(depth_cm > 0.0) {
                        return Err(Error::InvalidScene(format!(
                            "primitive {i}: non-positive rectangle extent"
                        )));
                    }
                    x0_cm >= -EDGE_TOL
                        && y0_cm >= -EDGE_TOL
                        && x0_cm + width_cm <= w + EDGE_TOL
                        && y0_cm + height_cm <= h + EDGE_TOL
                }
                Shape::Disc { cx_cm, cy_cm, r_cm } => {
                    if !(r_cm > 0.0) {
                        return Err(Error::InvalidScene(format!(
                            "primitive {i}: non-positive disc radius"
                        )));
                    }
                    cx_cm - r_cm >= -EDGE_TOL
                        && cy_cm - r_cm >= -EDGE_TOL
                        && cx_cm + r_cm <= w + EDGE_TOL
                        && cy_cm + r_cm <= h + EDGE_TOL
                }
            };
            if !bounds_ok {
                return Err(Error::InvalidScene(format!("primitive {i} extends beyond canvas")));
            }
        }
        Ok(())
    }

    /// Pixel grid dimensions; the canvas must be an integral number of
    /// pitches in both directions.
    pub fn grid_dims(&self) -> Result<(usize, usize)> {
        let fit = |extent: f64| -> Result<usize> {
            let n = (extent / self.pixel_pitch_cm).round();
            if n < 1.0 || (n * self.pixel_pitch_cm - extent).abs() > 1e-6 * extent {
                return Err(Error::InvalidScene(format!(
                    "canvas extent {extent} cm is not a multiple of pitch {} cm",
                    self.pixel_pitch_cm
                )));
            }
            Ok(n as usize)
        };
        Ok((fit(self.canvas.width_cm)?, fit(self.canvas.height_cm)?))
    }

    /// A copy of the scene resampled at a different pitch.
    pub fn with_pitch(&self, pixel_pitch_cm: f64) -> Scene {
        Scene { pixel_pitch_cm, ..self.clone() }
    }

    /// Material layers crossed at exact scene coordinates:
    /// (primitive index, λ in g/cm²), in primitive order.
    pub fn layers_at(&self, x_cm: f64, y_cm: f64) -> Vec<(u32, f64)> {
        let mut layers = Vec::new();
        for (i, p) in self.primitives.iter().enumerate() {
            let lambda = p.lambda_at(x_cm, y_cm);
            if lambda > 0.0 {
                layers.push((i as u32, lambda));
            }
        }
        layers
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("scene serialization");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Scene> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let scene: Scene =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        scene.validate()?;
        Ok(scene)
    }
}

/// Exact per-pixel material stacks in compressed sparse rows.
#[derive(Debug, Clone)]
pub struct PathLengthMap {
    pub width: usize,
    pub height: usize,
    pub pixel_pitch_cm: f64,
    offsets: Vec<u32>,
    layers: Vec<(u32, f64)>,
}

impl PathLengthMap {
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Layers crossed by pixel `i`: (primitive index, λ).
    pub fn layers_of(&self, i: usize) -> &[(u32, f64)] {
        &self.layers[self.offsets[i] as usize..self.offsets[i + 1] as usize]
    }

    /// Total area density of pixel `i`, g/cm².
    pub fn total_lambda(&self, i: usize) -> f64 {
        self.layers_of(i).iter().map(|&(_, l)| l).sum()
    }
}

/// Build the path-length map by sampling every pixel center.
pub fn path_length_map(scene: &Scene) -> Result<PathLengthMap> {
    scene.validate()?;
    let (nx, ny) = scene.grid_dims()?;
    let pitch = scene.pixel_pitch_cm;
    let rows: Vec<Vec<Vec<(u32, f64)>>> = par::map_indexed(ny, |y| {
        let yc = (y as f64 + 0.5) * pitch;
        (0..nx).map(|x| scene.layers_at((x as f64 + 0.5) * pitch, yc)).collect()
    });
    let mut offsets = Vec::with_capacity(nx * ny + 1);
    let mut layers = Vec::new();
    offsets.push(0u32);
    for row in rows {
        for px in row {
            layers.extend_from_slice(&px);
            offsets.push(layers.len() as u32);
        }
    }
    Ok(PathLengthMap { width: nx, height: ny, pixel_pitch_cm: pitch, offsets, layers })
}

/// Render the noiseless dual-energy radiograph of a scene.
///
/// σ planes are filled with the default noise model width
/// max(0.1·α, 1e-3); identical material stacks are evaluated through the
/// forward model only once.
pub fn render_ideal(
    scene: &Scene,
    fm: &ForwardModel,
) -> Result<(DualEnergyImage, PathLengthMap)> {
    let map = path_length_map(scene)?;
    let bins = scene
        .primitives
        .iter()
        .map(|p| fm.bin_attenuator(&p.material))
        .collect::<Result<Vec<_>>>()?;

    // Dedup stacks: bit-exact keys, first-seen order for determinism.
    let n = map.len();
    let mut stack_ids: Vec<u32> = Vec::with_capacity(n);
    let mut unique: HashMap<Vec<(u32, u64)>, u32> = HashMap::new();
    let mut unique_stacks: Vec<&[(u32, f64)]> = Vec::new();
    for i in 0..n {
        let stack = map.layers_of(i);
        let key: Vec<(u32, u64)> = stack.iter().map(|&(m, l)| (m, l.to_bits())).collect();
        let next_id = unique_stacks.len() as u32;
        let id = *unique.entry(key).or_insert_with(|| {
            unique_stacks.push(stack);
            next_id
        });
        stack_ids.push(id);
    }

    let alphas: Vec<Result<(f64, f64)>> = par::map_indexed(unique_stacks.len(), |u| {
        let refs: Vec<(&crate::forward::BinnedAttenuator, f64)> =
            unique_stacks[u].iter().map(|&(m, l)| (&bins[m as usize], l)).collect();
        fm.alpha_pair_stack(&refs)
    });
    let alphas = alphas.into_iter().collect::<Result<Vec<(f64, f64)>>>()?;

    let mut img = DualEnergyImage::open_beam(map.width, map.height, map.pixel_pitch_cm);
    for i in 0..n {
        let (ah, al) = alphas[stack_ids[i] as usize];
        img.alpha_h[i] = ah;
        img.alpha_l[i] = al;
        img.sigma_h[i] = default_sigma(ah, DEFAULT_NOISE_FRACTION);
        img.sigma_l[i] = default_sigma(al, DEFAULT_NOISE_FRACTION);
    }
    img.validate()?;
    Ok((img, map))
}

fn splitmix(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derive an independent sub-seed from (seed, stream, index); used for
/// per-pixel noise streams (stream 0) and per-run ensemble seeds (stream 1)
/// so every draw is independent of scheduling order.
pub fn derive_subseed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut x = seed ^ 0x5bf0_3635_d1c3_f9d1;
    x = splitmix(x.wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
    x = splitmix(x.wrapping_add(index.wrapping_mul(0xd1b5_4a32_d192_ed03)));
    x
}

/// Resample each valid pixel's α from Normal(α, fraction·α), clamped at 0.
///
/// Output σ planes carry the model width max(fraction·α_ideal, 1e-3).
/// `fraction = 0` returns the input unchanged. Deterministic in
/// (image, fraction, seed) and independent of thread count.
pub fn apply_noise(img: &DualEnergyImage, fraction: f64, seed: u64) -> Result<DualEnergyImage> {
    if !(fraction >= 0.0) || !fraction.is_finite() {
        return Err(Error::NegativeValue(format!("noise fraction {fraction}")));
    }
    img.validate()?;
    if fraction == 0.0 {
        return Ok(img.clone());
    }
    let n = img.len();
    let drawn: Vec<(f64, f64)> = par::map_indexed(n, |i| {
        if img.mask[i] == 0 {
            return (img.alpha_h[i], img.alpha_l[i]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_subseed(seed, 0, i as u64));
        let ah = Normal::new(img.alpha_h[i], fraction * img.alpha_h[i])
            .expect("valid normal")
            .sample(&mut rng)
            .max(0.0);
        let al = Normal::new(img.alpha_l[i], fraction * img.alpha_l[i])
            .expect("valid normal")
            .sample(&mut rng)
            .max(0.0);
        (ah, al)
    });
    let mut out = img.clone();
    for i in 0..n {
        out.alpha_h[i] = drawn[i].0;
        out.alpha_l[i] = drawn[i].1;
        if img.mask[i] != 0 {
            out.sigma_h[i] = default_sigma(img.alpha_h[i], fraction);
            out.sigma_l[i] = default_sigma(img.alpha_l[i], fraction);
        }
    }
    Ok(out)
}

// Mass densities (g/cm³) of the phantom materials.
pub const DENSITY_GRAPHITE: f64 = 2.26;
pub const DENSITY_ALUMINUM: f64 = 2.699;
pub const DENSITY_IRON: f64 = 7.874;
pub const DENSITY_SILVER: f64 = 10.49;
pub const DENSITY_GADOLINIUM: f64 = 7.90;
pub const DENSITY_TIN: f64 = 7.31;
pub const DENSITY_LEAD: f64 = 11.35;
pub const DENSITY_URANIUM: f64 = 18.95;
pub const DENSITY_PLUTONIUM: f64 = 19.8;
pub const DENSITY_WATER: f64 = 1.0;
pub const DENSITY_SILVER_CHLORIDE: f64 = 5.56;
pub const DENSITY_URANIUM_OXIDE: f64 = 10.97;
pub const DENSITY_POLYETHYLENE: f64 = 0.94;

/// One declared phantom object with its interior sampling region.
#[derive(Debug, Clone)]
pub struct PhantomObject {
    pub name: String,
    /// Index of the object's primitive within the scene.
    pub prim_index: usize,
    pub center_cm: (f64, f64),
    /// This primitive's own λ contribution at the exact center, g/cm².
    pub lambda_at_center: f64,
    /// Interior sampling rectangle [x0, y0, x1, y1] in cm, clear of edges.
    pub sample_rect_cm: [f64; 4],
}

/// A built-in scene together with its declared-object metadata.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub scene: Scene,
    pub objects: Vec<PhantomObject>,
}

impl Phantom {
    /// Pixel-index rectangle (x0, y0, x1, y1; half-open) of an object's
    /// sampling region at the scene's pitch.
    pub fn sample_rect_px(&self, obj: &PhantomObject) -> (usize, usize, usize, usize) {
        rect_cm_to_px(&self.scene, obj.sample_rect_cm)
    }
}

/// Convert a cm rectangle to half-open pixel bounds at the scene's pitch.
pub fn rect_cm_to_px(scene: &Scene, rect: [f64; 4]) -> (usize, usize, usize, usize) {
    let p = scene.pixel_pitch_cm;
    let x0 = (rect[0] / p).ceil() as usize;
    let y0 = (rect[1] / p).ceil() as usize;
    let x1 = (rect[2] / p).floor() as usize;
    let y1 = (rect[3] / p).floor() as usize;
    (x0, y0, x1, y1)
}

fn element(z: u32) -> Attenuator {
    Attenuator::Element(z as f64)
}

fn compound(name: &str, formula: &[(u32, f64)]) -> Attenuator {
    Attenuator::Compound(Material::from_formula(name, formula).expect("valid formula"))
}

fn slab(x0: f64, y0: f64, w: f64, h: f64, lambda: f64, material: Attenuator, rho: f64) -> Primitive {
    Primitive {
        shape: Shape::Rectangle {
            x0_cm: x0,
            y0_cm: y0,
            width_cm: w,
            height_cm: h,
            depth_cm: lambda / rho,
        },
        material,
        density_g_cm3: rho,
    }
}

fn ball(cx: f64, cy: f64, r: f64, material: Attenuator, rho: f64) -> Primitive {
    Primitive { shape: Shape::Disc { cx_cm: cx, cy_cm: cy, r_cm: r }, material, density_g_cm3: rho }
}

/// The cargo phantom: seven element boxes, three compound balls, a
/// plutonium pit inside a polyethylene shell, all behind the container's
/// front and back steel walls (0.2 cm each, modeled as one uniform 0.4 cm
/// steel layer across the canvas).
pub fn cargo_phantom() -> Phantom {
    let canvas = Canvas { width_cm: 200.0, height_cm: 100.0 };
    let mut primitives = Vec::new();
    let mut objects = Vec::new();

    // Container walls (primitive 0): not a declared object.
    let wall_depth = 0.4;
    primitives.push(Primitive {
        shape: Shape::Rectangle {
            x0_cm: 0.0,
            y0_cm: 0.0,
            width_cm: canvas.width_cm,
            height_cm: canvas.height_cm,
            depth_cm: wall_depth,
        },
        material: element(26),
        density_g_cm3: DENSITY_IRON,
    });

    // Seven 10×10 cm boxes along the top half.
    let boxes: [(&str, u32, f64, f64); 7] = [
        ("graphite_box", 6, 30.0, DENSITY_GRAPHITE),
        ("aluminum_box", 13, 40.0, DENSITY_ALUMINUM),
        ("iron_box", 26, 79.0, DENSITY_IRON),
        ("silver_box", 47, 79.0, DENSITY_SILVER),
        ("gadolinium_box", 64, 79.0, DENSITY_GADOLINIUM),
        ("lead_box", 82, 79.0, DENSITY_LEAD),
        ("uranium_box", 92, 76.0, DENSITY_URANIUM),
    ];
    for (i, &(name, z, lambda, rho)) in boxes.iter().enumerate() {
        let x0 = 12.0 + 27.0 * i as f64;
        let y0 = 60.0;
        objects.push(PhantomObject {
            name: name.into(),
            prim_index: primitives.len(),
            center_cm: (x0 + 5.0, y0 + 5.0),
            lambda_at_center: rho * (lambda / rho),
            sample_rect_cm: [x0 + 2.0, y0 + 2.0, x0 + 8.0, y0 + 8.0],
        });
        primitives.push(slab(x0, y0, 10.0, 10.0, lambda, element(z), rho));
    }

    // Compound balls along the bottom half.
    let water = compound("water", &[(1, 2.0), (8, 1.0)]);
    let agcl = compound("silver_chloride", &[(47, 1.0), (17, 1.0)]);
    let uo2 = compound("uranium_oxide", &[(92, 1.0), (8, 2.0)]);
    let ch2 = compound("polyethylene", &[(6, 1.0), (1, 2.0)]);
    let balls: [(&str, Attenuator, f64, f64, f64, f64); 3] = [
        ("water_cylinder", water, DENSITY_WATER, 45.0, 32.0, 17.5),
        ("silver_chloride_cylinder", agcl, DENSITY_SILVER_CHLORIDE, 85.0, 32.0, 7.5),
        ("uranium_oxide_cylinder", uo2, DENSITY_URANIUM_OXIDE, 110.0, 32.0, 3.75),
    ];
    for (name, material, rho, cx, cy, r) in balls {
        let half = r * 0.5;
        objects.push(PhantomObject {
            name: name.into(),
            prim_index: primitives.len(),
            center_cm: (cx, cy),
            lambda_at_center: rho * 2.0 * r,
            sample_rect_cm: [cx - half, cy - half, cx + half, cy + half],
        });
        primitives.push(ball(cx, cy, r, material, rho));
    }

    // Plutonium pit inside a polyethylene shell (shell modeled as a full
    // ball; the pit volume is small enough that not hollowing the shell
    // shifts its stack by < 4 g/cm² of CH₂ on pit-crossing pixels).
    let (pit_cx, pit_cy) = (150.0, 32.0);
    objects.push(PhantomObject {
        name: "polyethylene_shield".into(),
        prim_index: primitives.len(),
        center_cm: (pit_cx, pit_cy),
        lambda_at_center: DENSITY_POLYETHYLENE * 2.0 * 12.5,
        sample_rect_cm: [pit_cx + 4.75, pit_cy - 2.5, pit_cx + 9.75, pit_cy + 2.5],
    });
    primitives.push(ball(pit_cx, pit_cy, 12.5, ch2, DENSITY_POLYETHYLENE));
    objects.push(PhantomObject {
        name: "plutonium_pit".into(),
        prim_index: primitives.len(),
        center_cm: (pit_cx, pit_cy),
        lambda_at_center: DENSITY_PLUTONIUM * 2.0 * 2.0,
        sample_rect_cm: [pit_cx - 1.0, pit_cy - 1.0, pit_cx + 1.0, pit_cy + 1.0],
    });
    primitives.push(ball(pit_cx, pit_cy, 2.0, element(94), DENSITY_PLUTONIUM));

    let scene = Scene { canvas, pixel_pitch_cm: DEFAULT_PIXEL_PITCH, primitives };
    scene.validate().expect("built-in scene is valid");
    Phantom { scene, objects }
}

/// Steel column area densities of the shielded phantom, g/cm².
pub const SHIELD_COLUMNS: [f64; 5] = [0.0, 50.0, 100.0, 150.0, 200.0];

/// Shielded-phantom materials per row: (name, z, λ, density).
pub const SHIELDED_ROWS: [(&str, u32, f64, f64); 5] = [
    ("graphite", 6, 76.0, DENSITY_GRAPHITE),
    ("aluminum", 13, 76.0, DENSITY_ALUMINUM),
    ("tin", 50, 73.0, DENSITY_TIN),
    ("lead", 82, 79.0, DENSITY_LEAD),
    ("plutonium", 94, 79.0, DENSITY_PLUTONIUM),
];

fn shielded_box_x0(col: usize) -> f64 {
    12.0 + 30.0 * col as f64
}

fn shielded_box_y0(row: usize) -> f64 {
    10.0 + 15.0 * row as f64
}

/// The shielded phantom: a 5×5 grid of 5×5 cm boxes (rows graphite,
/// aluminum, tin, lead, plutonium) behind vertical steel slabs of 0, 50,
/// 100, 150, 200 g/cm². Object names are `{material}_c{column}`.
pub fn shielded_phantom() -> Phantom {
    let canvas = Canvas { width_cm: 160.0, height_cm: 90.0 };
    let mut primitives = Vec::new();
    let mut objects = Vec::new();

    // Steel slabs first so boxes stack on top of them.
    for (col, &steel_lambda) in SHIELD_COLUMNS.iter().enumerate() {
        if steel_lambda == 0.0 {
            continue;
        }
        let x0 = shielded_box_x0(col) - 5.0;
        primitives.push(slab(x0, 0.0, 15.0, canvas.height_cm, steel_lambda, element(26), DENSITY_IRON));
    }

    for (row, &(name, z, lambda, rho)) in SHIELDED_ROWS.iter().enumerate() {
        for col in 0..SHIELD_COLUMNS.len() {
            let x0 = shielded_box_x0(col);
            let y0 = shielded_box_y0(row);
            objects.push(PhantomObject {
                name: format!("{name}_c{col}"),
                prim_index: primitives.len(),
                center_cm: (x0 + 2.5, y0 + 2.5),
                lambda_at_center: rho * (lambda / rho),
                sample_rect_cm: [x0 + 1.0, y0 + 1.0, x0 + 4.0, y0 + 4.0],
            });
            primitives.push(slab(x0, y0, 5.0, 5.0, lambda, element(z), rho));
        }
    }

    let scene = Scene { canvas, pixel_pitch_cm: DEFAULT_PIXEL_PITCH, primitives };
    scene.validate().expect("built-in scene is valid");
    Phantom { scene, objects }
}

/// Shield-only sampling rectangle (cm) of a shielded-phantom column, clear
/// of all boxes; `None` for the unshielded column.
pub fn shield_sample_rect_cm(col: usize) -> Option<[f64; 4]> {
    if col == 0 || SHIELD_COLUMNS[col] == 0.0 {
        return None;
    }
    let x0 = shielded_box_x0(col);
    Some([x0 + 6.0, 5.0, x0 + 9.0, 85.0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{standard_model, Beam, PairParams};
    use crate::xsec::synthetic_library;
    use std::sync::Arc;

    fn model() -> ForwardModel {
        standard_model(Arc::new(synthetic_library()), PairParams::unity()).unwrap()
    }

    fn single_box_scene(z: u32, lambda: f64, rho: f64) -> Scene {
        Scene {
            canvas: Canvas { width_cm: 20.0, height_cm: 20.0 },
            pixel_pitch_cm: 0.5,
            primitives: vec![slab(5.0, 5.0, 10.0, 10.0, lambda, element(z), rho)],
        }
    }

    #[test]
    fn empty_scene_renders_open_beam() {
        let scene = Scene {
            canvas: Canvas { width_cm: 4.0, height_cm: 2.0 },
            pixel_pitch_cm: 0.5,
            primitives: vec![],
        };
        let (img, map) = render_ideal(&scene, &model()).unwrap();
        assert_eq!((img.width, img.height), (8, 4));
        assert!(img.alpha_h.iter().all(|&a| a == 0.0));
        assert!(img.alpha_l.iter().all(|&a| a == 0.0));
        assert!((0..map.len()).all(|i| map.layers_of(i).is_empty()));
    }

    #[test]
    fn single_box_interior_matches_alpha_model_exactly() {
        let fm = model();
        let scene = single_box_scene(26, 79.0, DENSITY_IRON);
        let (img, map) = render_ideal(&scene, &fm).unwrap();
        let i = img.idx(20, 20); // center (10.25, 10.25) cm, inside the box
        assert_eq!(map.layers_of(i).len(), 1);
        let lambda = map.layers_of(i)[0].1;
        assert!((lambda - 79.0).abs() < 1e-12);
        let expect_h = fm.alpha_model(Beam::H, lambda, 26.0).unwrap();
        let expect_l = fm.alpha_model(Beam::L, lambda, 26.0).unwrap();
        assert_eq!(img.alpha_h[i].to_bits(), expect_h.to_bits());
        assert_eq!(img.alpha_l[i].to_bits(), expect_l.to_bits());
        // Outside the box: open beam.
        let j = img.idx(2, 2);
        assert_eq!(img.alpha_h[j], 0.0);
        assert_eq!(img.sigma_h[j], crate::image::SIGMA_FLOOR);
    }

    #[test]
    fn disc_chords_match_analytic_formula() {
        let scene = Scene {
            canvas: Canvas { width_cm: 20.0, height_cm: 20.0 },
            pixel_pitch_cm: 0.5,
            primitives: vec![ball(10.0, 10.0, 6.0, element(13), 2.0)],
        };
        // Exact center: chord equals the diameter.
        let center = scene.layers_at(10.0, 10.0);
        assert_eq!(center.len(), 1);
        assert!((center[0].1 - 2.0 * 2.0 * 6.0).abs() < 1e-12);
        // A row through the center: per-pixel chord from the analytic form.
        let map = path_length_map(&scene).unwrap();
        let y = 20; // center 10.25 cm
        for x in 0..map.width {
            let xc = (x as f64 + 0.5) * 0.5;
            let d2 = (xc - 10.0).powi(2) + (10.25f64 - 10.0).powi(2);
            let expect = if d2 < 36.0 { 2.0 * 2.0 * (36.0 - d2).sqrt() } else { 0.0 };
            let got = map.total_lambda(y * map.width + x);
            assert!((got - expect).abs() < 1e-12, "x={x}: {got} vs {expect}");
        }
    }

    #[test]
    fn render_is_translation_equivariant() {
        let fm = model();
        let scene = single_box_scene(13, 40.0, DENSITY_ALUMINUM);
        let mut shifted = scene.clone();
        for p in &mut shifted.primitives {
            if let Shape::Rectangle { x0_cm, .. } = &mut p.shape {
                *x0_cm += 0.5;
            }
        }
        let (img_a, _) = render_ideal(&scene, &fm).unwrap();
        let (img_b, _) = render_ideal(&shifted, &fm).unwrap();
        for y in 0..img_a.height {
            for x in 0..img_a.width - 1 {
                let a = img_a.alpha_h[img_a.idx(x, y)];
                let b = img_b.alpha_h[img_b.idx(x + 1, y)];
                assert_eq!(a.to_bits(), b.to_bits(), "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn zero_noise_is_identity() {
        let (img, _) = render_ideal(&single_box_scene(26, 79.0, DENSITY_IRON), &model()).unwrap();
        let out = apply_noise(&img, 0.0, 42).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn noise_is_deterministic_and_seed_sensitive() {
        let (img, _) = render_ideal(&single_box_scene(26, 79.0, DENSITY_IRON), &model()).unwrap();
        let a = apply_noise(&img, 0.1, 7).unwrap();
        let b = apply_noise(&img, 0.1, 7).unwrap();
        let c = apply_noise(&img, 0.1, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        // Open-beam pixels stay exactly zero; σ planes carry the model width.
        let j = img.idx(2, 2);
        assert_eq!(a.alpha_h[j], 0.0);
        assert_eq!(a.sigma_h[j], crate::image::SIGMA_FLOOR);
        let i = img.idx(20, 20);
        assert_eq!(a.sigma_h[i], 0.1 * img.alpha_h[i]);
    }

    #[test]
    fn noise_moments_match_the_model() {
        let mut img = DualEnergyImage::open_beam(1000, 100, 1.0);
        for i in 0..img.len() {
            img.alpha_h[i] = 2.0;
            img.alpha_l[i] = 2.0;
        }
        let noisy = apply_noise(&img, 0.1, 123).unwrap();
        let n = img.len() as f64;
        let mean: f64 = noisy.alpha_h.iter().sum::<f64>() / n;
        let var: f64 = noisy.alpha_h.iter().map(|&a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let std = var.sqrt();
        // mean within 3·σ/√n of 2; std within 2% of 0.2
        assert!((mean - 2.0).abs() < 3.0 * 0.2 / n.sqrt(), "mean {mean}");
        assert!((std - 0.2).abs() < 0.02 * 0.2, "std {std}");
    }

    #[test]
    fn cargo_phantom_inventory() {
        let ph = cargo_phantom();
        let rects = ph
            .scene
            .primitives
            .iter()
            .filter(|p| matches!(p.shape, Shape::Rectangle { .. }))
            .count();
        let discs = ph
            .scene
            .primitives
            .iter()
            .filter(|p| matches!(p.shape, Shape::Disc { .. }))
            .count();
        assert_eq!(rects, 8); // 7 boxes + container walls
        assert_eq!(discs, 5); // 3 cylinders + shell + pit
        assert_eq!(ph.objects.len(), 12);
        let (nx, ny) = ph.scene.grid_dims().unwrap();
        assert_eq!((nx, ny), (400, 200));
        // 0.1 cm pitch upsamples to exactly 2,000,000 pixels.
        let fine = ph.scene.with_pitch(0.1);
        let (fx, fy) = fine.grid_dims().unwrap();
        assert_eq!(fx * fy, 2_000_000);
    }

    #[test]
    fn declared_lambdas_round_trip_at_centers() {
        for ph in [cargo_phantom(), shielded_phantom()] {
            for obj in &ph.objects {
                let layers = ph.scene.layers_at(obj.center_cm.0, obj.center_cm.1);
                let own = layers
                    .iter()
                    .find(|(m, _)| *m as usize == obj.prim_index)
                    .unwrap_or_else(|| panic!("{} missing at center", obj.name));
                assert!(
                    (own.1 - obj.lambda_at_center).abs() < 1e-9,
                    "{}: {} vs {}",
                    obj.name,
                    own.1,
                    obj.lambda_at_center
                );
            }
        }
    }

    #[test]
    fn shielded_phantom_geometry() {
        let ph = shielded_phantom();
        assert_eq!(ph.objects.len(), 25);
        assert_eq!(ph.scene.primitives.len(), 29); // 25 boxes + 4 slabs
        // Column 0 objects see no steel; column 4 objects see 200 g/cm².
        for row in 0..5 {
            let c0 = &ph.objects[row * 5];
            let layers = ph.scene.layers_at(c0.center_cm.0, c0.center_cm.1);
            assert_eq!(layers.len(), 1, "{} should be unshielded", c0.name);
            let c4 = &ph.objects[row * 5 + 4];
            let layers = ph.scene.layers_at(c4.center_cm.0, c4.center_cm.1);
            assert_eq!(layers.len(), 2, "{} should sit behind steel", c4.name);
            let steel: f64 = layers
                .iter()
                .filter(|(m, _)| *m as usize != c4.prim_index)
                .map(|(_, l)| l)
                .sum();
            assert!((steel - 200.0).abs() < 1e-9);
        }
        // Shield sampling regions are steel-only.
        for col in 1..5 {
            let rect = shield_sample_rect_cm(col).unwrap();
            let layers = ph.scene.layers_at(
                0.5 * (rect[0] + rect[2]),
                0.5 * (rect[1] + rect[3]),
            );
            assert_eq!(layers.len(), 1, "column {col}");
            assert!((layers[0].1 - SHIELD_COLUMNS[col]).abs() < 1e-9);
        }
        assert!(shield_sample_rect_cm(0).is_none());
    }

    #[test]
    fn scene_json_round_trip_and_validation() {
        let ph = cargo_phantom();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.json");
        ph.scene.save(&path).unwrap();
        let loaded = Scene::load(&path).unwrap();
        assert_eq!(loaded, ph.scene);

        let mut bad = ph.scene.clone();
        bad.primitives[1] = slab(195.0, 60.0, 10.0, 10.0, 30.0, element(6), DENSITY_GRAPHITE);
        assert!(matches!(bad.validate(), Err(Error::InvalidScene(_))));

        let mut bad = ph.scene.clone();
        bad.pixel_pitch_cm = 0.3; // 200/0.3 is not integral
        assert!(bad.validate().is_err());

        let mut bad = ph.scene.clone();
        bad.primitives[0].density_g_cm3 = -1.0;
        assert!(bad.validate().is_err());
    }
}
