//! Synthetic aerial-like scenes with building, road, vegetation and car
//! classes. These are the desk-scale fixtures the rest of the crate is
//! tested against.
//!
//! Config files are TOML. Every key is optional:
//!
//! ```toml
//! height = 64          # pixels
//! width = 64
//! count = 16           # images to generate
//! classes = 2          # 2 (building / other) or 6
//! density = 0.25       # target building pixel fraction
//! noise = 0.04         # per-pixel gaussian noise std
//! layout = "uniform"   # or "clustered"
//! clusters = 2         # building clusters for the clustered layout
//! variant = "source"   # or "shifted" (altered palette)
//! shift = 0.2          # per-channel palette offset of the shifted variant
//! sparse = false       # skip the 1% minimum class fraction
//! ```

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{LabelMask, RasterImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Uniform,
    Clustered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Source,
    Shifted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub height: usize,
    pub width: usize,
    pub count: usize,
    pub classes: usize,
    pub density: f64,
    pub noise: f32,
    pub layout: Layout,
    pub clusters: usize,
    pub variant: Variant,
    pub shift: f32,
    pub sparse: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            count: 16,
            classes: 2,
            density: 0.25,
            noise: 0.04,
            layout: Layout::Uniform,
            clusters: 2,
            variant: Variant::Source,
            shift: 0.2,
            sparse: false,
        }
    }
}

impl ToyConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ToyConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes != 2 && self.classes != 6 {
            return Err(Error::Config(format!(
                "toy scenes support 2 or 6 classes, got {}",
                self.classes
            )));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config("toy scenes must be at least 16x16".into()));
        }
        if !(0.0..0.8).contains(&self.density) {
            return Err(Error::Config(format!("density {} outside [0, 0.8)", self.density)));
        }
        if !(0.0..=0.3).contains(&self.shift) || self.noise < 0.0 {
            return Err(Error::Config("shift must lie in [0, 0.3] and noise be >= 0".into()));
        }
        Ok(())
    }

    pub fn shifted(&self) -> Self {
        Self {
            variant: Variant::Shifted,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Material {
    Grass,
    Tree,
    Road,
    RoofRed,
    RoofGray,
    /// Dark flat roof, colored like a parking lot.
    RoofFlat,
    Lot,
    Car,
    Clutter,
}

impl Material {
    fn source_color(self) -> [f32; 3] {
        match self {
            Material::Grass => [0.30, 0.56, 0.22],
            Material::Tree => [0.16, 0.38, 0.15],
            Material::Road => [0.46, 0.47, 0.45],
            Material::RoofRed => [0.62, 0.40, 0.27],
            Material::RoofGray => [0.56, 0.55, 0.53],
            Material::RoofFlat | Material::Lot => [0.34, 0.34, 0.36],
            Material::Car => [0.22, 0.30, 0.60],
            Material::Clutter => [0.52, 0.44, 0.33],
        }
    }

    fn is_roof(self) -> bool {
        matches!(self, Material::RoofRed | Material::RoofGray | Material::RoofFlat)
    }

    fn label(self, classes: usize) -> u8 {
        if classes == 2 {
            return u8::from(self.is_roof());
        }
        match self {
            Material::Road | Material::Lot => 0,
            Material::RoofRed | Material::RoofGray | Material::RoofFlat => 1,
            Material::Grass => 2,
            Material::Tree => 3,
            Material::Car => 4,
            Material::Clutter => 5,
        }
    }
}

/// Per-channel direction of the shifted palette.
const SHIFT_SIGN: [f32; 3] = [1.0, -1.0, 1.0];

fn palette_color(material: Material, variant: Variant, shift: f32) -> [f32; 3] {
    let mut c = material.source_color();
    if variant == Variant::Shifted {
        // Roofs move further than the rest, so buildings also change
        // appearance relative to their surroundings.
        let extra = if material.is_roof() { 0.5 * shift } else { 0.0 };
        for k in 0..3 {
            c[k] += SHIFT_SIGN[k] * (shift + extra);
        }
    }
    c
}

struct Canvas {
    h: usize,
    w: usize,
    material: Array2<Material>,
    edge: Array2<bool>,
}

impl Canvas {
    fn count(&self, pred: impl Fn(Material) -> bool) -> usize {
        self.material.iter().filter(|m| pred(**m)).count()
    }

    fn fraction(&self, pred: impl Fn(Material) -> bool) -> f64 {
        self.count(pred) as f64 / (self.h * self.w) as f64
    }
}

/// Generates `config.count` image/label pairs. Identical seeds give
/// identical outputs; the shifted variant shares the layout of the source
/// variant for the same seed and differs only in appearance.
pub fn generate_toy(seed: u64, config: &ToyConfig) -> Result<Vec<(RasterImage, LabelMask)>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..config.count)
        .map(|_| {
            let layout_seed: u64 = rng.gen();
            let texture_seed: u64 = rng.gen();
            let canvas = layout(config, &mut ChaCha8Rng::seed_from_u64(layout_seed));
            render(config, &canvas, &mut ChaCha8Rng::seed_from_u64(texture_seed))
        })
        .collect()
}

fn layout(cfg: &ToyConfig, rng: &mut ChaCha8Rng) -> Canvas {
    let (h, w) = (cfg.height, cfg.width);
    let mut canvas = Canvas {
        h,
        w,
        material: Array2::from_elem((h, w), Material::Grass),
        edge: Array2::from_elem((h, w), false),
    };
    let scale = ((h * w) as f64 / 4096.0).max(1.0);

    // Roads.
    let road_count = 1 + usize::from(rng.gen_bool(0.5)) + (scale.sqrt() as usize).saturating_sub(1);
    for _ in 0..road_count {
        let width = rng.gen_range(3..=5);
        if rng.gen_bool(0.5) {
            let r = rng.gen_range(0..h - width);
            for y in r..r + width {
                for x in 0..w {
                    canvas.material[[y, x]] = Material::Road;
                }
            }
        } else {
            let c = rng.gen_range(0..w - width);
            for y in 0..h {
                for x in c..c + width {
                    canvas.material[[y, x]] = Material::Road;
                }
            }
        }
    }

    // Tree crowns.
    let trees = (6.0 * scale) as usize;
    for _ in 0..trees {
        let cy = rng.gen_range(0..h) as i64;
        let cx = rng.gen_range(0..w) as i64;
        let r = rng.gen_range(2..=4) as i64;
        paint_disk(&mut canvas, cy, cx, r, Material::Tree, |m| m == Material::Grass);
    }

    // Buildings.
    let area = (h * w) as f64;
    let target = cfg.density;
    let centers: Vec<(f64, f64)> = (0..cfg.clusters.max(1))
        .map(|_| (rng.gen_range(0.2..0.8) * h as f64, rng.gen_range(0.2..0.8) * w as f64))
        .collect();
    let spread = Normal::new(0.0, h.min(w) as f64 / 7.0).expect("valid std");
    let mut attempts = 0;
    while canvas.fraction(Material::is_roof) < target - 0.005 && attempts < 4000 {
        attempts += 1;
        let mut bh = rng.gen_range(5..=13usize).min(h - 2);
        let mut bw = rng.gen_range(5..=13usize).min(w - 2);
        let (cy, cx) = match cfg.layout {
            Layout::Uniform => (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64)),
            Layout::Clustered => {
                let (my, mx) = centers[rng.gen_range(0..centers.len())];
                (my + spread.sample(rng), mx + spread.sample(rng))
            }
        };
        let current = canvas.count(Material::is_roof) as f64;
        // Shrink the footprint instead of overshooting the target.
        while (current + (bh * bw) as f64) / area > target + 0.01 && bh.min(bw) > 3 {
            bh -= 1;
            bw -= 1;
        }
        let top = (cy - bh as f64 / 2.0).clamp(0.0, (h - bh) as f64) as usize;
        let left = (cx - bw as f64 / 2.0).clamp(0.0, (w - bw) as f64) as usize;
        let blocked = (top..top + bh)
            .any(|y| (left..left + bw).any(|x| canvas.material[[y, x]] == Material::Road));
        if blocked {
            continue;
        }
        let added = (top..top + bh)
            .flat_map(|y| (left..left + bw).map(move |x| (y, x)))
            .filter(|&(y, x)| !canvas.material[[y, x]].is_roof())
            .count();
        if (current + added as f64) / area > target + 0.01 {
            continue;
        }
        let roof = match rng.gen_range(0..5) {
            0 | 1 => Material::RoofRed,
            2 | 3 => Material::RoofGray,
            _ => Material::RoofFlat,
        };
        paint_rect(&mut canvas, top, left, bh, bw, roof);
    }

    // Parking lots look exactly like flat roofs and sit among the buildings.
    let flat = canvas.fraction(|m| m == Material::RoofFlat);
    let mut attempts = 0;
    while canvas.fraction(|m| m == Material::Lot) < flat && attempts < 400 {
        attempts += 1;
        let bh = rng.gen_range(5..=11usize).min(h - 2);
        let bw = rng.gen_range(5..=11usize).min(w - 2);
        let (cy, cx) = match cfg.layout {
            Layout::Uniform => (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64)),
            Layout::Clustered => {
                let (my, mx) = centers[rng.gen_range(0..centers.len())];
                (my + spread.sample(rng), mx + spread.sample(rng))
            }
        };
        let top = (cy - bh as f64 / 2.0).clamp(0.0, (h - bh) as f64) as usize;
        let left = (cx - bw as f64 / 2.0).clamp(0.0, (w - bw) as f64) as usize;
        let free = (top..top + bh).all(|y| {
            (left..left + bw).all(|x| matches!(canvas.material[[y, x]], Material::Grass | Material::Tree))
        });
        if free {
            paint_rect(&mut canvas, top, left, bh, bw, Material::Lot);
        }
    }

    let min_fraction = if cfg.sparse || cfg.classes == 2 { 0.0 } else { 0.012 };

    // Cars on the road.
    let mut cars = 0;
    let mut attempts = 0;
    while (cars < (2.0 * scale) as usize || canvas.fraction(|m| m == Material::Car) < min_fraction)
        && attempts < 2000
    {
        attempts += 1;
        let (ch, cw) = if rng.gen_bool(0.5) { (2, 4) } else { (4, 2) };
        let y = rng.gen_range(0..h - ch);
        let x = rng.gen_range(0..w - cw);
        let on_road = (y..y + ch).all(|yy| {
            (x..x + cw).all(|xx| matches!(canvas.material[[yy, xx]], Material::Road | Material::Car))
        });
        if on_road {
            for yy in y..y + ch {
                for xx in x..x + cw {
                    canvas.material[[yy, xx]] = Material::Car;
                }
            }
            cars += 1;
        }
    }

    // Clutter patches on grass.
    let mut clutter = 0;
    let mut attempts = 0;
    while (clutter < (2.0 * scale) as usize
        || canvas.fraction(|m| m == Material::Clutter) < min_fraction)
        && attempts < 2000
    {
        attempts += 1;
        let cy = rng.gen_range(0..h) as i64;
        let cx = rng.gen_range(0..w) as i64;
        let r = rng.gen_range(1..=2);
        paint_disk(&mut canvas, cy, cx, r, Material::Clutter, |m| {
            matches!(m, Material::Grass | Material::Clutter)
        });
        clutter += 1;
    }

    // Low vegetation and trees must also be present for the six-class task.
    if min_fraction > 0.0 {
        let mut attempts = 0;
        while canvas.fraction(|m| m == Material::Tree) < min_fraction && attempts < 500 {
            attempts += 1;
            let cy = rng.gen_range(0..h) as i64;
            let cx = rng.gen_range(0..w) as i64;
            paint_disk(&mut canvas, cy, cx, 3, Material::Tree, |m| m == Material::Grass);
        }
    }
    canvas
}

fn paint_rect(canvas: &mut Canvas, top: usize, left: usize, bh: usize, bw: usize, material: Material) {
    for y in top..top + bh {
        for x in left..left + bw {
            canvas.material[[y, x]] = material;
            canvas.edge[[y, x]] = y == top || x == left || y + 1 == top + bh || x + 1 == left + bw;
        }
    }
}

fn paint_disk(
    canvas: &mut Canvas,
    cy: i64,
    cx: i64,
    r: i64,
    material: Material,
    allowed: impl Fn(Material) -> bool,
) {
    for y in (cy - r).max(0)..=(cy + r).min(canvas.h as i64 - 1) {
        for x in (cx - r).max(0)..=(cx + r).min(canvas.w as i64 - 1) {
            let (yy, xx) = (y as usize, x as usize);
            if (y - cy).pow(2) + (x - cx).pow(2) <= r * r && allowed(canvas.material[[yy, xx]]) {
                canvas.material[[yy, xx]] = material;
            }
        }
    }
}

fn render(cfg: &ToyConfig, canvas: &Canvas, rng: &mut ChaCha8Rng) -> Result<(RasterImage, LabelMask)> {
    let (h, w) = (canvas.h, canvas.w);
    let noise = Normal::new(0.0f32, cfg.noise.max(1e-6)).expect("valid std");
    let brightness: f32 = rng.gen_range(-0.03..0.03);
    let mut pixels = Array3::<f32>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let m = canvas.material[[y, x]];
            let base = palette_color(m, cfg.variant, cfg.shift);
            let shade = if canvas.edge[[y, x]] { 0.82 } else { 1.0 };
            let speckle = if m == Material::Tree { 1.8 } else { 1.0 };
            for c in 0..3 {
                let n = if cfg.noise > 0.0 { noise.sample(rng) * speckle } else { 0.0 };
                let v = (base[c] * shade + brightness + n).clamp(0.0, 1.0);
                // Quantize to 8-bit levels, as a real sensor product would be.
                pixels[[c, y, x]] = (v * 255.0).round() / 255.0;
            }
        }
    }
    let labels = canvas.material.mapv(|m| m.label(cfg.classes));
    Ok((
        RasterImage::new(pixels)?.with_tag("toy"),
        LabelMask::new(labels, cfg.classes)?,
    ))
}
