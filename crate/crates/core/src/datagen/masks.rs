//! Free-form validity masks: brush strokes on a crop grid, banded
//! full-image regimes and sparse samples.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ValidityMask;

/// Full-image stress regime, named by its invalid-fraction band.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Easy,
    Hard,
    Extreme,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Easy, Regime::Hard, Regime::Extreme];

    /// Half-open `[lo, hi)` invalid fraction.
    pub fn band(self) -> (f64, f64) {
        match self {
            Regime::Easy => (0.25, 0.50),
            Regime::Hard => (0.50, 0.75),
            Regime::Extreme => (0.75, 0.90),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Regime::Easy => "easy",
            Regime::Hard => "hard",
            Regime::Extreme => "extreme",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name() == s)
    }
}

/// Brush strokes drawn independently in each `crop × crop` cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BrushGrid {
    /// Cell side; clamped to the image size.
    pub crop: usize,
    /// Token size of the consuming model; each cell keeps one aligned
    /// `patch × patch` block fully valid.
    pub patch: usize,
    /// Stroke width range in pixels.
    pub width: [f64; 2],
    /// Polyline vertex count range.
    pub vertices: [usize; 2],
    /// Target invalid fraction `[lo, hi)` of every cell.
    pub band: [f64; 2],
}

impl Default for BrushGrid {
    fn default() -> Self {
        Self {
            crop: 96,
            patch: 4,
            width: [2.0, 6.0],
            vertices: [2, 5],
            band: [0.25, 0.50],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskPolicy {
    BrushGrid(BrushGrid),
    Regime { regime: Regime },
    SparseSample { density: f64 },
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy::BrushGrid(BrushGrid::default())
    }
}

/// `h × w` mask with at least one valid pixel.
pub fn gen_mask(policy: &MaskPolicy, h: usize, w: usize, rng: &mut impl Rng) -> Result<ValidityMask> {
    if h == 0 || w == 0 {
        return Err(Error::InfeasiblePolicy(format!("empty {h}×{w} mask")));
    }
    match policy {
        MaskPolicy::BrushGrid(b) => brush_grid(b, h, w, rng),
        MaskPolicy::Regime { regime } => {
            let (lo, hi) = regime.band();
            let mut canvas = Canvas::new(h, w);
            let shape = StrokeShape {
                width: [(h.min(w) as f64 * 0.02).max(1.0), (h.min(w) as f64 * 0.08).max(2.0)],
                vertices: [2, 5],
                rects: true,
            };
            canvas.fill_band(Region { y0: 0, y1: h, x0: 0, x1: w }, lo, hi, &shape, rng)?;
            canvas.into_mask()
        }
        MaskPolicy::SparseSample { density } => sparse(*density, h, w, rng),
    }
}

fn sparse(density: f64, h: usize, w: usize, rng: &mut impl Rng) -> Result<ValidityMask> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::InfeasiblePolicy(format!("sample density {density} outside (0, 1]")));
    }
    for _ in 0..10_000 {
        let bits: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(density)).collect();
        if bits.iter().any(|&b| b) {
            return ValidityMask::new(vec![h, w], bits);
        }
    }
    Err(Error::InfeasiblePolicy(format!("density {density} on {h}×{w} keeps producing empty masks")))
}

fn brush_grid(b: &BrushGrid, h: usize, w: usize, rng: &mut impl Rng) -> Result<ValidityMask> {
    let [lo, hi] = b.band;
    if !(0.0..1.0).contains(&lo) || !(lo < hi && hi <= 1.0) {
        return Err(Error::InfeasiblePolicy(format!("band [{lo}, {hi})")));
    }
    if b.patch == 0 || b.crop == 0 || h < b.patch || w < b.patch {
        return Err(Error::InfeasiblePolicy(format!("{h}×{w} image cannot hold a {0}×{0} patch", b.patch)));
    }
    let crop = b.crop.min(h).min(w).max(b.patch);
    let (ny, nx) = ((h / crop).max(1), (w / crop).max(1));
    let shape = StrokeShape {
        width: b.width,
        vertices: b.vertices,
        rects: false,
    };
    let mut canvas = Canvas::new(h, w);
    for cy in 0..ny {
        for cx in 0..nx {
            let cell = Region {
                y0: cy * h / ny,
                y1: (cy + 1) * h / ny,
                x0: cx * w / nx,
                x1: (cx + 1) * w / nx,
            };
            let rows = aligned_starts(cell.y0, cell.y1, b.patch);
            let cols = aligned_starts(cell.x0, cell.x1, b.patch);
            if rows.is_empty() || cols.is_empty() {
                return Err(Error::InfeasiblePolicy(format!("cell {cell:?} holds no aligned {}-patch", b.patch)));
            }
            let (py, px) = (rows[rng.gen_range(0..rows.len())], cols[rng.gen_range(0..cols.len())]);
            for y in py..py + b.patch {
                for x in px..px + b.patch {
                    canvas.protect[y * w + x] = true;
                }
            }
            canvas.fill_band(cell, lo, hi, &shape, rng)?;
        }
    }
    canvas.into_mask()
}

/// Starts of patch-grid blocks lying fully inside `[a, b)`.
fn aligned_starts(a: usize, b: usize, patch: usize) -> Vec<usize> {
    (a.div_ceil(patch) * patch..b).step_by(patch).filter(|&s| s + patch <= b).collect()
}

#[derive(Clone, Copy, Debug)]
struct Region {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
}

impl Region {
    fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }
}

struct StrokeShape {
    width: [f64; 2],
    vertices: [usize; 2],
    rects: bool,
}

struct Canvas {
    h: usize,
    w: usize,
    valid: Vec<bool>,
    protect: Vec<bool>,
}

impl Canvas {
    fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            valid: vec![true; h * w],
            protect: vec![false; h * w],
        }
    }

    fn into_mask(self) -> Result<ValidityMask> {
        debug_assert!(self.valid.iter().any(|&v| v));
        ValidityMask::new(vec![self.h, self.w], self.valid)
    }

    fn invalid_in(&self, r: Region) -> usize {
        (r.y0..r.y1).map(|y| self.valid[y * self.w + r.x0..y * self.w + r.x1].iter().filter(|&&v| !v).count()).sum()
    }

    fn erase(&mut self, r: Region, y: usize, x: usize) {
        if y >= r.y0 && y < r.y1 && x >= r.x0 && x < r.x1 && !self.protect[y * self.w + x] {
            self.valid[y * self.w + x] = false;
        }
    }

    /// Disc-brush segment; only pixels inside `r` are touched.
    fn segment(&mut self, r: Region, a: (f64, f64), b: (f64, f64), radius: f64) {
        let lo_y = (a.0.min(b.0) - radius).floor().max(r.y0 as f64) as usize;
        let hi_y = ((a.0.max(b.0) + radius).ceil() as usize + 1).min(r.y1);
        let lo_x = (a.1.min(b.1) - radius).floor().max(r.x0 as f64) as usize;
        let hi_x = ((a.1.max(b.1) + radius).ceil() as usize + 1).min(r.x1);
        let (dy, dx) = (b.0 - a.0, b.1 - a.1);
        let len2 = dy * dy + dx * dx;
        for y in lo_y..hi_y {
            for x in lo_x..hi_x {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                let t = if len2 > 0.0 { (((py - a.0) * dy + (px - a.1) * dx) / len2).clamp(0.0, 1.0) } else { 0.0 };
                let (qy, qx) = (a.0 + t * dy - py, a.1 + t * dx - px);
                if qy * qy + qx * qx <= radius * radius {
                    self.erase(r, y, x);
                }
            }
        }
    }

    fn stroke(&mut self, r: Region, shape: &StrokeShape, scale: f64, rng: &mut impl Rng) {
        let (rh, rw) = ((r.y1 - r.y0) as f64, (r.x1 - r.x0) as f64);
        let radius = (rng.gen_range(shape.width[0]..=shape.width[1]) * scale / 2.0).max(0.5);
        if shape.rects && rng.gen_bool(0.5) {
            let sh = (rng.gen_range(0.05..0.3) * rh * scale).max(1.0);
            let sw = (rng.gen_range(0.05..0.3) * rw * scale).max(1.0);
            let y = r.y0 as f64 + rng.gen_range(0.0..rh);
            let x = r.x0 as f64 + rng.gen_range(0.0..rw);
            for yy in y as usize..((y + sh) as usize).min(r.y1) {
                for xx in x as usize..((x + sw) as usize).min(r.x1) {
                    self.erase(r, yy, xx);
                }
            }
            return;
        }
        let n = rng.gen_range(shape.vertices[0]..=shape.vertices[1].max(shape.vertices[0]));
        let mut p = (r.y0 as f64 + rng.gen_range(0.0..rh), r.x0 as f64 + rng.gen_range(0.0..rw));
        let step = 0.4 * rh.max(rw) * scale;
        if n <= 1 {
            self.segment(r, p, p, radius);
        }
        for _ in 1..n {
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let len = rng.gen_range(0.2..1.0) * step;
            let q = (
                (p.0 + len * angle.sin()).clamp(r.y0 as f64, r.y1 as f64),
                (p.1 + len * angle.cos()).clamp(r.x0 as f64, r.x1 as f64),
            );
            self.segment(r, p, q, radius);
            p = q;
        }
    }

    /// Adds shapes until the invalid fraction of `r` lies in `[lo, hi)`.
    /// Shapes that overshoot are undone and the brush shrinks.
    fn fill_band(&mut self, r: Region, lo: f64, hi: f64, shape: &StrokeShape, rng: &mut impl Rng) -> Result<()> {
        let area = r.area();
        let free = area - (r.y0..r.y1).map(|y| self.protect[y * self.w + r.x0..y * self.w + r.x1].iter().filter(|&&p| p).count()).sum::<usize>();
        let need = (lo * area as f64).ceil() as usize;
        let cap = ((hi * area as f64).ceil() as usize).saturating_sub(1).min(free).min(area - 1);
        if need > cap {
            return Err(Error::InfeasiblePolicy(format!(
                "no invalid count in [{lo}, {hi}) of {area} pixels with {free} erasable"
            )));
        }
        let mut scale = 1.0;
        for _ in 0..100_000 {
            let invalid = self.invalid_in(r);
            if invalid >= need {
                return Ok(());
            }
            let saved: Vec<bool> = self.valid.clone();
            self.stroke(r, shape, scale, rng);
            if self.invalid_in(r) > cap {
                self.valid = saved;
                scale = (scale * 0.8).max(1e-3);
            }
        }
        Err(Error::InfeasiblePolicy(format!("band [{lo}, {hi}) not reached in region {r:?}")))
    }
}
