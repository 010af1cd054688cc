//! Procedural "scripts": four families of stroke-drawn glyph classes with
//! increasing structural complexity, rendered per writer with jitter.
//!
//! Every class owns a stroke program (a few polylines and, at the highest
//! complexity, closed loops) that is a pure function of the family and the
//! class index. A writer seed perturbs control points, stroke width,
//! rotation (±10°), scale (0.8–1.0) and placement.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const IMAGE_SIDE: usize = 48;
pub const DEFAULT_PER_CLASS: usize = 200;
const MAX_ROTATION_DEG: f64 = 10.0;
const SCALE_RANGE: (f64, f64) = (0.8, 1.0);
const POINT_JITTER: f64 = 0.012;
const MAX_CLASS_OVERLAP: f64 = 0.55;

type Point = (f64, f64);

/// One family of synthetic glyph classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptFamily {
    id: u8,
    name: &'static str,
    complexity: u8,
    programs: Vec<StrokeProgram>,
}

/// Resolution-independent drawing of a class in the unit square.
#[derive(Debug, Clone, PartialEq)]
pub struct StrokeProgram {
    strokes: Vec<Vec<Point>>,
    width: f64,
}

struct FamilySpec {
    name: &'static str,
    n_classes: usize,
    complexity: u8,
}

const FAMILY_SPECS: [FamilySpec; 4] = [
    FamilySpec {
        name: "tibetan-digits",
        n_classes: 10,
        complexity: 1,
    },
    FamilySpec {
        name: "ancient-yi",
        n_classes: 30,
        complexity: 2,
    },
    FamilySpec {
        name: "shui",
        n_classes: 12,
        complexity: 2,
    },
    FamilySpec {
        name: "dongba",
        n_classes: 30,
        complexity: 3,
    },
];

pub const N_FAMILIES: usize = FAMILY_SPECS.len();

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl ScriptFamily {
    pub fn new(id: u8) -> Result<Self> {
        let spec = FAMILY_SPECS
            .get(id as usize)
            .ok_or_else(|| Error::Config(format!("family must be 0..{}, got {id}", N_FAMILIES - 1)))?;
        let mut programs: Vec<StrokeProgram> = Vec::with_capacity(spec.n_classes);
        let mut masks: Vec<Vec<bool>> = Vec::with_capacity(spec.n_classes);
        for class in 0..spec.n_classes {
            let mut attempt = 0u64;
            loop {
                let seed = mix(mix(id as u64 + 1) ^ mix((class as u64) << 16 | attempt));
                let prog = StrokeProgram::generate(spec.complexity, seed);
                let mask: Vec<bool> = prog.render_clean().iter().map(|&v| v > 0).collect();
                let distinct = masks.iter().all(|m| iou(m, &mask) < MAX_CLASS_OVERLAP);
                if distinct || attempt > 200 {
                    programs.push(prog);
                    masks.push(mask);
                    break;
                }
                attempt += 1;
            }
        }
        Ok(Self {
            id,
            name: spec.name,
            complexity: spec.complexity,
            programs,
        })
    }

    pub fn all() -> Vec<ScriptFamily> {
        (0..N_FAMILIES as u8).map(|i| Self::new(i).expect("valid id")).collect()
    }

    pub fn id(&self) -> u8 {
        self.id
    }

    pub fn name(&self) -> &'static str {
        self.name
    }

    pub fn complexity(&self) -> u8 {
        self.complexity
    }

    pub fn n_classes(&self) -> usize {
        self.programs.len()
    }

    pub fn program(&self, class: usize) -> Option<&StrokeProgram> {
        self.programs.get(class)
    }

    /// Renders one glyph as `IMAGE_SIDE²` bytes.
    pub fn render_glyph(&self, class: usize, writer_seed: u64) -> Result<Vec<u8>> {
        let prog = self.programs.get(class).ok_or_else(|| {
            Error::Config(format!("class {class} out of range for family {} ({} classes)", self.id, self.n_classes()))
        })?;
        let seed = mix(mix(self.id as u64) ^ mix(class as u64) ^ writer_seed.rotate_left(17));
        Ok(prog.render(&mut ChaCha8Rng::seed_from_u64(seed)))
    }
}

impl StrokeProgram {
    fn generate(complexity: u8, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (strokes_lo, strokes_hi, max_pts, loops, width) = match complexity {
            1 => (2, 3, 3, 0, 5.0),
            2 => (4, 5, 4, 0, 4.0),
            _ => (6, 7, 4, 2, 4.0),
        };
        let n_strokes = rng.random_range(strokes_lo..=strokes_hi);
        let mut strokes = Vec::with_capacity(n_strokes + loops);
        for _ in 0..n_strokes {
            let n = rng.random_range(2..=max_pts);
            let mut pts = Vec::with_capacity(n);
            let mut p = (rng.random_range(0.12..0.88), rng.random_range(0.12..0.88));
            pts.push(p);
            for _ in 1..n {
                let len = rng.random_range(0.25..0.45);
                // Redraw the direction until clamping keeps most of the
                // segment; short stubs turn into blobs that writer jitter
                // moves off their own footprint.
                let mut best = p;
                let mut best_len = -1.0;
                for _ in 0..16 {
                    let ang = rng.random_range(0.0..2.0 * PI);
                    let q = (
                        (p.0 + len * ang.cos()).clamp(0.1, 0.9),
                        (p.1 + len * ang.sin()).clamp(0.1, 0.9),
                    );
                    let got = ((q.0 - p.0).powi(2) + (q.1 - p.1).powi(2)).sqrt();
                    if got > best_len {
                        best = q;
                        best_len = got;
                    }
                    if got >= 0.9 * len {
                        break;
                    }
                }
                p = best;
                pts.push(p);
            }
            strokes.push(pts);
        }
        for _ in 0..loops {
            if rng.random_bool(0.7) {
                let c = (rng.random_range(0.3..0.7), rng.random_range(0.3..0.7));
                let r = (rng.random_range(0.1..0.22), rng.random_range(0.1..0.22));
                let pts = (0..=12)
                    .map(|k| {
                        let t = 2.0 * PI * k as f64 / 12.0;
                        (c.0 + r.0 * t.cos(), c.1 + r.1 * t.sin())
                    })
                    .collect();
                strokes.push(pts);
            }
        }
        Self { strokes, width }
    }

    /// Rendering without writer variation.
    fn render_clean(&self) -> Vec<u8> {
        rasterize(&self.strokes, self.width, |p| p)
    }

    fn render(&self, rng: &mut ChaCha8Rng) -> Vec<u8> {
        let jitter = Normal::new(0.0, POINT_JITTER).expect("positive std");
        let strokes: Vec<Vec<Point>> = self
            .strokes
            .iter()
            .map(|s| {
                s.iter()
                    .map(|&(x, y)| (x + jitter.sample(rng), y + jitter.sample(rng)))
                    .collect()
            })
            .collect();
        let theta = rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG).to_radians();
        let scale = rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1);
        let shift = (rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02));
        let width = self.width * rng.random_range(0.9..1.15);
        let (sin, cos) = theta.sin_cos();
        let pivot = self.center();
        rasterize(&strokes, width, move |(x, y)| {
            let (cx, cy) = (x - pivot.0, y - pivot.1);
            (
                scale * (cos * cx - sin * cy) + pivot.0 + shift.0,
                scale * (sin * cx + cos * cy) + pivot.1 + shift.1,
            )
        })
    }

    /// Center of the control points' bounding box; writer transforms pivot here.
    fn center(&self) -> Point {
        let pts = self.strokes.iter().flatten();
        let (mut lo, mut hi) = ((f64::MAX, f64::MAX), (f64::MIN, f64::MIN));
        for &(x, y) in pts {
            lo = (lo.0.min(x), lo.1.min(y));
            hi = (hi.0.max(x), hi.1.max(y));
        }
        ((lo.0 + hi.0) / 2.0, (lo.1 + hi.1) / 2.0)
    }

    pub fn stroke_count(&self) -> usize {
        self.strokes.len()
    }
}

/// Smooths a control polygon into a dense polyline with Chaikin corner
/// cutting, keeping the end points.
fn smooth(points: &[Point]) -> Vec<Point> {
    if points.len() < 3 {
        return points.to_vec();
    }
    let mut pts = points.to_vec();
    for _ in 0..2 {
        let mut next = Vec::with_capacity(pts.len() * 2);
        next.push(pts[0]);
        for w in pts.windows(2) {
            let (a, b) = (w[0], w[1]);
            next.push((0.75 * a.0 + 0.25 * b.0, 0.75 * a.1 + 0.25 * b.1));
            next.push((0.25 * a.0 + 0.75 * b.0, 0.25 * a.1 + 0.75 * b.1));
        }
        next.push(*pts.last().expect("nonempty"));
        pts = next;
    }
    pts
}

fn rasterize(strokes: &[Vec<Point>], width: f64, transform: impl Fn(Point) -> Point) -> Vec<u8> {
    let side = IMAGE_SIDE as f64;
    let mut img = vec![0.0f64; IMAGE_SIDE * IMAGE_SIDE];
    let half = width / 2.0;
    for stroke in strokes {
        let pts: Vec<Point> = smooth(stroke)
            .into_iter()
            .map(|p| {
                let (x, y) = transform(p);
                (x * side, y * side)
            })
            .collect();
        for seg in pts.windows(2) {
            draw_segment(&mut img, seg[0], seg[1], half);
        }
    }
    img.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

fn draw_segment(img: &mut [f64], a: Point, b: Point, half: f64) {
    let reach = half + 1.0;
    let x0 = (a.0.min(b.0) - reach).floor().max(0.0) as usize;
    let x1 = ((a.0.max(b.0) + reach).ceil() as isize).clamp(0, IMAGE_SIDE as isize - 1) as usize;
    let y0 = (a.1.min(b.1) - reach).floor().max(0.0) as usize;
    let y1 = ((a.1.max(b.1) + reach).ceil() as isize).clamp(0, IMAGE_SIDE as isize - 1) as usize;
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    for py in y0..=y1 {
        for px in x0..=x1 {
            let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
            let t = if len2 > 0.0 {
                (((cx - a.0) * dx + (cy - a.1) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
            let d = ((cx - qx).powi(2) + (cy - qy).powi(2)).sqrt();
            let v = (half + 0.5 - d).clamp(0.0, 1.0);
            let cell = &mut img[py * IMAGE_SIDE + px];
            if v > *cell {
                *cell = v;
            }
        }
    }
}

fn iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Which part of a generated corpus a dataset belongs to. Writer seeds of
/// different splits never collide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train = 0,
    Test = 1,
}

/// Labeled square grayscale glyphs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlyphDataset {
    pub family: u8,
    pub n_classes: usize,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u16>,
    pub pixels: Vec<u8>,
}

impl GlyphDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }

    pub fn subset(&self, indices: &[usize]) -> GlyphDataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        GlyphDataset {
            family: self.family,
            n_classes: self.n_classes,
            height: self.height,
            width: self.width,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            pixels,
        }
    }

    /// Mean count of nonzero pixels per image.
    pub fn mean_ink(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.pixels.iter().filter(|&&p| p > 0).count() as f64 / self.len() as f64
    }
}

/// Writer seed of sample `index` in `split`; disjoint across splits by
/// construction (bit 31 carries the split).
pub fn writer_seed(seed: u64, split: Split, index: u32) -> u64 {
    (seed << 32) | ((split as u64) << 31) | (index as u64 & 0x7FFF_FFFF)
}

/// Balanced, shuffled dataset with `per_class` glyphs per class.
pub fn generate_dataset(family: &ScriptFamily, per_class: usize, seed: u64, split: Split) -> Result<GlyphDataset> {
    if per_class < 2 {
        return Err(Error::Config(format!("per-class count must be >= 2, got {per_class}")));
    }
    let n_classes = family.n_classes();
    let mut order: Vec<(usize, u32)> = Vec::with_capacity(n_classes * per_class);
    for class in 0..n_classes {
        for j in 0..per_class {
            order.push((class, (class * per_class + j) as u32));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ ((split as u64) << 40) ^ family.id() as u64));
    order.shuffle(&mut rng);
    let mut labels = Vec::with_capacity(order.len());
    let mut pixels = Vec::with_capacity(order.len() * IMAGE_SIDE * IMAGE_SIDE);
    for (class, idx) in order {
        labels.push(class as u16);
        pixels.extend(family.render_glyph(class, writer_seed(seed, split, idx))?);
    }
    Ok(GlyphDataset {
        family: family.id(),
        n_classes,
        height: IMAGE_SIDE,
        width: IMAGE_SIDE,
        labels,
        pixels,
    })
}

const GLY1_MAGIC: &[u8; 4] = b"GLY1";
const GLY1_HEADER: usize = 4 + 4 * 4 + 1;

pub fn encode_gly1(ds: &GlyphDataset) -> Result<Vec<u8>> {
    if ds.pixels.len() != ds.len() * ds.image_len() {
        return Err(Error::Data("pixel buffer does not match image count".into()));
    }
    let mut out = Vec::with_capacity(GLY1_HEADER + ds.len() * (2 + ds.image_len()));
    out.extend_from_slice(GLY1_MAGIC);
    for v in [ds.len(), ds.height, ds.width, ds.n_classes] {
        let v = u32::try_from(v).map_err(|_| Error::Data(format!("{v} does not fit in u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(ds.family);
    for &l in &ds.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out.extend_from_slice(&ds.pixels);
    Ok(out)
}

pub fn decode_gly1(bytes: &[u8]) -> Result<GlyphDataset> {
    let short = |offset: usize, what: &str| Error::Format {
        offset,
        message: format!("file ends inside {what}"),
    };
    if bytes.len() < 4 {
        return Err(short(bytes.len(), "magic"));
    }
    if &bytes[..4] != GLY1_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, expected GLY1".into(),
        });
    }
    if bytes.len() < GLY1_HEADER {
        return Err(short(bytes.len(), "header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let count = u32_at(4);
    let height = u32_at(8);
    let width = u32_at(12);
    let n_classes = u32_at(16);
    let family = bytes[20];
    let labels_end = GLY1_HEADER
        .checked_add(count.checked_mul(2).ok_or_else(|| short(4, "count"))?)
        .ok_or_else(|| short(4, "count"))?;
    let image_bytes = height
        .checked_mul(width)
        .and_then(|hw| hw.checked_mul(count))
        .ok_or_else(|| Error::Format {
            offset: 8,
            message: "image dimensions overflow".into(),
        })?;
    let end = labels_end.checked_add(image_bytes).ok_or_else(|| short(8, "dims"))?;
    if bytes.len() < labels_end {
        return Err(short(bytes.len(), "labels"));
    }
    if bytes.len() < end {
        return Err(short(bytes.len(), "pixels"));
    }
    if bytes.len() > end {
        return Err(Error::Format {
            offset: end,
            message: format!("{} trailing bytes", bytes.len() - end),
        });
    }
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let o = GLY1_HEADER + 2 * i;
        let l = u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        if l as usize >= n_classes {
            return Err(Error::Format {
                offset: o,
                message: format!("label {l} >= class count {n_classes}"),
            });
        }
        labels.push(l);
    }
    Ok(GlyphDataset {
        family,
        n_classes,
        height,
        width,
        labels,
        pixels: bytes[labels_end..end].to_vec(),
    })
}

pub fn write_gly1(ds: &GlyphDataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_gly1(ds)?)?;
    Ok(())
}

pub fn read_gly1(path: impl AsRef<Path>) -> Result<GlyphDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    decode_gly1(&bytes)
}
