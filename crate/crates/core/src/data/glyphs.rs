//! Hand-drawn-looking character sets: each class is a template of a few
//! quadratic strokes, and each sample redraws it with jittered control
//! points, a random affine pose and a random pen width.

use ptu_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{quantize, LabeledDataset};
use crate::error::{config, Result};
use crate::seeds::derive_seed;

/// Name and class count of the five alphabet-style target sets.
pub const ALPHABETS: [(&str, usize); 5] = [
    ("greek", 24),
    ("latin", 26),
    ("korean", 40),
    ("hiragana", 52),
    ("katakana", 47),
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlyphStyle {
    pub side: usize,
    pub min_strokes: usize,
    pub max_strokes: usize,
    /// Control-point offset as a fraction of the glyph box; 0 draws lines.
    pub curvature: f64,
    /// Per-sample control-point jitter, glyph-box units.
    pub jitter: f64,
    pub max_rotation_deg: f64,
    pub scale: (f64, f64),
    pub max_shift_px: f64,
    pub pen_px: (f64, f64),
}

impl GlyphStyle {
    pub fn digits() -> Self {
        GlyphStyle {
            side: 28,
            min_strokes: 2,
            max_strokes: 4,
            curvature: 0.35,
            jitter: 0.05,
            max_rotation_deg: 15.0,
            scale: (0.8, 1.1),
            max_shift_px: 3.5,
            pen_px: (1.4, 2.8),
        }
    }

    pub fn alphabet() -> Self {
        GlyphStyle {
            side: 28,
            min_strokes: 2,
            max_strokes: 4,
            curvature: 0.3,
            jitter: 0.06,
            max_rotation_deg: 15.0,
            scale: (0.8, 1.1),
            max_shift_px: 3.5,
            pen_px: (1.4, 2.8),
        }
    }
}

type Point = (f64, f64);

#[derive(Clone, Debug)]
struct Stroke {
    p0: Point,
    p1: Point,
    p2: Point,
}

fn template(style: &GlyphStyle, rng: &mut ChaCha8Rng) -> Vec<Stroke> {
    let n = rng.gen_range(style.min_strokes..=style.max_strokes);
    let mut strokes: Vec<Stroke> = Vec::with_capacity(n);
    for i in 0..n {
        // Strokes after the first often start on an earlier one, as pen
        // strokes of a character tend to touch.
        let p0 = if i > 0 && rng.gen_bool(0.6) {
            let s = &strokes[rng.gen_range(0..i)];
            let t: f64 = rng.gen();
            bezier(s, t)
        } else {
            (rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85))
        };
        let mut p2 = (rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85));
        while dist(p0, p2) < 0.3 {
            p2 = (rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85));
        }
        let mid = ((p0.0 + p2.0) / 2.0, (p0.1 + p2.1) / 2.0);
        let bend = rng.gen_range(-style.curvature..=style.curvature);
        let normal = (-(p2.1 - p0.1), p2.0 - p0.0);
        let p1 = (mid.0 + bend * normal.0, mid.1 + bend * normal.1);
        strokes.push(Stroke { p0, p1, p2 });
    }
    strokes
}

fn dist(a: Point, b: Point) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

fn bezier(s: &Stroke, t: f64) -> Point {
    let u = 1.0 - t;
    (
        u * u * s.p0.0 + 2.0 * u * t * s.p1.0 + t * t * s.p2.0,
        u * u * s.p0.1 + 2.0 * u * t * s.p1.1 + t * t * s.p2.1,
    )
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    dist(p, (a.0 + t * dx, a.1 + t * dy))
}

const SEGMENTS: usize = 16;

fn draw(strokes: &[Stroke], style: &GlyphStyle, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let side = style.side as f64;
    let jitter = Normal::new(0.0, style.jitter).expect("finite jitter");
    let angle = rng
        .gen_range(-style.max_rotation_deg..=style.max_rotation_deg)
        .to_radians();
    let scale = rng.gen_range(style.scale.0..=style.scale.1);
    let shift = (
        rng.gen_range(-style.max_shift_px..=style.max_shift_px),
        rng.gen_range(-style.max_shift_px..=style.max_shift_px),
    );
    let pen = rng.gen_range(style.pen_px.0..=style.pen_px.1);
    let (sin, cos) = angle.sin_cos();
    let to_pixels = |p: Point| -> Point {
        let (x, y) = (p.0 - 0.5, p.1 - 0.5);
        let (rx, ry) = (cos * x - sin * y, sin * x + cos * y);
        (
            side / 2.0 + scale * side * rx + shift.0,
            side / 2.0 + scale * side * ry + shift.1,
        )
    };
    let mut nearest = vec![f64::INFINITY; style.side * style.side];
    let reach = pen / 2.0 + 1.5;
    for s in strokes {
        let mut j = |p: Point| (p.0 + jitter.sample(rng), p.1 + jitter.sample(rng));
        let drawn = Stroke {
            p0: j(s.p0),
            p1: j(s.p1),
            p2: j(s.p2),
        };
        let pts: Vec<Point> = (0..=SEGMENTS)
            .map(|k| to_pixels(bezier(&drawn, k as f64 / SEGMENTS as f64)))
            .collect();
        for w in pts.windows(2) {
            let (a, b) = (w[0], w[1]);
            let x0 = ((a.0.min(b.0) - reach).floor().max(0.0)) as usize;
            let x1 = ((a.0.max(b.0) + reach).ceil().min(side - 1.0)).max(0.0) as usize;
            let y0 = ((a.1.min(b.1) - reach).floor().max(0.0)) as usize;
            let y1 = ((a.1.max(b.1) + reach).ceil().min(side - 1.0)).max(0.0) as usize;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let d = segment_distance((x as f64 + 0.5, y as f64 + 0.5), a, b);
                    let cell = &mut nearest[y * style.side + x];
                    if d < *cell {
                        *cell = d;
                    }
                }
            }
        }
    }
    nearest
        .iter()
        .map(|&d| quantize((pen / 2.0 + 0.5 - d).clamp(0.0, 1.0) as f32))
        .collect()
}

/// `classes` random templates drawn `per_class` times each in `style`.
pub fn glyph_set(
    name: &str,
    classes: usize,
    per_class: usize,
    style: &GlyphStyle,
    seed: u64,
) -> Result<LabeledDataset> {
    if classes < 1 || per_class < 1 {
        return config(format!(
            "{name}: classes and samples per class must be positive"
        ));
    }
    if style.min_strokes < 1 || style.min_strokes > style.max_strokes || style.side < 4 {
        return config(format!("{name}: invalid glyph style"));
    }
    let mut shape_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let templates: Vec<Vec<Stroke>> = (0..classes)
        .map(|_| template(style, &mut shape_rng))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    let px = style.side * style.side;
    let mut data = Vec::with_capacity(classes * per_class * px);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (c, t) in templates.iter().enumerate() {
        for _ in 0..per_class {
            data.extend(draw(t, style, &mut rng));
            labels.push(c);
        }
    }
    let images = Tensor::from_vec([classes * per_class, 1, style.side, style.side], data);
    LabeledDataset::new(images, labels, classes, name)
}

/// Ten digit-like classes.
pub fn glyph_digits(per_class: usize, seed: u64) -> Result<LabeledDataset> {
    glyph_set(
        "digits",
        10,
        per_class,
        &GlyphStyle::digits(),
        derive_seed(seed, 0xD161),
    )
}

/// One alphabet-like set; `name` selects the character templates.
pub fn glyph_alphabet(
    name: &str,
    classes: usize,
    per_class: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    let tag = name
        .bytes()
        .fold(0xA1u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
    glyph_set(
        name,
        classes,
        per_class,
        &GlyphStyle::alphabet(),
        derive_seed(seed, tag),
    )
}
