//! Parametric glyphs standing in for the six battery categories.

use crate::boxes::BBox;
use crate::image::Image;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Rect,
    Triangle,
    Bar,
    Ellipse,
}

#[derive(Clone, Copy, Debug)]
struct Style {
    shape: Shape,
    /// Range of box width, as a fraction of the image side.
    width: (f64, f64),
    /// Range of `h / w`.
    aspect: (f64, f64),
    color: [f64; 3],
    striped: bool,
}

// Dry cell and toy share the bar family and color; they differ in aspect
// and the stripe texture.
const STYLES: [Style; 6] = [
    Style {
        shape: Shape::Rect,
        width: (0.22, 0.32),
        aspect: (0.6, 0.8),
        color: [0.62, 0.16, 0.12],
        striped: false,
    },
    Style {
        shape: Shape::Triangle,
        width: (0.16, 0.24),
        aspect: (0.9, 1.15),
        color: [0.15, 0.3, 0.8],
        striped: false,
    },
    Style {
        shape: Shape::Bar,
        width: (0.08, 0.12),
        aspect: (2.2, 2.8),
        color: [0.88, 0.62, 0.12],
        striped: false,
    },
    Style {
        shape: Shape::Ellipse,
        width: (0.2, 0.3),
        aspect: (0.5, 0.7),
        color: [0.2, 0.66, 0.26],
        striped: false,
    },
    Style {
        shape: Shape::Rect,
        width: (0.1, 0.14),
        aspect: (0.9, 1.1),
        color: [0.56, 0.2, 0.7],
        striped: false,
    },
    Style {
        shape: Shape::Bar,
        width: (0.09, 0.13),
        aspect: (1.5, 1.9),
        color: [0.88, 0.62, 0.12],
        striped: true,
    },
];

pub(crate) const NUM_GLYPHS: usize = STYLES.len();

/// Draws a jittered box size `(w, h)` for `class`.
pub(crate) fn sample_size(rng: &mut Rng, class: usize) -> (f64, f64) {
    let s = &STYLES[class];
    let w = rng.range(s.width.0, s.width.1);
    let h = w * rng.range(s.aspect.0, s.aspect.1);
    (w, h.min(0.95))
}

/// Background: per-image gray level with a linear gradient and pixel noise.
pub(crate) fn background(rng: &mut Rng, size: usize) -> Image {
    let base = rng.range(0.35, 0.6);
    let gx = rng.range(-0.1, 0.1);
    let gy = rng.range(-0.1, 0.1);
    let tint = [rng.range(-0.03, 0.03), rng.range(-0.03, 0.03), rng.range(-0.03, 0.03)];
    let mut img = Image::filled(size, [0.0; 3]);
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / size as f64 - 0.5;
            let v = (y as f64 + 0.5) / size as f64 - 0.5;
            let level = base + gx * u + gy * v + 0.03 * rng.normal();
            img.set_pixel(y, x, tint.map(|t| level + t));
        }
    }
    img
}

fn inside(shape: Shape, b: &BBox, px: f64, py: f64) -> bool {
    let [x1, y1, x2, y2] = b.corners();
    if px < x1 || px > x2 || py < y1 || py > y2 {
        return false;
    }
    let u = (px - x1) / b.w;
    let v = (py - y1) / b.h;
    match shape {
        Shape::Rect => true,
        Shape::Triangle => (u - 0.5).abs() <= 0.5 * v,
        Shape::Ellipse => (2.0 * u - 1.0).powi(2) + (2.0 * v - 1.0).powi(2) <= 1.0,
        Shape::Bar => {
            // Capsule: straight sides with semicircular caps.
            let r = 0.5 * b.w.min(b.h);
            let (top, bottom) = (y1 + r, y2 - r);
            let cy = py.clamp(top, bottom);
            (px - b.cx).powi(2) + (py - cy).powi(2) <= r * r
        }
    }
}

/// Paints one glyph of `class` filling `b`, with a per-instance color jitter.
pub(crate) fn draw(img: &mut Image, rng: &mut Rng, class: usize, b: &BBox) {
    let s = &STYLES[class];
    let jitter = rng.range(-0.08, 0.08);
    let color = s.color.map(|c| c + jitter + rng.range(-0.04, 0.04));
    let stripe_period = rng.range(0.22, 0.3);
    let size = img.size();
    let n = size as f64;
    let [x1, y1, x2, y2] = b.corners();
    let lo = |a: f64| ((a * n - 0.5).floor().max(0.0)) as usize;
    let hi = |a: f64| ((a * n - 0.5).ceil().max(0.0) as usize).min(size - 1);
    for y in lo(y1)..=hi(y2) {
        for x in lo(x1)..=hi(x2) {
            let (px, py) = ((x as f64 + 0.5) / n, (y as f64 + 0.5) / n);
            if !inside(s.shape, b, px, py) {
                continue;
            }
            let v = (py - y1) / b.h;
            let mut c = color;
            if s.shape == Shape::Bar && !s.striped && v < 0.14 {
                // terminal cap
                c = [0.75, 0.75, 0.78];
            }
            if s.striped && (v / stripe_period).fract() < 0.5 {
                c = c.map(|ch| ch * 0.55);
            }
            if s.shape == Shape::Rect && class == 0 && v < 0.18 {
                c = c.map(|ch| ch * 0.5);
            }
            img.set_pixel(y, x, c.map(|ch| ch + 0.02 * rng.normal()));
        }
    }
}

/// Clamps to `[0, 1]` and snaps to the 8-bit grid so a PPM round trip is exact.
pub(crate) fn quantize(img: &mut Image) {
    let size = img.size();
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let v = img.get(c, y, x).clamp(0.0, 1.0);
                img.set(c, y, x, (v * 255.0).round() / 255.0);
            }
        }
    }
}
