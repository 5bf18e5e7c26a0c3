//! Procedural traffic-sign-like glyphs on textured backgrounds.

use rand::Rng;

use super::image::{Image, CHANNELS, IMAGE_LEN, PLANE, SIDE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Triangle,
    Octagon,
    Diamond,
    HorizontalBar,
    VerticalBar,
}

pub const SHAPES: [Shape; 6] = [
    Shape::Circle,
    Shape::Triangle,
    Shape::Octagon,
    Shape::Diamond,
    Shape::HorizontalBar,
    Shape::VerticalBar,
];

pub const COLORS: [[f32; 3]; 8] = [
    [0.85, 0.10, 0.10], // red
    [0.10, 0.25, 0.85], // blue
    [0.95, 0.85, 0.10], // yellow
    [0.10, 0.70, 0.20], // green
    [0.97, 0.97, 0.97], // white
    [0.95, 0.50, 0.05], // orange
    [0.55, 0.15, 0.70], // purple
    [0.10, 0.80, 0.85], // cyan
];

/// Nominal glyph radius in pixels. Small enough that a handful of pixel
/// writes can matter to a classifier.
const GLYPH_RADIUS: f32 = 7.0;

/// Number of distinct (shape, color) classes available.
pub const MAX_CLASSES: usize = SHAPES.len() * COLORS.len();

/// Glyph assignment for a class. Bijective over `0..MAX_CLASSES`.
///
/// Consecutive class pairs share a color, so color alone never identifies a
/// class.
pub fn class_glyph(class: usize) -> (Shape, [f32; 3]) {
    (
        SHAPES[class % SHAPES.len()],
        COLORS[(class / 2) % COLORS.len()],
    )
}

impl Shape {
    /// Membership test in glyph-normalized coordinates (radius 1, y down).
    fn contains(self, u: f32, v: f32) -> bool {
        match self {
            Shape::Circle => u * u + v * v <= 1.0,
            Shape::Triangle => (-1.0..=0.8).contains(&v) && u.abs() <= (v + 1.0) / 1.8,
            Shape::Octagon => u.abs() <= 0.92 && v.abs() <= 0.92 && u.abs() + v.abs() <= 1.3,
            Shape::Diamond => u.abs() + v.abs() <= 1.0,
            Shape::HorizontalBar => u.abs() <= 1.0 && v.abs() <= 0.3,
            Shape::VerticalBar => u.abs() <= 0.3 && v.abs() <= 1.0,
        }
    }
}

/// Renders one sample of `class` with additive uniform noise of the given
/// amplitude.
pub fn render<R: Rng + ?Sized>(class: usize, noise: f32, rng: &mut R) -> Image {
    let (shape, color) = class_glyph(class);
    let mut data = vec![0.0f32; IMAGE_LEN];

    // Background: tinted gray with a linear gradient and faint stripes.
    let base: f32 = rng.random_range(0.25..0.55);
    let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.05..0.05));
    let (gx, gy): (f32, f32) = (rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
    let freq: f32 = rng.random_range(0.3..0.9);
    let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let angle: f32 = rng.random_range(0.0..std::f32::consts::PI);
    let (sa, ca) = angle.sin_cos();

    let cx = SIDE as f32 / 2.0 + rng.random_range(-3.0..3.0);
    let cy = SIDE as f32 / 2.0 + rng.random_range(-3.0..3.0);
    let radius = GLYPH_RADIUS * rng.random_range(0.8..1.1);
    let shade: f32 = rng.random_range(0.85..1.05);

    for row in 0..SIDE {
        for col in 0..SIDE {
            let x = col as f32 + 0.5;
            let y = row as f32 + 0.5;
            let u = (x - cx) / radius;
            let v = (y - cy) / radius;
            let idx = row * SIDE + col;
            if shape.contains(u, v) {
                for c in 0..CHANNELS {
                    data[c * PLANE + idx] = color[c] * shade;
                }
            } else {
                let ramp = gx * (x / SIDE as f32 - 0.5) + gy * (y / SIDE as f32 - 0.5);
                let stripe = 0.05 * (freq * (ca * x + sa * y) + phase).sin();
                for c in 0..CHANNELS {
                    data[c * PLANE + idx] = base + tint[c] + ramp + stripe;
                }
            }
        }
    }

    if noise > 0.0 {
        for v in &mut data {
            *v += rng.random_range(-noise..=noise);
        }
    }
    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    Image::new(data).expect("rendered image is in range")
}
