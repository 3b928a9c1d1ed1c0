//! Procedurally drawn cutouts and backgrounds.
//!
//! Stand-ins for segmented object photos and empty scene photos, so the
//! compositor can run without external image collections. Two styles with
//! disjoint shape families, palettes and background textures give a
//! "source" and a "shifted" domain.

use std::f32::consts::{PI, TAU};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Background, Cutout, CutoutLibrary};
use crate::imaging::RasterImage;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Ellipse,
    RoundedRect,
    Star,
    Blob,
    Polygon,
    Cross,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackdropKind {
    Gradient,
    Stripes,
    Clouds,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LibraryStyle {
    pub name: String,
    pub shapes: Vec<ShapeKind>,
    pub backdrops: Vec<BackdropKind>,
    /// Hue interval for object fills, in turns.
    pub hue_range: (f32, f32),
    /// Largest dimension of a drawn cutout in pixels.
    pub cutout_size: usize,
    pub background_size: usize,
}

impl LibraryStyle {
    pub fn primary() -> Self {
        Self {
            name: "primary".into(),
            shapes: vec![ShapeKind::Ellipse, ShapeKind::RoundedRect, ShapeKind::Blob],
            backdrops: vec![BackdropKind::Gradient, BackdropKind::Clouds],
            hue_range: (0.0, 1.0),
            cutout_size: 96,
            background_size: 128,
        }
    }

    /// Different shapes and textures from [`LibraryStyle::primary`].
    pub fn shifted() -> Self {
        Self {
            name: "shifted".into(),
            shapes: vec![ShapeKind::Star, ShapeKind::Polygon, ShapeKind::Cross],
            backdrops: vec![BackdropKind::Stripes],
            hue_range: (0.0, 1.0),
            cutout_size: 96,
            background_size: 128,
        }
    }
}

/// Draws `n_cutouts` cutouts and `n_backgrounds` backgrounds. All scores
/// are 1: drawn cutouts hold exactly one object and backgrounds none.
pub fn generate_library(
    style: &LibraryStyle,
    n_cutouts: usize,
    n_backgrounds: usize,
    base_seed: u64,
) -> CutoutLibrary {
    let cutouts = (0..n_cutouts)
        .map(|i| Cutout {
            id: format!("{}-obj{i:03}", style.name),
            image: draw_cutout(style, seed::derive(base_seed, &[1, i as u64])),
            singleness: 1.0,
        })
        .collect();
    let backgrounds = (0..n_backgrounds)
        .map(|i| Background {
            id: format!("{}-bg{i:03}", style.name),
            image: draw_background(style, seed::derive(base_seed, &[2, i as u64])),
            emptiness: 1.0,
        })
        .collect();
    CutoutLibrary::new(cutouts, backgrounds).expect("drawn library is valid")
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Boundary radius of a unit-sized shape along direction `theta`.
struct Outline {
    kind: ShapeKind,
    aspect: f32,
    lobes: f32,
    depth: f32,
    phase: f32,
}

impl Outline {
    fn radius(&self, theta: f32) -> f32 {
        let (s, c) = theta.sin_cos();
        match self.kind {
            ShapeKind::Ellipse => {
                let (a, b) = (1.0, self.aspect);
                a * b / ((b * c).powi(2) + (a * s).powi(2)).sqrt()
            }
            ShapeKind::RoundedRect => {
                let (hw, hh) = (0.9, 0.9 * self.aspect);
                // superellipse with exponent 6 approximates a rounded box
                let p = 6.0;
                let r = ((c / hw).abs().powf(p) + (s / hh).abs().powf(p)).powf(-1.0 / p);
                r.min(1.0)
            }
            ShapeKind::Blob => 0.8 * (1.0 + self.depth * (self.lobes * theta + self.phase).sin()),
            ShapeKind::Star => {
                let sector = TAU / self.lobes;
                let t = ((theta + self.phase).rem_euclid(sector) / sector - 0.5).abs() * 2.0;
                // t = 1 at spikes, 0 between them
                let inner = 1.0 - self.depth;
                inner + (1.0 - inner) * t
            }
            ShapeKind::Polygon => {
                let sector = TAU / self.lobes;
                let t = (theta + self.phase).rem_euclid(sector) - sector / 2.0;
                (PI / self.lobes).cos() / t.cos()
            }
            ShapeKind::Cross => {
                let arm = 0.35 + 0.1 * self.depth;
                let (ax, ay) = ((theta + self.phase).cos().abs(), (theta + self.phase).sin().abs());
                // ray exits the plus sign through the end of an arm or its side
                let along = if ax > ay { ax } else { ay };
                let across = if ax > ay { ay } else { ax };
                let end = 1.0 / along;
                let side = if across > 1e-6 { arm / across } else { f32::MAX };
                end.min(side)
            }
        }
    }
}

fn draw_cutout(style: &LibraryStyle, item_seed: u64) -> RasterImage {
    let mut rng = seed::rng(item_seed);
    let kind = style.shapes[rng.gen_range(0..style.shapes.len())];
    let outline = Outline {
        kind,
        aspect: rng.gen_range(0.55..1.0),
        lobes: match kind {
            ShapeKind::Star => rng.gen_range(5..=7) as f32,
            ShapeKind::Polygon => rng.gen_range(3..=6) as f32,
            ShapeKind::Blob => rng.gen_range(2..=4) as f32,
            _ => 4.0,
        },
        depth: match kind {
            ShapeKind::Star => rng.gen_range(0.35..0.55),
            ShapeKind::Blob => rng.gen_range(0.08..0.2),
            _ => rng.gen_range(0.0..1.0),
        },
        phase: rng.gen_range(0.0..TAU),
    };
    let (hlo, hhi) = style.hue_range;
    let hue = rng.gen_range(hlo..hhi.max(hlo + 1e-3));
    let fill = hsv(hue, rng.gen_range(0.7..1.0), rng.gen_range(0.75..1.0));
    let accent = hsv(hue + 0.5, 0.8, rng.gen_range(0.85..1.0));
    let edge = [fill[0] * 0.25, fill[1] * 0.25, fill[2] * 0.25];
    let spots: Vec<(f32, f32, f32)> = (0..rng.gen_range(1..=3))
        .map(|_| {
            (
                rng.gen_range(-0.35..0.35),
                rng.gen_range(-0.35..0.35),
                rng.gen_range(0.08..0.16),
            )
        })
        .collect();

    let size = style.cutout_size;
    let half = size as f32 / 2.0;
    // leave a 1px margin so soft edges are not cut
    let r_px = half - 1.5;
    let stroke = (size as f32 * 0.05).max(1.5);
    let drawn = RasterImage::from_fn(size, size, |x, y| {
        let dx = (x as f32 + 0.5 - half) / r_px;
        let dy = (y as f32 + 0.5 - half) / r_px;
        let rho = (dx * dx + dy * dy).sqrt();
        let boundary = outline.radius(dy.atan2(dx)).min(1.0);
        let dist = (boundary - rho) * r_px;
        let alpha = (dist + 0.5).clamp(0.0, 1.0);
        let mut rgb = if dist < stroke { edge } else { fill };
        for &(sx, sy, sr) in &spots {
            if ((dx - sx).powi(2) + (dy - sy).powi(2)).sqrt() < sr && dist >= stroke {
                rgb = accent;
            }
        }
        [rgb[0], rgb[1], rgb[2], alpha]
    })
    .expect("non-zero size");
    // trim to the visible support so "largest dimension" means the object's
    match drawn.alpha_bounds(0.0) {
        Some(b) => drawn
            .crop(b.x as usize, b.y as usize, b.w as usize, b.h as usize)
            .expect("bounds inside image"),
        None => drawn,
    }
}

fn draw_background(style: &LibraryStyle, item_seed: u64) -> RasterImage {
    let mut rng = seed::rng(item_seed);
    let kind = style.backdrops[rng.gen_range(0..style.backdrops.len())];
    let hue = rng.gen_range(0.0..1.0);
    let a = hsv(hue, rng.gen_range(0.1..0.35), rng.gen_range(0.35..0.8));
    let b = hsv(hue + rng.gen_range(-0.15..0.15), rng.gen_range(0.1..0.35), rng.gen_range(0.35..0.8));
    let angle: f32 = rng.gen_range(0.0..TAU);
    let freq: f32 = rng.gen_range(2.0..6.0);
    let waves: Vec<(f32, f32, f32)> = (0..4)
        .map(|_| (rng.gen_range(0.5..3.0), rng.gen_range(0.0..TAU), rng.gen_range(0.0..TAU)))
        .collect();
    let noise_seed = rng.gen::<u64>();
    let size = style.background_size;
    RasterImage::from_fn(size, size, |x, y| {
        let u = x as f32 / size as f32;
        let v = y as f32 / size as f32;
        let along = u * angle.cos() + v * angle.sin();
        let t = match kind {
            BackdropKind::Gradient => along.rem_euclid(1.0),
            BackdropKind::Stripes => 0.5 + 0.5 * (TAU * freq * along).sin(),
            BackdropKind::Clouds => {
                let s: f32 = waves
                    .iter()
                    .map(|&(f, p, q)| (TAU * f * u + p).sin() * (TAU * f * v + q).cos())
                    .sum();
                0.5 + 0.2 * s
            }
        };
        let n = pixel_noise(noise_seed, x, y) * 0.04;
        let t = t.clamp(0.0, 1.0);
        let mut px = [0.0, 0.0, 0.0, 1.0];
        for c in 0..3 {
            px[c] = a[c] * (1.0 - t) + b[c] * t + n;
        }
        px
    })
    .expect("non-zero size")
}

fn pixel_noise(s: u64, x: usize, y: usize) -> f32 {
    let h = seed::derive(s, &[x as u64, y as u64]);
    (h >> 40) as f32 / (1u64 << 24) as f32 - 0.5
}
