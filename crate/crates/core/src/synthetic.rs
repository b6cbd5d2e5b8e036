//! Procedural RGBD scenes and HDR panoramas for toy training and tests.

use rand::Rng;

use crate::error::Result;
use crate::imaging::ChwImage;
use crate::rgbd::RgbdSample;
use crate::seed;

const WORDS: [&str; 8] = ["red", "green", "blue", "yellow", "cyan", "violet", "orange", "grey"];

/// A sloped background plus a few discs and boxes, each with its own
/// colour and depth. Nearer shapes occlude farther ones, so depth edges
/// line up with colour edges. Values are in [-1,1].
pub fn synthetic_rgbd(height: usize, width: usize, seed: u64, id: &str) -> Result<RgbdSample> {
    let mut r = seed::rng(seed::substream(seed, "scene"));
    let bg: [f32; 3] = [
        r.random_range(-0.8..0.2),
        r.random_range(-0.8..0.2),
        r.random_range(-0.8..0.2),
    ];
    let slope = r.random_range(-0.4f32..0.4);
    let n_shapes = r.random_range(2..=4);
    struct Shape {
        disc: bool,
        cx: f32,
        cy: f32,
        rx: f32,
        ry: f32,
        colour: [f32; 3],
        depth: f32,
        word: usize,
    }
    let mut shapes: Vec<Shape> = (0..n_shapes)
        .map(|_| Shape {
            disc: r.random_bool(0.5),
            cx: r.random_range(0.15..0.85),
            cy: r.random_range(0.15..0.85),
            rx: r.random_range(0.08..0.3),
            ry: r.random_range(0.08..0.3),
            colour: [
                r.random_range(-1.0..1.0),
                r.random_range(-1.0..1.0),
                r.random_range(-1.0..1.0),
            ],
            depth: r.random_range(-0.6..0.9),
            word: r.random_range(0..WORDS.len()),
        })
        .collect();
    // paint far to near
    shapes.sort_by(|a, b| a.depth.total_cmp(&b.depth));
    let mut rgb = ChwImage::filled(3, height, width, 0.0);
    let mut depth = ChwImage::filled(1, height, width, 0.0);
    for y in 0..height {
        for x in 0..width {
            let (u, v) = ((x as f32 + 0.5) / width as f32, (y as f32 + 0.5) / height as f32);
            let mut c = [bg[0] + 0.3 * v, bg[1] + 0.2 * u, bg[2]];
            let mut d = -0.8 + slope * (v - 0.5);
            for s in &shapes {
                let (dx, dy) = ((u - s.cx) / s.rx, (v - s.cy) / s.ry);
                let inside = if s.disc {
                    dx * dx + dy * dy <= 1.0
                } else {
                    dx.abs() <= 1.0 && dy.abs() <= 1.0
                };
                if inside {
                    c = s.colour;
                    d = s.depth + 0.05 * dy;
                }
            }
            for (k, ck) in c.iter().enumerate() {
                rgb.set(k, y, x, ck.clamp(-1.0, 1.0));
            }
            depth.set(0, y, x, d.clamp(-1.0, 1.0));
        }
    }
    let names: Vec<&str> = shapes.iter().map(|s| WORDS[s.word]).collect();
    let caption = format!("a scene with {} shapes in {}", shapes.len(), names.join(" and "));
    RgbdSample::new(rgb, depth, caption, id)
}

/// Equirectangular radiance map: a sky gradient, a bright sun disc and a
/// horizon band, all continuous across the left/right edge.
pub fn synthetic_hdr(height: usize, seed: u64) -> ChwImage {
    let width = 2 * height;
    let mut r = seed::rng(seed::substream(seed, "hdr"));
    let sun_lon = r.random_range(0.0..std::f32::consts::TAU);
    let sun_lat = r.random_range(0.2f32..1.2);
    let sun = r.random_range(4.0f32..20.0);
    let tint: [f32; 3] = [
        r.random_range(0.3..1.0),
        r.random_range(0.3..1.0),
        r.random_range(0.3..1.0),
    ];
    let ground: [f32; 3] = [
        r.random_range(0.05..0.4),
        r.random_range(0.05..0.4),
        r.random_range(0.05..0.4),
    ];
    let hills = r.random_range(1..5) as f32;
    ChwImage::from_fn(3, height, width, |c, y, x| {
        let lon = (x as f32 + 0.5) / width as f32 * std::f32::consts::TAU;
        let lat = std::f32::consts::FRAC_PI_2 - (y as f32 + 0.5) / height as f32 * std::f32::consts::PI;
        let horizon = 0.1 * (hills * lon).sin();
        if lat < horizon {
            ground[c] * (1.0 + 0.3 * (3.0 * lon).cos())
        } else {
            let cos_d = lat.sin() * sun_lat.sin() + lat.cos() * sun_lat.cos() * (lon - sun_lon).cos();
            let glow = sun * cos_d.max(0.0).powi(64);
            tint[c] * (0.3 + 0.7 * lat.max(0.0) / std::f32::consts::FRAC_PI_2) + glow
        }
    })
}
