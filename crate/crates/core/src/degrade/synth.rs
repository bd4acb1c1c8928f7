//! Procedural content: clean scenes, rain streak layers and haze depth maps.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Image, RainSpec, CHANNELS};

/// Smooth cosine gradients per channel overlaid with flat rectangles and discs.
pub(super) fn clean_scene(rng: &mut ChaCha8Rng, height: usize, width: usize) -> Image {
    let mut img = Image::zeros(height, width);
    let base: [f64; CHANNELS] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
    let waves: Vec<(f64, f64, f64, [f64; CHANNELS])> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.3..2.5),
                rng.random_range(0.3..2.5),
                rng.random_range(0.0..std::f64::consts::TAU),
                std::array::from_fn(|_| rng.random_range(0.04..0.18)),
            )
        })
        .collect();
    for c in 0..CHANNELS {
        for y in 0..height {
            for x in 0..width {
                let (u, v) = (x as f64 / width as f64, y as f64 / height as f64);
                let mut val = base[c];
                for (fx, fy, phase, amp) in &waves {
                    val += amp[c] * (std::f64::consts::TAU * (fx * u + fy * v) + phase).cos();
                }
                img.set(c, y, x, val);
            }
        }
    }

    let shapes = rng.random_range(3..8);
    for _ in 0..shapes {
        let color: [f64; CHANNELS] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let cy = rng.random_range(0.0..height as f64);
        let cx = rng.random_range(0.0..width as f64);
        let ry = rng.random_range(0.08..0.3) * height as f64;
        let rx = rng.random_range(0.08..0.3) * width as f64;
        let disc = rng.random_bool(0.5);
        for y in 0..height {
            for x in 0..width {
                let dy = (y as f64 + 0.5 - cy) / ry;
                let dx = (x as f64 + 0.5 - cx) / rx;
                let inside = if disc {
                    dx * dx + dy * dy <= 1.0
                } else {
                    dx.abs() <= 1.0 && dy.abs() <= 1.0
                };
                if inside {
                    for (c, &col) in color.iter().enumerate() {
                        img.set(c, y, x, col);
                    }
                }
            }
        }
    }
    img.clamp_unit()
}

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        (((px - a.0) * vx + (py - a.1) * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * vx - px, a.1 + t * vy - py);
    (qx * qx + qy * qy).sqrt()
}

/// Anti-aliased oriented segments, identical on every channel. Overlapping
/// streaks keep the brighter value, so the layer stays within `[0, intensity]`.
pub(super) fn rain_layer(rng: &mut ChaCha8Rng, spec: &RainSpec, height: usize, width: usize) -> Image {
    let mut plane = vec![0.0f64; height * width];
    let half = spec.thickness / 2.0;
    for _ in 0..spec.streaks {
        let cx = rng.random_range(0.0..width as f64);
        let cy = rng.random_range(0.0..height as f64);
        let len = spec.length * rng.random_range(0.6..1.0);
        let angle = (spec.angle + rng.random_range(-5.0..5.0)).to_radians();
        let strength = spec.intensity * rng.random_range(0.7..1.0);
        // angle measured from vertical, streaks fall top-left to bottom-right for positive angles
        let (dx, dy) = (angle.sin() * len / 2.0, angle.cos() * len / 2.0);
        let a = (cx - dx, cy - dy);
        let b = (cx + dx, cy + dy);
        let reach = half + 1.0;
        let y0 = (a.1.min(b.1) - reach).floor().max(0.0) as usize;
        let y1 = ((a.1.max(b.1) + reach).ceil() as usize).min(height);
        let x0 = (a.0.min(b.0) - reach).floor().max(0.0) as usize;
        let x1 = ((a.0.max(b.0) + reach).ceil() as usize).min(width);
        for y in y0..y1 {
            for x in x0..x1 {
                let d = segment_distance(x as f64 + 0.5, y as f64 + 0.5, a, b);
                let coverage = (half + 0.5 - d).clamp(0.0, 1.0);
                let v = strength * coverage;
                let cell = &mut plane[y * width + x];
                if v > *cell {
                    *cell = v;
                }
            }
        }
    }
    Image::from_plane(height, width, &plane)
}

/// Smooth random field normalised to `[0, 1]`: a vertical ramp (far at the
/// top) plus two low-frequency undulations.
pub(super) fn depth_map(rng: &mut ChaCha8Rng, height: usize, width: usize) -> Vec<f64> {
    let tilt = rng.random_range(0.5..1.5);
    let bumps: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.random_range(0.2..1.2),
                rng.random_range(0.2..1.2),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.1..0.5),
            )
        })
        .collect();
    let mut d: Vec<f64> = (0..height * width)
        .map(|i| {
            let (u, v) = ((i % width) as f64 / width as f64, (i / width) as f64 / height as f64);
            let mut val = tilt * (1.0 - v);
            for (fx, fy, phase, amp) in &bumps {
                val += amp * (std::f64::consts::TAU * (fx * u + fy * v) + phase).cos();
            }
            val
        })
        .collect();
    let (lo, hi) = d
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    for v in &mut d {
        *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
    }
    d
}
