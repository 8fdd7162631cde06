//! Procedural clean scenes for toy datasets.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::image_io::{quantize8, save_png};
use crate::tensor::{ImageTensor, Tensor};

/// Gradient background with rectangles, discs and stripe patches.
pub fn render_scene(seed: u64, height: usize, width: usize) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (height as f32, width as f32);
    let c0: [f32; 3] = rng.gen();
    let c1: [f32; 3] = rng.gen();
    let theta: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let (dy, dx) = theta.sin_cos();
    let mut img = Tensor::from_fn(3, height, width, |c, y, x| {
        let t = ((x as f32 / w - 0.5) * dx + (y as f32 / h - 0.5) * dy + 0.5).clamp(0.0, 1.0);
        0.15 + 0.7 * (c0[c] * (1.0 - t) + c1[c] * t)
    });

    let n_shapes = rng.gen_range(3..8);
    for _ in 0..n_shapes {
        let col: [f32; 3] = rng.gen();
        let cy = rng.gen_range(0.0..h);
        let cx = rng.gen_range(0.0..w);
        let sy = rng.gen_range(0.08..0.3) * h;
        let sx = rng.gen_range(0.08..0.3) * w;
        match rng.gen_range(0..3) {
            0 => paint(&mut img, col, |y, x| {
                (y - cy).abs() < sy && (x - cx).abs() < sx
            }),
            1 => {
                let r = sy.min(sx);
                paint(&mut img, col, |y, x| {
                    (y - cy).powi(2) + (x - cx).powi(2) < r * r
                })
            }
            _ => {
                let period = rng.gen_range(3.0..9.0f32);
                let ang: f32 = rng.gen_range(0.0..std::f32::consts::PI);
                let (s, c) = ang.sin_cos();
                paint(&mut img, col, |y, x| {
                    (y - cy).abs() < sy
                        && (x - cx).abs() < sx
                        && ((x * c + y * s) / period).rem_euclid(1.0) < 0.5
                })
            }
        }
    }
    quantize8(&img)
}

fn paint(img: &mut ImageTensor, col: [f32; 3], inside: impl Fn(f32, f32) -> bool) {
    let (_, h, w) = img.shape();
    for y in 0..h {
        for x in 0..w {
            if inside(y as f32 + 0.5, x as f32 + 0.5) {
                for (c, &v) in col.iter().enumerate() {
                    *img.at_mut(c, y, x) = v;
                }
            }
        }
    }
}

/// Writes `count` scenes as `scene_0000.png`, ... and returns their paths.
pub fn write_scenes(dir: &Path, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    (0..count)
        .map(|i| {
            let p = dir.join(format!("scene_{i:04}.png"));
            save_png(
                &p,
                &render_scene(
                    seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
                    size,
                    size,
                ),
            )?;
            Ok(p)
        })
        .collect()
}
