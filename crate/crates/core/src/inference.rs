//! Whole-image inference with a fixed-size model.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::ReprogramModel;
use crate::tensor::{ImageTensor, Tensor};

pub const TILE_OVERLAP: usize = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tiling {
    /// Overlapping patch-size tiles with linear blending.
    #[default]
    On,
    /// Resample the token-FC weights to the image size and run once.
    Off,
}

impl std::str::FromStr for Tiling {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "on" => Ok(Tiling::On),
            "off" => Ok(Tiling::Off),
            _ => Err(crate::error::Error::Config(format!(
                "tiling must be `on` or `off`, got `{s}`"
            ))),
        }
    }
}

/// Tile origins along one axis: stride `patch - overlap`, last tile flush with the end.
pub fn tile_starts(n: usize, patch: usize, overlap: usize) -> Vec<usize> {
    assert!(n >= patch && patch > overlap);
    let stride = patch - overlap;
    let mut v: Vec<usize> = (0..)
        .map(|i| i * stride)
        .take_while(|&s| s + patch < n)
        .collect();
    v.push(n - patch);
    v.dedup();
    v
}

/// Blend weight at offset `i` of a tile: ramps over the overlap on edges shared with a neighbor.
fn ramp(i: usize, patch: usize, overlap: usize, open_lo: bool, open_hi: bool) -> f32 {
    let r = (overlap + 1) as f32;
    let mut w = 1.0f32;
    if open_lo {
        w = w.min((i + 1) as f32 / r);
    }
    if open_hi {
        w = w.min((patch - i) as f32 / r);
    }
    w
}

/// Applies `f` to overlapping `patch x patch` tiles and blends the results.
/// Images smaller than a tile are reflect-padded and cropped back.
pub fn tiled<F>(image: &ImageTensor, patch: usize, overlap: usize, mut f: F) -> Result<ImageTensor>
where
    F: FnMut(&ImageTensor) -> Result<ImageTensor>,
{
    let (c, h, w) = image.shape();
    let (ph, pw) = (h.max(patch), w.max(patch));
    let padded;
    let src = if (ph, pw) != (h, w) {
        padded = image.pad_reflect_to(ph, pw);
        &padded
    } else {
        image
    };
    let ys = tile_starts(ph, patch, overlap);
    let xs = tile_starts(pw, patch, overlap);
    if ys.len() == 1 && xs.len() == 1 {
        return f(src)?.crop(0, 0, h, w);
    }
    let mut acc = vec![0.0f32; c * ph * pw];
    let mut wsum = vec![0.0f32; ph * pw];
    for (iy, &y0) in ys.iter().enumerate() {
        for (ix, &x0) in xs.iter().enumerate() {
            let tile = src.crop(y0, x0, patch, patch)?;
            let out = f(&tile)?;
            for y in 0..patch {
                let wy = ramp(y, patch, overlap, iy > 0, iy + 1 < ys.len());
                for x in 0..patch {
                    let wx = ramp(x, patch, overlap, ix > 0, ix + 1 < xs.len());
                    let wt = wy * wx;
                    let p = (y0 + y) * pw + x0 + x;
                    wsum[p] += wt;
                    for ch in 0..c {
                        acc[ch * ph * pw + p] += wt * out.at(ch, y, x);
                    }
                }
            }
        }
    }
    let n = ph * pw;
    let data = acc
        .iter()
        .enumerate()
        .map(|(i, &v)| v / wsum[i % n])
        .collect();
    Tensor::from_vec(c, ph, pw, data)?.crop(0, 0, h, w)
}

/// Restores an image of any size.
pub fn restore(
    model: &ReprogramModel<f32>,
    image: &ImageTensor,
    tiling: Tiling,
) -> Result<ImageTensor> {
    image.ensure_channels(3, "restore")?;
    match tiling {
        Tiling::On => tiled(image, model.patch(), TILE_OVERLAP, |t| model.forward(t)),
        Tiling::Off if model.output.spatial_size() == (image.height(), image.width()) => {
            model.forward(image)
        }
        Tiling::Off => model.resized(image.height(), image.width()).forward(image),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tile_starts_cover_axis() {
        assert_eq!(tile_starts(120, 120, 16), vec![0]);
        assert_eq!(tile_starts(250, 120, 16), vec![0, 104, 130]);
        assert_eq!(tile_starts(224, 120, 16), vec![0, 104]);
        for n in 120..400 {
            let s = tile_starts(n, 120, 16);
            assert_eq!(*s.last().unwrap(), n - 120);
            assert!(s.windows(2).all(|w| w[1] > w[0] && w[1] - w[0] <= 104));
        }
    }

    #[test]
    fn identity_tiles_reassemble_exactly() {
        let img = Tensor::from_fn(3, 53, 71, |c, y, x| {
            ((c * 7 + y * 3 + x) % 17) as f32 / 16.0
        });
        let out = tiled(&img, 24, 8, |t| Ok(t.clone())).unwrap();
        assert!(out.max_abs_diff(&img) < 1e-6);
        let small = Tensor::from_fn(3, 10, 13, |c, y, x| (c + y + x) as f32 / 30.0);
        let out = tiled(&small, 24, 8, |t| Ok(t.clone())).unwrap();
        assert_eq!(out, small);
    }

    #[test]
    fn blending_of_offset_tiles_is_continuous() {
        // Each tile adds a different constant; blended output must change smoothly.
        let img = Tensor::full(3, 40, 90, 0.5f32);
        let mut k = 0.0f32;
        let out = tiled(&img, 32, 16, |t| {
            k += 0.01;
            Ok(t.map(|v| v + k))
        })
        .unwrap();
        let mut max_jump = 0.0f32;
        for y in 0..40 {
            for x in 1..90 {
                max_jump = max_jump.max((out.at(0, y, x) - out.at(0, y, x - 1)).abs());
            }
        }
        assert!(max_jump < 0.01, "{max_jump}");
    }
}
