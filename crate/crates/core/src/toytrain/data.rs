use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::detector::{iou, BBox};
use crate::error::{Error, Result};
use crate::io::ppm::RgbImage;
use crate::tensor::{Shape, Tensor};

/// Background noise is uniform in `[0, BG_MAX]`.
pub const BG_MAX: f32 = 0.4;
/// Every blob channel is at least this much brighter than any background.
pub const BLOB_MARGIN: f32 = 0.3;
pub const MIN_SIDE: usize = 4;

/// One synthetic image: 1 to 3 bright rectangles ("flames") on noise, all
/// class 0.
#[derive(Clone, Debug, PartialEq)]
pub struct ToySample {
    /// `(1, 3, S, S)`, values in `[0, 1]`.
    pub image: Tensor,
    pub boxes: Vec<BBox>,
}

impl ToySample {
    pub fn to_rgb(&self) -> RgbImage {
        let s = self.image.shape();
        let mut img = RgbImage::new(s.w, s.h, 0.0);
        for y in 0..s.h {
            for x in 0..s.w {
                img.set_pixel(
                    x,
                    y,
                    [
                        self.image.at(0, 0, y, x),
                        self.image.at(0, 1, y, x),
                        self.image.at(0, 2, y, x),
                    ],
                );
            }
        }
        img
    }
}

/// Blob side lengths are drawn from `[min_side, max_side]` pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlobSpec {
    pub min_side: usize,
    pub max_side: usize,
}

impl BlobSpec {
    /// Sides from 8 px up to half the image.
    pub fn for_size(size: usize) -> Self {
        BlobSpec {
            min_side: 8,
            max_side: size / 2,
        }
    }
}

fn sample(seed: u64, index: usize, size: usize, blobs: BlobSpec) -> ToySample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let mut image = Tensor::<f32>::random_uniform(Shape::new(1, 3, size, size), 0.0, BG_MAX as f64, &mut rng);
    let count = rng.gen_range(1..=3);
    let mut boxes: Vec<BBox> = Vec::with_capacity(count);
    // Rejection-sample non-overlapping rectangles; give up on a blob after
    // a bounded number of tries.
    for _ in 0..count {
        for _ in 0..50 {
            let w = rng.gen_range(blobs.min_side..=blobs.max_side);
            let h = rng.gen_range(blobs.min_side..=blobs.max_side);
            let x = rng.gen_range(0..=size - w);
            let y = rng.gen_range(0..=size - h);
            let b = BBox::new(x as f32, y as f32, (x + w) as f32, (y + h) as f32);
            if boxes.iter().all(|o| iou(o, &b) == 0.0) {
                let color: [f32; 3] = std::array::from_fn(|_| rng.gen_range(BG_MAX + BLOB_MARGIN..=1.0));
                for c in 0..3 {
                    for yy in y..y + h {
                        for xx in x..x + w {
                            image.set(0, c, yy, xx, color[c]);
                        }
                    }
                }
                boxes.push(b);
                break;
            }
        }
    }
    ToySample { image, boxes }
}

/// Deterministic per `seed`; sample `i` depends only on `(seed, i, size)`.
pub fn gen_dataset(seed: u64, count: usize, size: usize) -> Result<Vec<ToySample>> {
    gen_dataset_with(seed, count, size, BlobSpec::for_size(size))
}

pub fn gen_dataset_with(seed: u64, count: usize, size: usize, blobs: BlobSpec) -> Result<Vec<ToySample>> {
    if size < 64 || !size.is_multiple_of(32) {
        return Err(Error::Config(format!(
            "toy image size must be a multiple of 32 and at least 64, got {size}"
        )));
    }
    if blobs.min_side < MIN_SIDE || blobs.min_side > blobs.max_side || blobs.max_side > size {
        return Err(Error::Config(format!(
            "blob sides must satisfy {MIN_SIDE} <= min <= max <= {size}, got {}..{}",
            blobs.min_side, blobs.max_side
        )));
    }
    Ok((0..count)
        .into_par_iter()
        .map(|i| sample(seed, i, size, blobs))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_samples() {
        assert_eq!(gen_dataset(3, 5, 64).unwrap(), gen_dataset(3, 5, 64).unwrap());
        assert_ne!(gen_dataset(3, 5, 64).unwrap(), gen_dataset(4, 5, 64).unwrap());
        assert!(gen_dataset(3, 0, 64).unwrap().is_empty());
    }

    #[test]
    fn invariants_hold_on_a_thousand_samples() {
        let size = 64;
        for s in gen_dataset(11, 1000, size).unwrap() {
            assert!((1..=3).contains(&s.boxes.len()));
            let bg_max = (0..size)
                .flat_map(|y| (0..size).map(move |x| (x, y)))
                .filter(|&(x, y)| {
                    !s.boxes
                        .iter()
                        .any(|b| (x as f32) >= b.x1 && (x as f32) < b.x2 && (y as f32) >= b.y1 && (y as f32) < b.y2)
                })
                .flat_map(|(x, y)| (0..3).map(move |c| (c, x, y)))
                .map(|(c, x, y)| s.image.at(0, c, y, x))
                .fold(0.0f32, f32::max);
            assert!(bg_max <= BG_MAX);
            for b in &s.boxes {
                assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= size as f32 && b.y2 <= size as f32);
                assert!(b.width() >= MIN_SIDE as f32 && b.height() >= MIN_SIDE as f32);
                let (cx, cy) = (b.x1 as usize, b.y1 as usize);
                for c in 0..3 {
                    assert!(s.image.at(0, c, cy, cx) >= bg_max + BLOB_MARGIN);
                }
            }
        }
    }

    #[test]
    fn bad_size_is_rejected() {
        assert!(gen_dataset(0, 1, 48).is_err());
        assert!(gen_dataset(0, 1, 100).is_err());
    }
}
