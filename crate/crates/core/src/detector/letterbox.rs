use crate::io::ppm::RgbImage;
use crate::tensor::{Shape, Tensor};

use super::postprocess::BBox;

/// Fill value for the padded border, as a fraction of full scale.
pub const PAD_VALUE: f32 = 114.0 / 255.0;

/// Placement of an image inside the square network input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Letterbox {
    pub src_w: usize,
    pub src_h: usize,
    pub size: usize,
    pub scale: f64,
    pub new_w: usize,
    pub new_h: usize,
    pub pad_x: usize,
    pub pad_y: usize,
}

impl Letterbox {
    pub fn new(src_w: usize, src_h: usize, size: usize) -> Self {
        let scale = (size as f64 / src_w as f64).min(size as f64 / src_h as f64);
        let new_w = ((src_w as f64 * scale).round() as usize).clamp(1, size);
        let new_h = ((src_h as f64 * scale).round() as usize).clamp(1, size);
        Letterbox {
            src_w,
            src_h,
            size,
            scale,
            new_w,
            new_h,
            pad_x: (size - new_w) / 2,
            pad_y: (size - new_h) / 2,
        }
    }

    /// Original-image box to network-input coordinates.
    pub fn forward(&self, b: &BBox) -> BBox {
        let (s, px, py) = (self.scale, self.pad_x as f64, self.pad_y as f64);
        BBox::new(
            (b.x1 as f64 * s + px) as f32,
            (b.y1 as f64 * s + py) as f32,
            (b.x2 as f64 * s + px) as f32,
            (b.y2 as f64 * s + py) as f32,
        )
    }

    /// Network-input box back to original-image pixels, clipped to the image.
    pub fn inverse(&self, b: &BBox) -> BBox {
        let (s, px, py) = (self.scale, self.pad_x as f64, self.pad_y as f64);
        BBox::new(
            ((b.x1 as f64 - px) / s) as f32,
            ((b.y1 as f64 - py) / s) as f32,
            ((b.x2 as f64 - px) / s) as f32,
            ((b.y2 as f64 - py) / s) as f32,
        )
        .clip(self.src_w as f32, self.src_h as f32)
    }

    /// Bilinear resize (half-pixel centers) into a padded `(1, 3, S, S)` tensor.
    pub fn apply(&self, img: &RgbImage) -> Tensor {
        let s = self.size;
        let mut out = Tensor::full(Shape::new(1, 3, s, s), PAD_VALUE);
        let sx = img.width as f64 / self.new_w as f64;
        let sy = img.height as f64 / self.new_h as f64;
        let plane = s * s;
        let data = out.data_mut();
        for y in 0..self.new_h {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(img.height - 1);
            let wy = (fy - y0 as f64) as f32;
            for x in 0..self.new_w {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(img.width - 1);
                let wx = (fx - x0 as f64) as f32;
                let (p00, p01) = (img.pixel(x0, y0), img.pixel(x1, y0));
                let (p10, p11) = (img.pixel(x0, y1), img.pixel(x1, y1));
                let at = (y + self.pad_y) * s + x + self.pad_x;
                for c in 0..3 {
                    let top = p00[c] + (p01[c] - p00[c]) * wx;
                    let bot = p10[c] + (p11[c] - p10[c]) * wx;
                    data[c * plane + at] = top + (bot - top) * wy;
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn wide_hd_frame() {
        let lb = Letterbox::new(1280, 720, 640);
        assert_eq!(lb.scale, 0.5);
        assert_eq!((lb.new_w, lb.new_h), (640, 360));
        assert_eq!((lb.pad_x, lb.pad_y), (0, 140));
        assert_eq!(lb.size - lb.new_h - lb.pad_y, 140);
    }

    #[test]
    fn square_input_is_pure_scaling() {
        let lb = Letterbox::new(320, 320, 640);
        assert_eq!((lb.pad_x, lb.pad_y), (0, 0));
        let b = BBox::new(10.0, 20.0, 30.0, 40.0);
        assert_eq!(lb.forward(&b), BBox::new(20.0, 40.0, 60.0, 80.0));
        assert_eq!(lb.inverse(&lb.forward(&b)), b);
    }

    #[test]
    fn constant_image_fills_content_and_pads_border() {
        let img = RgbImage::new(8, 4, 0.2);
        let lb = Letterbox::new(8, 4, 16);
        let t = lb.apply(&img);
        assert!((t.at(0, 1, 8, 8) - 0.2).abs() < 1e-6);
        assert_eq!(t.at(0, 2, 0, 0), PAD_VALUE);
        assert_eq!(t.at(0, 0, 15, 15), PAD_VALUE);
    }

    proptest! {
        #[test]
        fn box_round_trip(
            w in 16usize..2000, h in 16usize..2000,
            fx in 0f32..0.5, fy in 0f32..0.5, fw in 0.1f32..0.5, fh in 0.1f32..0.5,
        ) {
            let lb = Letterbox::new(w, h, 640);
            let (w, h) = (w as f32, h as f32);
            let b = BBox::new(fx * w, fy * h, (fx + fw) * w, (fy + fh) * h);
            let back = lb.inverse(&lb.forward(&b));
            for (u, v) in [(b.x1, back.x1), (b.y1, back.y1), (b.x2, back.x2), (b.y2, back.y2)] {
                prop_assert!((u - v).abs() <= 0.51, "{b:?} -> {back:?}");
            }
        }
    }
}
