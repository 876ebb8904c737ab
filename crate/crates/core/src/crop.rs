//! Square crops around a target, and conversion to network input.

use candle_core::{DType, Device, Tensor};
use image::RgbImage;

use crate::bbox::BBox;
use crate::error::{CfbtError, Result};

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Where a crop came from: a square of `side` frame pixels at `(x0, y0)`
/// resampled to `out_size`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropRecord {
    pub x0: f64,
    pub y0: f64,
    pub side: f64,
    pub out_size: usize,
    /// True if any part of the square lies outside the frame.
    pub out_of_frame: bool,
}

impl CropRecord {
    /// Frame coordinates to normalized crop coordinates in `[0, 1]`.
    pub fn frame_to_crop(&self, b: &BBox) -> BBox {
        BBox::new((b.x - self.x0) / self.side, (b.y - self.y0) / self.side, b.w / self.side, b.h / self.side)
    }

    /// Inverse of [`frame_to_crop`](Self::frame_to_crop).
    pub fn crop_to_frame(&self, b: &BBox) -> BBox {
        BBox::new(self.x0 + b.x * self.side, self.y0 + b.y * self.side, b.w * self.side, b.h * self.side)
    }
}

/// Channel-major `3 x size x size` pixels in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Crop {
    pub pixels: Vec<f32>,
    pub size: usize,
    pub record: CropRecord,
}

impl Crop {
    pub fn pixel(&self, c: usize, row: usize, col: usize) -> f32 {
        self.pixels[(c * self.size + row) * self.size + col]
    }

    pub fn to_image(&self) -> RgbImage {
        let s = self.size;
        RgbImage::from_fn(s as u32, s as u32, |x, y| {
            let px = |c| self.pixel(c, y as usize, x as usize).round().clamp(0.0, 255.0) as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }
}

pub fn channel_mean(frame: &RgbImage) -> [f64; 3] {
    let mut sum = [0.0f64; 3];
    for p in frame.pixels() {
        for c in 0..3 {
            sum[c] += p[c] as f64;
        }
    }
    let n = (frame.width() as f64 * frame.height() as f64).max(1.0);
    sum.map(|s| s / n)
}

/// Resamples the square `[x0, x0 + side) x [y0, y0 + side)` bilinearly.
/// Outside the frame the per-channel frame mean is used.
pub fn crop_square(frame: &RgbImage, x0: f64, y0: f64, side: f64, out_size: usize) -> Result<Crop> {
    if !(side.is_finite() && side > 0.0 && x0.is_finite() && y0.is_finite()) {
        return Err(CfbtError::Input(format!("invalid crop square at ({x0}, {y0}) side {side}")));
    }
    if out_size == 0 || frame.width() == 0 || frame.height() == 0 {
        return Err(CfbtError::Input("empty frame or crop size".into()));
    }
    let (w, h) = (frame.width() as i64, frame.height() as i64);
    let mean = channel_mean(frame);
    let scale = side / out_size as f64;
    let mut pixels = vec![0f32; 3 * out_size * out_size];
    for row in 0..out_size {
        let sy = y0 + (row as f64 + 0.5) * scale - 0.5;
        let y_lo = sy.floor();
        let fy = sy - y_lo;
        let y_lo = y_lo as i64;
        for col in 0..out_size {
            let sx = x0 + (col as f64 + 0.5) * scale - 0.5;
            let x_lo = sx.floor();
            let fx = sx - x_lo;
            let x_lo = x_lo as i64;
            let inside = |x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h;
            let any_inside = [(0, 0), (1, 0), (0, 1), (1, 1)]
                .iter()
                .any(|&(dx, dy)| inside(x_lo + dx, y_lo + dy));
            for c in 0..3 {
                let v = if any_inside {
                    let at = |x: i64, y: i64| {
                        if inside(x, y) {
                            frame.get_pixel(x as u32, y as u32)[c] as f64
                        } else {
                            mean[c]
                        }
                    };
                    let top = at(x_lo, y_lo) * (1.0 - fx) + at(x_lo + 1, y_lo) * fx;
                    let bottom = at(x_lo, y_lo + 1) * (1.0 - fx) + at(x_lo + 1, y_lo + 1) * fx;
                    top * (1.0 - fy) + bottom * fy
                } else {
                    mean[c]
                };
                pixels[(c * out_size + row) * out_size + col] = v as f32;
            }
        }
    }
    let out_of_frame = x0 < 0.0 || y0 < 0.0 || x0 + side > w as f64 || y0 + side > h as f64;
    Ok(Crop {
        pixels,
        size: out_size,
        record: CropRecord {
            x0,
            y0,
            side,
            out_size,
            out_of_frame,
        },
    })
}

/// Side length of the context square for `bbox` at `factor`.
pub fn context_side(bbox: &BBox, factor: f64) -> f64 {
    (factor * (bbox.w * bbox.h).sqrt()).max(1.0)
}

/// Crop of side `factor * sqrt(w h)` centred on `center`, sized from `bbox`.
pub fn crop_region(frame: &RgbImage, bbox: &BBox, center: (f64, f64), factor: f64, out_size: usize) -> Result<Crop> {
    if !bbox.is_valid() {
        return Err(CfbtError::Input(format!("cannot crop around box {bbox}")));
    }
    let side = context_side(bbox, factor);
    crop_square(frame, center.0 - side / 2.0, center.1 - side / 2.0, side, out_size)
}

/// Crop centred on the box itself.
pub fn crop_around(frame: &RgbImage, bbox: &BBox, factor: f64, out_size: usize) -> Result<Crop> {
    crop_region(frame, bbox, bbox.center(), factor, out_size)
}

/// Stacks crops into a normalized `(n, 3, S, S)` batch.
pub fn crops_to_tensor(crops: &[&Crop], dtype: DType, device: &Device) -> Result<Tensor> {
    let Some(first) = crops.first() else {
        return Err(CfbtError::Input("no crops to batch".into()));
    };
    let s = first.size;
    let mut data = Vec::with_capacity(crops.len() * 3 * s * s);
    for crop in crops {
        if crop.size != s {
            return Err(CfbtError::Shape(format!("crop sizes {} and {s} differ", crop.size)));
        }
        for c in 0..3 {
            let plane = &crop.pixels[c * s * s..(c + 1) * s * s];
            data.extend(plane.iter().map(|&p| ((p as f64 / 255.0 - IMAGENET_MEAN[c]) / IMAGENET_STD[c]) as f32));
        }
    }
    Ok(Tensor::from_vec(data, (crops.len(), 3, s, s), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gradient(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 7 % 256) as u8, (y * 5 % 256) as u8, 100]))
    }

    #[test]
    fn identity_crop_reproduces_frame() {
        let f = gradient(20, 20);
        let c = crop_square(&f, 0.0, 0.0, 20.0, 20).unwrap();
        assert!(!c.record.out_of_frame);
        for y in 0..20 {
            for x in 0..20 {
                assert_eq!(c.pixel(0, y, x), f.get_pixel(x as u32, y as u32)[0] as f32);
                assert_eq!(c.pixel(1, y, x), f.get_pixel(x as u32, y as u32)[1] as f32);
            }
        }
    }

    #[test]
    fn outside_pixels_are_the_frame_mean() {
        let f = gradient(10, 10);
        let mean = channel_mean(&f);
        let c = crop_square(&f, -100.0, -100.0, 50.0, 8).unwrap();
        assert!(c.record.out_of_frame);
        for (ch, m) in mean.iter().enumerate() {
            assert!(c.pixels[ch * 64..(ch + 1) * 64].iter().all(|&p| p == *m as f32));
        }
    }

    #[test]
    fn edge_crop_mixes_mean_and_frame() {
        let f = RgbImage::from_pixel(10, 10, image::Rgb([200, 200, 200]));
        let c = crop_square(&f, -10.0, 0.0, 20.0, 20).unwrap();
        assert_eq!(c.pixel(0, 5, 0), 200.0);
        assert_eq!(c.pixel(0, 5, 15), 200.0);
    }

    #[test]
    fn normalization_matches_imagenet_stats() {
        let f = RgbImage::from_pixel(4, 4, image::Rgb([255, 0, 128]));
        let c = crop_square(&f, 0.0, 0.0, 4.0, 4).unwrap();
        let t = crops_to_tensor(&[&c], DType::F64, &Device::Cpu).unwrap();
        let v: Vec<f64> = t.flatten_all().unwrap().to_vec1().unwrap();
        assert!((v[0] - (1.0 - 0.485) / 0.229).abs() < 1e-6);
        assert!((v[16] - (-0.456 / 0.224)).abs() < 1e-6);
        assert!((v[32] - ((128.0 / 255.0 - 0.406) / 0.225)).abs() < 1e-6);
    }

    #[test]
    fn invalid_box_rejected() {
        let f = gradient(10, 10);
        assert!(crop_around(&f, &BBox::new(1.0, 1.0, 0.0, 3.0), 2.0, 8).is_err());
    }

    proptest! {
        #[test]
        fn record_maps_round_trip(x in -50.0f64..50.0, y in -50.0f64..50.0, w in 1.0f64..40.0, h in 1.0f64..40.0) {
            let f = gradient(32, 24);
            let b = BBox::new(x, y, w, h);
            let c = crop_around(&f, &b, 4.0, 16).unwrap();
            let n = c.record.frame_to_crop(&b);
            let back = c.record.crop_to_frame(&n);
            prop_assert!((back.x - b.x).abs() < 1e-9 && (back.w - b.w).abs() < 1e-9);
            prop_assert!((n.center().0 - 0.5).abs() < 1e-9 && (n.center().1 - 0.5).abs() < 1e-9);
        }
    }
}
