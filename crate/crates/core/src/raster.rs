//! RGB images with channel values in `[0, 1]`.

use crate::nn::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    width: usize,
    height: usize,
    /// Row-major interleaved RGB.
    data: Vec<[f64; 3]>,
}

impl ColorImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![[0.0; 3]; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        self.data[y * self.width + x] = rgb;
    }

    /// Rec. 601 luma, row-major.
    pub fn luminance(&self) -> Vec<f64> {
        self.data.iter().map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).collect()
    }

    /// Bilinear sample at a continuous pixel coordinate; `None` outside
    /// `[0, w-1] x [0, h-1]`.
    pub fn sample_bilinear(&self, u: f64, v: f64) -> Option<[f64; 3]> {
        if !(u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64) {
            return None;
        }
        let x0 = u.floor() as usize;
        let y0 = v.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = u - x0 as f64;
        let fy = v - y0 as f64;
        let (a, b, c, d) = (self.get(x0, y0), self.get(x1, y0), self.get(x0, y1), self.get(x1, y1));
        let mut out = [0.0; 3];
        for ch in 0..3 {
            let top = a[ch] * (1.0 - fx) + b[ch] * fx;
            let bot = c[ch] * (1.0 - fx) + d[ch] * fx;
            out[ch] = top * (1.0 - fy) + bot * fy;
        }
        Some(out)
    }

    pub fn flip_horizontal(&self) -> ColorImage {
        let mut out = self.clone();
        for y in 0..self.height {
            out.data[y * self.width..(y + 1) * self.width].reverse();
        }
        out
    }

    /// Rounds every channel to the nearest 8-bit level.
    pub fn quantized(&self) -> ColorImage {
        let mut out = self.clone();
        for p in &mut out.data {
            for c in p.iter_mut() {
                *c = (c.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
        out
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .flat_map(|p| p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Option<ColorImage> {
        if bytes.len() != width * height * 3 {
            return None;
        }
        let data = bytes
            .chunks_exact(3)
            .map(|c| [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0])
            .collect();
        Some(Self { width, height, data })
    }

    /// Channel-major `[3, h, w]` tensor, centred around zero.
    pub fn to_tensor(&self) -> Tensor {
        let n = self.width * self.height;
        let mut data = vec![0.0; 3 * n];
        for (i, p) in self.data.iter().enumerate() {
            for c in 0..3 {
                data[c * n + i] = p[c] - 0.5;
            }
        }
        Tensor::new(vec![3, self.height, self.width], data)
    }

    pub fn map(&self, f: impl Fn([f64; 3]) -> [f64; 3]) -> ColorImage {
        ColorImage { width: self.width, height: self.height, data: self.data.iter().map(|p| f(*p)).collect() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_midpoint_and_bounds() {
        let img = ColorImage::from_fn(2, 2, |x, y| [x as f64, y as f64, 0.5]);
        assert_eq!(img.sample_bilinear(0.5, 0.5), Some([0.5, 0.5, 0.5]));
        assert_eq!(img.sample_bilinear(1.0, 1.0), Some([1.0, 1.0, 0.5]));
        assert_eq!(img.sample_bilinear(1.01, 0.0), None);
    }

    #[test]
    fn rgb8_round_trip_of_quantized_image() {
        let img = ColorImage::from_fn(3, 2, |x, y| [0.1 * x as f64, 0.33 * y as f64, 0.77]).quantized();
        let back = ColorImage::from_rgb8(3, 2, &img.to_rgb8()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn flip_is_involution() {
        let img = ColorImage::from_fn(5, 3, |x, y| [x as f64, y as f64, (x * y) as f64]);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_horizontal().get(0, 1), img.get(4, 1));
    }
}
