use crate::error::{ensure, Result};
use crate::raster::Raster;

/// Channels-last latent grid; `values[(y * w + x) * channels + c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub values: Vec<f32>,
}

impl LatentGrid {
    pub fn new(h: usize, w: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        ensure!(values.len() == h * w * channels, "latent of {h}x{w}x{channels} needs {} values, got {}", h * w * channels, values.len());
        Ok(LatentGrid { h, w, channels, values })
    }

    pub fn zeros(h: usize, w: usize, channels: usize) -> Self {
        LatentGrid { h, w, channels, values: vec![0.0; h * w * channels] }
    }

    pub fn tokens(&self) -> usize {
        self.h * self.w
    }

    pub fn same_shape(&self, other: &LatentGrid) -> bool {
        (self.h, self.w, self.channels) == (other.h, other.w, other.channels)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `a * self + b` elementwise.
    pub fn affine(&self, a: f32, b: f32) -> LatentGrid {
        LatentGrid { values: self.values.iter().map(|v| a * v + b).collect(), ..self.clone() }
    }
}

/// Space-to-depth patchify: each `factor × factor × 3` pixel block becomes one
/// latent cell with channel index `(dy * factor + dx) * 3 + c`.
pub fn encode_image_to_latent(image: &Raster, factor: usize) -> Result<LatentGrid> {
    ensure!(factor > 0, "latent factor must be positive");
    ensure!(
        image.height() % factor == 0 && image.width() % factor == 0,
        "image {}x{} not divisible by latent factor {factor}",
        image.height(),
        image.width()
    );
    let (h, w) = (image.height() / factor, image.width() / factor);
    let channels = factor * factor * 3;
    let mut values = vec![0.0; h * w * channels];
    let src = image.data();
    for y in 0..h {
        for x in 0..w {
            let cell = (y * w + x) * channels;
            for dy in 0..factor {
                for dx in 0..factor {
                    let p = ((y * factor + dy) * image.width() + x * factor + dx) * 3;
                    let o = cell + (dy * factor + dx) * 3;
                    values[o..o + 3].copy_from_slice(&src[p..p + 3]);
                }
            }
        }
    }
    Ok(LatentGrid { h, w, channels, values })
}

/// Exact inverse of [`encode_image_to_latent`].
pub fn decode_latent(latent: &LatentGrid, factor: usize) -> Result<Raster> {
    ensure!(factor > 0 && latent.channels == factor * factor * 3, "latent has {} channels, factor {factor} needs {}", latent.channels, factor * factor * 3);
    let (height, width) = (latent.h * factor, latent.w * factor);
    let mut data = vec![0.0; height * width * 3];
    for y in 0..latent.h {
        for x in 0..latent.w {
            let cell = (y * latent.w + x) * latent.channels;
            for dy in 0..factor {
                for dx in 0..factor {
                    let p = ((y * factor + dy) * width + x * factor + dx) * 3;
                    let o = cell + (dy * factor + dx) * 3;
                    data[p..p + 3].copy_from_slice(&latent.values[o..o + 3]);
                }
            }
        }
    }
    Raster::new(height, width, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Raster {
        Raster::from_fn(h, w, |y, x| [y as f32 / h as f32, x as f32 / w as f32, ((y * 7 + x * 3) % 11) as f32 / 11.0])
    }

    #[test]
    fn round_trip_is_exact() {
        let img = ramp(64, 64);
        let lat = encode_image_to_latent(&img, 4).unwrap();
        assert_eq!(decode_latent(&lat, 4).unwrap(), img);
    }

    #[test]
    fn shape_arithmetic() {
        let lat = encode_image_to_latent(&ramp(64, 64), 4).unwrap();
        assert_eq!((lat.h, lat.w, lat.channels), (16, 16, 48));
    }

    #[test]
    fn constant_image_gives_constant_latent() {
        let lat = encode_image_to_latent(&Raster::filled(16, 16, 0.25), 4).unwrap();
        assert!(lat.values.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn indivisible_size_is_rejected() {
        assert!(encode_image_to_latent(&ramp(10, 12), 4).is_err());
    }
}
