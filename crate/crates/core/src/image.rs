//! Image containers and elementary pixel operations.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{contract, shape_err, Result};

/// Smallest accepted height and width.
pub const MIN_SIDE: usize = 8;

/// BT.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColorSpace {
    Rgb,
    Gray,
}

impl ColorSpace {
    pub fn channels(self) -> usize {
        match self {
            ColorSpace::Rgb => 3,
            ColorSpace::Gray => 1,
        }
    }

    pub fn from_channels(c: usize) -> Result<Self> {
        match c {
            1 => Ok(ColorSpace::Gray),
            3 => Ok(ColorSpace::Rgb),
            _ => Err(contract!("unsupported channel count {c}")),
        }
    }
}

/// Dense `H x W x C` image with interleaved channels and values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    color: ColorSpace,
    data: Vec<f64>,
}

impl Image {
    /// Builds an image from interleaved `H x W x C` samples, checking every invariant.
    pub fn new(height: usize, width: usize, color: ColorSpace, data: Vec<f64>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(contract!(
                "image is {height}x{width}, both sides must be at least {MIN_SIDE}"
            ));
        }
        let expected = height * width * color.channels();
        if data.len() != expected {
            return Err(shape_err!(
                "expected {expected} samples for {height}x{width}x{}, got {}",
                color.channels(),
                data.len()
            ));
        }
        if let Some((i, v)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(contract!("sample {i} = {v} is outside [0, 1]"));
        }
        Ok(Self {
            height,
            width,
            color,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, color: ColorSpace, value: f64) -> Result<Self> {
        Self::new(
            height,
            width,
            color,
            vec![value; height * width * color.channels()],
        )
    }

    /// Builds an image from `f(y, x, c)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        color: ColorSpace,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let c = color.channels();
        let mut data = Vec::with_capacity(height * width * c);
        for y in 0..height {
            for x in 0..width {
                for ch in 0..c {
                    data.push(f(y, x, ch));
                }
            }
        }
        Self::new(height, width, color, data)
    }

    /// Builds an image from planar `C x H x W` samples, clamping into `[0, 1]`.
    pub fn from_planar(height: usize, width: usize, color: ColorSpace, planar: &[f64]) -> Result<Self> {
        let c = color.channels();
        if planar.len() != c * height * width {
            return Err(shape_err!(
                "planar buffer has {} samples, expected {}",
                planar.len(),
                c * height * width
            ));
        }
        let hw = height * width;
        let mut data = vec![0.0; planar.len()];
        for ch in 0..c {
            for p in 0..hw {
                let v = planar[ch * hw + p];
                if !v.is_finite() {
                    return Err(crate::error::Error::NonFinite(format!(
                        "planar sample {} is {v}",
                        ch * hw + p
                    )));
                }
                data[p * c + ch] = v.clamp(0.0, 1.0);
            }
        }
        Self::new(height, width, color, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.color.channels()
    }

    pub fn color(&self) -> ColorSpace {
        self.color
    }

    /// `(height, width, channels)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels())
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels() + c]
    }

    /// One channel as a row-major plane.
    pub fn plane(&self, c: usize) -> Plane {
        let ch = self.channels();
        Plane {
            height: self.height,
            width: self.width,
            data: self.data.iter().skip(c).step_by(ch).copied().collect(),
        }
    }

    /// Samples reordered to planar `C x H x W`.
    pub fn to_planar(&self) -> Vec<f64> {
        let c = self.channels();
        let hw = self.height * self.width;
        let mut out = vec![0.0; self.data.len()];
        for (i, v) in self.data.iter().enumerate() {
            out[(i % c) * hw + i / c] = *v;
        }
        out
    }

    /// BT.601 luminance; single-channel images are returned unchanged.
    pub fn to_grayscale(&self) -> Image {
        match self.color {
            ColorSpace::Gray => self.clone(),
            ColorSpace::Rgb => {
                let data = self
                    .data
                    .chunks_exact(3)
                    .map(|px| {
                        let l = LUMA_WEIGHTS[0] * px[0] + LUMA_WEIGHTS[1] * px[1] + LUMA_WEIGHTS[2] * px[2];
                        l.clamp(0.0, 1.0)
                    })
                    .collect();
                Image {
                    height: self.height,
                    width: self.width,
                    color: ColorSpace::Gray,
                    data,
                }
            }
        }
    }

    /// Replicates a gray channel into RGB; RGB images are returned unchanged.
    pub fn to_rgb(&self) -> Image {
        match self.color {
            ColorSpace::Rgb => self.clone(),
            ColorSpace::Gray => Image {
                height: self.height,
                width: self.width,
                color: ColorSpace::Rgb,
                data: self.data.iter().flat_map(|v| [*v, *v, *v]).collect(),
            },
        }
    }

    /// The `size x size` window at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width {
            return Err(contract!(
                "crop {height}x{width} at ({top}, {left}) exceeds {}x{}",
                self.height,
                self.width
            ));
        }
        let c = self.channels();
        let mut data = Vec::with_capacity(height * width * c);
        for y in top..top + height {
            let start = (y * self.width + left) * c;
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        Image::new(height, width, self.color, data)
    }

    /// Bilinear resampling with half-pixel centers.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Image> {
        let c = self.channels();
        let mut data = vec![0.0; height * width * c];
        for ch in 0..c {
            let src = self.plane(ch);
            let dst = src.resize_bilinear(height, width);
            for (p, v) in dst.data.iter().enumerate() {
                data[p * c + ch] = v.clamp(0.0, 1.0);
            }
        }
        Image::new(height, width, self.color, data)
    }

    /// Replicate-pads the bottom and right edges so both sides are multiples of `multiple`.
    pub fn pad_to_multiple(&self, multiple: usize) -> Image {
        let height = self.height.div_ceil(multiple) * multiple;
        let width = self.width.div_ceil(multiple) * multiple;
        if height == self.height && width == self.width {
            return self.clone();
        }
        let c = self.channels();
        let mut data = Vec::with_capacity(height * width * c);
        for y in 0..height {
            let sy = y.min(self.height - 1);
            for x in 0..width {
                let sx = x.min(self.width - 1);
                let base = (sy * self.width + sx) * c;
                data.extend_from_slice(&self.data[base..base + c]);
            }
        }
        Image {
            height,
            width,
            color: self.color,
            data,
        }
    }

    /// Element-wise affine blend `w * self + (1 - w) * other`.
    pub fn blend(&self, other: &Image, w: f64) -> Result<Image> {
        check_same_dims(self, other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (w * a + (1.0 - w) * b).clamp(0.0, 1.0))
            .collect();
        Image::new(self.height, self.width, self.color, data)
    }
}

fn check_same_dims(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err!("{:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

/// Two aligned images of identical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub a: Image,
    pub b: Image,
}

impl ImagePair {
    pub fn new(a: Image, b: Image) -> Result<Self> {
        check_same_dims(&a, &b)?;
        Ok(Self { a, b })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.a.dims()
    }

    /// Per-element maximum of the two images.
    pub fn elementwise_max(&self) -> Image {
        let data = self
            .a
            .data
            .iter()
            .zip(&self.b.data)
            .map(|(x, y)| x.max(*y))
            .collect();
        Image {
            height: self.a.height,
            width: self.a.width,
            color: self.a.color,
            data,
        }
    }

    pub fn crop(&self, top: usize, left: usize, size: usize) -> Result<ImagePair> {
        Ok(ImagePair {
            a: self.a.crop(top, left, size, size)?,
            b: self.b.crop(top, left, size, size)?,
        })
    }

    pub fn swapped(&self) -> ImagePair {
        ImagePair {
            a: self.b.clone(),
            b: self.a.clone(),
        }
    }
}

/// Free function form of [`ImagePair::elementwise_max`] over two images.
pub fn elementwise_max(a: &Image, b: &Image) -> Result<Image> {
    check_same_dims(a, b)?;
    Ok(ImagePair {
        a: a.clone(),
        b: b.clone(),
    }
    .elementwise_max())
}

/// Unconstrained single-channel row-major buffer used by metrics and saliency.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width, "plane buffer length");
        Self {
            height,
            width,
            data,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![0.0; height * width])
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Sample with coordinates clamped into bounds (replicate border).
    #[inline]
    pub fn at_clamped(&self, y: isize, x: isize) -> f64 {
        let yy = y.clamp(0, self.height as isize - 1) as usize;
        let xx = x.clamp(0, self.width as isize - 1) as usize;
        self.data[yy * self.width + xx]
    }

    pub fn scaled(&self, s: f64) -> Plane {
        Plane::new(
            self.height,
            self.width,
            self.data.iter().map(|v| v * s).collect(),
        )
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Bilinear resampling with half-pixel centers and clamped borders.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Plane {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let ys = sample_positions(self.height, height);
        let xs = sample_positions(self.width, width);
        let mut out = Vec::with_capacity(height * width);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = self.at(y0, x0) * (1.0 - fx) + self.at(y0, x1) * fx;
                let bottom = self.at(y1, x0) * (1.0 - fx) + self.at(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
        Plane::new(height, width, out)
    }
}

fn sample_positions(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (libm::floor(s) as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}
