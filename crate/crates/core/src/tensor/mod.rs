//! Dense NCHW tensors and the convolution kernels built on them.
//!
//! Everything is row-major `(batch, channels, height, width)`. Tensors are
//! immutable after construction as far as the layer stack is concerned; the
//! mutating helpers exist for construction and for the optimizer, which is
//! the single writer during training.

mod conv;

use std::fmt;

use num_traits::{Float, NumAssign, NumCast};

use crate::error::{Error, Result};

pub use conv::{
    conv2d, conv2d_backward_bias, conv2d_backward_input, conv2d_backward_weights, conv_output_len,
    max_pool_window, transposed_conv2d, tconv_backward_bias, tconv_backward_input,
    tconv_backward_weights, tconv_output_len, window_valid_count,
};

/// Element type of a tensor: 32-bit for training, 64-bit for gradient checks.
pub trait Scalar:
    Float + NumAssign + NumCast + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    /// Tag stored in checkpoints so files are self-describing.
    const DTYPE: Dtype;

    fn of_f64(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 conversion")
    }

    fn as_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    fn byte_width() -> usize;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            other => Err(Error::Checkpoint(format!("unknown dtype tag {other}"))),
        }
    }
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }

    fn byte_width() -> usize {
        4
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }

    fn byte_width() -> usize {
        8
    }
}

/// Four-axis extent. For feature maps the axes read `(batch, channels,
/// height, width)`; convolution weights reuse the same struct with the
/// reading `(out_channels, in_channels, kernel_h, kernel_w)`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Shape {
            batch,
            channels,
            height,
            width,
        }
    }

    pub fn count(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        ((b * self.channels + c) * self.height + h) * self.width + w
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Scalar tensors (loss values) are shaped `(1, 1, 1, 1)`.
    pub fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub fn is_scalar(&self) -> bool {
        self.count() == 1
    }

    /// True when `self` can be broadcast over `target`: every axis is either
    /// equal or has extent one.
    pub fn broadcasts_to(&self, target: &Shape) -> bool {
        let ok = |a: usize, b: usize| a == b || a == 1;
        ok(self.batch, target.batch)
            && ok(self.channels, target.channels)
            && ok(self.height, target.height)
            && ok(self.width, target.width)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.batch, self.channels, self.height, self.width
        )
    }
}

/// Dense row-major 4-axis array.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.count() {
            return Err(Error::shape(
                "tensor construction",
                format!("shape {shape} requires {} values, got {}", shape.count(), data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.count()],
        }
    }

    pub fn filled(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.count()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.count());
        for b in 0..shape.batch {
            for c in 0..shape.channels {
                for h in 0..shape.height {
                    for w in 0..shape.width {
                        data.push(f(b, c, h, w));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.index(b, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, h: usize, w: usize, value: T) {
        let idx = self.shape.index(b, c, h, w);
        self.data[idx] = value;
    }

    /// Contiguous `(b, c, h)` row.
    #[inline]
    pub fn row(&self, b: usize, c: usize, h: usize) -> &[T] {
        let start = self.shape.index(b, c, h, 0);
        &self.data[start..start + self.shape.width]
    }

    #[inline]
    pub fn row_mut(&mut self, b: usize, c: usize, h: usize) -> &mut [T] {
        let start = self.shape.index(b, c, h, 0);
        let width = self.shape.width;
        &mut self.data[start..start + width]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Error naming `context` if any entry is NaN or infinite.
    pub fn require_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "elementwise op",
                format!("{} vs {}", self.shape, other.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    /// Multiply by `factor`, broadcasting axes of extent one.
    pub fn mul_broadcast(&self, factor: &Self) -> Result<Self> {
        self.broadcast_zip(factor, "broadcast multiply", |a, b| a * b)
    }

    /// Add `addend`, broadcasting axes of extent one.
    pub fn add_broadcast(&self, addend: &Self) -> Result<Self> {
        self.broadcast_zip(addend, "broadcast add", |a, b| a + b)
    }

    fn broadcast_zip(
        &self,
        other: &Self,
        context: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Self> {
        if !other.shape.broadcasts_to(&self.shape) {
            return Err(Error::shape(
                context,
                format!("{} does not broadcast to {}", other.shape, self.shape),
            ));
        }
        let s = self.shape;
        let o = other.shape;
        let mut out = Vec::with_capacity(s.count());
        for b in 0..s.batch {
            let ob = if o.batch == 1 { 0 } else { b };
            for c in 0..s.channels {
                let oc = if o.channels == 1 { 0 } else { c };
                for h in 0..s.height {
                    let oh = if o.height == 1 { 0 } else { h };
                    let row = self.row(b, c, h);
                    if o.width == 1 {
                        let v = other.at(ob, oc, oh, 0);
                        out.extend(row.iter().map(|&a| f(a, v)));
                    } else {
                        let orow = other.row(ob, oc, oh);
                        out.extend(row.iter().zip(orow.iter()).map(|(&a, &b2)| f(a, b2)));
                    }
                }
            }
        }
        Ok(Tensor { shape: s, data: out })
    }

    /// Sum `self` down to `target` along broadcast axes (the adjoint of a
    /// broadcast from `target` up to this shape).
    pub fn reduce_to(&self, target: Shape) -> Result<Self> {
        if !target.broadcasts_to(&self.shape) {
            return Err(Error::shape(
                "broadcast reduction",
                format!("{} does not broadcast to {}", target, self.shape),
            ));
        }
        let mut out = Tensor::zeros(target);
        let s = self.shape;
        for b in 0..s.batch {
            let tb = if target.batch == 1 { 0 } else { b };
            for c in 0..s.channels {
                let tc = if target.channels == 1 { 0 } else { c };
                for h in 0..s.height {
                    let th = if target.height == 1 { 0 } else { h };
                    for w in 0..s.width {
                        let tw = if target.width == 1 { 0 } else { w };
                        let idx = target.index(tb, tc, th, tw);
                        out.data[idx] += self.at(b, c, h, w);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let s = first.shape;
        let mut channels = 0;
        for p in parts {
            let ps = p.shape;
            if (ps.batch, ps.height, ps.width) != (s.batch, s.height, s.width) {
                return Err(Error::shape(
                    "channel concat",
                    format!("{} vs {}", ps, s),
                ));
            }
            channels += ps.channels;
        }
        let out_shape = Shape::new(s.batch, channels, s.height, s.width);
        let mut data = Vec::with_capacity(out_shape.count());
        for b in 0..s.batch {
            for p in parts {
                for c in 0..p.shape.channels {
                    for h in 0..s.height {
                        data.extend_from_slice(p.row(b, c, h));
                    }
                }
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    /// Split the channel axis back into the given extents (adjoint of
    /// `concat_channels`).
    pub fn split_channels(&self, extents: &[usize]) -> Result<Vec<Self>> {
        let total: usize = extents.iter().sum();
        if total != self.shape.channels {
            return Err(Error::shape(
                "channel split",
                format!("extents sum to {total}, tensor has {}", self.shape.channels),
            ));
        }
        let s = self.shape;
        let mut out = Vec::with_capacity(extents.len());
        let mut offset = 0;
        for &ext in extents {
            let mut part = Tensor::zeros(Shape::new(s.batch, ext, s.height, s.width));
            for b in 0..s.batch {
                for c in 0..ext {
                    for h in 0..s.height {
                        let src = self.row(b, offset + c, h);
                        part.row_mut(b, c, h).copy_from_slice(src);
                    }
                }
            }
            offset += ext;
            out.push(part);
        }
        Ok(out)
    }

    /// Zero-pad the spatial axes by `pad` on every side.
    pub fn pad_spatial(&self, pad: usize) -> Self {
        if pad == 0 {
            return self.clone();
        }
        let s = self.shape;
        let out_shape = Shape::new(s.batch, s.channels, s.height + 2 * pad, s.width + 2 * pad);
        let mut out = Tensor::zeros(out_shape);
        for b in 0..s.batch {
            for c in 0..s.channels {
                for h in 0..s.height {
                    let dst_start = out_shape.index(b, c, h + pad, pad);
                    out.data[dst_start..dst_start + s.width].copy_from_slice(self.row(b, c, h));
                }
            }
        }
        out
    }

    /// Drop `pad` rows/columns from every spatial side.
    pub fn crop_spatial(&self, pad: usize) -> Result<Self> {
        if pad == 0 {
            return Ok(self.clone());
        }
        let s = self.shape;
        if s.height <= 2 * pad || s.width <= 2 * pad {
            return Err(Error::shape(
                "spatial crop",
                format!("cannot crop {pad} from {}", s),
            ));
        }
        let out_shape = Shape::new(s.batch, s.channels, s.height - 2 * pad, s.width - 2 * pad);
        let mut out = Tensor::zeros(out_shape);
        for b in 0..s.batch {
            for c in 0..s.channels {
                for h in 0..out_shape.height {
                    let src_start = s.index(b, c, h + pad, pad);
                    out.row_mut(b, c, h)
                        .copy_from_slice(&self.data[src_start..src_start + out_shape.width]);
                }
            }
        }
        Ok(out)
    }

    /// Reflect-pad the spatial axes (no edge duplication), used to make a
    /// map divisible by the network's downsampling factor.
    pub fn pad_reflect(&self, pad_bottom: usize, pad_right: usize) -> Result<Self> {
        let s = self.shape;
        if pad_bottom >= s.height || pad_right >= s.width {
            return Err(Error::shape(
                "reflect pad",
                format!("pad ({pad_bottom}, {pad_right}) too large for {}", s),
            ));
        }
        let out_shape = Shape::new(s.batch, s.channels, s.height + pad_bottom, s.width + pad_right);
        let mut out = Tensor::zeros(out_shape);
        for b in 0..s.batch {
            for c in 0..s.channels {
                for h in 0..out_shape.height {
                    let src_h = if h < s.height { h } else { 2 * s.height - 2 - h };
                    for w in 0..out_shape.width {
                        let src_w = if w < s.width { w } else { 2 * s.width - 2 - w };
                        let v = self.at(b, c, src_h, src_w);
                        out.set(b, c, h, w, v);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Keep the top-left `(height, width)` window of the spatial axes.
    pub fn crop_to(&self, height: usize, width: usize) -> Result<Self> {
        let s = self.shape;
        if height > s.height || width > s.width {
            return Err(Error::shape(
                "crop",
                format!("({height}, {width}) exceeds {}", s),
            ));
        }
        let mut out = Tensor::zeros(Shape::new(s.batch, s.channels, height, width));
        for b in 0..s.batch {
            for c in 0..s.channels {
                for h in 0..height {
                    let src_start = s.index(b, c, h, 0);
                    out.row_mut(b, c, h)
                        .copy_from_slice(&self.data[src_start..src_start + width]);
                }
            }
        }
        Ok(out)
    }

    /// Cast every element, e.g. to run a 32-bit model's tensors through the
    /// 64-bit gradient checker.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
        }
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{} [", self.shape)?;
        let preview: Vec<String> = self.data.iter().take(8).map(|v| format!("{v:?}")).collect();
        write!(f, "{}", preview.join(", "))?;
        if self.data.len() > 8 {
            write!(f, ", …")?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_length() {
        let shape = Shape::new(1, 2, 2, 2);
        assert!(Tensor::<f64>::new(shape, vec![0.0; 8]).is_ok());
        assert!(Tensor::<f64>::new(shape, vec![0.0; 7]).is_err());
    }

    #[test]
    fn broadcast_multiply_single_channel() {
        let x = Tensor::<f64>::from_fn(Shape::new(1, 2, 2, 2), |_, c, h, w| {
            (c * 4 + h * 2 + w) as f64
        });
        let m = Tensor::<f64>::new(
            Shape::new(1, 1, 2, 2),
            vec![1.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let y = x.mul_broadcast(&m).unwrap();
        assert_eq!(y.at(0, 0, 0, 0), 0.0);
        assert_eq!(y.at(0, 0, 0, 1), 0.0);
        assert_eq!(y.at(0, 1, 0, 0), 4.0);
        assert_eq!(y.at(0, 1, 1, 1), 7.0);
    }

    #[test]
    fn reduce_is_adjoint_of_broadcast() {
        let g = Tensor::<f64>::filled(Shape::new(2, 3, 2, 2), 1.0);
        let r = g.reduce_to(Shape::new(1, 3, 1, 1)).unwrap();
        assert_eq!(r.data(), &[8.0, 8.0, 8.0]);
    }

    #[test]
    fn concat_split_roundtrip() {
        let a = Tensor::<f64>::filled(Shape::new(1, 2, 2, 2), 1.0);
        let b = Tensor::<f64>::filled(Shape::new(1, 3, 2, 2), 2.0);
        let cat = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape().channels, 5);
        let parts = cat.split_channels(&[2, 3]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn pad_crop_roundtrip() {
        let x = Tensor::<f64>::from_fn(Shape::new(1, 1, 3, 4), |_, _, h, w| (h * 4 + w) as f64);
        let padded = x.pad_spatial(2);
        assert_eq!(padded.shape().spatial(), (7, 8));
        assert_eq!(padded.crop_spatial(2).unwrap(), x);
    }

    #[test]
    fn reflect_pad_mirrors_without_edge_duplication() {
        let x = Tensor::<f64>::new(Shape::new(1, 1, 1, 3), vec![1.0, 2.0, 3.0]).unwrap();
        let p = x.pad_reflect(0, 2).unwrap();
        assert_eq!(p.data(), &[1.0, 2.0, 3.0, 2.0, 1.0]);
    }
}
