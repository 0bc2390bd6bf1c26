//! Dense row-major `f64` tensors.
//!
//! Every feature map in the crate is stored batch-channel-height-width
//! (BCHW). There is no implicit broadcasting: elementwise operations require
//! identical shapes, and the few broadcasts the adapter needs live in
//! [`crate::ops`] as explicit operations.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Magic bytes at the start of a serialized tensor.
pub const MAGIC: &[u8; 4] = b"MSLT";
/// Serialization format version.
pub const FORMAT_VERSION: u32 = 1;

/// How a tensor is meant to be interpreted. Purely descriptive; it does not
/// change indexing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layout {
    /// `[B, C, H, W]` feature map.
    FeatureMap,
    /// Rank-1 vector.
    Vector,
    /// `[C_out, C_in / G, kH, kW]` convolution kernel.
    Kernel,
    /// Anything else (token sequences, logits, scalars).
    Dense,
}

impl Layout {
    fn infer(rank: usize) -> Self {
        match rank {
            1 => Layout::Vector,
            4 => Layout::FeatureMap,
            _ => Layout::Dense,
        }
    }
}

/// Extents of a BCHW feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape4 {
    pub fn new(batch: usize, channels: usize, height: usize, width: usize) -> Result<Self> {
        if batch == 0 || channels == 0 || height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "all extents must be positive, got [{batch}, {channels}, {height}, {width}]"
            )));
        }
        Ok(Self {
            batch,
            channels,
            height,
            width,
        })
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    pub fn numel(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    /// Spatial plane size `H * W`.
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        ((b * self.channels + c) * self.height + h) * self.width + w
    }

    pub fn with_channels(&self, channels: usize) -> Self {
        Self { channels, ..*self }
    }
}

#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    layout: Layout,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

fn check_extents(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape("tensor must have at least one axis"));
    }
    if let Some(pos) = shape.iter().position(|&e| e == 0) {
        return Err(Error::shape(format!("extent of axis {pos} is zero in shape {shape:?}")));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::shape(format!("shape {shape:?} overflows")))
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let n = check_extents(&shape)?;
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        let layout = Layout::infer(shape.len());
        Ok(Self { shape, data, layout })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Result<Self> {
        let shape = shape.into();
        let n = check_extents(&shape)?;
        Self::new(shape, vec![value; n])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            layout: Layout::Dense,
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    /// Entries drawn uniformly from `[low, high)`.
    pub fn uniform(shape: impl Into<Vec<usize>>, low: f64, high: f64, rng: &mut impl rand::Rng) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(low..high)).collect())
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self {
            shape: other.shape.clone(),
            data: vec![0.0; other.data.len()],
            layout: other.layout,
        }
    }

    pub fn from_shape4(shape: Shape4, data: Vec<f64>) -> Result<Self> {
        Self::new(shape.dims().to_vec(), data)
    }

    pub fn with_layout(mut self, layout: Layout) -> Self {
        self.layout = layout;
        self
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// In-place access, reserved for optimizers and initializers.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Interpret as a BCHW feature map.
    pub fn shape4(&self) -> Result<Shape4> {
        match self.shape[..] {
            [b, c, h, w] => Shape4::new(b, c, h, w),
            _ => Err(Error::shape(format!(
                "expected a rank-4 BCHW tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return Err(Error::shape(format!(
                "index of rank {} into tensor of rank {}",
                index.len(),
                self.shape.len()
            )));
        }
        let mut off = 0;
        for (axis, (&i, &e)) in index.iter().zip(&self.shape).enumerate() {
            if i >= e {
                return Err(Error::shape(format!(
                    "index {i} out of bounds for axis {axis} with extent {e}"
                )));
            }
            off = off * e + i;
        }
        Ok(off)
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn set(&mut self, index: &[usize], value: f64) -> Result<()> {
        let off = self.offset(index)?;
        self.data[off] = value;
        Ok(())
    }

    fn check_same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{op}: shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn zip_map(&self, other: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            layout: self.layout,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&a| f(a)).collect(),
            layout: self.layout,
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|a| a * factor)
    }

    /// `self += other`, used for adjoint accumulation.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Mean over the given axes; reduced axes keep extent 1.
    pub fn reduce_mean(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut reduced = vec![false; rank];
        for &axis in axes {
            if axis >= rank {
                return Err(Error::InvalidAxis { axis, rank });
            }
            reduced[axis] = true;
        }
        let out_shape: Vec<usize> = self
            .shape
            .iter()
            .zip(&reduced)
            .map(|(&e, &r)| if r { 1 } else { e })
            .collect();
        let count: usize = self
            .shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| r)
            .map(|(&e, _)| e)
            .product();
        let mut out = vec![0.0; out_shape.iter().product()];

        // Walk the input once, mapping each flat index to its output slot.
        let mut idx = vec![0usize; rank];
        for &v in &self.data {
            let mut off = 0;
            for axis in 0..rank {
                let i = if reduced[axis] { 0 } else { idx[axis] };
                off = off * out_shape[axis] + i;
            }
            out[off] += v;
            for axis in (0..rank).rev() {
                idx[axis] += 1;
                if idx[axis] < self.shape[axis] {
                    break;
                }
                idx[axis] = 0;
            }
        }
        let inv = 1.0 / count as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        Ok(Tensor {
            shape: out_shape,
            data: out,
            layout: self.layout,
        })
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        let n = check_extents(&shape)?;
        if n != self.data.len() {
            return Err(Error::shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        let layout = Layout::infer(shape.len());
        Ok(Tensor {
            shape,
            data: self.data.clone(),
            layout,
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|a| a.abs()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * self.shape.len() + 8 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &e in &self.shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
        let mut cursor = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cursor.len() < n {
                return Err(Error::Format("truncated tensor data".into()));
            }
            let (head, tail) = cursor.split_at(n);
            cursor = tail;
            Ok(head)
        };
        if take(4)? != MAGIC {
            return Err(Error::Format("bad magic, expected MSLT".into()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let e = u64::from_le_bytes(take(8)?.try_into().unwrap());
            shape.push(usize::try_from(e).map_err(|_| Error::Format("extent too large".into()))?);
        }
        let n = check_extents(&shape)?;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(take(8)?.try_into().unwrap()));
        }
        if !cursor.is_empty() {
            return Err(Error::Format(format!(
                "{} trailing bytes after tensor data",
                cursor.len()
            )));
        }
        Tensor::new(shape, data)
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&self.to_bytes())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Tensor> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf).map_err(|e| Error::Format(e.to_string()))?;
        Tensor::from_bytes(&buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Tensor::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zeros_examples() {
        let t = Tensor::zeros([2, 3]).unwrap();
        assert_eq!(t.len(), 6);
        assert!(t.data().iter().all(|&v| v == 0.0));
        assert_eq!(Tensor::zeros([1]).unwrap().data(), &[0.0]);
        assert_eq!(Tensor::zeros([4, 4, 4]).unwrap().sum(), 0.0);
    }

    #[test]
    fn zero_extent_is_rejected() {
        assert!(matches!(Tensor::zeros([2, 0]), Err(Error::Shape(_))));
        assert!(Tensor::zeros(Vec::<usize>::new()).is_err());
        assert!(Tensor::new([2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn elementwise_mul_examples() {
        let a = Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap();
        let b = Tensor::vector(vec![4.0, 5.0, 6.0]).unwrap();
        assert_eq!(a.mul(&b).unwrap().data(), &[4.0, 10.0, 18.0]);
        let ones = Tensor::ones([3]).unwrap();
        assert_eq!(a.mul(&ones).unwrap(), a);
        let zeros = Tensor::zeros([3]).unwrap();
        assert_eq!(a.mul(&zeros).unwrap(), zeros);
        let c = Tensor::zeros([4]).unwrap();
        assert!(matches!(a.mul(&c), Err(Error::Shape(_))));
    }

    #[test]
    fn add_examples() {
        let a = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let b = Tensor::vector(vec![3.0, 4.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(a.add(&Tensor::zeros([2]).unwrap()).unwrap(), a);
        let back = a.add(&b).unwrap().sub(&b).unwrap();
        assert!(back.max_abs_diff(&a).unwrap() <= 1e-15);
        assert!(a.add(&Tensor::zeros([3]).unwrap()).is_err());
    }

    #[test]
    fn reduce_mean_examples() {
        let t = Tensor::new([2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let m = t.reduce_mean(&[0, 1]).unwrap();
        assert_eq!(m.shape(), &[1, 1]);
        assert_eq!(m.data(), &[4.0]);
        assert_eq!(t.reduce_mean(&[]).unwrap(), t);
        let c = Tensor::full([3, 2, 5], 2.5).unwrap();
        assert!(c.reduce_mean(&[0, 2]).unwrap().data().iter().all(|&v| v == 2.5));
        assert!(matches!(
            t.reduce_mean(&[2]),
            Err(Error::InvalidAxis { axis: 2, rank: 2 })
        ));
    }

    #[test]
    fn reduce_mean_single_axis() {
        let t = Tensor::new([2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(t.reduce_mean(&[0]).unwrap().data(), &[2.5, 3.5, 4.5]);
        assert_eq!(t.reduce_mean(&[1]).unwrap().data(), &[2.0, 5.0]);
    }

    #[test]
    fn serialization_layout() {
        let t = Tensor::new([1, 2], vec![1.5, -2.0]).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(&bytes[..4], b"MSLT");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..20], &1u64.to_le_bytes());
        assert_eq!(&bytes[20..28], &2u64.to_le_bytes());
        assert_eq!(&bytes[28..36], &1.5f64.to_le_bytes());
        assert_eq!(bytes.len(), 44);
        assert!(Tensor::from_bytes(&bytes[..40]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Tensor::from_bytes(&bad).is_err());
    }

    fn shape_and_data() -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
        proptest::collection::vec(1usize..5, 1..=4).prop_flat_map(|shape| {
            let n: usize = shape.iter().product();
            (Just(shape), proptest::collection::vec(-1e6f64..1e6, n))
        })
    }

    proptest! {
        #[test]
        fn set_then_get_round_trips((shape, data) in shape_and_data()) {
            let mut t = Tensor::zeros(shape.clone()).unwrap();
            let mut idx = vec![0usize; shape.len()];
            for (flat, &v) in data.iter().enumerate() {
                t.set(&idx, v).unwrap();
                prop_assert_eq!(t.get(&idx).unwrap(), v);
                prop_assert_eq!(t.data()[flat], v);
                for axis in (0..shape.len()).rev() {
                    idx[axis] += 1;
                    if idx[axis] < shape[axis] { break; }
                    idx[axis] = 0;
                }
            }
        }

        #[test]
        fn mul_and_add_commute_bitwise((shape, data) in shape_and_data(), seed in 0u64..1000) {
            let a = Tensor::new(shape.clone(), data.clone()).unwrap();
            let b = a.map(|v| (v * 0.37 + seed as f64).sin() * 1e3);
            prop_assert!(a.mul(&b).unwrap().bitwise_eq(&b.mul(&a).unwrap()));
            prop_assert!(a.add(&b).unwrap().bitwise_eq(&b.add(&a).unwrap()));
        }

        #[test]
        fn mean_over_all_axes_matches_sum((shape, data) in shape_and_data()) {
            let t = Tensor::new(shape.clone(), data).unwrap();
            let axes: Vec<usize> = (0..shape.len()).collect();
            let m = t.reduce_mean(&axes).unwrap().data()[0];
            let expected = t.sum() / t.len() as f64;
            prop_assert!((m - expected).abs() <= 1e-12 * expected.abs());
        }

        #[test]
        fn bytes_round_trip((shape, data) in shape_and_data()) {
            let t = Tensor::new(shape, data).unwrap();
            prop_assert!(Tensor::from_bytes(&t.to_bytes()).unwrap().bitwise_eq(&t));
        }
    }
}
