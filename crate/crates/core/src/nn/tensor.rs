use super::{NnError, Result, Scalar};
use crate::tiler::Raster;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

pub type TensorF32 = Tensor<f32>;

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NnError::ShapeMismatch {
                expected: shape,
                got: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); n],
        }
    }

    /// Stacks RGB tiles into an `N x H x W x 3` batch scaled to `[0, 1]`.
    pub fn from_rasters<'a>(tiles: impl IntoIterator<Item = &'a Raster>) -> Result<Self> {
        let mut shape = None;
        let mut data = Vec::new();
        let mut n = 0;
        for t in tiles {
            let s = (t.height as usize, t.width as usize);
            match shape {
                None => shape = Some(s),
                Some(prev) if prev != s => {
                    return Err(NnError::ShapeMismatch {
                        expected: vec![prev.0, prev.1, 3],
                        got: vec![s.0, s.1, 3],
                    })
                }
                _ => {}
            }
            let scale = T::of(1.0 / 255.0);
            data.extend(t.data.iter().map(|&b| T::of(b as f64) * scale));
            n += 1;
        }
        let (h, w) = shape.unwrap_or((0, 0));
        Ok(Tensor {
            shape: vec![n, h, w, 3],
            data,
        })
    }

    /// Batch size of an NHWC tensor.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// The `i`-th item of the leading axis.
    pub fn item(&self, i: usize) -> &[T] {
        let per: usize = self.shape[1..].iter().product();
        &self.data[i * per..(i + 1) * per]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rasters_scale_to_unit() {
        let a = Raster::filled(2, 3, [255, 0, 51]);
        let t = Tensor::<f32>::from_rasters([&a, &a]).unwrap();
        assert_eq!(t.shape, vec![2, 3, 2, 3]);
        assert_eq!(&t.item(1)[..2], &[1.0, 0.0]);
        assert!((t.item(1)[2] - 0.2).abs() < 1e-7);
        let b = Raster::filled(3, 3, [0, 0, 0]);
        assert!(Tensor::<f32>::from_rasters([&a, &b]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
    }
}
