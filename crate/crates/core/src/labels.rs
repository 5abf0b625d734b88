//! Integer label maps and images as they come off disk.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Row-major grid of class indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "label map of {height}x{width} needs {} entries, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, class: u8) {
        self.data[y * self.width + x] = class;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }

    /// Errors if any entry is not below `classes`.
    pub fn validate(&self, classes: usize) -> Result<()> {
        match self.data.iter().find(|&&v| v as usize >= classes) {
            Some(&bad) => Err(Error::InvalidInput(format!(
                "class index {bad} out of range for {classes} classes"
            ))),
            None => Ok(()),
        }
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&self, factor: usize) -> Self {
        let (h, w) = (self.height * factor, self.width * factor);
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(self.get(y / factor, x / factor));
            }
        }
        Self { height: h, width: w, data }
    }
}

/// One-hot encodes a batch of label maps into `(n, classes, h, w)`.
pub fn one_hot<T: Scalar>(maps: &[LabelMap], classes: usize) -> Result<Tensor<T>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidInput("one_hot of an empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut out = Tensor::zeros(Shape::new(maps.len(), classes, h, w));
    for (n, m) in maps.iter().enumerate() {
        if (m.height, m.width) != (h, w) {
            return Err(Error::Shape("label maps in a batch differ in size".into()));
        }
        m.validate(classes)?;
        for (i, &c) in m.data.iter().enumerate() {
            out.plane_mut(n, c as usize)[i] = T::one();
        }
    }
    Ok(out)
}

/// Flattens a batch of label maps to `(n, h, w)` order.
pub fn flatten_targets(maps: &[LabelMap]) -> Vec<u8> {
    maps.iter().flat_map(|m| m.data.iter().copied()).collect()
}

/// Single-channel-or-more real image, channel-first, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            Shape::new(1, self.channels, self.height, self.width),
            self.data.iter().map(|&v| T::lit(v as f64)).collect(),
        )
    }
}

/// Stacks images into one `(n, c, h, w)` batch tensor.
pub fn stack_images<T: Scalar>(images: &[&Image]) -> Tensor<T> {
    let parts: Vec<Tensor<T>> = images.iter().map(|i| i.to_tensor()).collect();
    Tensor::stack_batch(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_marks_each_class() {
        let m = LabelMap::new(1, 3, vec![0, 2, 1]).unwrap();
        let t: Tensor<f64> = one_hot(&[m], 3).unwrap();
        assert_eq!(t.plane(0, 0), &[1.0, 0.0, 0.0]);
        assert_eq!(t.plane(0, 1), &[0.0, 0.0, 1.0]);
        assert_eq!(t.plane(0, 2), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn out_of_range_labels_are_rejected() {
        let m = LabelMap::new(1, 2, vec![0, 3]).unwrap();
        assert!(m.validate(3).is_err());
        assert!(one_hot::<f32>(&[m], 3).is_err());
    }

    #[test]
    fn wrong_length_is_rejected() {
        assert!(LabelMap::new(2, 2, vec![0; 3]).is_err());
    }
}
