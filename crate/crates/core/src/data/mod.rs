//! Labeled image data: CIFAR binaries, a procedural texture generator, and
//! the stochastic view pipeline used by the self-supervised objectives.

mod augment;
mod cifar;
mod synthetic;

pub use augment::{augment_pair, augment_view, rotate4, AugmentConfig, ViewPair};
pub use cifar::{decode_cifar, load_cifar_binary, load_cifar_dir, CifarVariant, CIFAR_PIXELS};
pub use synthetic::gen_synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// A single `C×H×W` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{channels}×{height}×{width} image with {} values",
                data.len()
            )));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// An immutable set of equally sized images with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    channels: usize,
    height: usize,
    width: usize,
    pixels: Vec<f64>,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
}

impl LabeledImageSet {
    pub fn new(
        (channels, height, width): (usize, usize, usize),
        pixels: Vec<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        let per = channels * height * width;
        if pixels.len() != per * labels.len() {
            return Err(Error::Shape(format!(
                "{} labels but {} pixel values of {per} per image",
                labels.len(),
                pixels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument("pixel values must lie in [0, 1]".into()));
        }
        Ok(LabeledImageSet {
            channels,
            height,
            width,
            pixels,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// `(channels, height, width)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn pixels(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn image(&self, i: usize) -> Image {
        Image {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.pixels(i).to_vec(),
        }
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Stacks the selected images into a `[B×C×H×W]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.pixels(i));
        }
        Tensor::new(vec![indices.len(), self.channels, self.height, self.width], data)
            .expect("batch shape is consistent by construction")
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledImageSet {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.pixels(i));
        }
        LabeledImageSet {
            channels: self.channels,
            height: self.height,
            width: self.width,
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
        }
    }
}

/// Disjoint train and held-out test sets.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplits {
    pub train: LabeledImageSet,
    pub test: LabeledImageSet,
}

/// Stacks images of identical shape into a `[B×C×H×W]` tensor.
pub fn stack_images(images: &[Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot stack zero images".into()))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for im in images {
        if (im.channels, im.height, im.width) != (c, h, w) {
            return Err(Error::Shape("images of differing shape".into()));
        }
        data.extend_from_slice(&im.data);
    }
    Tensor::new(vec![images.len(), c, h, w], data)
}
