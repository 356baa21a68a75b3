//! Datasets in `[0,1]` NCHW form: CIFAR-10 binaries, image directory trees and
//! a seeded synthetic shape set.

mod cifar;
mod images;
mod synthetic;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use cifar::{load_cifar10_binary, parse_cifar10, write_cifar10_binary, CIFAR10_CLASSES, RECORD_BYTES};
pub use images::{
    decode_image, load_image_tree, read_image, resize_and_center_crop, write_image, write_png, write_ppm, RgbImage,
    TreeLoad,
};
pub use synthetic::{generate_synthetic, SyntheticSpec, SHAPE_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `N×C×S×S` pixels in `[0,1]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: Vec<String>,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: Vec<String>, split: Split) -> Result<Self> {
        let ds = Self { images, labels, classes, split };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, ..) = self.images.dims4()?;
        if n != self.labels.len() {
            return Err(Error::shape(format!("{n} images but {} labels", self.labels.len())));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.classes.len()) {
            return Err(Error::Format(format!("label {l} outside {} classes", self.classes.len())));
        }
        if self.images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Format("pixel outside [0,1]".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn side(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    /// Images `indices` stacked into one batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let items = indices.iter().map(|&i| self.images.batch_item(i)).collect::<Result<Vec<_>>>()?;
        Ok((Tensor::stack(&items)?, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// First `n` images (or all of them).
    pub fn take(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.batch(&idx)?;
        Ok(Self { images, labels, classes: self.classes.clone(), split: self.split })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes.len()];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    pub fn manifest(&self, seed: Option<u64>) -> DatasetManifest {
        DatasetManifest { classes: self.classes.clone(), counts: self.class_counts(), side: self.side(), seed }
    }
}

/// Summary written next to every generated or converted dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub counts: Vec<usize>,
    pub side: usize,
    pub seed: Option<u64>,
}

impl DatasetManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_pixels_and_labels() {
        let img = Tensor::full(&[1, 1, 2, 2], 0.5);
        assert!(Dataset::new(img.clone(), vec![2], vec!["a".into(), "b".into()], Split::Train).is_err());
        let bad = Tensor::full(&[1, 1, 2, 2], 1.5);
        assert!(Dataset::new(bad, vec![0], vec!["a".into()], Split::Train).is_err());
        assert!(Dataset::new(img, vec![0], vec!["a".into()], Split::Train).is_ok());
    }

    #[test]
    fn manifest_json_fields() {
        let ds = Dataset::new(Tensor::zeros(&[3, 3, 8, 8]), vec![0, 1, 1], vec!["x".into(), "y".into()], Split::Test)
            .unwrap();
        let m = ds.manifest(Some(7));
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        assert_eq!(v["counts"], serde_json::json!([1, 2]));
        assert_eq!(v["side"], 8);
        assert_eq!(v["seed"], 7);
    }
}
