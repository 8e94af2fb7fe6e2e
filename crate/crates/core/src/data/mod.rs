//! Labelled datasets, generators, the IDX loader, and client partitioners.

mod blobs;
mod idx;
mod partition;

pub use blobs::{generate_blob_split, generate_blobs, BlobGenerator};
pub use idx::{
    dataset_from_idx, encode_idx_images, encode_idx_labels, load_idx, parse_idx_images,
    parse_idx_labels, quantize_to_u8, write_idx_images, write_idx_labels, IdxImages, IMAGES_MAGIC,
    LABELS_MAGIC,
};
pub use partition::{dirichlet_partition, iid_partition, Partition};

use crate::error::{FeloError, Result};
use crate::nn::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    n_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if inputs.shape().len() != 2 {
            return Err(FeloError::data(format!(
                "dataset inputs must be 2-D, got {:?}",
                inputs.shape()
            )));
        }
        if inputs.rows() != labels.len() {
            return Err(FeloError::data(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(FeloError::data(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        Ok(Dataset {
            inputs,
            labels,
            n_classes,
        })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn d_in(&self) -> usize {
        self.inputs.cols()
    }

    /// Widen the class count, e.g. when a split happens to miss the top class.
    pub fn with_n_classes(mut self, n_classes: usize) -> Result<Self> {
        if self.labels.iter().any(|&l| l >= n_classes) {
            return Err(FeloError::data(format!(
                "cannot narrow dataset to {n_classes} classes"
            )));
        }
        self.n_classes = n_classes;
        Ok(self)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let inputs = self.inputs.select_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(inputs, labels, self.n_classes)
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.n_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}
