use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};

/// `N` frames of `D` real features.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence(Matrix);

impl MotionSequence {
    pub fn new(frames: Matrix) -> Result<Self> {
        if frames.rows() == 0 || frames.cols() == 0 {
            return Err(Error::Shape("motion needs at least one frame and feature".into()));
        }
        if !frames.all_finite() {
            return Err(Error::NonFinite("motion frames".into()));
        }
        Ok(Self(frames))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("ragged motion frames".into()));
        }
        Self::new(Matrix::from_rows(rows))
    }

    pub fn zeros(num_frames: usize, feature_dim: usize) -> Self {
        Self(Matrix::zeros(num_frames, feature_dim))
    }

    pub fn standard_normal<R: Rng + ?Sized>(num_frames: usize, feature_dim: usize, rng: &mut R) -> Self {
        Self(Matrix::randn(num_frames, feature_dim, 1.0, rng))
    }

    pub fn num_frames(&self) -> usize {
        self.0.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.0.cols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    pub fn frames(&self) -> &Matrix {
        &self.0
    }

    pub fn frames_mut(&mut self) -> &mut Matrix {
        &mut self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn ensure_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn mean_abs(&self) -> f64 {
        self.0.data().iter().map(|v| v.abs()).sum::<f64>() / self.0.len() as f64
    }
}

impl From<MotionSequence> for Matrix {
    fn from(m: MotionSequence) -> Self {
        m.0
    }
}

impl Serialize for MotionSequence {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.0.to_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for MotionSequence {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        MotionSequence::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}
