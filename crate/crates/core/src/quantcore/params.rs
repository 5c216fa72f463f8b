use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::scalar::Scalar;

/// Flat model parameter vector.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Params<T> {
    values: Vec<T>,
}

impl<T: Scalar> Params<T> {
    pub fn new(values: Vec<T>) -> Self {
        Self { values }
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![T::zero(); len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<T> {
        self.values
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.values.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn norm_inf(&self) -> T {
        self.values
            .iter()
            .fold(T::zero(), |acc, v| acc.max(v.abs()))
    }

    /// Elementwise `self - other`. Lengths must already agree.
    pub fn sub(&self, other: &Self) -> Self {
        debug_assert_eq!(self.len(), other.len());
        Self::new(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| *a - *b)
                .collect(),
        )
    }

    /// `self += scale * other`.
    pub fn axpy(&mut self, scale: T, other: &Self) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * *b;
        }
    }

    pub fn scaled(&self, scale: T) -> Self {
        Self::new(self.values.iter().map(|v| *v * scale).collect())
    }

    /// Little-endian IEEE-754 f64 encoding of every element.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            out.extend_from_slice(&v.widen().to_le_bytes());
        }
        out
    }

    /// Inverse of [`Params::to_le_bytes`].
    pub fn from_le_bytes(bytes: &[u8]) -> Option<Self> {
        if !bytes.len().is_multiple_of(8) {
            return None;
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| {
                let v = f64::from_le_bytes(c.try_into().expect("chunk of 8"));
                T::from_f64(v)
            })
            .collect::<Option<Vec<T>>>()?;
        Some(Self::new(values))
    }

    /// SHA-256 over [`Params::to_le_bytes`], hex encoded.
    pub fn digest_hex(&self) -> String {
        hex::encode(Sha256::digest(self.to_le_bytes()))
    }
}

impl<T> Index<usize> for Params<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.values[i]
    }
}

impl<T> IndexMut<usize> for Params<T> {
    fn index_mut(&mut self, i: usize) -> &mut T {
        &mut self.values[i]
    }
}

impl<T: Scalar> From<Vec<T>> for Params<T> {
    fn from(values: Vec<T>) -> Self {
        Self::new(values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_round_trip() {
        let p = Params::new(vec![1.5f64, -0.25, 3.0e-9]);
        let back = Params::<f64>::from_le_bytes(&p.to_le_bytes()).unwrap();
        assert_eq!(p, back);
        assert!(Params::<f64>::from_le_bytes(&[0u8; 7]).is_none());
    }

    #[test]
    fn digest_is_stable_across_precisions_for_representable_values() {
        let a = Params::new(vec![0.5f32, -2.0]);
        let b = Params::new(vec![0.5f64, -2.0]);
        assert_eq!(a.digest_hex(), b.digest_hex());
    }
}
