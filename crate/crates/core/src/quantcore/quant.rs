//! Ternary weight and int8 activation quantizers.
//!
//! Weights: `scale = mean(|w|)`, `q = clamp(round(w / scale), -1, 1)`.
//! Activations: `scale = 127 / max(|x|)`, `q = clamp(round(x * scale), -127, 127)`.
//! Rounding is half-away-from-zero. An all-zero input gets [`ZERO_SCALE_GUARD`] as its
//! scale and all-zero codes.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::Params;
use crate::scalar::Scalar;

/// Scale substituted when the input carries no magnitude.
pub const ZERO_SCALE_GUARD: f64 = 1e-12;

/// Largest activation code magnitude.
pub const ACTIVATION_LEVELS: i8 = 127;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ternary<T> {
    pub values: Vec<i8>,
    pub scale: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantActivations<T> {
    pub values: Vec<i8>,
    pub scale: T,
}

impl<T: Scalar> Ternary<T> {
    /// SHA-256 over the codes followed by the f64 little-endian scale.
    pub fn digest_hex(&self) -> String {
        let mut h = Sha256::new();
        let codes: Vec<u8> = self.values.iter().map(|v| *v as u8).collect();
        h.update(&codes);
        h.update(self.scale.widen().to_le_bytes());
        hex::encode(h.finalize())
    }
}

/// Running mean; returns the input exactly when all elements are equal.
fn mean_abs<T: Scalar>(w: &[T]) -> T {
    let mut mean = T::zero();
    for (i, v) in w.iter().enumerate() {
        let n = T::lit((i + 1) as f64);
        mean += (v.abs() - mean) / n;
    }
    mean
}

pub fn quantize_weights<T: Scalar>(w: &Params<T>) -> Ternary<T> {
    let scale = mean_abs(w.as_slice());
    if scale <= T::zero() {
        return Ternary {
            values: vec![0; w.len()],
            scale: T::lit(ZERO_SCALE_GUARD),
        };
    }
    let one = T::one();
    let values = w
        .iter()
        .map(|v| {
            let q = (*v / scale).round().max(-one).min(one);
            q.to_i8().expect("clamped to [-1, 1]")
        })
        .collect();
    Ternary { values, scale }
}

pub fn quantize_activations<T: Scalar>(x: &[T]) -> QuantActivations<T> {
    let max = x.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    if max <= T::zero() {
        return QuantActivations {
            values: vec![0; x.len()],
            scale: T::lit(ZERO_SCALE_GUARD),
        };
    }
    let levels = T::lit(f64::from(ACTIVATION_LEVELS));
    let scale = levels / max;
    let values = x
        .iter()
        .map(|v| {
            let q = (*v * scale).round().max(-levels).min(levels);
            q.to_i8().expect("clamped to [-127, 127]")
        })
        .collect();
    QuantActivations { values, scale }
}

pub fn dequantize<T: Scalar>(t: &Ternary<T>) -> Params<T> {
    Params::new(
        t.values
            .iter()
            .map(|q| T::lit(f64::from(*q)) * t.scale)
            .collect(),
    )
}

impl<T: Scalar> QuantActivations<T> {
    pub fn dequantize(&self) -> Vec<T> {
        self.values
            .iter()
            .map(|q| T::lit(f64::from(*q)) / self.scale)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Scalar oracle: evaluates the formula element by element in plain f64.
    fn ternary_oracle(w: &[f64]) -> (Vec<i8>, f64) {
        let alpha = w.iter().map(|v| v.abs()).sum::<f64>() / w.len() as f64;
        let codes = w
            .iter()
            .map(|v| {
                let r = v / alpha;
                let rounded = if r >= 0.0 {
                    (r + 0.5).floor()
                } else {
                    (r - 0.5).ceil()
                };
                rounded.clamp(-1.0, 1.0) as i8
            })
            .collect();
        (codes, alpha)
    }

    #[test]
    fn worked_weight_example() {
        let w = Params::new(vec![0.4, -0.2, 0.1, -0.5]);
        let t = quantize_weights(&w);
        let (codes, alpha) = ternary_oracle(w.as_slice());
        assert_eq!(codes, vec![1, -1, 0, -1]);
        assert_eq!(t.values, codes);
        assert!((t.scale - 0.3).abs() < 1e-15);
        assert!((t.scale - alpha).abs() < 1e-15);
    }

    #[test]
    fn zero_weights_use_guard() {
        let t = quantize_weights(&Params::new(vec![0.0f64; 3]));
        assert_eq!(t.values, vec![0, 0, 0]);
        assert_eq!(t.scale, ZERO_SCALE_GUARD);
    }

    #[test]
    fn constant_weights_are_lossless() {
        for c in [0.1f64, 0.3, 1.0, 7.77, 1e-7] {
            let w = Params::new(vec![c, c, c]);
            let t = quantize_weights(&w);
            assert_eq!(t.values, vec![1, 1, 1]);
            assert_eq!(t.scale, c);
            assert_eq!(dequantize(&t), w);
        }
    }

    #[test]
    fn dequantize_definition() {
        let t = Ternary {
            values: vec![1, -1, 0],
            scale: 0.5f64,
        };
        assert_eq!(dequantize(&t).into_vec(), vec![0.5, -0.5, 0.0]);
    }

    #[test]
    fn activation_examples() {
        let q = quantize_activations(&[1.0f64, -0.5]);
        assert_eq!(q.values, vec![127, -64]);
        assert_eq!(q.scale, 127.0);

        let z = quantize_activations(&[0.0f64, 0.0]);
        assert_eq!(z.values, vec![0, 0]);
        assert_eq!(z.scale, ZERO_SCALE_GUARD);

        assert_eq!(quantize_activations(&[3.25f64]).values, vec![127]);
    }

    #[test]
    fn works_for_f32() {
        let t = quantize_weights(&Params::new(vec![0.4f32, -0.2, 0.1, -0.5]));
        assert_eq!(t.values, vec![1, -1, 0, -1]);
        let q = quantize_activations(&[1.0f32, -0.5]);
        assert_eq!(q.values, vec![127, -64]);
    }

    proptest! {
        // |w - deq(q(w))| <= scale/2 unless the element was clamped, in which case
        // the error is |w| - scale.
        #[test]
        fn round_trip_error_bound(w in prop::collection::vec(-10.0f64..10.0, 1..64)) {
            let p = Params::new(w.clone());
            let t = quantize_weights(&p);
            let back = dequantize(&t);
            for (orig, rec) in w.iter().zip(back.iter()) {
                let clamp_loss = (orig.abs() - t.scale).max(0.0);
                let bound = t.scale / 2.0 + clamp_loss + 1e-12;
                prop_assert!((orig - rec).abs() <= bound);
            }
        }

        #[test]
        fn activation_codes_in_range(x in prop::collection::vec(-1e3f64..1e3, 1..64)) {
            let q = quantize_activations(&x);
            prop_assert!(q.values.iter().all(|v| (-127..=127).contains(v)));
            if x.iter().any(|v| *v != 0.0) {
                prop_assert!(q.values.iter().any(|v| v.abs() == 127));
            }
        }
    }
}
