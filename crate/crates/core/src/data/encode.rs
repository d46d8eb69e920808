//! One-hot nucleotide encoding.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::DataError;

/// Encode a sequence over {A, C, G, T, N} (case-insensitive) into a
/// [4, len] one-hot tensor. `N` produces an all-zero column.
pub fn one_hot<T: Scalar>(seq: &str) -> Result<Tensor<T>, DataError> {
    let len = seq.len();
    let mut data = vec![T::ZERO; 4 * len];
    for (pos, ch) in seq.chars().enumerate() {
        let row = match ch.to_ascii_uppercase() {
            'A' => Some(0),
            'C' => Some(1),
            'G' => Some(2),
            'T' => Some(3),
            'N' => None,
            other => {
                return Err(DataError::Format(format!(
                    "illegal character {other:?} at position {pos}"
                )))
            }
        };
        if let Some(r) = row {
            data[r * len + pos] = T::ONE;
        }
    }
    Ok(Tensor::new(vec![4, len], data).expect("consistent shape"))
}
