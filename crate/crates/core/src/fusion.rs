//! Fusion operators combining encoded modality features.
//!
//! Fused dimensions follow the fixed table: concat yields 32n, mean yields
//! 32, tensor yields (16+1)^n where each encoded feature is first reduced to
//! 16 dims and a constant 1 is appended before the Kronecker product.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::{ModalitySet, ENCODED_DIM};

/// Dimension of the per-modality reduction feeding tensor fusion.
pub const TENSOR_REDUCED_DIM: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FusionType {
    Concat,
    Mean,
    Tensor,
}

pub const ALL_FUSIONS: [FusionType; 3] = [FusionType::Concat, FusionType::Mean, FusionType::Tensor];

impl FusionType {
    pub fn label(self) -> &'static str {
        match self {
            FusionType::Concat => "concat",
            FusionType::Mean => "mean",
            FusionType::Tensor => "tensor",
        }
    }
}

/// Classifier input dimension for a given subset size and fusion type
/// (fusion is skipped for single-modality combos).
pub fn fused_dim(n: usize, fusion: Option<FusionType>) -> usize {
    match (n, fusion) {
        (1, None) => ENCODED_DIM,
        (n, Some(FusionType::Concat)) => ENCODED_DIM * n,
        (_, Some(FusionType::Mean)) => ENCODED_DIM,
        (n, Some(FusionType::Tensor)) => (TENSOR_REDUCED_DIM + 1).pow(n as u32),
        _ => unreachable!("invalid (n, fusion) pair"),
    }
}

/// A fused feature vector together with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedVector {
    pub values: Vec<f64>,
    pub subset: ModalitySet,
    pub fusion: FusionType,
}

fn check_arity(features: &[Vec<f64>]) -> Result<()> {
    if features.len() < 2 || features.len() > 3 {
        return Err(Error::Config(format!(
            "fusion requires 2 or 3 modalities, got {}",
            features.len()
        )));
    }
    Ok(())
}

/// Concatenate features in the fixed A < B < C modality order.
pub fn fuse_concat(features: &[Vec<f64>], subset: ModalitySet) -> Result<FusedVector> {
    check_arity(features)?;
    let values = features.iter().flatten().copied().collect();
    Ok(FusedVector {
        values,
        subset,
        fusion: FusionType::Concat,
    })
}

/// Elementwise arithmetic mean.
pub fn fuse_mean(features: &[Vec<f64>], subset: ModalitySet) -> Result<FusedVector> {
    check_arity(features)?;
    let len = features[0].len();
    for f in features {
        if f.len() != len {
            return Err(Error::DimensionMismatch {
                context: "fuse_mean".into(),
                expected: len,
                actual: f.len(),
            });
        }
    }
    let mut values = vec![0.0; len];
    for f in features {
        for (v, x) in values.iter_mut().zip(f.iter()) {
            *v += x;
        }
    }
    let n = features.len() as f64;
    values.iter_mut().for_each(|v| *v /= n);
    Ok(FusedVector {
        values,
        subset,
        fusion: FusionType::Mean,
    })
}

/// Tensor fusion of already-reduced features: a constant 1 is appended to
/// each factor (as its last coordinate) and the factors are combined by a
/// row-major flattened Kronecker product with the first modality outermost.
pub fn fuse_tensor_reduced(reduced: &[Vec<f64>], subset: ModalitySet) -> Result<FusedVector> {
    check_arity(reduced)?;
    let mut acc = vec![1.0];
    for f in reduced {
        let mut factor = f.clone();
        factor.push(1.0);
        let mut next = Vec::with_capacity(acc.len() * factor.len());
        for &a in &acc {
            for &b in &factor {
                next.push(a * b);
            }
        }
        acc = next;
    }
    Ok(FusedVector {
        values: acc,
        subset,
        fusion: FusionType::Tensor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modality::Modality;
    use crate::rng::substream;
    use rand::Rng;

    fn ab() -> ModalitySet {
        ModalitySet::single(Modality::A).with(Modality::B)
    }

    fn abc() -> ModalitySet {
        ab().with(Modality::C)
    }

    #[test]
    fn concat_blocks_in_order() {
        let mut x = vec![0.0; 32];
        x[0] = 1.0;
        let mut y = vec![0.0; 32];
        y[1] = 1.0;
        let f = fuse_concat(&[x.clone(), y.clone()], ab()).unwrap();
        assert_eq!(f.values.len(), 64);
        assert_eq!(&f.values[..32], &x[..]);
        assert_eq!(&f.values[32..], &y[..]);
    }

    #[test]
    fn concat_triple_length() {
        let v = vec![0.5; 32];
        let f = fuse_concat(&[v.clone(), v.clone(), v], abc()).unwrap();
        assert_eq!(f.values.len(), 96);
    }

    #[test]
    fn single_modality_is_never_fused() {
        assert!(fuse_concat(&[vec![1.0; 32]], ModalitySet::single(Modality::A)).is_err());
        assert!(fuse_mean(&[vec![1.0; 32]], ModalitySet::single(Modality::A)).is_err());
        assert!(fuse_tensor_reduced(&[vec![1.0; 16]], ModalitySet::single(Modality::A)).is_err());
    }

    #[test]
    fn mean_idempotent_and_elementwise() {
        let x = vec![2.0; 32];
        let y = vec![4.0; 32];
        assert_eq!(fuse_mean(&[x.clone(), x.clone()], ab()).unwrap().values, x);
        assert!(fuse_mean(&[x, y], ab())
            .unwrap()
            .values
            .iter()
            .all(|&v| v == 3.0));
    }

    #[test]
    fn mean_of_three_matches_elementwise_oracle() {
        let mut rng = substream(5, "fusion");
        let vs: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..32).map(|_| rng.gen::<f64>()).collect())
            .collect();
        let f = fuse_mean(&vs, abc()).unwrap();
        for i in 0..32 {
            let want = (vs[0][i] + vs[1][i] + vs[2][i]) / 3.0;
            assert!((f.values[i] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn tensor_toy_expansion() {
        // a=[1,2] → [1,2,1]; b=[3] → [3,1]; kron = [3,1,6,2,3,1].
        let f = fuse_tensor_reduced(&[vec![1.0, 2.0], vec![3.0]], ab()).unwrap();
        assert_eq!(f.values, vec![3.0, 1.0, 6.0, 2.0, 3.0, 1.0]);
    }

    #[test]
    fn tensor_published_dimensions() {
        let r16 = vec![0.1; 16];
        assert_eq!(
            fuse_tensor_reduced(&[r16.clone(), r16.clone()], ab())
                .unwrap()
                .values
                .len(),
            289
        );
        assert_eq!(
            fuse_tensor_reduced(&[r16.clone(), r16.clone(), r16], abc())
                .unwrap()
                .values
                .len(),
            4913
        );
        assert_eq!(fused_dim(2, Some(FusionType::Tensor)), 289);
        assert_eq!(fused_dim(3, Some(FusionType::Tensor)), 4913);
    }

    #[test]
    fn tensor_matches_triple_loop_oracle() {
        let mut rng = substream(6, "fusion-kron");
        let a: Vec<f64> = (0..16).map(|_| rng.gen::<f64>() - 0.5).collect();
        let b: Vec<f64> = (0..16).map(|_| rng.gen::<f64>() - 0.5).collect();
        let c: Vec<f64> = (0..16).map(|_| rng.gen::<f64>() - 0.5).collect();
        let f = fuse_tensor_reduced(&[a.clone(), b.clone(), c.clone()], abc()).unwrap();
        let mut a1 = a;
        a1.push(1.0);
        let mut b1 = b;
        b1.push(1.0);
        let mut c1 = c;
        c1.push(1.0);
        for (i, &ai) in a1.iter().enumerate() {
            for (j, &bj) in b1.iter().enumerate() {
                for (k, &ck) in c1.iter().enumerate() {
                    let want = ai * bj * ck;
                    let got = f.values[(i * 17 + j) * 17 + k];
                    assert!((got - want).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn tensor_bias_block_embeds_reduced_inputs() {
        // With all other factors at their bias slot, each reduced input is
        // reproduced by coordinate extraction.
        let a: Vec<f64> = (0..16).map(|i| i as f64 * 0.1).collect();
        let b: Vec<f64> = (0..16).map(|i| 1.0 - i as f64 * 0.05).collect();
        let f = fuse_tensor_reduced(&[a.clone(), b.clone()], ab()).unwrap();
        // a_i appears at (i, bias) = i*17 + 16; b_j at (bias, j) = 16*17 + j.
        for (i, &ai) in a.iter().enumerate() {
            assert!((f.values[i * 17 + 16] - ai).abs() < 1e-15);
        }
        for (j, &bj) in b.iter().enumerate() {
            assert!((f.values[16 * 17 + j] - bj).abs() < 1e-15);
        }
    }

    #[test]
    fn fused_dims_table() {
        assert_eq!(fused_dim(1, None), 32);
        assert_eq!(fused_dim(2, Some(FusionType::Concat)), 64);
        assert_eq!(fused_dim(3, Some(FusionType::Concat)), 96);
        assert_eq!(fused_dim(2, Some(FusionType::Mean)), 32);
        assert_eq!(fused_dim(3, Some(FusionType::Mean)), 32);
    }
}
