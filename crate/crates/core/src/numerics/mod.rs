//! Differentiable computation core.
//!
//! Everything in this crate trains through a small reverse-mode tape over
//! `f64` vectors (see [`tape`]). Parameters live in a [`ParamStore`] as
//! affine layers; the tape accumulates gradients into the store's per-layer
//! accumulators, which [`adamw::AdamW`] then consumes.

pub mod adamw;
pub mod gradcheck;
pub mod tape;

use crate::error::{Error, Result};

/// Probability clamp applied before any logarithm.
pub const PROB_EPS: f64 = 1e-7;

/// Row-major dense matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// y = W x (no bias).
    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            let mut acc = 0.0;
            for (w, xi) in row.iter().zip(x.iter()) {
                acc += w * xi;
            }
            *o = acc;
        }
    }

    /// y = Wᵀ x.
    pub fn matvec_t(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (r, &xr) in x.iter().enumerate() {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            for (o, w) in out.iter_mut().zip(row.iter()) {
                *o += w * xr;
            }
        }
    }
}

/// Parameter group tags; the optimizer assigns learning rates (or freezes)
/// per group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum ParamGroup {
    Encoder,
    Classifier,
    StateEncoder,
    PolicyHead,
    Gate,
}

/// An affine map y = Wx + b with gradient accumulators of matching shape.
#[derive(Debug, Clone)]
pub struct AffineLayer {
    pub name: String,
    pub group: ParamGroup,
    pub w: Matrix,
    pub b: Vec<f64>,
    pub gw: Matrix,
    pub gb: Vec<f64>,
}

impl AffineLayer {
    pub fn in_dim(&self) -> usize {
        self.w.cols
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows
    }

    pub fn zero_grad(&mut self) {
        self.gw.data.iter_mut().for_each(|g| *g = 0.0);
        self.gb.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Handle to a layer inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerId(pub usize);

/// Flat registry of all trainable layers of one model assembly.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    pub layers: Vec<AffineLayer>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Allocate a Glorot-initialized layer: weights uniform in
    /// ±sqrt(6/(fan_in+fan_out)), biases zero.
    pub fn add_layer(
        &mut self,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl rand::Rng,
    ) -> LayerId {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let mut w = Matrix::zeros(out_dim, in_dim);
        for v in w.data.iter_mut() {
            *v = rng.gen_range(-bound..bound);
        }
        self.layers.push(AffineLayer {
            name: name.to_string(),
            group,
            gw: Matrix::zeros(out_dim, in_dim),
            gb: vec![0.0; out_dim],
            w,
            b: vec![0.0; out_dim],
        });
        LayerId(self.layers.len() - 1)
    }

    pub fn layer(&self, id: LayerId) -> &AffineLayer {
        &self.layers[id.0]
    }

    pub fn layer_mut(&mut self, id: LayerId) -> &mut AffineLayer {
        &mut self.layers[id.0]
    }

    pub fn zero_grads(&mut self) {
        for l in self.layers.iter_mut() {
            l.zero_grad();
        }
    }

    /// Copy parameter values from the leading layers of another store.
    /// Shapes must match layer-for-layer; used to initialize a policy
    /// assembly from a pretrained bank.
    pub fn copy_prefix_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.layers.len() > self.layers.len() {
            return Err(Error::Checkpoint(format!(
                "source store has {} layers, destination only {}",
                other.layers.len(),
                self.layers.len()
            )));
        }
        for (dst, src) in self.layers.iter_mut().zip(other.layers.iter()) {
            if dst.w.rows != src.w.rows || dst.w.cols != src.w.cols {
                return Err(Error::Checkpoint(format!(
                    "layer {} shape mismatch: {}x{} vs {}x{}",
                    dst.name, dst.w.rows, dst.w.cols, src.w.rows, src.w.cols
                )));
            }
            dst.w.data.copy_from_slice(&src.w.data);
            dst.b.copy_from_slice(&src.b);
        }
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.data.len() + l.b.len())
            .sum()
    }
}

/// Plain affine forward: W x + b. Dimension mismatch is a hard error naming
/// the layer.
pub fn affine_forward(layer: &AffineLayer, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != layer.in_dim() {
        return Err(Error::DimensionMismatch {
            context: format!("affine layer '{}'", layer.name),
            expected: layer.in_dim(),
            actual: x.len(),
        });
    }
    let mut out = layer.b.clone();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &layer.w.data[r * layer.w.cols..(r + 1) * layer.w.cols];
        for (w, xi) in row.iter().zip(x.iter()) {
            *o += w * xi;
        }
    }
    for v in &out {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("affine layer '{}'", layer.name)));
        }
    }
    Ok(out)
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

/// Inverted dropout: in training mode each element is zeroed with probability
/// `rate` and survivors are scaled by 1/(1-rate); in eval mode it is the
/// identity.
pub fn dropout(
    x: &[f64],
    rate: f64,
    training: bool,
    rng: &mut impl rand::Rng,
) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0,1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x.to_vec());
    }
    let scale = 1.0 / (1.0 - rate);
    Ok(x.iter()
        .map(|&v| {
            if rng.gen::<f64>() < rate {
                0.0
            } else {
                v * scale
            }
        })
        .collect())
}

/// Temperature softmax with max-subtraction for stability.
pub fn softmax_tau(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("softmax temperature {tau} <= 0")));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax logits".into()));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| ((l - m) / tau).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Clamp a probability away from {0,1} before taking logs.
#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Binary cross-entropy −[y·log p̂ + (1−y)·log(1−p̂)] with clamping.
pub fn bce_loss(p_hat: f64, y: u8) -> f64 {
    let p = clamp_prob(p_hat);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn affine_identity() {
        let mut l = AffineLayer {
            name: "id".into(),
            group: ParamGroup::Classifier,
            w: Matrix::zeros(2, 2),
            b: vec![0.0, 0.0],
            gw: Matrix::zeros(2, 2),
            gb: vec![0.0; 2],
        };
        l.w.set(0, 0, 1.0);
        l.w.set(1, 1, 1.0);
        assert_eq!(affine_forward(&l, &[3.0, -1.0]).unwrap(), vec![3.0, -1.0]);
    }

    #[test]
    fn affine_hand_expansion() {
        let l = AffineLayer {
            name: "sum".into(),
            group: ParamGroup::Classifier,
            w: Matrix {
                rows: 1,
                cols: 2,
                data: vec![1.0, 1.0],
            },
            b: vec![1.0],
            gw: Matrix::zeros(1, 2),
            gb: vec![0.0],
        };
        assert_eq!(affine_forward(&l, &[2.0, 3.0]).unwrap(), vec![6.0]);
    }

    #[test]
    fn affine_dimension_mismatch_names_layer() {
        let l = AffineLayer {
            name: "enc_a.l1".into(),
            group: ParamGroup::Encoder,
            w: Matrix::zeros(4, 3),
            b: vec![0.0; 4],
            gw: Matrix::zeros(4, 3),
            gb: vec![0.0; 4],
        };
        let err = affine_forward(&l, &[1.0, 2.0]).unwrap_err();
        assert!(err.to_string().contains("enc_a.l1"));
    }

    #[test]
    fn affine_matches_triple_loop_oracle() {
        let mut rng = substream(11, "affine-oracle");
        let mut store = ParamStore::new();
        let id = store.add_layer("t", ParamGroup::Classifier, 3, 4, &mut rng);
        let x: Vec<f64> = (0..3).map(|_| rand::Rng::gen::<f64>(&mut rng) - 0.5).collect();
        let got = affine_forward(store.layer(id), &x).unwrap();
        let l = store.layer(id);
        for r in 0..4 {
            let mut want = l.b[r];
            for c in 0..3 {
                want += l.w.get(r, c) * x[c];
            }
            assert!((got[r] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn relu_zeroes_negatives() {
        assert_eq!(relu(&[-1.0, 0.0, 2.0]), vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut rng = substream(1, "drop");
        let x = vec![1.0, -2.0, 3.0];
        assert_eq!(dropout(&x, 0.3, false, &mut rng).unwrap(), x);
    }

    #[test]
    fn dropout_rejects_rate_one() {
        let mut rng = substream(1, "drop");
        assert!(dropout(&[1.0], 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        // Monte-Carlo mean over 1e5 masks within 2%.
        let mut rng = substream(3, "drop-mc");
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            sum += dropout(&[1.0], 0.3, true, &mut rng).unwrap()[0];
        }
        let mean = sum / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn softmax_symmetry_and_sum() {
        let p = softmax_tau(&[0.0, 0.0, 0.0], 1.0).unwrap();
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax_tau(&[1.0, -2.0, 0.5], 0.7).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_low_temperature_concentrates() {
        let p = softmax_tau(&[10.0, 0.0], 0.01).unwrap();
        assert!(p[0] > 0.999);
    }

    #[test]
    fn softmax_temperature_scaling_identity() {
        let a = softmax_tau(&[1.0, 2.0, 3.0], 2.0).unwrap();
        let b = softmax_tau(&[0.5, 1.0, 1.5], 1.0).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let a = softmax_tau(&[1.0, 2.0, 3.0], 1.3).unwrap();
        let b = softmax_tau(&[101.0, 102.0, 103.0], 1.3).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_bad_tau() {
        assert!(softmax_tau(&[0.0], 0.0).is_err());
        assert!(softmax_tau(&[0.0], -1.0).is_err());
    }

    #[test]
    fn bce_known_values() {
        assert!(bce_loss(1.0 - PROB_EPS, 1) < 1e-6);
        assert!((bce_loss(0.5, 1) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_loss(0.9, 0) - (-(0.1f64).ln())).abs() < 1e-12);
    }
}
