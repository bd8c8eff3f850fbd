//! Reverse-mode tape over `f64` vectors.
//!
//! A [`Tape`] records one forward pass as a sequence of ops; values are
//! computed eagerly at push time. `backward` walks the tape in reverse and
//! accumulates parameter gradients into the owning [`ParamStore`]. The op set
//! is exactly what the networks here need (affine, ReLU, dropout, the three
//! fusion operators, masked temperature softmax, Gumbel-Softmax with
//! straight-through gradients, and the BCE/score scalars) rather than a
//! general autodiff graph.

use rand::Rng;

use super::{clamp_prob, LayerId, ParamStore, PROB_EPS};
use crate::error::{Error, Result};

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

enum Op {
    Leaf,
    Affine {
        layer: LayerId,
        x: NodeId,
    },
    Relu {
        x: NodeId,
    },
    /// keep[i] is 0 for dropped coordinates, 1/(1-rate) for survivors.
    Dropout {
        x: NodeId,
        keep: Vec<f64>,
    },
    Concat {
        xs: Vec<NodeId>,
    },
    Mean {
        xs: Vec<NodeId>,
    },
    AppendOne {
        x: NodeId,
    },
    /// Flattened outer product, left factor outermost (row-major).
    Kron {
        a: NodeId,
        b: NodeId,
    },
    /// Masked log-softmax with temperature; masked entries are -inf in the
    /// value and receive no gradient. `probs` caches the masked softmax.
    LogSoftmaxTauMasked {
        x: NodeId,
        tau: f64,
        mask: Vec<bool>,
        probs: Vec<f64>,
    },
    /// Scalar entropy −Σ p log p of the masked temperature softmax.
    EntropyMasked {
        x: NodeId,
        tau: f64,
        probs: Vec<f64>,
    },
    SoftmaxTau {
        x: NodeId,
        tau: f64,
    },
    /// Scalar dot product with a constant vector.
    DotConst {
        x: NodeId,
        c: Vec<f64>,
    },
    /// Gumbel-Softmax straight-through: value is the hard one-hot, gradient
    /// flows as if the node were the soft sample.
    GumbelSt {
        x: NodeId,
        tau: f64,
        soft: Vec<f64>,
    },
    /// Positive-class probability from 2 logits: sigmoid(l1 - l0), clamped.
    ProbPositive {
        x: NodeId,
        p_raw: f64,
    },
    /// Scalar BCE from a probability node.
    BceFromProb {
        p: NodeId,
        y: f64,
    },
    Index {
        x: NodeId,
        i: usize,
    },
    /// Scalar Σ coeff·term over scalar nodes.
    AddWeighted {
        terms: Vec<(NodeId, f64)>,
    },
}

pub struct Tape {
    ops: Vec<Op>,
    vals: Vec<Vec<f64>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            ops: Vec::with_capacity(64),
            vals: Vec::with_capacity(64),
        }
    }

    fn push(&mut self, op: Op, val: Vec<f64>) -> NodeId {
        self.ops.push(op);
        self.vals.push(val);
        NodeId(self.vals.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.vals[id.0]
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.vals[id.0].len(), 1);
        self.vals[id.0][0]
    }

    pub fn leaf(&mut self, vals: Vec<f64>) -> NodeId {
        self.push(Op::Leaf, vals)
    }

    pub fn zeros(&mut self, len: usize) -> NodeId {
        self.push(Op::Leaf, vec![0.0; len])
    }

    pub fn affine(&mut self, store: &ParamStore, layer: LayerId, x: NodeId) -> Result<NodeId> {
        let l = store.layer(layer);
        let out = super::affine_forward(l, &self.vals[x.0])?;
        Ok(self.push(Op::Affine { layer, x }, out))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = super::relu(&self.vals[x.0]);
        self.push(Op::Relu { x }, out)
    }

    pub fn dropout(
        &mut self,
        x: NodeId,
        rate: f64,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0,1)")));
        }
        if !training || rate == 0.0 {
            let keep = vec![1.0; self.vals[x.0].len()];
            let out = self.vals[x.0].clone();
            return Ok(self.push(Op::Dropout { x, keep }, out));
        }
        let scale = 1.0 / (1.0 - rate);
        let keep: Vec<f64> = self.vals[x.0]
            .iter()
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale })
            .collect();
        let out: Vec<f64> = self.vals[x.0]
            .iter()
            .zip(keep.iter())
            .map(|(v, k)| v * k)
            .collect();
        Ok(self.push(Op::Dropout { x, keep }, out))
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> NodeId {
        let mut out = Vec::new();
        for x in xs {
            out.extend_from_slice(&self.vals[x.0]);
        }
        self.push(Op::Concat { xs: xs.to_vec() }, out)
    }

    pub fn mean(&mut self, xs: &[NodeId]) -> NodeId {
        let n = xs.len();
        let len = self.vals[xs[0].0].len();
        let mut out = vec![0.0; len];
        for x in xs {
            for (o, v) in out.iter_mut().zip(self.vals[x.0].iter()) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        self.push(Op::Mean { xs: xs.to_vec() }, out)
    }

    pub fn append_one(&mut self, x: NodeId) -> NodeId {
        let mut out = self.vals[x.0].clone();
        out.push(1.0);
        self.push(Op::AppendOne { x }, out)
    }

    pub fn kron(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.vals[a.0], &self.vals[b.0]);
        let mut out = Vec::with_capacity(va.len() * vb.len());
        for &ai in va {
            for &bi in vb {
                out.push(ai * bi);
            }
        }
        self.push(Op::Kron { a, b }, out)
    }

    pub fn log_softmax_tau_masked(
        &mut self,
        x: NodeId,
        tau: f64,
        mask: &[bool],
    ) -> Result<NodeId> {
        if tau <= 0.0 {
            return Err(Error::Config(format!("softmax temperature {tau} <= 0")));
        }
        let logits = &self.vals[x.0];
        debug_assert_eq!(logits.len(), mask.len());
        let m = logits
            .iter()
            .zip(mask.iter())
            .filter(|(_, &ok)| ok)
            .map(|(&l, _)| l)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (i, &l) in logits.iter().enumerate() {
            if mask[i] {
                sum += ((l - m) / tau).exp();
            }
        }
        let lse = m / tau + sum.ln();
        let mut out = vec![f64::NEG_INFINITY; logits.len()];
        let mut probs = vec![0.0; logits.len()];
        for (i, &l) in logits.iter().enumerate() {
            if mask[i] {
                out[i] = l / tau - lse;
                probs[i] = out[i].exp();
            }
        }
        Ok(self.push(
            Op::LogSoftmaxTauMasked {
                x,
                tau,
                mask: mask.to_vec(),
                probs,
            },
            out,
        ))
    }

    pub fn entropy_masked(&mut self, x: NodeId, tau: f64, mask: &[bool]) -> Result<NodeId> {
        let lp = self.log_softmax_tau_masked(x, tau, mask)?;
        let (probs, h) = {
            let lps = &self.vals[lp.0];
            let probs: Vec<f64> = lps
                .iter()
                .map(|&l| if l.is_finite() { l.exp() } else { 0.0 })
                .collect();
            let h = -probs
                .iter()
                .zip(lps.iter())
                .filter(|(&p, _)| p > 0.0)
                .map(|(&p, &l)| p * l)
                .sum::<f64>();
            (probs, h)
        };
        Ok(self.push(Op::EntropyMasked { x, tau, probs }, vec![h]))
    }

    pub fn softmax_tau(&mut self, x: NodeId, tau: f64) -> Result<NodeId> {
        let out = super::softmax_tau(&self.vals[x.0], tau)?;
        Ok(self.push(Op::SoftmaxTau { x, tau }, out))
    }

    pub fn dot_const(&mut self, x: NodeId, c: Vec<f64>) -> NodeId {
        debug_assert_eq!(self.vals[x.0].len(), c.len());
        let v: f64 = self.vals[x.0].iter().zip(c.iter()).map(|(a, b)| a * b).sum();
        self.push(Op::DotConst { x, c }, vec![v])
    }

    /// Gumbel-Softmax sample with straight-through estimator. The node's
    /// value is the hard one-hot of the perturbed argmax; the backward pass
    /// uses the soft sample's Jacobian.
    pub fn gumbel_softmax_st(
        &mut self,
        x: NodeId,
        tau: f64,
        rng: &mut impl Rng,
    ) -> Result<NodeId> {
        if tau <= 0.0 {
            return Err(Error::Config(format!("gumbel temperature {tau} <= 0")));
        }
        // Logits are sharpened by 1/τ before the Gumbel perturbation, so the
        // hard sample concentrates on the argmax logit as τ → 0.
        let logits = &self.vals[x.0];
        let perturbed: Vec<f64> = logits
            .iter()
            .map(|&l| {
                let u: f64 = rng.gen_range(f64::EPSILON..1.0);
                l / tau + (-(-u.ln()).ln())
            })
            .collect();
        let soft = super::softmax_tau(&perturbed, 1.0)?;
        let argmax = soft
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        let mut hard = vec![0.0; soft.len()];
        hard[argmax] = 1.0;
        Ok(self.push(Op::GumbelSt { x, tau, soft }, hard))
    }

    /// Positive-class probability from a 2-logit node, clamped to
    /// [PROB_EPS, 1-PROB_EPS].
    pub fn prob_positive(&mut self, x: NodeId) -> NodeId {
        let logits = &self.vals[x.0];
        debug_assert_eq!(logits.len(), 2);
        let p_raw = 1.0 / (1.0 + (logits[0] - logits[1]).exp());
        self.push(Op::ProbPositive { x, p_raw }, vec![clamp_prob(p_raw)])
    }

    pub fn bce_from_prob(&mut self, p: NodeId, y: u8) -> NodeId {
        let loss = super::bce_loss(self.vals[p.0][0], y);
        self.push(Op::BceFromProb { p, y: y as f64 }, vec![loss])
    }

    pub fn index(&mut self, x: NodeId, i: usize) -> NodeId {
        let v = self.vals[x.0][i];
        self.push(Op::Index { x, i }, vec![v])
    }

    pub fn add_weighted(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        let v: f64 = terms
            .iter()
            .map(|(n, c)| self.vals[n.0][0] * c)
            .sum();
        self.push(
            Op::AddWeighted {
                terms: terms.to_vec(),
            },
            vec![v],
        )
    }

    /// Backpropagate from a scalar root, accumulating parameter gradients
    /// into the store. `seed` is the upstream gradient of the root (use
    /// 1/batch_size to average per-record losses).
    pub fn backward(&self, root: NodeId, store: &mut ParamStore, seed: f64) -> Result<()> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.vals.len()];
        grads[root.0] = Some(vec![seed; self.vals[root.0].len()]);

        for idx in (0..=root.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.ops[idx] {
                Op::Leaf => {}
                Op::Affine { layer, x } => {
                    let xv = &self.vals[x.0];
                    let l = store.layer_mut(*layer);
                    for v in &g {
                        if !v.is_finite() {
                            return Err(Error::NonFinite(format!(
                                "gradient of affine layer '{}'",
                                l.name
                            )));
                        }
                    }
                    // gw += g ⊗ x; gb += g
                    for (r, &gr) in g.iter().enumerate() {
                        let row = &mut l.gw.data[r * l.gw.cols..(r + 1) * l.gw.cols];
                        for (gw, &xi) in row.iter_mut().zip(xv.iter()) {
                            *gw += gr * xi;
                        }
                        l.gb[r] += gr;
                    }
                    // gx = Wᵀ g
                    let mut gx = vec![0.0; xv.len()];
                    l.w.matvec_t(&g, &mut gx);
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Relu { x } => {
                    let gx: Vec<f64> = self.vals[idx]
                        .iter()
                        .zip(g.iter())
                        .map(|(&v, &gi)| if v > 0.0 { gi } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Dropout { x, keep } => {
                    let gx: Vec<f64> = g.iter().zip(keep.iter()).map(|(gi, k)| gi * k).collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Concat { xs } => {
                    let mut off = 0;
                    for x in xs {
                        let len = self.vals[x.0].len();
                        accumulate(&mut grads, *x, &g[off..off + len]);
                        off += len;
                    }
                }
                Op::Mean { xs } => {
                    let inv = 1.0 / xs.len() as f64;
                    let gx: Vec<f64> = g.iter().map(|gi| gi * inv).collect();
                    for x in xs {
                        accumulate(&mut grads, *x, &gx);
                    }
                }
                Op::AppendOne { x } => {
                    accumulate(&mut grads, *x, &g[..g.len() - 1]);
                }
                Op::Kron { a, b } => {
                    let (va, vb) = (&self.vals[a.0], &self.vals[b.0]);
                    let mut ga = vec![0.0; va.len()];
                    let mut gb = vec![0.0; vb.len()];
                    for (i, &ai) in va.iter().enumerate() {
                        let row = &g[i * vb.len()..(i + 1) * vb.len()];
                        let mut acc = 0.0;
                        for (j, (&gj, &bj)) in row.iter().zip(vb.iter()).enumerate() {
                            acc += gj * bj;
                            gb[j] += gj * ai;
                        }
                        ga[i] = acc;
                    }
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::LogSoftmaxTauMasked {
                    x, tau, mask, probs, ..
                } => {
                    // d logp_j / d l_k = (δ_jk − p_k)/τ over valid entries.
                    let gsum: f64 = g
                        .iter()
                        .zip(mask.iter())
                        .filter(|(_, &ok)| ok)
                        .map(|(&gi, _)| gi)
                        .sum();
                    let gx: Vec<f64> = probs
                        .iter()
                        .zip(g.iter().zip(mask.iter()))
                        .map(|(&p, (&gi, &ok))| {
                            if ok {
                                (gi - p * gsum) / tau
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::EntropyMasked { x, tau, probs } => {
                    // dH/dl_k = −p_k (log p_k + H)/τ.
                    let h = self.vals[idx][0];
                    let gx: Vec<f64> = probs
                        .iter()
                        .map(|&p| {
                            if p > 0.0 {
                                -g[0] * p * (p.ln() + h) / tau
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::SoftmaxTau { x, tau } => {
                    let p = &self.vals[idx];
                    let dot: f64 = g.iter().zip(p.iter()).map(|(gi, pi)| gi * pi).sum();
                    let gx: Vec<f64> = p
                        .iter()
                        .zip(g.iter())
                        .map(|(&pi, &gi)| pi * (gi - dot) / tau)
                        .collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::DotConst { x, c } => {
                    let gx: Vec<f64> = c.iter().map(|&ci| ci * g[0]).collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::GumbelSt { x, tau, soft } => {
                    // Straight-through: route the gradient through the soft
                    // sample y = softmax((l+g)/τ).
                    let dot: f64 = g.iter().zip(soft.iter()).map(|(gi, yi)| gi * yi).sum();
                    let gx: Vec<f64> = soft
                        .iter()
                        .zip(g.iter())
                        .map(|(&yi, &gi)| yi * (gi - dot) / tau)
                        .collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::ProbPositive { x, p_raw } => {
                    let dp = p_raw * (1.0 - p_raw) * g[0];
                    accumulate(&mut grads, *x, &[-dp, dp]);
                }
                Op::BceFromProb { p, y } => {
                    let pv = self.vals[p.0][0].clamp(PROB_EPS, 1.0 - PROB_EPS);
                    let dl = (-y / pv + (1.0 - y) / (1.0 - pv)) * g[0];
                    accumulate(&mut grads, *p, &[dl]);
                }
                Op::Index { x, i } => {
                    let mut gx = vec![0.0; self.vals[x.0].len()];
                    gx[*i] = g[0];
                    accumulate(&mut grads, *x, &gx);
                }
                Op::AddWeighted { terms } => {
                    for (n, c) in terms {
                        accumulate(&mut grads, *n, &[g[0] * c]);
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, g: &[f64]) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, gi) in existing.iter_mut().zip(g.iter()) {
                *e += gi;
            }
        }
        slot => *slot = Some(g.to_vec()),
    }
}
