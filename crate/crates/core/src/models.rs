//! Modality encoders, the bank of 15 fusion classifiers, the MoE and DynMM
//! adaptive baselines, and per-path FLOPs accounting.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{fused_dim, FusionType, ALL_FUSIONS, TENSOR_REDUCED_DIM};
use crate::modality::{Modality, ModalitySet, ALL_MODALITIES, ENCODED_DIM};
use crate::numerics::tape::{NodeId, Tape};
use crate::numerics::{LayerId, ParamGroup, ParamStore};

/// Hidden width of each modality encoder (raw → 64 → 32, ReLU after each).
pub const ENCODER_HIDDEN: usize = 64;
/// Classifier hidden width (fused_dim → 32 → 2).
pub const CLASSIFIER_HIDDEN: usize = 32;
/// Dropout rate inside every fusion classifier.
pub const CLASSIFIER_DROPOUT: f64 = 0.3;
/// State-encoder input: 3·d masked features + the 3-bit mask.
pub const STATE_IN: usize = 3 * ENCODED_DIM + 3;
pub const STATE_HIDDEN: usize = 64;
pub const STATE_DIM: usize = 64;
/// MoE / DynMM gates consume the concatenated encoded features.
pub const GATE_IN: usize = 3 * ENCODED_DIM;

/// Number of valid (subset, fusion) combinations.
pub const COMBO_COUNT: usize = 15;

/// A valid modality-fusion combination: fusion is None iff the subset is a
/// single modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ComboId {
    pub subset: ModalitySet,
    pub fusion: Option<FusionType>,
}

impl ComboId {
    pub fn new(subset: ModalitySet, fusion: Option<FusionType>) -> Result<Self> {
        match (subset.len(), fusion) {
            (1, None) | (2, Some(_)) | (3, Some(_)) => Ok(ComboId { subset, fusion }),
            _ => Err(Error::Config(format!(
                "invalid combo: subset {} with fusion {:?}",
                subset.label(),
                fusion
            ))),
        }
    }

    pub fn label(&self) -> String {
        match self.fusion {
            None => self.subset.label(),
            Some(f) => format!("{}-{}", self.subset.label(), f.label()),
        }
    }

    pub fn fused_dim(&self) -> usize {
        fused_dim(self.subset.len(), self.fusion)
    }
}

/// The 15 combos in canonical order: 3 singles, then the 3 pairs × 3 fusion
/// types, then the triple × 3 fusion types.
pub fn all_combos() -> Vec<ComboId> {
    let mut combos = Vec::with_capacity(COMBO_COUNT);
    for m in ALL_MODALITIES {
        combos.push(ComboId::new(ModalitySet::single(m), None).unwrap());
    }
    let pairs = [
        ModalitySet::single(Modality::A).with(Modality::B),
        ModalitySet::single(Modality::A).with(Modality::C),
        ModalitySet::single(Modality::B).with(Modality::C),
    ];
    for subset in pairs {
        for f in ALL_FUSIONS {
            combos.push(ComboId::new(subset, Some(f)).unwrap());
        }
    }
    let triple = ModalitySet(0b111);
    for f in ALL_FUSIONS {
        combos.push(ComboId::new(triple, Some(f)).unwrap());
    }
    combos
}

/// Index of a combo in the canonical order.
pub fn combo_index(combo: ComboId) -> usize {
    all_combos()
        .iter()
        .position(|c| *c == combo)
        .expect("combo is valid by construction")
}

/// Supplies raw per-modality features. Lazy-encoding tests count accesses
/// through this trait.
pub trait FeatureProvider {
    fn raw(&self, m: Modality) -> &[f64];
}

/// Two affine layers raw → 64 → 32 with ReLU after each.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub modality: Modality,
    pub l1: LayerId,
    pub l2: LayerId,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, m: Modality, rng: &mut impl Rng) -> Self {
        let tag = m.letter().to_ascii_lowercase();
        Encoder {
            modality: m,
            l1: store.add_layer(
                &format!("enc_{tag}.l1"),
                ParamGroup::Encoder,
                m.raw_dim(),
                ENCODER_HIDDEN,
                rng,
            ),
            l2: store.add_layer(
                &format!("enc_{tag}.l2"),
                ParamGroup::Encoder,
                ENCODER_HIDDEN,
                ENCODED_DIM,
                rng,
            ),
        }
    }

    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, raw: &[f64]) -> Result<NodeId> {
        if raw.len() != self.modality.raw_dim() {
            return Err(Error::DimensionMismatch {
                context: format!("encoder {}", self.modality.letter()),
                expected: self.modality.raw_dim(),
                actual: raw.len(),
            });
        }
        let x = tape.leaf(raw.to_vec());
        let h = tape.affine(store, self.l1, x)?;
        let h = tape.relu(h);
        let h = tape.affine(store, self.l2, h)?;
        Ok(tape.relu(h))
    }
}

/// Fusion classifier: affine(fused → 32) → ReLU → Dropout(0.3) → affine(32 → 2).
/// Tensor combos additionally own a 32 → 16 projection per member modality.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub combo: ComboId,
    pub projections: Vec<LayerId>,
    pub l1: LayerId,
    pub l2: LayerId,
}

impl Classifier {
    pub fn new(store: &mut ParamStore, combo: ComboId, rng: &mut impl Rng) -> Self {
        let tag = combo.label();
        let projections = if combo.fusion == Some(FusionType::Tensor) {
            combo
                .subset
                .members()
                .iter()
                .map(|m| {
                    store.add_layer(
                        &format!("clf_{tag}.proj_{}", m.letter().to_ascii_lowercase()),
                        ParamGroup::Classifier,
                        ENCODED_DIM,
                        TENSOR_REDUCED_DIM,
                        rng,
                    )
                })
                .collect()
        } else {
            Vec::new()
        };
        Classifier {
            combo,
            projections,
            l1: store.add_layer(
                &format!("clf_{tag}.l1"),
                ParamGroup::Classifier,
                combo.fused_dim(),
                CLASSIFIER_HIDDEN,
                rng,
            ),
            l2: store.add_layer(
                &format!("clf_{tag}.l2"),
                ParamGroup::Classifier,
                CLASSIFIER_HIDDEN,
                2,
                rng,
            ),
        }
    }

    /// Fuse encoded features (nodes in subset order) and classify. Returns
    /// the 2-logit node.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: &[NodeId],
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<NodeId> {
        if h.len() != self.combo.subset.len() {
            return Err(Error::Config(format!(
                "combo {} expects {} encoded inputs, got {}",
                self.combo.label(),
                self.combo.subset.len(),
                h.len()
            )));
        }
        let fused = match self.combo.fusion {
            None => h[0],
            Some(FusionType::Concat) => tape.concat(h),
            Some(FusionType::Mean) => tape.mean(h),
            Some(FusionType::Tensor) => {
                let mut acc: Option<NodeId> = None;
                for (hi, proj) in h.iter().zip(self.projections.iter()) {
                    let r = tape.affine(store, *proj, *hi)?;
                    let r = tape.append_one(r);
                    acc = Some(match acc {
                        None => r,
                        Some(a) => tape.kron(a, r),
                    });
                }
                acc.unwrap()
            }
        };
        let z = tape.affine(store, self.l1, fused)?;
        let z = tape.relu(z);
        let z = tape.dropout(z, CLASSIFIER_DROPOUT, training, rng)?;
        tape.affine(store, self.l2, z)
    }
}

/// The three encoders plus the 15-classifier bank. Layer allocation order is
/// fixed (encoders first, then classifiers in canonical combo order) so
/// checkpoints can be copied layer-for-layer into larger assemblies.
#[derive(Debug, Clone)]
pub struct Bank {
    pub encoders: [Encoder; 3],
    pub classifiers: Vec<Classifier>,
}

impl Bank {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let encoders = [
            Encoder::new(store, Modality::A, rng),
            Encoder::new(store, Modality::B, rng),
            Encoder::new(store, Modality::C, rng),
        ];
        let classifiers = all_combos()
            .into_iter()
            .map(|c| Classifier::new(store, c, rng))
            .collect();
        Bank {
            encoders,
            classifiers,
        }
    }

    pub fn encoder(&self, m: Modality) -> &Encoder {
        &self.encoders[m.index()]
    }

    pub fn classifier(&self, combo: ComboId) -> &Classifier {
        &self.classifiers[combo_index(combo)]
    }

    /// Encode the combo's modalities and classify; returns the positive-class
    /// probability node. The inputs must match the combo subset exactly.
    pub fn classify(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        combo: ComboId,
        features: &dyn FeatureProvider,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<NodeId> {
        let h: Vec<NodeId> = combo
            .subset
            .members()
            .iter()
            .map(|m| self.encoder(*m).encode(tape, store, features.raw(*m)))
            .collect::<Result<_>>()?;
        let logits = self
            .classifier(combo)
            .forward(tape, store, &h, training, rng)?;
        Ok(tape.prob_positive(logits))
    }

    /// Eval-mode probability as a plain number.
    pub fn predict(
        &self,
        store: &ParamStore,
        combo: ComboId,
        features: &dyn FeatureProvider,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let mut rng = crate::rng::substream(0, "eval-noop");
        let p = self.classify(&mut tape, store, combo, features, false, &mut rng)?;
        Ok(tape.scalar(p))
    }
}

/// MoE gating network: 96 → 64 → 64 → 15 with ReLU between, softmax output.
#[derive(Debug, Clone)]
pub struct MoeGate {
    pub l1: LayerId,
    pub l2: LayerId,
    pub l3: LayerId,
}

impl MoeGate {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        MoeGate {
            l1: store.add_layer("moe_gate.l1", ParamGroup::Gate, GATE_IN, 64, rng),
            l2: store.add_layer("moe_gate.l2", ParamGroup::Gate, 64, 64, rng),
            l3: store.add_layer("moe_gate.l3", ParamGroup::Gate, 64, COMBO_COUNT, rng),
        }
    }

    fn logits(&self, tape: &mut Tape, store: &ParamStore, h_cat: NodeId) -> Result<NodeId> {
        let z = tape.affine(store, self.l1, h_cat)?;
        let z = tape.relu(z);
        let z = tape.affine(store, self.l2, z)?;
        let z = tape.relu(z);
        tape.affine(store, self.l3, z)
    }
}

/// Soft mixture over the 15 frozen experts: p̂ = Σ_k w_k p̂_k. Returns the
/// prediction node, the gate-weight node, and the per-expert predictions.
pub fn moe_forward(
    tape: &mut Tape,
    store: &ParamStore,
    bank: &Bank,
    gate: &MoeGate,
    features: &dyn FeatureProvider,
) -> Result<(NodeId, NodeId, Vec<f64>)> {
    let h: Vec<NodeId> = ALL_MODALITIES
        .iter()
        .map(|m| bank.encoder(*m).encode(tape, store, features.raw(*m)))
        .collect::<Result<_>>()?;
    let h_cat = tape.concat(&h);
    let logits = gate.logits(tape, store, h_cat)?;
    let weights = tape.softmax_tau(logits, 1.0)?;
    // Experts are frozen during gating training: their predictions enter as
    // constants so no gradient reaches encoder or classifier parameters
    // through this path.
    let expert_preds: Vec<f64> = all_combos()
        .into_iter()
        .map(|c| bank.predict(store, c, features))
        .collect::<Result<_>>()?;
    let p = tape.dot_const(weights, expert_preds.clone());
    Ok((p, weights, expert_preds))
}

/// DynMM gating network: 96 → 64 → 15.
#[derive(Debug, Clone)]
pub struct DynmmGate {
    pub l1: LayerId,
    pub l2: LayerId,
}

impl DynmmGate {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        DynmmGate {
            l1: store.add_layer("dynmm_gate.l1", ParamGroup::Gate, GATE_IN, 64, rng),
            l2: store.add_layer("dynmm_gate.l2", ParamGroup::Gate, 64, COMBO_COUNT, rng),
        }
    }

    fn logits(&self, tape: &mut Tape, store: &ParamStore, h_cat: NodeId) -> Result<NodeId> {
        let z = tape.affine(store, self.l1, h_cat)?;
        let z = tape.relu(z);
        tape.affine(store, self.l2, z)
    }
}

/// One-shot parallel combo selection via Gumbel-Softmax. In training mode the
/// hard one-hot sample weights the expert predictions with straight-through
/// gradients; in evaluation only the argmax combo's path is executed.
pub fn dynmm_forward(
    tape: &mut Tape,
    store: &ParamStore,
    bank: &Bank,
    gate: &DynmmGate,
    features: &dyn FeatureProvider,
    temperature: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Result<(NodeId, ComboId)> {
    let h: Vec<NodeId> = ALL_MODALITIES
        .iter()
        .map(|m| bank.encoder(*m).encode(tape, store, features.raw(*m)))
        .collect::<Result<_>>()?;
    let h_cat = tape.concat(&h);
    let logits = gate.logits(tape, store, h_cat)?;
    let combos = all_combos();
    if training {
        let sample = tape.gumbel_softmax_st(logits, temperature, rng)?;
        let selected = tape
            .value(sample)
            .iter()
            .position(|&v| v == 1.0)
            .expect("hard sample is one-hot");
        let expert_preds: Vec<f64> = combos
            .iter()
            .map(|c| bank.predict(store, *c, features))
            .collect::<Result<_>>()?;
        let p = tape.dot_const(sample, expert_preds);
        Ok((p, combos[selected]))
    } else {
        let vals = tape.value(logits);
        let selected = vals
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        let combo = combos[selected];
        let p = bank.classify(tape, store, combo, features, false, rng)?;
        Ok((p, combo))
    }
}

// ---------------------------------------------------------------------------
// FLOPs accounting. Convention: multiply-add = 2 FLOPs per affine weight,
// plus 17^n multiplications for tensor fusion; activations, softmax and
// dropout are ignored.
// ---------------------------------------------------------------------------

pub fn affine_flops(in_dim: usize, out_dim: usize) -> u64 {
    2 * in_dim as u64 * out_dim as u64
}

pub fn encoder_flops(m: Modality) -> u64 {
    affine_flops(m.raw_dim(), ENCODER_HIDDEN) + affine_flops(ENCODER_HIDDEN, ENCODED_DIM)
}

/// Cost of a combo's fusion + classifier, excluding the encoders.
pub fn classifier_flops(combo: ComboId) -> u64 {
    let n = combo.subset.len();
    let mut flops = 0;
    if combo.fusion == Some(FusionType::Tensor) {
        flops += n as u64 * affine_flops(ENCODED_DIM, TENSOR_REDUCED_DIM);
        flops += (TENSOR_REDUCED_DIM as u64 + 1).pow(n as u32);
    }
    flops += affine_flops(combo.fused_dim(), CLASSIFIER_HIDDEN);
    flops += affine_flops(CLASSIFIER_HIDDEN, 2);
    flops
}

/// Full fixed-path cost: selected encoders + fusion + classifier.
pub fn combo_path_flops(combo: ComboId) -> u64 {
    combo
        .subset
        .members()
        .iter()
        .map(|m| encoder_flops(*m))
        .sum::<u64>()
        + classifier_flops(combo)
}

pub fn state_encoder_flops() -> u64 {
    affine_flops(STATE_IN, STATE_HIDDEN) + affine_flops(STATE_HIDDEN, STATE_DIM)
}

/// Policy-head output widths per decision step (1-based).
pub const HEAD_DIMS: [usize; 3] = [3, 4, 6];

pub fn head_flops(step: usize) -> u64 {
    affine_flops(STATE_DIM, HEAD_DIMS[step - 1])
}

/// Executed cost of one policy episode: lazily-selected encoders + the
/// resolved combo's classifier path + one state-encoder and head evaluation
/// per decision step taken.
pub fn adafuse_path_flops(combo: ComboId, steps_taken: usize) -> u64 {
    let mut flops = combo_path_flops(combo);
    for step in 1..=steps_taken {
        flops += state_encoder_flops() + head_flops(step);
    }
    flops
}

pub fn moe_gate_flops() -> u64 {
    affine_flops(GATE_IN, 64) + affine_flops(64, 64) + affine_flops(64, COMBO_COUNT)
}

/// MoE executes every expert: all encoders once, the gate, and all 15
/// fusion/classifier paths.
pub fn moe_total_flops() -> u64 {
    ALL_MODALITIES
        .iter()
        .map(|m| encoder_flops(*m))
        .sum::<u64>()
        + moe_gate_flops()
        + all_combos()
            .into_iter()
            .map(classifier_flops)
            .sum::<u64>()
}

pub fn dynmm_gate_flops() -> u64 {
    affine_flops(GATE_IN, 64) + affine_flops(64, COMBO_COUNT)
}

/// DynMM at evaluation: all encoders feed the gate, then exactly one combo
/// path (its classifier part) executes.
pub fn dynmm_eval_flops(selected: ComboId) -> u64 {
    ALL_MODALITIES
        .iter()
        .map(|m| encoder_flops(*m))
        .sum::<u64>()
        + dynmm_gate_flops()
        + classifier_flops(selected)
}

pub fn mflops(flops: u64) -> f64 {
    flops as f64 / 1e6
}
