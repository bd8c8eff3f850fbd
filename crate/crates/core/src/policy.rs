//! Sequential modality-selection policy.
//!
//! An episode unfolds over at most three steps: pick a primary modality,
//! optionally add a second, optionally add the third while committing to a
//! fusion strategy. The state is recomputed after every mask update from the
//! masked encoded features plus the mask itself; modalities are encoded
//! lazily, only when selected.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionType, ALL_FUSIONS};
use crate::modality::{Modality, ModalitySet, ALL_MODALITIES, ENCODED_DIM};
use crate::models::{Bank, ComboId, FeatureProvider, HEAD_DIMS, STATE_DIM, STATE_HIDDEN, STATE_IN};
use crate::numerics::tape::{NodeId, Tape};
use crate::numerics::{LayerId, ParamGroup, ParamStore};

/// One policy action. Step 1 picks, step 2 stops or adds, step 3 resolves a
/// fusion type whether stopping at two modalities or adding the third.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Pick(Modality),
    Stop,
    Add(Modality),
    StopWith(FusionType),
    AddWith(FusionType),
}

impl Action {
    pub fn token(&self) -> String {
        match self {
            Action::Pick(m) => format!("pick:{}", m.letter()),
            Action::Stop => "stop".into(),
            Action::Add(m) => format!("add:{}", m.letter()),
            Action::StopWith(f) => format!("stop+{}", f.label()),
            Action::AddWith(f) => format!("add+{}", f.label()),
        }
    }
}

/// Ordered action sequence with per-step log-probabilities and entropies.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub actions: Vec<Action>,
    pub step_log_probs: Vec<f64>,
    pub step_entropies: Vec<f64>,
    pub combo: ComboId,
    pub log_prob: f64,
}

impl Trajectory {
    pub fn steps_taken(&self) -> usize {
        self.actions.len()
    }

    pub fn final_mask(&self) -> ModalitySet {
        self.combo.subset
    }
}

/// State encoder g: affine(99 → 64) → ReLU → affine(64 → 64), plus the three
/// step-specific heads.
#[derive(Debug, Clone)]
pub struct PolicyNet {
    pub state_l1: LayerId,
    pub state_l2: LayerId,
    pub heads: [LayerId; 3],
}

impl PolicyNet {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let state_l1 = store.add_layer("state.l1", ParamGroup::StateEncoder, STATE_IN, STATE_HIDDEN, rng);
        let state_l2 = store.add_layer("state.l2", ParamGroup::StateEncoder, STATE_HIDDEN, STATE_DIM, rng);
        let heads = [
            store.add_layer("head.step1", ParamGroup::PolicyHead, STATE_DIM, HEAD_DIMS[0], rng),
            store.add_layer("head.step2", ParamGroup::PolicyHead, STATE_DIM, HEAD_DIMS[1], rng),
            store.add_layer("head.step3", ParamGroup::PolicyHead, STATE_DIM, HEAD_DIMS[2], rng),
        ];
        let net = PolicyNet {
            state_l1,
            state_l2,
            heads,
        };
        net.reinit(store, rng);
        net
    }

    /// Re-randomize every policy parameter in place; used once at
    /// construction and again for each optimization restart.
    pub fn reinit(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for lid in [
            self.state_l1,
            self.state_l2,
            self.heads[0],
            self.heads[1],
            self.heads[2],
        ] {
            let layer = store.layer_mut(lid);
            let (rows, cols) = (layer.w.rows, layer.w.cols);
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            for v in layer.w.data.iter_mut() {
                *v = rng.gen_range(-bound..bound);
            }
            for b in layer.b.iter_mut() {
                *b = 0.0;
            }
        }
        // Damp the state-conditioned part of the policy at initialization.
        // Action biases then dominate the early logits, so the policy first
        // learns global action values — estimated from every record in the
        // batch stream, the lowest-variance signal available — and develops
        // patient-conditioned deviations only where the reward consistently
        // supports them instead of carving regions out of batch noise.
        for lid in [self.state_l2, self.heads[0], self.heads[1], self.heads[2]] {
            let layer = store.layer_mut(lid);
            layer.w.data.iter_mut().for_each(|w| *w *= 0.05);
        }
        // Start the second step pessimistic about stopping so early rollouts
        // actually visit the two-modality classifiers; with a neutral stop
        // logit roughly a third of trajectories end after one modality and
        // the pair arms are under-sampled exactly while the entropy bonus is
        // being annealed away. The third step keeps a neutral stop logit:
        // biasing it would over-sample the three-modality heads instead.
        store.layer_mut(self.heads[1]).b[0] = -0.7;
    }

    /// s = g([h^A⊙m^A ; h^B⊙m^B ; h^C⊙m^C ; m]). Unselected slots contribute
    /// exact zeros without evaluating their encoders.
    pub fn compute_state(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: &[Option<NodeId>; 3],
        mask: ModalitySet,
    ) -> Result<NodeId> {
        let mut parts = Vec::with_capacity(4);
        for m in ALL_MODALITIES {
            match (mask.contains(m), h[m.index()]) {
                (true, Some(node)) => parts.push(node),
                (true, None) => {
                    return Err(Error::Config(format!(
                        "modality {} selected but not encoded",
                        m.letter()
                    )))
                }
                (false, _) => parts.push(tape.zeros(ENCODED_DIM)),
            }
        }
        let mask_leaf = tape.leaf(
            ALL_MODALITIES
                .iter()
                .map(|m| if mask.contains(*m) { 1.0 } else { 0.0 })
                .collect(),
        );
        parts.push(mask_leaf);
        let x = tape.concat(&parts);
        let s = tape.affine(store, self.state_l1, x)?;
        let s = tape.relu(s);
        tape.affine(store, self.state_l2, s)
    }

    /// Head logits for a step (1-based) with the valid-action mask. Step 2
    /// masks out the already-selected modality's "add" action.
    pub fn head_logits(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        step: usize,
        state: NodeId,
        mask: ModalitySet,
    ) -> Result<(NodeId, Vec<bool>)> {
        let expected_popcount = step - 1;
        if mask.len() != expected_popcount {
            return Err(Error::Config(format!(
                "step {step} requires {expected_popcount} selected modalities, mask has {}",
                mask.len()
            )));
        }
        let logits = tape.affine(store, self.heads[step - 1], state)?;
        let valid = match step {
            1 => vec![true; 3],
            2 => {
                let mut v = vec![true; 4];
                for m in ALL_MODALITIES {
                    if mask.contains(m) {
                        v[1 + m.index()] = false;
                    }
                }
                v
            }
            3 => vec![true; 6],
            _ => return Err(Error::Config(format!("invalid step {step}"))),
        };
        Ok((logits, valid))
    }
}

/// Linear temperature annealing from `tau_init` to `tau_final` over `total`
/// epochs, clamped at `tau_final` afterwards.
pub fn anneal_temperature(epoch: usize, total: usize, tau_init: f64, tau_final: f64) -> f64 {
    if epoch >= total {
        return tau_final;
    }
    tau_init + (tau_final - tau_init) * epoch as f64 / total as f64
}

/// Decoded action at a given step for a head action index.
fn decode_action(step: usize, index: usize) -> Action {
    match step {
        1 => Action::Pick(Modality::from_index(index)),
        2 => {
            if index == 0 {
                Action::Stop
            } else {
                Action::Add(Modality::from_index(index - 1))
            }
        }
        3 => {
            let fusion = ALL_FUSIONS[index % 3];
            if index < 3 {
                Action::StopWith(fusion)
            } else {
                Action::AddWith(fusion)
            }
        }
        _ => unreachable!(),
    }
}

/// A full episode recorded on a tape: the trajectory plus the tape nodes the
/// training loss needs (per-step chosen log-probs and entropies, and the
/// encoded features of every selected modality).
pub struct Episode {
    pub trajectory: Trajectory,
    pub log_prob_nodes: Vec<NodeId>,
    pub entropy_nodes: Vec<NodeId>,
    pub h: [Option<NodeId>; 3],
}

impl Episode {
    /// Encoded nodes of the resolved combo in A < B < C order.
    pub fn selected_h(&self) -> Vec<NodeId> {
        ALL_MODALITIES
            .iter()
            .filter(|m| self.trajectory.combo.subset.contains(**m))
            .map(|m| self.h[m.index()].expect("selected modality was encoded"))
            .collect()
    }
}

enum Chooser<'a, R: Rng> {
    Sample(&'a mut R),
    Greedy,
    Forced(&'a [usize]),
}

impl<R: Rng> Chooser<'_, R> {
    fn choose(&mut self, step: usize, log_probs: &[f64], valid: &[bool]) -> usize {
        match self {
            Chooser::Greedy => {
                let mut best = usize::MAX;
                let mut best_lp = f64::NEG_INFINITY;
                for (i, (&lp, &ok)) in log_probs.iter().zip(valid.iter()).enumerate() {
                    // Ties break toward the lowest action index.
                    if ok && lp > best_lp {
                        best = i;
                        best_lp = lp;
                    }
                }
                best
            }
            Chooser::Forced(seq) => seq[step - 1],
            Chooser::Sample(rng) => {
                let u: f64 = rng.gen();
                let mut cum = 0.0;
                let mut last_valid = 0;
                for (i, (&lp, &ok)) in log_probs.iter().zip(valid.iter()).enumerate() {
                    if !ok {
                        continue;
                    }
                    last_valid = i;
                    cum += lp.exp();
                    if u < cum {
                        return i;
                    }
                }
                last_valid
            }
        }
    }
}

fn run_episode<R: Rng>(
    tape: &mut Tape,
    store: &ParamStore,
    bank: &Bank,
    policy: &PolicyNet,
    features: &dyn FeatureProvider,
    tau: f64,
    mut chooser: Chooser<'_, R>,
) -> Result<Episode> {
    let mut mask = ModalitySet::empty();
    let mut h: [Option<NodeId>; 3] = [None, None, None];
    let mut actions = Vec::new();
    let mut step_log_probs = Vec::new();
    let mut step_entropies = Vec::new();
    let mut log_prob_nodes = Vec::new();
    let mut entropy_nodes = Vec::new();
    let encode = |tape: &mut Tape, m: Modality, h: &mut [Option<NodeId>; 3]| -> Result<()> {
        let node = bank.encoder(m).encode(tape, store, features.raw(m))?;
        h[m.index()] = Some(node);
        Ok(())
    };

    let mut fusion_choice: Option<FusionType> = None;
    for step in 1..=3usize {
        let state = policy.compute_state(tape, store, &h, mask)?;
        let (logits, valid) = policy.head_logits(tape, store, step, state, mask)?;
        let lp = tape.log_softmax_tau_masked(logits, tau, &valid)?;
        let ent = tape.entropy_masked(logits, tau, &valid)?;
        let idx = chooser.choose(step, tape.value(lp), &valid);
        debug_assert!(valid[idx], "chose a masked action");
        let action = decode_action(step, idx);
        let lp_node = tape.index(lp, idx);
        actions.push(action);
        step_log_probs.push(tape.scalar(lp_node));
        step_entropies.push(tape.scalar(ent));
        log_prob_nodes.push(lp_node);
        entropy_nodes.push(ent);

        match action {
            Action::Pick(m) | Action::Add(m) => {
                encode(tape, m, &mut h)?;
                mask = mask.with(m);
            }
            Action::Stop => break,
            Action::StopWith(f) => {
                fusion_choice = Some(f);
                break;
            }
            Action::AddWith(f) => {
                let third = ALL_MODALITIES
                    .iter()
                    .copied()
                    .find(|m| !mask.contains(*m))
                    .expect("two modalities selected before step 3");
                encode(tape, third, &mut h)?;
                mask = mask.with(third);
                fusion_choice = Some(f);
            }
        }
    }

    let fusion = if mask.len() == 1 { None } else { fusion_choice };
    let combo = ComboId::new(mask, fusion)?;
    let log_prob = step_log_probs.iter().sum();
    Ok(Episode {
        trajectory: Trajectory {
            actions,
            step_log_probs,
            step_entropies,
            combo,
            log_prob,
        },
        log_prob_nodes,
        entropy_nodes,
        h,
    })
}

/// Sample one episode at temperature `tau`.
pub fn sample_trajectory(
    tape: &mut Tape,
    store: &ParamStore,
    bank: &Bank,
    policy: &PolicyNet,
    features: &dyn FeatureProvider,
    tau: f64,
    rng: &mut impl Rng,
) -> Result<Episode> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("sampling temperature {tau} <= 0")));
    }
    run_episode(tape, store, bank, policy, features, tau, Chooser::Sample(rng))
}

/// Deterministic argmax decoding (ties broken by lowest action index).
/// Uses tau = 1; the argmax is temperature-invariant.
pub fn greedy_decode(
    tape: &mut Tape,
    store: &ParamStore,
    bank: &Bank,
    policy: &PolicyNet,
    features: &dyn FeatureProvider,
) -> Result<Episode> {
    run_episode::<rand_chacha::ChaCha8Rng>(
        tape,
        store,
        bank,
        policy,
        features,
        1.0,
        Chooser::Greedy,
    )
}

/// Run an episode with a forced per-step action-index sequence.
pub fn forced_trajectory(
    tape: &mut Tape,
    store: &ParamStore,
    bank: &Bank,
    policy: &PolicyNet,
    features: &dyn FeatureProvider,
    tau: f64,
    actions: &[usize],
) -> Result<Episode> {
    run_episode::<rand_chacha::ChaCha8Rng>(
        tape,
        store,
        bank,
        policy,
        features,
        tau,
        Chooser::Forced(actions),
    )
}

/// All 39 valid action-index sequences: 3 stop-at-one, 18 stop-at-two (6
/// ordered pairs × 3 fusions), 18 add-third (6 ordered pairs × 3 fusions).
pub fn all_action_sequences() -> Vec<Vec<usize>> {
    let mut seqs = Vec::with_capacity(39);
    for first in 0..3 {
        seqs.push(vec![first, 0]); // stop with one modality
        for second in 0..3 {
            if second == first {
                continue;
            }
            for step3 in 0..6 {
                seqs.push(vec![first, 1 + second, step3]);
            }
        }
    }
    seqs
}

/// Exhaustively enumerate every valid trajectory with its exact probability
/// at temperature `tau`. Probabilities sum to 1.
pub fn enumerate_trajectories(
    store: &ParamStore,
    bank: &Bank,
    policy: &PolicyNet,
    features: &dyn FeatureProvider,
    tau: f64,
) -> Result<Vec<(Trajectory, f64)>> {
    all_action_sequences()
        .into_iter()
        .map(|seq| {
            let mut tape = Tape::new();
            let ep = forced_trajectory(&mut tape, store, bank, policy, features, tau, &seq)?;
            let p = ep.trajectory.log_prob.exp();
            Ok((ep.trajectory, p))
        })
        .collect()
}

/// One line of the trajectory dump consumed by the policy report:
/// `id <TAB> action,action,... <TAB> combo <TAB> log_prob`.
pub fn format_trajectory_line(id: &str, t: &Trajectory) -> String {
    let actions: Vec<String> = t.actions.iter().map(|a| a.token()).collect();
    format!(
        "{}\t{}\t{}\t{}",
        id,
        actions.join(","),
        t.combo.label(),
        t.log_prob
    )
}

/// Parse a dump line back to (id, combo label).
pub fn parse_trajectory_line(line: &str) -> Result<(String, String)> {
    let mut parts = line.split('\t');
    let id = parts.next().ok_or_else(|| Error::Eval("empty trajectory line".into()))?;
    let _actions = parts
        .next()
        .ok_or_else(|| Error::Eval(format!("trajectory line missing actions: {line}")))?;
    let combo = parts
        .next()
        .ok_or_else(|| Error::Eval(format!("trajectory line missing combo: {line}")))?;
    Ok((id.to_string(), combo.to_string()))
}
