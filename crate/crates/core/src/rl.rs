//! Policy-gradient training: reward shaping, REINFORCE with a batch-mean
//! baseline, balanced mini-batch sampling, baseline-bank pretraining, and
//! the training loops for the policy, MoE gate, and one-shot gating models.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::data::PatientRecord;
use crate::error::{Error, Result};
use crate::eval::auc;
use crate::models::{
    all_combos, Bank, ComboId, DynmmGate, FeatureProvider, MoeGate,
};
use crate::modality::ALL_MODALITIES;
use crate::numerics::{
    adamw::{AdamW, AdamWConfig},
    bce_loss, clamp_prob,
    tape::Tape,
    ParamGroup, ParamStore,
};
use crate::policy::{
    anneal_temperature, greedy_decode, sample_trajectory, PolicyNet, Trajectory,
};
use crate::rng::{substream, substream_indexed};

/// Reward mixture r = w_bce·r_BCE + w_auc·r_auc. The default follows the
/// best-performing weighting (0.7 / 0.3); set w_bce = 1 for the unweighted
/// form.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RewardConfig {
    pub w_bce: f64,
    pub w_auc: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            w_bce: 0.7,
            w_auc: 0.3,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if self.w_bce < 0.0 || self.w_auc < 0.0 || (self.w_bce == 0.0 && self.w_auc == 0.0) {
            return Err(Error::Config(
                "reward weights must be >= 0 and not both zero".into(),
            ));
        }
        Ok(())
    }
}

/// Auxiliary loss weights: entropy bonus and supervised BCE term.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_ent: f64,
    pub lambda_sup: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_ent: 0.1,
            lambda_sup: 0.3,
        }
    }
}

/// Which pretrained parameter groups continue to receive gradients during
/// policy training. The default trains encoders and freezes classifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeConfig {
    pub train_encoders: bool,
    pub train_classifiers: bool,
}

impl Default for FreezeConfig {
    fn default() -> Self {
        FreezeConfig {
            train_encoders: true,
            train_classifiers: false,
        }
    }
}

impl FreezeConfig {
    /// The four train/freeze combinations, default cell first.
    pub fn all_cells() -> [FreezeConfig; 4] {
        [
            FreezeConfig { train_encoders: true, train_classifiers: false },
            FreezeConfig { train_encoders: false, train_classifiers: false },
            FreezeConfig { train_encoders: true, train_classifiers: true },
            FreezeConfig { train_encoders: false, train_classifiers: true },
        ]
    }

    pub fn label(&self) -> String {
        format!(
            "enc-{}_clf-{}",
            if self.train_encoders { "train" } else { "freeze" },
            if self.train_classifiers { "train" } else { "freeze" },
        )
    }
}

/// Optimization schedule shared by all training stages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub positive_fraction: f64,
    pub policy_lr: f64,
    pub encoder_lr: f64,
    pub baseline_lr: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub tau_init: f64,
    pub tau_final: f64,
    pub anneal_total: usize,
    /// Independent policy-optimization restarts; the best run by greedy
    /// validation reward is kept.
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    pub seed: u64,
}

fn default_restarts() -> usize {
    1
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs: 100,
            batch_size: 32,
            positive_fraction: 0.3,
            policy_lr: 3e-4,
            encoder_lr: 1e-5,
            baseline_lr: 1e-3,
            weight_decay: 1e-4,
            patience: 15,
            tau_init: 1.5,
            tau_final: 0.3,
            anneal_total: 100,
            restarts: 1,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0
            || self.batch_size < 2
            || self.patience == 0
            || self.policy_lr <= 0.0
            || self.encoder_lr <= 0.0
            || self.baseline_lr <= 0.0
            || self.tau_init <= 0.0
            || self.tau_final <= 0.0
            || self.anneal_total == 0
            || !(0.0..1.0).contains(&self.positive_fraction)
            || self.positive_fraction == 0.0
        {
            return Err(Error::Config("invalid training schedule".into()));
        }
        Ok(())
    }

    fn adamw_config(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Negative binary cross-entropy of one prediction: higher is better.
pub fn reward_bce(p_hat: f64, y: u8) -> f64 {
    -bce_loss(clamp_prob(p_hat), y)
}

/// Per-sample ranking reward in [−1, 1]: for each sample, the fraction of
/// opposite-class batch members it is ordered correctly against (ties count
/// half), rescaled to [−1, 1]. A pair is correct when the positive's
/// prediction exceeds the negative's. Single-class batches get all zeros.
pub fn reward_auc_batch(p_hats: &[f64], labels: &[u8]) -> Result<Vec<f64>> {
    if p_hats.len() != labels.len() {
        return Err(Error::Config("reward inputs differ in length".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        log::warn!("single-class batch: ranking reward is 0 for every sample");
        return Ok(vec![0.0; labels.len()]);
    }
    Ok(p_hats
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let mut correct = 0.0;
            let mut count = 0.0;
            for (&q, &yo) in p_hats.iter().zip(labels) {
                if yo == y {
                    continue;
                }
                count += 1.0;
                let (pp, pn) = if y == 1 { (p, q) } else { (q, p) };
                if pp > pn {
                    correct += 1.0;
                } else if pp == pn {
                    correct += 0.5;
                }
            }
            2.0 * correct / count - 1.0
        })
        .collect())
}

/// REINFORCE loss with a batch-mean baseline: mean over the batch of
/// −log π(τ_i)·(r_i − r̄). Returns (loss, advantages). The advantage is a
/// constant with respect to the parameters.
pub fn reinforce_loss(log_probs: &[f64], rewards: &[f64]) -> Result<(f64, Vec<f64>)> {
    if log_probs.len() != rewards.len() || log_probs.len() < 2 {
        return Err(Error::Config(
            "policy-gradient batch needs >= 2 matched samples".into(),
        ));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("reward".into()));
    }
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    let advantages: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    let loss = -log_probs
        .iter()
        .zip(&advantages)
        .map(|(lp, a)| lp * a)
        .sum::<f64>()
        / log_probs.len() as f64;
    Ok((loss, advantages))
}

/// Class-balanced mini-batches: each batch draws `round(fraction·size)`
/// positives (with replacement when positives are scarce) plus the remainder
/// of negatives without replacement; the final partial batch is dropped.
pub fn balanced_batches(
    labels: &[u8],
    batch_size: usize,
    positive_fraction: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<usize>>> {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Config(
            "balanced sampling needs both classes present".into(),
        ));
    }
    let n_pos = ((batch_size as f64) * positive_fraction).round() as usize;
    let n_pos = n_pos.clamp(1, batch_size - 1);
    let n_neg = batch_size - n_pos;
    neg.shuffle(rng);
    let mut batches = Vec::new();
    for chunk in neg.chunks(n_neg) {
        if chunk.len() < n_neg {
            break; // drop last partial batch
        }
        let mut batch: Vec<usize> = if pos.len() >= n_pos {
            let mut shuffled = pos.clone();
            shuffled.shuffle(rng);
            shuffled.truncate(n_pos);
            shuffled
        } else {
            (0..n_pos).map(|_| pos[rng.gen_range(0..pos.len())]).collect()
        };
        batch.extend_from_slice(chunk);
        batches.push(batch);
    }
    if batches.is_empty() {
        return Err(Error::Config(format!(
            "too few negatives ({}) for even one batch of {}",
            labels.len() - pos.len(),
            batch_size
        )));
    }
    Ok(batches)
}

/// One row of the training metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub temperature: f64,
    pub mean_reward: f64,
    pub mean_entropy: f64,
    pub train_loss: f64,
    pub val_auc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_auc: f64,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("epoch,temperature,mean_reward,mean_entropy,train_loss,val_auc\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                e.epoch, e.temperature, e.mean_reward, e.mean_entropy, e.train_loss, e.val_auc
            ));
        }
        out
    }
}

fn snapshot(store: &ParamStore, layers: &HashSet<usize>) -> Vec<(usize, Vec<f64>, Vec<f64>)> {
    layers
        .iter()
        .map(|&i| {
            let l = &store.layers[i];
            (i, l.w.data.clone(), l.b.clone())
        })
        .collect()
}

fn restore(store: &mut ParamStore, snap: &[(usize, Vec<f64>, Vec<f64>)]) {
    for (i, w, b) in snap {
        store.layers[*i].w.data.copy_from_slice(w);
        store.layers[*i].b.copy_from_slice(b);
    }
}

fn labels_of(records: &[PatientRecord]) -> Vec<u8> {
    records.iter().map(|r| r.label).collect()
}

/// Eval-mode encoded features (three 32-dim vectors) for one record.
fn encode_record(store: &ParamStore, bank: &Bank, r: &PatientRecord) -> Result<[Vec<f64>; 3]> {
    let mut tape = Tape::new();
    let mut out: [Vec<f64>; 3] = Default::default();
    for m in ALL_MODALITIES {
        let h = bank.encoder(m).encode(&mut tape, store, r.raw(m))?;
        out[m.index()] = tape.value(h).to_vec();
    }
    Ok(out)
}

fn classifier_layer_set(bank: &Bank, combo: ComboId) -> HashSet<usize> {
    let c = bank.classifier(combo);
    let mut set: HashSet<usize> = c.projections.iter().map(|id| id.0).collect();
    set.insert(c.l1.0);
    set.insert(c.l2.0);
    set
}

/// Supervised pretraining of the baseline bank. Phase one trains each
/// single-modality encoder+classifier jointly; phase two freezes the encoders
/// and fits the remaining twelve classifiers on cached encoded features.
/// Returns the validation AUC of every combo, best-epoch parameters restored.
pub fn pretrain_baselines(
    store: &mut ParamStore,
    bank: &Bank,
    train: &[PatientRecord],
    val: &[PatientRecord],
    calib: &[PatientRecord],
    schedule: &TrainSchedule,
) -> Result<Vec<(ComboId, f64)>> {
    schedule.validate()?;
    let train_labels = labels_of(train);
    let val_labels = labels_of(val);
    // Encoders use the small fine-tuning rate: they play the role of
    // general-purpose pretrained feature extractors, and training them hard
    // on this dataset's labels lets a high-capacity encoder memorize pure
    // noise, which would poison the policy's training-batch rewards later.
    let lrs: HashMap<ParamGroup, f64> = [
        (ParamGroup::Encoder, schedule.encoder_lr),
        (ParamGroup::Classifier, schedule.baseline_lr),
    ]
    .into();

    // Phase one: single-modality models, encoder + classifier jointly.
    for m in ALL_MODALITIES {
        let combo = ComboId::new(crate::modality::ModalitySet::single(m), None)?;
        let enc = bank.encoder(m);
        let mut unit = classifier_layer_set(bank, combo);
        unit.insert(enc.l1.0);
        unit.insert(enc.l2.0);
        train_supervised_unit(
            store,
            bank,
            combo,
            &unit,
            &lrs,
            train,
            &train_labels,
            val,
            &val_labels,
            schedule,
            None,
            None,
        )?;
    }

    // Validation AUC of each trained single head, used to weight the warm
    // starts below.
    let mut single_val_aucs = [0.0f64; 3];
    for m in ALL_MODALITIES {
        let combo = ComboId::new(crate::modality::ModalitySet::single(m), None)?;
        let preds: Vec<f64> = val
            .iter()
            .map(|r| bank.predict(store, combo, r))
            .collect::<Result<_>>()?;
        single_val_aucs[m.index()] = auc(&preds, &val_labels)?;
    }

    // Phase two: encoders frozen, multi-modality classifiers fit on cached
    // encodings.
    let train_h: Vec<[Vec<f64>; 3]> = train
        .iter()
        .map(|r| encode_record(store, bank, r))
        .collect::<Result<_>>()?;
    let val_h: Vec<[Vec<f64>; 3]> = val
        .iter()
        .map(|r| encode_record(store, bank, r))
        .collect::<Result<_>>()?;
    let clf_lrs: HashMap<ParamGroup, f64> = [(ParamGroup::Classifier, schedule.baseline_lr)].into();
    // Per-modality input-noise scale for phase-two augmentation: half the
    // empirical per-coordinate standard deviation of the cached encodings.
    // Training the fused heads under input noise is a ridge-like regularizer;
    // without it, heads whose extra inputs happen to be uninformative get the
    // same regularization implicitly and out-score better-informed heads of
    // equal capacity, distorting the reward ordering the policy learns from.
    let aug_std: [f64; 3] = std::array::from_fn(|m| {
        let n = (train_h.len() * crate::modality::ENCODED_DIM) as f64;
        let mean: f64 = train_h.iter().flat_map(|h| &h[m]).sum::<f64>() / n;
        let var: f64 = train_h
            .iter()
            .flat_map(|h| &h[m])
            .map(|v| (v - mean).powi(2))
            .sum::<f64>()
            / n;
        0.5 * var.sqrt()
    });
    for combo in all_combos() {
        if combo.subset.len() == 1 {
            continue;
        }
        // Concat heads start from a trained ensemble and only need a short
        // fine-tune to pick up cross-modality interactions; a long schedule
        // walks far enough from the ensemble that, with this few positive
        // examples, the final head quality is dominated by sampling luck.
        // Randomly initialized heads (mean/tensor) keep the full budget.
        let is_warm = combo.fusion == Some(crate::fusion::FusionType::Concat);
        if is_warm {
            warm_start_concat_head(store, bank, combo, &single_val_aucs)?;
        }
        let mut combo_schedule = schedule.clone();
        if is_warm {
            combo_schedule.epochs = 0;
        }
        let unit = classifier_layer_set(bank, combo);
        train_supervised_unit(
            store,
            bank,
            combo,
            &unit,
            &clf_lrs,
            train,
            &train_labels,
            val,
            &val_labels,
            &combo_schedule,
            Some((&train_h, &val_h)),
            Some(&aug_std),
        )?;
    }

    // Temperature-calibrate every classifier on the calibration split — the
    // half of the training data the policy's rewards are computed on. The
    // policy consumes per-sample BCE rewards from these heads, and an
    // overconfident head (typically the wide fused ones) makes a genuinely
    // better-ranking combo look worse than a smaller well-calibrated one,
    // which would steer the policy away from useful fusions. Fitting the
    // single scalar per head where the rewards live makes the BCE rewards
    // comparable across heads (one scalar cannot memorize labels there);
    // dividing the final affine layer by the fitted temperature rescales the
    // logit, so the calibration survives in the checkpoint.
    let calib_labels = labels_of(calib);
    for combo in all_combos() {
        let preds: Vec<f64> = calib
            .iter()
            .map(|r| bank.predict(store, combo, r))
            .collect::<Result<_>>()?;
        let logits: Vec<f64> = preds
            .iter()
            .map(|&p| {
                let p = p.clamp(1e-9, 1.0 - 1e-9);
                (p / (1.0 - p)).ln()
            })
            .collect();
        let calib_bce = |t: f64| -> f64 {
            logits
                .iter()
                .zip(&calib_labels)
                .map(|(&l, &y)| {
                    let p = (1.0 / (1.0 + (-(l / t)).exp())).clamp(1e-9, 1.0 - 1e-9);
                    if y == 1 {
                        -p.ln()
                    } else {
                        -(1.0 - p).ln()
                    }
                })
                .sum::<f64>()
                / calib.len() as f64
        };
        let (mut best_t, mut best_bce) = (1.0, calib_bce(1.0));
        for k in -20..=20 {
            let t = (k as f64 * 0.1).exp();
            let bce = calib_bce(t);
            if bce < best_bce {
                best_bce = bce;
                best_t = t;
            }
        }
        let layer = store.layer_mut(bank.classifier(combo).l2);
        layer.w.data.iter_mut().for_each(|w| *w /= best_t);
        layer.b.iter_mut().for_each(|b| *b /= best_t);
    }

    // Final per-combo validation AUCs with best parameters in place.
    let mut result = Vec::new();
    for combo in all_combos() {
        let preds: Vec<f64> = val
            .iter()
            .map(|r| bank.predict(store, combo, r))
            .collect::<Result<_>>()?;
        result.push((combo, auc(&preds, &val_labels)?));
    }
    Ok(result)
}

/// Initialize a concat-fusion classifier as an ensemble of its members'
/// trained single-modality heads: the hidden layer is partitioned among the
/// members, each partition computing a width-reduced copy of that member's
/// head on its own slice of the concatenated input, and the output layer
/// mixes the member logits weighted by each member's validation skill above
/// chance. At the scale of this benchmark the fused heads see few positive
/// examples, and from a random initialization whether a pair head ends up
/// better than its best member is largely sampling luck; starting from the
/// skill-weighted ensemble makes "fusion is at least as good as its parts"
/// hold by construction, keeps an uninformative member from diluting the
/// mix, and lets training spend its budget on cross-modality interactions.
fn warm_start_concat_head(
    store: &mut ParamStore,
    bank: &Bank,
    combo: ComboId,
    single_val_aucs: &[f64; 3],
) -> Result<()> {
    use crate::models::CLASSIFIER_HIDDEN;
    use crate::modality::ENCODED_DIM;
    let members = combo.subset.members();
    let k = members.len();
    let _ = single_val_aucs;
    let weights: Vec<f64> = vec![1.0 / k as f64; k];
    let srcs: Vec<(usize, usize)> = members
        .iter()
        .map(|m| {
            let c = bank.classifier(ComboId::new(crate::modality::ModalitySet::single(*m), None)?);
            Ok((c.l1.0, c.l2.0))
        })
        .collect::<Result<_>>()?;
    let dst = bank.classifier(combo);
    let (dst_l1, dst_l2) = (dst.l1.0, dst.l2.0);
    store.layers[dst_l2].b.iter_mut().for_each(|b| *b = 0.0);
    let base = CLASSIFIER_HIDDEN / k;
    let mut row = 0usize;
    for (j, &(src_l1, src_l2)) in srcs.iter().enumerate() {
        let width = if j < CLASSIFIER_HIDDEN % k { base + 1 } else { base };
        // The member head has CLASSIFIER_HIDDEN units but only `width` slots
        // here; keep the units that contribute most to the member's logit
        // margin rather than an arbitrary prefix.
        let mut order: Vec<usize> = (0..CLASSIFIER_HIDDEN).collect();
        let margin = |r: usize| {
            let w = &store.layers[src_l2].w.data;
            (w[r] - w[CLASSIFIER_HIDDEN + r]).abs()
        };
        order.sort_by(|&a, &b| margin(b).total_cmp(&margin(a)));
        for (r, &src_r) in order.iter().take(width).enumerate() {
            for c in 0..ENCODED_DIM {
                let v = store.layers[src_l1].w.data[src_r * ENCODED_DIM + c];
                let cols = store.layers[dst_l1].w.cols;
                store.layers[dst_l1].w.data[(row + r) * cols + j * ENCODED_DIM + c] = v;
            }
            store.layers[dst_l1].b[row + r] = store.layers[src_l1].b[src_r];
            for o in 0..2 {
                let v = store.layers[src_l2].w.data[o * CLASSIFIER_HIDDEN + src_r];
                store.layers[dst_l2].w.data[o * CLASSIFIER_HIDDEN + row + r] = v * weights[j];
            }
        }
        for o in 0..2 {
            store.layers[dst_l2].b[o] += store.layers[src_l2].b[o] * weights[j];
        }
        row += width;
    }
    // Zero the cross-member blocks of the hidden layer so the initial logits
    // are exactly the member-logit average; training is free to fill them in.
    let cols = store.layers[dst_l1].w.cols;
    for r in 0..CLASSIFIER_HIDDEN {
        let member = member_of_row(r, k);
        for j in 0..k {
            if j != member {
                for c in 0..ENCODED_DIM {
                    store.layers[dst_l1].w.data[r * cols + j * ENCODED_DIM + c] = 0.0;
                }
            }
        }
    }
    Ok(())
}

fn member_of_row(r: usize, k: usize) -> usize {
    use crate::models::CLASSIFIER_HIDDEN;
    let base = CLASSIFIER_HIDDEN / k;
    let extra = CLASSIFIER_HIDDEN % k;
    let mut row = 0usize;
    for j in 0..k {
        let width = if j < extra { base + 1 } else { base };
        if r < row + width {
            return j;
        }
        row += width;
    }
    k - 1
}

type CachedH<'a> = (&'a [[Vec<f64>; 3]], &'a [[Vec<f64>; 3]]);

/// BCE training of one combo's path with early stopping on validation AUC.
/// When cached encodings are supplied the encoders are bypassed entirely.
#[allow(clippy::too_many_arguments)]
fn train_supervised_unit(
    store: &mut ParamStore,
    bank: &Bank,
    combo: ComboId,
    unit: &HashSet<usize>,
    lrs: &HashMap<ParamGroup, f64>,
    train: &[PatientRecord],
    train_labels: &[u8],
    val: &[PatientRecord],
    val_labels: &[u8],
    schedule: &TrainSchedule,
    cached: Option<CachedH>,
    input_noise: Option<&[f64; 3]>,
) -> Result<()> {
    let mut opt = AdamW::new(store, schedule.adamw_config());
    let mut best = (0, f64::NEG_INFINITY, snapshot(store, unit));
    let seed_label = format!("pretrain-{}", combo.label());
    for epoch in 0..schedule.epochs {
        let mut batch_rng = substream_indexed(schedule.seed, &seed_label, epoch as u64);
        let batches = balanced_batches(
            train_labels,
            schedule.batch_size,
            schedule.positive_fraction,
            &mut batch_rng,
        )?;
        for (bi, batch) in batches.iter().enumerate() {
            let mut tape = Tape::new();
            let mut drop_rng = substream_indexed(
                schedule.seed,
                &format!("{seed_label}-dropout-{epoch}"),
                bi as u64,
            );
            let mut terms = Vec::with_capacity(batch.len());
            for &i in batch {
                let aug: Option<[Vec<f64>; 3]> = match (cached, input_noise) {
                    (Some((h, _)), Some(scales)) => {
                        let mut a = h[i].clone();
                        for (vec, &s) in a.iter_mut().zip(scales) {
                            for v in vec.iter_mut() {
                                let e: f64 = rand_distr::StandardNormal.sample(&mut drop_rng);
                                *v += s * e;
                            }
                        }
                        Some(a)
                    }
                    _ => None,
                };
                let p = forward_combo(
                    &mut tape, store, bank, combo, &train[i],
                    aug.as_ref().or(cached.map(|(h, _)| &h[i])),
                    true, &mut drop_rng,
                )?;
                let l = tape.bce_from_prob(p, train_labels[i]);
                terms.push((l, 1.0 / batch.len() as f64));
            }
            let root = tape.add_weighted(&terms);
            store.zero_grads();
            tape.backward(root, store, 1.0)?;
            opt.step_masked(store, lrs, |i| unit.contains(&i))?;
        }
        // Validation in eval mode.
        let mut noop = substream(0, "eval-noop");
        let preds: Vec<f64> = val
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mut tape = Tape::new();
                let p = forward_combo(
                    &mut tape, store, bank, combo, r,
                    cached.map(|(_, h)| &h[i]),
                    false, &mut noop,
                )?;
                Ok(tape.scalar(p))
            })
            .collect::<Result<_>>()?;
        let a = auc(&preds, val_labels)?;
        if a > best.1 {
            best = (epoch, a, snapshot(store, unit));
        } else if epoch - best.0 >= schedule.patience {
            break;
        }
    }
    restore(store, &best.2);
    Ok(())
}

/// Probability node for one combo, from raw features or cached encodings.
fn forward_combo(
    tape: &mut Tape,
    store: &ParamStore,
    bank: &Bank,
    combo: ComboId,
    record: &PatientRecord,
    cached: Option<&[Vec<f64>; 3]>,
    training: bool,
    rng: &mut impl Rng,
) -> Result<crate::numerics::tape::NodeId> {
    match cached {
        Some(h) => {
            let nodes: Vec<_> = combo
                .subset
                .members()
                .iter()
                .map(|m| tape.leaf(h[m.index()].clone()))
                .collect();
            let logits = bank
                .classifier(combo)
                .forward(tape, store, &nodes, training, rng)?;
            Ok(tape.prob_positive(logits))
        }
        None => bank.classify(tape, store, combo, record, training, rng),
    }
}

/// Greedy-decode every record and return eval-mode predictions plus the
/// decoded trajectories.
pub fn greedy_eval(
    store: &ParamStore,
    bank: &Bank,
    policy: &PolicyNet,
    records: &[PatientRecord],
) -> Result<(Vec<f64>, Vec<Trajectory>)> {
    let mut noop = substream(0, "eval-noop");
    let mut preds = Vec::with_capacity(records.len());
    let mut trajs = Vec::with_capacity(records.len());
    for r in records {
        let mut tape = Tape::new();
        let ep = greedy_decode(&mut tape, store, bank, policy, r)?;
        let h = ep.selected_h();
        let logits = bank
            .classifier(ep.trajectory.combo)
            .forward(&mut tape, store, &h, false, &mut noop)?;
        let p = tape.prob_positive(logits);
        preds.push(tape.scalar(p));
        trajs.push(ep.trajectory);
    }
    Ok((preds, trajs))
}

/// REINFORCE training of the selection policy on top of a pretrained bank.
/// One sampled trajectory per record per epoch; temperature annealed
/// linearly; early stopping on greedy-decode validation AUC with best-epoch
/// parameters restored.
pub fn train_adafuse(
    store: &mut ParamStore,
    bank: &Bank,
    policy: &PolicyNet,
    train: &[PatientRecord],
    val: &[PatientRecord],
    schedule: &TrainSchedule,
    reward: &RewardConfig,
    loss_cfg: &LossConfig,
    freeze: &FreezeConfig,
) -> Result<TrainLog> {
    // REINFORCE on this objective has several locally stable policies (each
    // "always use combo X" is self-reinforcing once the entropy bonus decays),
    // and which basin a single run lands in depends on early sampling noise.
    // Run a few restarts whose initial stop biases steer exploration toward
    // different trajectory depths, so the single-, two-, and three-modality
    // basins all get visited, then keep the run whose final policy scores the
    // best pooled-split reward (see selection_reward).
    let all_layers: HashSet<usize> = (0..store.layers.len()).collect();
    let pristine = snapshot(store, &all_layers);
    let sel = SelectionContext::new(store, bank, train, val, schedule.positive_fraction)?;
    let mut best: Option<((f64, f64), TrainLog, Vec<(usize, Vec<f64>, Vec<f64>)>)> = None;
    for restart in 0..schedule.restarts.max(1) {
        restore(store, &pristine);
        if restart > 0 {
            let mut rng = substream_indexed(schedule.seed, "policy-restart", restart as u64);
            policy.reinit(store, &mut rng);
        }
        // Depth steering: 0 starts neutral, 1 biased toward stopping with
        // two modalities, 2 biased toward adding the third, then repeat.
        // Only the starting point differs; every run optimizes the same
        // objective and may leave its assigned depth.
        match restart % 3 {
            1 => {
                for a in 0..3 {
                    store.layer_mut(policy.heads[2]).b[a] = 0.7;
                }
            }
            2 => {
                for a in 0..3 {
                    store.layer_mut(policy.heads[2]).b[a] = -0.7;
                }
            }
            _ => {}
        }
        let (log, sel_score) = train_adafuse_once(
            store, bank, policy, train, val, schedule, reward, loss_cfg, freeze, &sel,
        )?;
        if std::env::var("ADAFUSE_DEBUG_RESTARTS").is_ok() {
            let (_, trajs) = greedy_eval(store, bank, policy, val)?;
            let mut hist: std::collections::HashMap<String, usize> = Default::default();
            for t in &trajs {
                *hist.entry(t.combo.label()).or_default() += 1;
            }
            let mut h: Vec<_> = hist.into_iter().collect();
            h.sort_by(|a, b| b.1.cmp(&a.1));
            eprintln!(
                "restart {restart}: sel_reward {:.4} share {:.3} hist {h:?}",
                sel_score.0, sel_score.1
            );
        }
        if best.as_ref().is_none_or(|(b, _, _)| sel_score > *b) {
            best = Some((sel_score, log, snapshot(store, &all_layers)));
        }
    }
    let (_, log, snap) = best.expect("at least one restart runs");
    restore(store, &snap);
    Ok(log)
}

/// Model-selection scores for policy training. Scores a candidate policy by
/// the combo it decodes for the majority of pooled validation + reward-split
/// records, valued as if applied globally, using predictions from the frozen
/// pretrained bank. Pooling the splits cuts the noise of the selection signal
/// roughly in half versus the validation split alone, and valuing the
/// majority arm (rather than the per-record routing) means a policy cannot
/// win selection by memorizing per-record quirks of the reward split — a
/// committed policy and its routed twin score identically. The BCE component
/// weights classes the way balanced mini-batches do, so selection ranks arms
/// by the same objective the policy gradient optimizes; the ranking component
/// is prevalence-free either way.
struct SelectionContext {
    /// Per-combo frozen-bank predictions over val ++ train, plus labels.
    preds: HashMap<ComboId, Vec<f64>>,
    labels: Vec<u8>,
    /// Positive-class weight in the BCE component (the training batches'
    /// positive fraction).
    positive_fraction: f64,
}

impl SelectionContext {
    fn new(
        store: &ParamStore,
        bank: &Bank,
        train: &[PatientRecord],
        val: &[PatientRecord],
        positive_fraction: f64,
    ) -> Result<Self> {
        let mut preds = HashMap::new();
        let mut labels = labels_of(val);
        labels.extend(labels_of(train));
        for combo in all_combos() {
            let p: Vec<f64> = val
                .iter()
                .map(|r| bank.predict(store, combo, r))
                .chain(train.iter().map(|r| bank.predict(store, combo, r)))
                .collect::<Result<_>>()?;
            preds.insert(combo, p);
        }
        Ok(SelectionContext { preds, labels, positive_fraction })
    }

    /// Reward of `combo` applied to every pooled record, with the BCE term
    /// averaged per class and mixed at the training batches' class balance.
    fn arm_reward(&self, combo: ComboId, reward: &RewardConfig) -> Result<f64> {
        let p = &self.preds[&combo];
        let (mut pos, mut npos, mut neg, mut nneg) = (0.0, 0.0f64, 0.0, 0.0f64);
        for (&p, &y) in p.iter().zip(&self.labels) {
            if y == 1 {
                pos += reward_bce(p, 1);
                npos += 1.0;
            } else {
                neg += reward_bce(p, 0);
                nneg += 1.0;
            }
        }
        let f = self.positive_fraction;
        let bce = f * pos / npos.max(1.0) + (1.0 - f) * neg / nneg.max(1.0);
        let a = auc(p, &self.labels)?;
        Ok(reward.w_bce * bce + reward.w_auc * (2.0 * a - 1.0))
    }

    fn majority_combo(trajs: &[crate::policy::Trajectory]) -> ComboId {
        let mut counts: HashMap<ComboId, usize> = HashMap::new();
        for t in trajs {
            *counts.entry(t.combo).or_default() += 1;
        }
        counts
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1))
            .expect("non-empty trajectories")
            .0
    }
}

#[allow(clippy::too_many_arguments)]
fn train_adafuse_once(
    store: &mut ParamStore,
    bank: &Bank,
    policy: &PolicyNet,
    train: &[PatientRecord],
    val: &[PatientRecord],
    schedule: &TrainSchedule,
    reward: &RewardConfig,
    loss_cfg: &LossConfig,
    freeze: &FreezeConfig,
    sel: &SelectionContext,
) -> Result<(TrainLog, (f64, f64))> {
    schedule.validate()?;
    reward.validate()?;
    let train_labels = labels_of(train);
    let val_labels = labels_of(val);
    // Rewards come from a frozen copy of the pretrained bank. When the live
    // encoders fine-tune (default cell) they do so on the same records the
    // rewards are computed from, and a reward read off the live bank lets
    // whatever combo dominates early memorize that split and self-reinforce
    // regardless of its real quality. The supervised term and the final
    // predictions still use (and train) the live parameters; only the reward
    // and model-selection signals are pinned to the cross-fitted bank.
    let reward_bank = store.clone();

    let mut lrs: HashMap<ParamGroup, f64> = [
        (ParamGroup::StateEncoder, schedule.policy_lr),
        (ParamGroup::PolicyHead, schedule.policy_lr),
    ]
    .into();
    if freeze.train_encoders {
        lrs.insert(ParamGroup::Encoder, schedule.encoder_lr);
    }
    if freeze.train_classifiers {
        lrs.insert(ParamGroup::Classifier, schedule.baseline_lr);
    }

    let all_layers: HashSet<usize> = (0..store.layers.len()).collect();
    let mut opt = AdamW::new(store, schedule.adamw_config());
    let mut log = TrainLog {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_auc: f64::NEG_INFINITY,
    };
    let mut best_score = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut best_snap = snapshot(store, &all_layers);

    for epoch in 0..schedule.epochs {
        let tau = anneal_temperature(
            epoch,
            schedule.anneal_total,
            schedule.tau_init,
            schedule.tau_final,
        );
        // Decay the entropy bonus on the same schedule as the temperature:
        // full strength while exploring, a small floor once annealed, so a
        // modest but consistent advantage can still win the greedy argmax.
        let ent_weight = if schedule.tau_init > schedule.tau_final {
            let frac = (tau - schedule.tau_final) / (schedule.tau_init - schedule.tau_final);
            loss_cfg.lambda_ent * frac.max(0.05)
        } else {
            loss_cfg.lambda_ent
        };
        let mut batch_rng = substream_indexed(schedule.seed, "policy-batches", epoch as u64);
        let batches = balanced_batches(
            &train_labels,
            schedule.batch_size,
            schedule.positive_fraction,
            &mut batch_rng,
        )?;
        let mut epoch_reward = 0.0;
        let mut epoch_entropy = 0.0;
        let mut epoch_loss = 0.0;
        let mut n_samples = 0usize;
        for (bi, batch) in batches.iter().enumerate() {
            let mut tape = Tape::new();
            let mut drop_rng = substream_indexed(
                schedule.seed,
                &format!("policy-dropout-{epoch}"),
                bi as u64,
            );
            let mut episodes = Vec::with_capacity(batch.len());
            let mut p_nodes = Vec::with_capacity(batch.len());
            let mut bce_nodes = Vec::with_capacity(batch.len());
            let mut probs = Vec::with_capacity(batch.len());
            let mut ys = Vec::with_capacity(batch.len());
            for &i in batch {
                let mut ep_rng = substream_indexed(
                    schedule.seed,
                    &format!("episode-{}", train[i].id),
                    epoch as u64,
                );
                let ep =
                    sample_trajectory(&mut tape, store, bank, policy, &train[i], tau, &mut ep_rng)?;
                let h = ep.selected_h();
                let logits = bank.classifier(ep.trajectory.combo).forward(
                    &mut tape,
                    store,
                    &h,
                    true,
                    &mut drop_rng,
                )?;
                let p = tape.prob_positive(logits);
                let b = tape.bce_from_prob(p, train_labels[i]);
                probs.push(bank.predict(&reward_bank, ep.trajectory.combo, &train[i])?);
                ys.push(train_labels[i]);
                episodes.push(ep);
                p_nodes.push(p);
                bce_nodes.push(b);
            }
            let r_auc = reward_auc_batch(&probs, &ys)?;
            let rewards: Vec<f64> = probs
                .iter()
                .zip(&ys)
                .zip(&r_auc)
                .map(|((&p, &y), &ra)| reward.w_bce * reward_bce(p, y) + reward.w_auc * ra)
                .collect();
            let log_probs: Vec<f64> = episodes.iter().map(|e| e.trajectory.log_prob).collect();
            let (_, advantages) = reinforce_loss(&log_probs, &rewards)?;
            let scale = 1.0 / batch.len() as f64;
            let mut terms: Vec<(crate::numerics::tape::NodeId, f64)> = Vec::new();
            for ((ep, adv), bce) in episodes.iter().zip(&advantages).zip(&bce_nodes) {
                for &lp in &ep.log_prob_nodes {
                    terms.push((lp, -adv * scale));
                }
                for &ent in &ep.entropy_nodes {
                    terms.push((ent, -ent_weight * scale));
                }
                terms.push((*bce, loss_cfg.lambda_sup * scale));
            }
            let root = tape.add_weighted(&terms);
            store.zero_grads();
            tape.backward(root, store, 1.0)?;
            opt.step(store, &lrs)?;

            epoch_loss += tape.scalar(root);
            epoch_reward += rewards.iter().sum::<f64>();
            epoch_entropy += episodes
                .iter()
                .map(|e| e.trajectory.step_entropies.iter().sum::<f64>())
                .sum::<f64>();
            n_samples += batch.len();
        }

        let (_, val_trajs) = greedy_eval(store, bank, policy, val)?;
        let val_preds: Vec<f64> = val
            .iter()
            .zip(&val_trajs)
            .map(|(r, t)| bank.predict(&reward_bank, t.combo, r))
            .collect::<Result<_>>()?;
        let val_auc = auc(&val_preds, &val_labels)?;
        // Model selection: score the epoch by its majority greedy arm over
        // the pooled splits (see SelectionContext).
        let (_, fit_trajs) = greedy_eval(store, bank, policy, train)?;
        let mut pooled_trajs = val_trajs;
        pooled_trajs.extend(fit_trajs);
        let majority = SelectionContext::majority_combo(&pooled_trajs);
        let val_reward = sel.arm_reward(majority, reward)?;
        let majority_share = pooled_trajs.iter().filter(|t| t.combo == majority).count() as f64
            / pooled_trajs.len() as f64;
        let score = (val_reward, majority_share);
        log.epochs.push(EpochStats {
            epoch,
            temperature: tau,
            mean_reward: epoch_reward / n_samples as f64,
            mean_entropy: epoch_entropy / n_samples as f64,
            train_loss: epoch_loss / batches.len() as f64,
            val_auc,
        });
        if std::env::var("ADAFUSE_DEBUG_EPOCHS").is_ok() {
            let mut hist: std::collections::HashMap<String, usize> = Default::default();
            for t in &pooled_trajs[..val.len()] {
                *hist.entry(t.combo.label()).or_default() += 1;
            }
            let mut h: Vec<_> = hist.into_iter().collect();
            h.sort_by(|a, b| b.1.cmp(&a.1));
            eprintln!(
                "epoch {epoch}: tau {tau:.3} ent_w {ent_weight:.4} arm {} sel {val_reward:.4} hist {h:?}",
                majority.label()
            );
        }
        // Lexicographic selection: arm value first, then how decisively the
        // policy routes to that arm. Epochs with the same majority arm score
        // identically on value, so the share term picks the least-diluted of
        // them instead of the first one encountered.
        if score > best_score {
            best_score = score;
            log.best_val_auc = val_auc;
            log.best_epoch = epoch;
            best_snap = snapshot(store, &all_layers);
        } else if epoch - log.best_epoch >= schedule.patience {
            break;
        }
    }
    restore(store, &best_snap);
    Ok((log, best_score))
}

/// Cached gate inputs and frozen expert predictions for every record.
fn cache_gate_inputs(
    store: &ParamStore,
    bank: &Bank,
    records: &[PatientRecord],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let combos = all_combos();
    let mut h_cats = Vec::with_capacity(records.len());
    let mut preds = Vec::with_capacity(records.len());
    for r in records {
        let h = encode_record(store, bank, r)?;
        h_cats.push(h.concat());
        preds.push(
            combos
                .iter()
                .map(|c| bank.predict(store, *c, r))
                .collect::<Result<Vec<f64>>>()?,
        );
    }
    Ok((h_cats, preds))
}

enum GateKind<'a> {
    Soft(&'a MoeGate),
    Hard(&'a DynmmGate),
}

/// Shared trainer for the two gating baselines: BCE on the gated prediction
/// with the bank frozen (expert outputs enter as constants).
fn train_gate(
    store: &mut ParamStore,
    bank: &Bank,
    gate: GateKind,
    train: &[PatientRecord],
    val: &[PatientRecord],
    schedule: &TrainSchedule,
) -> Result<TrainLog> {
    schedule.validate()?;
    let train_labels = labels_of(train);
    let val_labels = labels_of(val);
    let (train_h, train_preds) = cache_gate_inputs(store, bank, train)?;
    let (val_h, val_preds) = cache_gate_inputs(store, bank, val)?;
    let lrs: HashMap<ParamGroup, f64> = [(ParamGroup::Gate, schedule.baseline_lr)].into();
    let gate_layers: HashSet<usize> = match &gate {
        GateKind::Soft(g) => [g.l1.0, g.l2.0, g.l3.0].into(),
        GateKind::Hard(g) => [g.l1.0, g.l2.0].into(),
    };
    let tag = match &gate {
        GateKind::Soft(_) => "moe",
        GateKind::Hard(_) => "dynmm",
    };
    let gate_logits = |tape: &mut Tape, store: &ParamStore, x: crate::numerics::tape::NodeId| {
        match &gate {
            GateKind::Soft(g) => {
                let z = tape.affine(store, g.l1, x)?;
                let z = tape.relu(z);
                let z = tape.affine(store, g.l2, z)?;
                let z = tape.relu(z);
                tape.affine(store, g.l3, z)
            }
            GateKind::Hard(g) => {
                let z = tape.affine(store, g.l1, x)?;
                let z = tape.relu(z);
                tape.affine(store, g.l2, z)
            }
        }
    };

    let mut opt = AdamW::new(store, schedule.adamw_config());
    let mut log = TrainLog {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_auc: f64::NEG_INFINITY,
    };
    let mut best_snap = snapshot(store, &gate_layers);
    for epoch in 0..schedule.epochs {
        let tau = anneal_temperature(
            epoch,
            schedule.anneal_total,
            schedule.tau_init,
            schedule.tau_final,
        );
        let mut batch_rng =
            substream_indexed(schedule.seed, &format!("{tag}-batches"), epoch as u64);
        let batches = balanced_batches(
            &train_labels,
            schedule.batch_size,
            schedule.positive_fraction,
            &mut batch_rng,
        )?;
        let mut epoch_loss = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let mut tape = Tape::new();
            let mut noise_rng =
                substream_indexed(schedule.seed, &format!("{tag}-noise-{epoch}"), bi as u64);
            let mut terms = Vec::with_capacity(batch.len());
            for &i in batch {
                let x = tape.leaf(train_h[i].clone());
                let logits = gate_logits(&mut tape, store, x)?;
                let weights = match &gate {
                    GateKind::Soft(_) => tape.softmax_tau(logits, 1.0)?,
                    GateKind::Hard(_) => tape.gumbel_softmax_st(logits, tau, &mut noise_rng)?,
                };
                let p = tape.dot_const(weights, train_preds[i].clone());
                let l = tape.bce_from_prob(p, train_labels[i]);
                terms.push((l, 1.0 / batch.len() as f64));
            }
            let root = tape.add_weighted(&terms);
            store.zero_grads();
            tape.backward(root, store, 1.0)?;
            opt.step(store, &lrs)?;
            epoch_loss += tape.scalar(root);
        }

        // Eval: soft gate averages experts; hard gate takes the argmax path.
        let preds: Vec<f64> = val_h
            .iter()
            .zip(&val_preds)
            .map(|(h, experts)| {
                let mut tape = Tape::new();
                let x = tape.leaf(h.clone());
                let logits = gate_logits(&mut tape, store, x)?;
                match &gate {
                    GateKind::Soft(_) => {
                        let w = tape.softmax_tau(logits, 1.0)?;
                        let p = tape.dot_const(w, experts.clone());
                        Ok(tape.scalar(p))
                    }
                    GateKind::Hard(_) => {
                        let vals = tape.value(logits);
                        let k = vals
                            .iter()
                            .enumerate()
                            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                            .map(|(i, _)| i)
                            .unwrap();
                        Ok(experts[k])
                    }
                }
            })
            .collect::<Result<_>>()?;
        let val_auc = auc(&preds, &val_labels)?;
        log.epochs.push(EpochStats {
            epoch,
            temperature: tau,
            mean_reward: 0.0,
            mean_entropy: 0.0,
            train_loss: epoch_loss / batches.len() as f64,
            val_auc,
        });
        if val_auc > log.best_val_auc {
            log.best_val_auc = val_auc;
            log.best_epoch = epoch;
            best_snap = snapshot(store, &gate_layers);
        } else if epoch - log.best_epoch >= schedule.patience {
            break;
        }
    }
    restore(store, &best_snap);
    Ok(log)
}

/// Train the soft mixture-of-experts gate over the frozen bank.
pub fn train_moe(
    store: &mut ParamStore,
    bank: &Bank,
    gate: &MoeGate,
    train: &[PatientRecord],
    val: &[PatientRecord],
    schedule: &TrainSchedule,
) -> Result<TrainLog> {
    train_gate(store, bank, GateKind::Soft(gate), train, val, schedule)
}

/// Train the one-shot hard gate (straight-through estimator) over the frozen
/// bank.
pub fn train_dynmm(
    store: &mut ParamStore,
    bank: &Bank,
    gate: &DynmmGate,
    train: &[PatientRecord],
    val: &[PatientRecord],
    schedule: &TrainSchedule,
) -> Result<TrainLog> {
    train_gate(store, bank, GateKind::Hard(gate), train, val, schedule)
}
