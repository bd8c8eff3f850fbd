//! End-to-end experiment orchestration shared by the CLI and the integration
//! tests: scenario presets, staged artifact production (data → baselines →
//! gated models → evaluation), and the single-command quickstart pipeline.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_into_prefix, save_checkpoint, ModelKind};
use crate::data::{
    generate_cohort, read_dataset, split_dataset, write_dataset, PatientRecord, SyntheticConfig,
};
use crate::error::{Error, Result};
use crate::eval::{
    auc, bootstrap_ci, delong_test, eval_rows_to_csv, policy_report, prediction_correlation,
    EvalRow,
};
use crate::models::{
    all_combos, adafuse_path_flops, combo_path_flops, dynmm_eval_flops, mflops, moe_total_flops,
    Bank, DynmmGate, MoeGate,
};
use crate::numerics::{tape::Tape, ParamStore};
use crate::policy::{format_trajectory_line, parse_trajectory_line, PolicyNet, Trajectory};
use crate::rl::{
    greedy_eval, pretrain_baselines, train_adafuse, train_dynmm, train_moe, FreezeConfig,
    LossConfig, RewardConfig, TrainSchedule,
};
use crate::rng::substream;

/// Everything needed to reproduce one experiment run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: SyntheticConfig,
    /// Fraction of the cohort used for training (rest is the test set).
    pub train_ratio: f64,
    /// Fraction of the training part kept for training (rest is validation).
    pub fit_ratio: f64,
    /// Fraction of the fit part used to pretrain the baseline bank; the
    /// remainder trains the gating models on records the frozen classifiers
    /// have never seen (keeps training-batch rewards honest).
    pub bank_ratio: f64,
    pub pretrain: TrainSchedule,
    pub policy: TrainSchedule,
    pub reward: RewardConfig,
    pub loss: LossConfig,
    pub freeze: FreezeConfig,
    pub bootstrap_iters: usize,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("train_ratio", self.train_ratio),
            ("fit_ratio", self.fit_ratio),
            ("bank_ratio", self.bank_ratio),
        ] {
            if !(0.0..1.0).contains(&r) || r == 0.0 {
                return Err(Error::Config(format!("{name} {r} outside (0,1)")));
            }
        }
        self.pretrain.validate()?;
        self.policy.validate()?;
        self.reward.validate()?;
        self.data.validate()?;
        Ok(())
    }
}

/// Scenario mirroring the shape of the screening cohort study: ~1850 training
/// and ~460 test patients at 6.4% prevalence, a strong imaging modality, a
/// moderate clinical modality, and a pure-noise text modality.
pub fn nlst_like(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        data: SyntheticConfig {
            n_patients: 2309,
            prevalence: 0.064,
            sigma_a: 1.5,
            sigma_b: 0.8,
            sigma_c: 0.0,
            rho: 0.0,
            steepness: 6.0,
            seed,
        },
        train_ratio: 0.8,
        fit_ratio: 0.78,
        bank_ratio: 0.5,
        pretrain: TrainSchedule {
            epochs: 40,
            patience: 15,
            seed,
            ..TrainSchedule::default()
        },
        policy: TrainSchedule {
            epochs: 40,
            patience: 15,
            anneal_total: 40,
            restarts: 4,
            seed,
            ..TrainSchedule::default()
        },
        reward: RewardConfig::default(),
        loss: LossConfig::default(),
        freeze: FreezeConfig::default(),
        bootstrap_iters: 1000,
        seed,
    }
}

/// Small, fast scenario for smoke tests and the quickstart walkthrough.
pub fn demo(seed: u64) -> ExperimentConfig {
    let mut cfg = nlst_like(seed);
    cfg.data.n_patients = 400;
    cfg.data.prevalence = 0.25;
    cfg.pretrain.epochs = 4;
    cfg.pretrain.patience = 4;
    cfg.policy.epochs = 3;
    cfg.policy.patience = 3;
    cfg.policy.anneal_total = 3;
    cfg.bootstrap_iters = 200;
    cfg
}

pub fn scenario(name: &str, seed: u64) -> Result<ExperimentConfig> {
    match name {
        "nlst-like" => Ok(nlst_like(seed)),
        "demo" => Ok(demo(seed)),
        other => Err(Error::Config(format!(
            "unknown scenario '{other}' (expected nlst-like or demo)"
        ))),
    }
}

/// Canonical artifact locations inside one experiment directory.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub root: PathBuf,
}

impl Artifacts {
    pub fn new(root: &Path) -> Self {
        Artifacts {
            root: root.to_path_buf(),
        }
    }
    pub fn train_data(&self) -> PathBuf {
        self.root.join("train.jsonl")
    }
    pub fn test_data(&self) -> PathBuf {
        self.root.join("test.jsonl")
    }
    pub fn resolved_config(&self) -> PathBuf {
        self.root.join("resolved_config.json")
    }
    pub fn bank_ckpt(&self) -> PathBuf {
        self.root.join("bank.ckpt")
    }
    pub fn adafuse_ckpt(&self) -> PathBuf {
        self.root.join("adafuse.ckpt")
    }
    pub fn moe_ckpt(&self) -> PathBuf {
        self.root.join("moe.ckpt")
    }
    pub fn dynmm_ckpt(&self) -> PathBuf {
        self.root.join("dynmm.ckpt")
    }
    pub fn baselines_csv(&self) -> PathBuf {
        self.root.join("baselines.csv")
    }
    pub fn training_log(&self, tag: &str) -> PathBuf {
        self.root.join(format!("train_log_{tag}.csv"))
    }
    pub fn results_csv(&self) -> PathBuf {
        self.root.join("results.csv")
    }
    pub fn trajectories(&self) -> PathBuf {
        self.root.join("trajectories.tsv")
    }
    pub fn policy_report_csv(&self) -> PathBuf {
        self.root.join("policy_report.csv")
    }
    pub fn ablation_csv(&self, grid: &str) -> PathBuf {
        self.root.join(format!("ablation_{grid}.csv"))
    }

    fn require(&self, path: &Path, produced_by: &str) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "missing artifact {} (run `{produced_by}` first)",
                path.display()
            )))
        }
    }
}

/// Training-side splits derived deterministically from the config.
struct Splits {
    bank_train: Vec<PatientRecord>,
    policy_train: Vec<PatientRecord>,
    val: Vec<PatientRecord>,
}

fn make_splits(cfg: &ExperimentConfig, train: &[PatientRecord]) -> Splits {
    let (fit, val) = split_dataset(train, cfg.fit_ratio, cfg.seed.wrapping_add(1));
    let (bank_train, policy_train) = split_dataset(&fit, cfg.bank_ratio, cfg.seed.wrapping_add(2));
    Splits {
        bank_train,
        policy_train,
        val,
    }
}

/// Deterministic full model assembly. The layer allocation order (bank, then
/// policy, then gates) fixes layer ids so checkpoints can be reloaded by
/// prefix.
pub struct Assembly {
    pub store: ParamStore,
    pub bank: Bank,
    pub policy: PolicyNet,
    pub moe: MoeGate,
    pub dynmm: DynmmGate,
}

pub fn build_assembly(seed: u64) -> Assembly {
    let mut store = ParamStore::new();
    let bank = Bank::new(&mut store, &mut substream(seed, "init-bank"));
    let policy = PolicyNet::new(&mut store, &mut substream(seed, "init-policy"));
    let moe = MoeGate::new(&mut store, &mut substream(seed, "init-moe"));
    let dynmm = DynmmGate::new(&mut store, &mut substream(seed, "init-dynmm"));
    Assembly {
        store,
        bank,
        policy,
        moe,
        dynmm,
    }
}

/// Stage 1: generate the synthetic cohort and write train/test JSONL plus the
/// resolved configuration.
pub fn stage_generate(cfg: &ExperimentConfig, arts: &Artifacts) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(&arts.root)?;
    let (records, _meta) = generate_cohort(&cfg.data)?;
    let (train, test) = split_dataset(&records, cfg.train_ratio, cfg.seed);
    write_dataset(&arts.train_data(), &train)?;
    write_dataset(&arts.test_data(), &test)?;
    let json = serde_json::to_string_pretty(cfg).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(arts.resolved_config(), json + "\n")?;
    Ok(())
}

/// Stage 2: pretrain the baseline bank; writes the bank checkpoint and the
/// per-combo validation AUC table.
pub fn stage_train_baselines(cfg: &ExperimentConfig, arts: &Artifacts) -> Result<()> {
    arts.require(&arts.train_data(), "generate-data")?;
    let train = read_dataset(&arts.train_data())?;
    let splits = make_splits(cfg, &train);
    let mut asm = build_assembly(cfg.seed);
    let aucs = pretrain_baselines(
        &mut asm.store,
        &asm.bank,
        &splits.bank_train,
        &splits.val,
        &splits.policy_train,
        &cfg.pretrain,
    )?;
    // Persist only the bank layers (encoders + classifiers).
    let bank_store = bank_only_store(&asm.store);
    save_checkpoint(&arts.bank_ckpt(), ModelKind::Bank, &bank_store)?;
    let mut csv = String::from("combo,val_auc\n");
    for (c, a) in aucs {
        csv.push_str(&format!("{},{:.6}\n", c.label(), a));
    }
    fs::write(arts.baselines_csv(), csv)?;
    Ok(())
}

/// Bank layers occupy the leading slots of the assembly store.
fn bank_only_store(store: &ParamStore) -> ParamStore {
    let n = store
        .layers
        .iter()
        .take_while(|l| l.name.starts_with("enc_") || l.name.starts_with("clf_"))
        .count();
    ParamStore {
        layers: store.layers[..n].to_vec(),
    }
}

fn load_pretrained_assembly(cfg: &ExperimentConfig, arts: &Artifacts) -> Result<Assembly> {
    arts.require(&arts.bank_ckpt(), "train-baselines")?;
    let mut asm = build_assembly(cfg.seed);
    load_into_prefix(&arts.bank_ckpt(), ModelKind::Bank, &mut asm.store)?;
    Ok(asm)
}

/// Stage 3a: REINFORCE training of the selection policy on top of the
/// pretrained bank.
pub fn stage_train_adafuse(
    cfg: &ExperimentConfig,
    arts: &Artifacts,
    freeze: &FreezeConfig,
    loss: &LossConfig,
) -> Result<f64> {
    arts.require(&arts.train_data(), "generate-data")?;
    let train = read_dataset(&arts.train_data())?;
    let splits = make_splits(cfg, &train);
    let mut asm = load_pretrained_assembly(cfg, arts)?;
    let log = train_adafuse(
        &mut asm.store,
        &asm.bank,
        &asm.policy,
        &splits.policy_train,
        &splits.val,
        &cfg.policy,
        &cfg.reward,
        loss,
        freeze,
    )?;
    save_checkpoint(&arts.adafuse_ckpt(), ModelKind::Adafuse, &asm.store)?;
    fs::write(arts.training_log("adafuse"), log.to_csv())?;
    Ok(log.best_val_auc)
}

/// Stage 3b: train the soft mixture gate.
pub fn stage_train_moe(cfg: &ExperimentConfig, arts: &Artifacts) -> Result<f64> {
    arts.require(&arts.train_data(), "generate-data")?;
    let train = read_dataset(&arts.train_data())?;
    let splits = make_splits(cfg, &train);
    let mut asm = load_pretrained_assembly(cfg, arts)?;
    let log = train_moe(
        &mut asm.store,
        &asm.bank,
        &asm.moe,
        &splits.policy_train,
        &splits.val,
        &cfg.policy,
    )?;
    save_checkpoint(&arts.moe_ckpt(), ModelKind::Moe, &asm.store)?;
    fs::write(arts.training_log("moe"), log.to_csv())?;
    Ok(log.best_val_auc)
}

/// Stage 3c: train the one-shot hard gate.
pub fn stage_train_dynmm(cfg: &ExperimentConfig, arts: &Artifacts) -> Result<f64> {
    arts.require(&arts.train_data(), "generate-data")?;
    let train = read_dataset(&arts.train_data())?;
    let splits = make_splits(cfg, &train);
    let mut asm = load_pretrained_assembly(cfg, arts)?;
    let log = train_dynmm(
        &mut asm.store,
        &asm.bank,
        &asm.dynmm,
        &splits.policy_train,
        &splits.val,
        &cfg.policy,
    )?;
    save_checkpoint(&arts.dynmm_ckpt(), ModelKind::Dynmm, &asm.store)?;
    fs::write(arts.training_log("dynmm"), log.to_csv())?;
    Ok(log.best_val_auc)
}

/// Test-set outcome of one model.
#[derive(Debug, Clone)]
pub struct ModelOutcome {
    pub row: EvalRow,
    pub predictions: Vec<f64>,
}

/// Stage 4: evaluate every model (15 fixed combos, the adaptive policy, and
/// both gates) on the test set. Writes results.csv, the trajectory dump, and
/// a significance table comparing the adaptive policy against each fixed
/// combo.
pub fn stage_evaluate(cfg: &ExperimentConfig, arts: &Artifacts) -> Result<Vec<ModelOutcome>> {
    arts.require(&arts.test_data(), "generate-data")?;
    arts.require(&arts.bank_ckpt(), "train-baselines")?;
    arts.require(&arts.adafuse_ckpt(), "train-adafuse")?;
    let test = read_dataset(&arts.test_data())?;
    let labels: Vec<u8> = test.iter().map(|r| r.label).collect();
    // Fixed-combo baselines are scored with the pretrained bank; the policy
    // row below uses the adafuse checkpoint, whose encoders may have been
    // fine-tuned during policy training.
    let mut bank_asm = build_assembly(cfg.seed);
    load_into_prefix(&arts.bank_ckpt(), ModelKind::Bank, &mut bank_asm.store)?;
    let mut asm = build_assembly(cfg.seed);
    load_into_prefix(&arts.adafuse_ckpt(), ModelKind::Adafuse, &mut asm.store)?;

    let mut outcomes = Vec::new();
    let make_row = |name: String, preds: Vec<f64>, mean_mflops: f64| -> Result<ModelOutcome> {
        let a = auc(&preds, &labels)?;
        let (lo, hi) = bootstrap_ci(&preds, &labels, cfg.bootstrap_iters, cfg.seed)?;
        Ok(ModelOutcome {
            row: EvalRow {
                name,
                auc: a,
                ci_low: lo,
                ci_high: hi,
                mean_mflops,
            },
            predictions: preds,
        })
    };

    for combo in all_combos() {
        let preds: Vec<f64> = test
            .iter()
            .map(|r| bank_asm.bank.predict(&bank_asm.store, combo, r))
            .collect::<Result<_>>()?;
        outcomes.push(make_row(
            combo.label(),
            preds,
            mflops(combo_path_flops(combo)),
        )?);
    }

    // Adaptive policy: greedy decoding, lazy-path compute accounting.
    let (preds, trajs) = greedy_eval(&asm.store, &asm.bank, &asm.policy, &test)?;
    let mean_flops = trajs
        .iter()
        .map(|t| adafuse_path_flops(t.combo, t.steps_taken()) as f64)
        .sum::<f64>()
        / trajs.len() as f64;
    outcomes.push(make_row(
        "adafuse".into(),
        preds,
        mean_flops / 1.0e6,
    )?);
    let mut dump = String::new();
    for (r, t) in test.iter().zip(&trajs) {
        dump.push_str(&format_trajectory_line(&r.id, t));
        dump.push('\n');
    }
    fs::write(arts.trajectories(), dump)?;

    if arts.moe_ckpt().exists() {
        let mut moe_asm = build_assembly(cfg.seed);
        load_into_prefix(&arts.moe_ckpt(), ModelKind::Moe, &mut moe_asm.store)?;
        let preds: Vec<f64> = test
            .iter()
            .map(|r| {
                let mut tape = Tape::new();
                let (p, _, _) = crate::models::moe_forward(
                    &mut tape,
                    &moe_asm.store,
                    &moe_asm.bank,
                    &moe_asm.moe,
                    r,
                )?;
                Ok(tape.scalar(p))
            })
            .collect::<Result<_>>()?;
        outcomes.push(make_row("moe".into(), preds, mflops(moe_total_flops()))?);
    }
    if arts.dynmm_ckpt().exists() {
        let mut dy_asm = build_assembly(cfg.seed);
        load_into_prefix(&arts.dynmm_ckpt(), ModelKind::Dynmm, &mut dy_asm.store)?;
        let mut noop = substream(0, "eval-noop");
        let mut preds = Vec::with_capacity(test.len());
        let mut flops_sum = 0.0;
        for r in &test {
            let mut tape = Tape::new();
            let (p, combo) = crate::models::dynmm_forward(
                &mut tape,
                &dy_asm.store,
                &dy_asm.bank,
                &dy_asm.dynmm,
                r,
                1.0,
                false,
                &mut noop,
            )?;
            preds.push(tape.scalar(p));
            flops_sum += dynmm_eval_flops(combo) as f64;
        }
        outcomes.push(make_row(
            "dynmm".into(),
            preds,
            flops_sum / test.len() as f64 / 1.0e6,
        )?);
    }

    let rows: Vec<EvalRow> = outcomes.iter().map(|o| o.row.clone()).collect();
    fs::write(arts.results_csv(), eval_rows_to_csv(&rows))?;

    // Paired comparisons and prediction correlation against the adaptive
    // policy.
    let ada = outcomes
        .iter()
        .find(|o| o.row.name == "adafuse")
        .expect("adafuse evaluated above");
    let ada_preds = ada.predictions.clone();
    let mut sig = String::from("model,auc,delta_auc,z,p_value,pred_correlation\n");
    for o in &outcomes {
        if o.row.name == "adafuse" {
            continue;
        }
        let d = delong_test(&ada_preds, &o.predictions, &labels)?;
        let corr = prediction_correlation(&ada_preds, &o.predictions)?;
        sig.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            o.row.name,
            o.row.auc,
            d.auc_a - d.auc_b,
            d.z,
            d.p_value,
            corr
        ));
    }
    fs::write(arts.root.join("significance.csv"), sig)?;
    Ok(outcomes)
}

/// Stage 5: summarize the trajectory dump into combo usage and skip rates.
pub fn stage_analyze_policy(arts: &Artifacts) -> Result<String> {
    arts.require(&arts.trajectories(), "evaluate")?;
    let text = fs::read_to_string(arts.trajectories())?;
    let combos = all_combos();
    let mut trajectories = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (_, combo_label) = parse_trajectory_line(line)?;
        let combo = combos
            .iter()
            .find(|c| c.label() == combo_label)
            .copied()
            .ok_or_else(|| Error::Eval(format!("unknown combo '{combo_label}' in dump")))?;
        trajectories.push(Trajectory {
            actions: Vec::new(),
            step_log_probs: Vec::new(),
            step_entropies: Vec::new(),
            combo,
            log_prob: 0.0,
        });
    }
    let report = policy_report(&trajectories);
    let csv = report.to_csv();
    fs::write(arts.policy_report_csv(), &csv)?;
    Ok(csv)
}

/// One row of the freeze-configuration ablation.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub val_auc: f64,
    pub test_auc: f64,
    pub support: usize,
}

fn adafuse_test_outcome(
    cfg: &ExperimentConfig,
    arts: &Artifacts,
) -> Result<(f64, usize)> {
    let test = read_dataset(&arts.test_data())?;
    let labels: Vec<u8> = test.iter().map(|r| r.label).collect();
    let mut asm = build_assembly(cfg.seed);
    load_into_prefix(&arts.adafuse_ckpt(), ModelKind::Adafuse, &mut asm.store)?;
    let (preds, trajs) = greedy_eval(&asm.store, &asm.bank, &asm.policy, &test)?;
    let report = policy_report(&trajs);
    Ok((auc(&preds, &labels)?, report.support()))
}

/// Ablation over the four freeze cells. Each cell retrains the policy from
/// the same pretrained bank; results land in ablation_freeze.csv.
pub fn stage_ablate_freeze(cfg: &ExperimentConfig, arts: &Artifacts) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for cell in FreezeConfig::all_cells() {
        let val = stage_train_adafuse(cfg, arts, &cell, &cfg.loss)?;
        let (test_auc, support) = adafuse_test_outcome(cfg, arts)?;
        rows.push(AblationRow {
            label: cell.label(),
            val_auc: val,
            test_auc,
            support,
        });
    }
    write_ablation_csv(arts, "freeze", &rows)?;
    Ok(rows)
}

/// Ablation over the training objective: default, no entropy bonus, no
/// supervised term, unweighted reward.
pub fn stage_ablate_objective(
    cfg: &ExperimentConfig,
    arts: &Artifacts,
) -> Result<Vec<AblationRow>> {
    let variants: Vec<(String, RewardConfig, LossConfig)> = vec![
        ("default".into(), cfg.reward, cfg.loss),
        (
            "no-entropy".into(),
            cfg.reward,
            LossConfig {
                lambda_ent: 0.0,
                ..cfg.loss
            },
        ),
        (
            "no-supervised".into(),
            cfg.reward,
            LossConfig {
                lambda_sup: 0.0,
                ..cfg.loss
            },
        ),
        (
            "bce-only-reward".into(),
            RewardConfig {
                w_bce: 1.0,
                w_auc: 0.0,
            },
            cfg.loss,
        ),
    ];
    let mut rows = Vec::new();
    for (label, reward, loss) in variants {
        let mut cfg_v = cfg.clone();
        cfg_v.reward = reward;
        let val = stage_train_adafuse(&cfg_v, arts, &cfg.freeze, &loss)?;
        let (test_auc, support) = adafuse_test_outcome(cfg, arts)?;
        rows.push(AblationRow {
            label,
            val_auc: val,
            test_auc,
            support,
        });
    }
    write_ablation_csv(arts, "objective", &rows)?;
    Ok(rows)
}

fn write_ablation_csv(arts: &Artifacts, grid: &str, rows: &[AblationRow]) -> Result<()> {
    let mut csv = String::from("config,val_auc,test_auc,combo_support\n");
    for r in rows {
        csv.push_str(&format!(
            "{},{:.6},{:.6},{}\n",
            r.label, r.val_auc, r.test_auc, r.support
        ));
    }
    fs::write(arts.ablation_csv(grid), csv)?;
    Ok(())
}

/// The full pipeline in one call: generate → pretrain → train all three
/// gated models → evaluate → policy report. Returns the evaluated rows.
pub fn quickstart(cfg: &ExperimentConfig, root: &Path) -> Result<Vec<ModelOutcome>> {
    let arts = Artifacts::new(root);
    stage_generate(cfg, &arts)?;
    stage_train_baselines(cfg, &arts)?;
    stage_train_adafuse(cfg, &arts, &cfg.freeze, &cfg.loss)?;
    stage_train_moe(cfg, &arts)?;
    stage_train_dynmm(cfg, &arts)?;
    let outcomes = stage_evaluate(cfg, &arts)?;
    stage_analyze_policy(&arts)?;
    Ok(outcomes)
}
