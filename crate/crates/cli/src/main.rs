//! Command-line driver for the adaptive-fusion experiment pipeline.
//!
//! Every subcommand resolves an [`ExperimentConfig`] the same way: start from
//! a named scenario (or a config file), then apply any flag overrides. Flags
//! beat the config file, which beats scenario defaults. The resolved config is
//! written next to the outputs by `generate-data`, so later commands pick it
//! up automatically and a run directory is self-describing.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use adafuse_core::experiment::{
    quickstart, scenario, stage_ablate_freeze, stage_ablate_objective, stage_analyze_policy,
    stage_evaluate, stage_generate, stage_train_adafuse, stage_train_baselines, stage_train_dynmm,
    stage_train_moe, Artifacts, ExperimentConfig,
};

/// Environment variable naming the default parent directory for run outputs.
const OUT_ROOT_ENV: &str = "ADAFUSE_OUT";

#[derive(Parser)]
#[command(
    name = "adafuse",
    about = "Adaptive multimodal fusion: data generation, training, and evaluation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort and write train/test JSONL files.
    GenerateData(ConfigArgs),
    /// Pretrain the 15-classifier bank and write its checkpoint.
    TrainBaselines(ConfigArgs),
    /// Train the sequential selection policy on top of the pretrained bank.
    TrainAdafuse(ConfigArgs),
    /// Train the soft mixture-of-experts gate baseline.
    TrainMoe(ConfigArgs),
    /// Train the one-shot hard-gate baseline.
    TrainDynmm(ConfigArgs),
    /// Score every trained model on the test set and write results.csv.
    Evaluate(EvaluateArgs),
    /// Summarize the greedy policy's combo choices and skip rates.
    AnalyzePolicy(ConfigArgs),
    /// Re-train the policy across an ablation grid and write one CSV row per cell.
    Ablate(AblateArgs),
    /// Run the whole pipeline (generate through analyze-policy) in one go.
    Quickstart(ConfigArgs),
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Model used as the reference for paired significance tests.
    #[arg(long, default_value = "adafuse")]
    reference: String,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Which ablation grid to run: "freeze" or "objective".
    #[arg(long)]
    grid: String,
}

/// Shared configuration flags. Every field of the experiment config can be
/// overridden; unset flags fall through to the config file, then to the
/// scenario defaults.
#[derive(Args)]
struct ConfigArgs {
    /// Named scenario providing the defaults ("nlst-like" or "demo").
    #[arg(long, default_value = "nlst-like")]
    scenario: String,
    /// JSON config file (e.g. a resolved_config.json from a previous run).
    /// When absent, <out>/resolved_config.json is used if it exists.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root random seed; flows into data generation, init, and sampling.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: $ADAFUSE_OUT or ./runs, plus <scenario>-seed<seed>].
    #[arg(long)]
    out: Option<PathBuf>,

    // Cohort overrides.
    #[arg(long)]
    n_patients: Option<usize>,
    #[arg(long)]
    prevalence: Option<f64>,
    #[arg(long)]
    sigma_a: Option<f64>,
    #[arg(long)]
    sigma_b: Option<f64>,
    #[arg(long)]
    sigma_c: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    steepness: Option<f64>,

    // Split overrides.
    #[arg(long)]
    train_ratio: Option<f64>,
    #[arg(long)]
    fit_ratio: Option<f64>,
    #[arg(long)]
    bank_ratio: Option<f64>,

    // Bank pretraining overrides.
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    pretrain_patience: Option<usize>,

    // Policy/gate training overrides.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    positive_fraction: Option<f64>,
    #[arg(long)]
    policy_lr: Option<f64>,
    #[arg(long)]
    encoder_lr: Option<f64>,
    #[arg(long)]
    baseline_lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    tau_init: Option<f64>,
    #[arg(long)]
    tau_final: Option<f64>,
    #[arg(long)]
    anneal_total: Option<usize>,

    // Objective overrides.
    #[arg(long)]
    w_bce: Option<f64>,
    #[arg(long)]
    w_auc: Option<f64>,
    #[arg(long)]
    lambda_ent: Option<f64>,
    #[arg(long)]
    lambda_sup: Option<f64>,

    // Freeze-grid overrides.
    #[arg(long)]
    train_encoders: Option<bool>,
    #[arg(long)]
    train_classifiers: Option<bool>,

    #[arg(long)]
    bootstrap_iters: Option<usize>,
}

impl ConfigArgs {
    fn out_dir(&self) -> PathBuf {
        if let Some(out) = &self.out {
            return out.clone();
        }
        let root = std::env::var_os(OUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"));
        let seed = self.seed.unwrap_or(0);
        root.join(format!("{}-seed{}", self.scenario, seed))
    }

    /// Defaults, then config file, then flags.
    fn resolve(&self) -> Result<(ExperimentConfig, Artifacts)> {
        let out = self.out_dir();
        let arts = Artifacts::new(&out);
        let file = self.config.clone().or_else(|| {
            let resolved = arts.resolved_config();
            resolved.exists().then_some(resolved)
        });
        let mut cfg = match &file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
            None => scenario(&self.scenario, self.seed.unwrap_or(0))?,
        };
        self.apply_overrides(&mut cfg);
        cfg.validate()?;
        Ok((cfg, arts))
    }

    fn apply_overrides(&self, cfg: &mut ExperimentConfig) {
        if let Some(seed) = self.seed {
            cfg.seed = seed;
            cfg.data.seed = seed;
            cfg.pretrain.seed = seed;
            cfg.policy.seed = seed;
        }
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag { cfg.$($field).+ = v; })*
            };
        }
        set! {
            n_patients => data.n_patients,
            prevalence => data.prevalence,
            sigma_a => data.sigma_a,
            sigma_b => data.sigma_b,
            sigma_c => data.sigma_c,
            rho => data.rho,
            steepness => data.steepness,
            train_ratio => train_ratio,
            fit_ratio => fit_ratio,
            bank_ratio => bank_ratio,
            pretrain_epochs => pretrain.epochs,
            pretrain_patience => pretrain.patience,
            epochs => policy.epochs,
            batch_size => policy.batch_size,
            positive_fraction => policy.positive_fraction,
            policy_lr => policy.policy_lr,
            encoder_lr => policy.encoder_lr,
            baseline_lr => policy.baseline_lr,
            weight_decay => policy.weight_decay,
            patience => policy.patience,
            tau_init => policy.tau_init,
            tau_final => policy.tau_final,
            anneal_total => policy.anneal_total,
            w_bce => reward.w_bce,
            w_auc => reward.w_auc,
            lambda_ent => loss.lambda_ent,
            lambda_sup => loss.lambda_sup,
            train_encoders => freeze.train_encoders,
            train_classifiers => freeze.train_classifiers,
            bootstrap_iters => bootstrap_iters,
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData(args) => {
            let (cfg, arts) = args.resolve()?;
            stage_generate(&cfg, &arts)?;
            println!(
                "wrote {} and {}",
                arts.train_data().display(),
                arts.test_data().display()
            );
        }
        Command::TrainBaselines(args) => {
            let (cfg, arts) = args.resolve()?;
            stage_train_baselines(&cfg, &arts)?;
            println!("wrote {}", arts.baselines_csv().display());
        }
        Command::TrainAdafuse(args) => {
            let (cfg, arts) = args.resolve()?;
            let val = stage_train_adafuse(&cfg, &arts, &cfg.freeze, &cfg.loss)?;
            println!("best validation AUC {val:.4}");
        }
        Command::TrainMoe(args) => {
            let (cfg, arts) = args.resolve()?;
            let val = stage_train_moe(&cfg, &arts)?;
            println!("best validation AUC {val:.4}");
        }
        Command::TrainDynmm(args) => {
            let (cfg, arts) = args.resolve()?;
            let val = stage_train_dynmm(&cfg, &arts)?;
            println!("best validation AUC {val:.4}");
        }
        Command::Evaluate(args) => {
            if args.reference != "adafuse" {
                bail!(
                    "unsupported reference model '{}' (only adafuse)",
                    args.reference
                );
            }
            let (cfg, arts) = args.config.resolve()?;
            let outcomes = stage_evaluate(&cfg, &arts)?;
            for o in &outcomes {
                println!(
                    "{:<16} auc {:.4} ci [{:.4}, {:.4}] {:.3} mflops",
                    o.row.name, o.row.auc, o.row.ci_low, o.row.ci_high, o.row.mean_mflops
                );
            }
            println!("wrote {}", arts.results_csv().display());
        }
        Command::AnalyzePolicy(args) => {
            let (_cfg, arts) = args.resolve()?;
            let report = stage_analyze_policy(&arts)?;
            print!("{report}");
        }
        Command::Ablate(args) => {
            let (cfg, arts) = args.config.resolve()?;
            let rows = match args.grid.as_str() {
                "freeze" => stage_ablate_freeze(&cfg, &arts)?,
                "objective" => stage_ablate_objective(&cfg, &arts)?,
                other => bail!("unknown ablation grid '{other}' (expected freeze or objective)"),
            };
            for r in &rows {
                println!(
                    "{:<24} val {:.4} test {:.4} support {}",
                    r.label, r.val_auc, r.test_auc, r.support
                );
            }
            println!("wrote {}", arts.ablation_csv(&args.grid).display());
        }
        Command::Quickstart(args) => {
            let (cfg, arts) = args.resolve()?;
            let outcomes = quickstart(&cfg, &arts.root)?;
            for o in &outcomes {
                println!(
                    "{:<16} auc {:.4} ci [{:.4}, {:.4}] {:.3} mflops",
                    o.row.name, o.row.auc, o.row.ci_low, o.row.ci_high, o.row.mean_mflops
                );
            }
            println!("artifacts under {}", arts.root.display());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
