//! Command-line front end for the `utal` binary.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{Overrides, RunConfig};
use crate::data::{
    build_training_set, generate_synthetic_dataset, load_dataset, save_dataset, Dataset, Subset,
};
use crate::detect::{detections_csv, evaluate, OracleHead, ProposalHead};
use crate::error::{Error, Result};
use crate::losses::ConditionMode;
use crate::model::{
    load_checkpoint, positive_statistics, positive_statistics_csv, save_checkpoint, train,
    CheckpointMeta, LossMode, Model,
};
use crate::verify::{self, linspace, loss_surface_csv, ExpectationForm, Selector};

pub const CHECKPOINT_FORMAT: &str = "utal-checkpoint-v1";

#[derive(Debug, Parser)]
#[command(
    name = "utal",
    version,
    about = "Temporal action localization with boundary uncertainty"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// `key = value` config file; sections may be written as dotted keys.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, env = "UTAL_SEED")]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub loss: Option<LossMode>,
    #[arg(long, global = true, value_enum)]
    pub condition_mode: Option<ConditionArg>,
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Override one config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ConditionArg {
    He,
    Paper,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on the train subset of a dataset.
    Train {
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Start from the weights of an existing checkpoint.
        #[arg(long, value_name = "CHECKPOINT")]
        init: Option<PathBuf>,
    },
    /// Detect and score on a dataset subset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Use ground-truth class and offsets instead of a model.
        #[arg(long, conflicts_with = "checkpoint")]
        oracle: bool,
        #[arg(long, value_enum, default_value = "test")]
        subset: SubsetArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the numerical verification suites.
    Verify {
        /// all, expectation, gradients, kl, monotonicity or mining.
        #[arg(default_value = "all")]
        suite: String,
        /// Expectation form under test.
        #[arg(long, value_enum, default_value = "corrected")]
        expectation_form: FormArg,
        /// Also write the report and loss-surface CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write loss surfaces over a (d, σ) grid.
    Curves {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3.0)]
        d_max: f64,
        #[arg(long, default_value_t = 121)]
        d_points: usize,
        #[arg(long, default_value_t = 0.1)]
        sigma_min: f64,
        #[arg(long, default_value_t = 3.0)]
        sigma_max: f64,
        #[arg(long, default_value_t = 30)]
        sigma_points: usize,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SubsetArg {
    Train,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormArg {
    Corrected,
    Printed,
}

impl CommonArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let overrides = Overrides {
            seed: self.seed,
            threads: self.threads,
            loss: self.loss,
            condition_mode: self.condition_mode.map(|c| match c {
                ConditionArg::He => ConditionMode::He,
                ConditionArg::Paper => ConditionMode::Paper,
            }),
            set: self.set.clone(),
        };
        RunConfig::resolve(self.config.as_deref(), &overrides)
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write(path, &text)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn init_threads(n: usize) {
    // a second call in the same process keeps the first pool
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
    {
        log::debug!("thread pool already set: {e}");
    }
}

fn check_dataset_shape(num_classes: usize, d_feat: usize, data: &Dataset) -> Result<()> {
    if num_classes != data.num_classes || d_feat != data.d_feat {
        return Err(Error::ShapeMismatch {
            what: "checkpoint vs dataset".into(),
            expected: format!("d_feat {d_feat}, {num_classes} classes"),
            found: format!("d_feat {}, {} classes", data.d_feat, data.num_classes),
        });
    }
    Ok(())
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = generate_synthetic_dataset(&cfg.synth, cfg.seed)?;
    create_dir(out)?;
    let manifest = save_dataset(&data, out, Some(cfg.echo()))?;
    write_json(&out.join("run_config.json"), &cfg.echo())?;
    let train_n = data.subset(Subset::Train).count();
    println!("wrote {}", manifest.display());
    println!(
        "videos {} (train {}, test {}), classes {}, d_feat {}",
        data.videos.len(),
        train_n,
        data.videos.len() - train_n,
        data.num_classes,
        data.d_feat
    );
    println!("instances per class {:?}", data.instances_per_class());
    Ok(())
}

fn train_cmd(cfg: &RunConfig, data_path: &Path, out: &Path, init: Option<&Path>) -> Result<()> {
    let data = load_dataset(data_path)?;
    let model = match init {
        Some(p) => {
            let (model, meta) = load_checkpoint(p)?;
            check_dataset_shape(meta.num_classes, model.spec.d_feat, &data)?;
            if model.spec.uncertain != cfg.train.loss_mode.is_uncertain()
                || model.spec.k != cfg.proposals.k
            {
                return Err(Error::ShapeMismatch {
                    what: format!("initial checkpoint for loss `{}`", cfg.train.loss_mode),
                    expected: format!(
                        "uncertain head {}, k {}",
                        cfg.train.loss_mode.is_uncertain(),
                        cfg.proposals.k
                    ),
                    found: format!(
                        "uncertain head {}, k {}",
                        model.spec.uncertain, model.spec.k
                    ),
                });
            }
            model
        }
        None => Model::init(&cfg.train, data.d_feat, data.num_classes, cfg.proposals.k),
    };
    let set = build_training_set(&data, Subset::Train, &cfg.proposals);
    log::info!("{} proposals, {} positive", set.len(), set.num_positives());
    let (model, curve) = train(model, &set, &cfg.train)?;

    create_dir(out)?;
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.into(),
        spec: model.spec.clone(),
        num_classes: data.num_classes,
        train: cfg.train.clone(),
        proposals: cfg.proposals.clone(),
        run_config: Some(cfg.echo()),
    };
    let ckpt = out.join("model.utal");
    save_checkpoint(&model, &meta, &ckpt)?;
    write(&out.join("loss_curve.csv"), &curve.to_csv())?;
    let stats = positive_statistics(&model, &set);
    write(&out.join("sigma.csv"), &positive_statistics_csv(&stats))?;
    write_json(&out.join("run_config.json"), &cfg.echo())?;

    println!("wrote {}", ckpt.display());
    if let Some(last) = curve.epochs.last() {
        println!(
            "epoch {}: bin {:.4} cls {:.4} reg {:.4}",
            last.epoch, last.bin, last.cls, last.reg
        );
    }
    Ok(())
}

fn eval_cmd(
    cfg: &RunConfig,
    data_path: &Path,
    checkpoint: Option<&Path>,
    subset: SubsetArg,
    out: Option<&Path>,
) -> Result<()> {
    let data = load_dataset(data_path)?;
    let data = match subset {
        SubsetArg::Train => data.only(Subset::Train),
        SubsetArg::Test => data.only(Subset::Test),
        SubsetArg::All => data,
    };
    let oracle;
    let loaded;
    let (head, proposals, model_echo): (&dyn ProposalHead, _, _) = match checkpoint {
        Some(p) => {
            loaded = load_checkpoint(p)?;
            let (model, meta) = &loaded;
            check_dataset_shape(meta.num_classes, model.spec.d_feat, &data)?;
            (
                model,
                meta.proposals.clone(),
                serde_json::to_value(&meta.train).ok(),
            )
        }
        None => {
            oracle = OracleHead {
                num_classes: data.num_classes,
            };
            (&oracle, cfg.proposals.clone(), None)
        }
    };
    let (mut report, dets) = evaluate(head, &data, &proposals, &cfg.detect);
    report.config = Some(serde_json::json!({
        "run": cfg.echo(),
        "model": model_echo,
        "proposals": proposals,
    }));
    if report.empty_detections {
        eprintln!("warning: no detections above the score floor");
    }
    let header = report
        .thresholds
        .iter()
        .map(|t| format!("{:>6}", format!("{t:.1}")))
        .collect::<String>();
    let row = report
        .map_values()
        .iter()
        .map(|m| format!("{:>6.1}", 100.0 * m))
        .collect::<String>();
    println!("tIoU {header}");
    println!("mAP  {row}");
    if let Some(dir) = out {
        create_dir(dir)?;
        write_json(&dir.join("metrics.json"), &report)?;
        write(&dir.join("detections.csv"), &detections_csv(&dets))?;
    }
    Ok(())
}

fn verify_cmd(cfg: &RunConfig, suite: &str, form: FormArg, out: Option<&Path>) -> Result<()> {
    let selector: Selector = suite.parse()?;
    let form = match form {
        FormArg::Corrected => ExpectationForm::Corrected,
        FormArg::Printed => ExpectationForm::Printed,
    };
    let report = verify::run_with_form(selector, cfg.seed, form);
    print!("{}", report.text());
    if let Some(dir) = out {
        create_dir(dir)?;
        write_json(&dir.join("verify_report.json"), &report)?;
        write_surfaces(dir, 3.0, 121, 0.1, 3.0, 30)?;
    }
    if report.passed() {
        println!("verification passed");
        Ok(())
    } else {
        let failed: Vec<&str> = report
            .suites
            .iter()
            .filter(|s| !s.passed())
            .map(|s| s.name.as_str())
            .collect();
        Err(Error::Verification(if failed.is_empty() {
            "printed closed form was not rejected".into()
        } else {
            failed.join(", ")
        }))
    }
}

fn write_surfaces(
    dir: &Path,
    d_max: f64,
    d_points: usize,
    sigma_min: f64,
    sigma_max: f64,
    sigma_points: usize,
) -> Result<PathBuf> {
    if !(d_max > 0.0) || d_points < 2 {
        return Err(Error::config(
            "d_points",
            "need d_max > 0 and at least 2 points",
        ));
    }
    if !(0.0 < sigma_min && sigma_min < sigma_max) || sigma_points < 2 {
        return Err(Error::config(
            "sigma_points",
            "need 0 < sigma_min < sigma_max and at least 2 points",
        ));
    }
    let csv = loss_surface_csv(
        &linspace(-d_max, d_max, d_points),
        &linspace(sigma_min, sigma_max, sigma_points),
    );
    let path = dir.join("loss_surfaces.csv");
    write(&path, &csv)?;
    Ok(path)
}

fn dispatch(cli: Cli) -> Result<()> {
    let cfg = cli.common.resolve()?;
    init_threads(cfg.threads);
    match &cli.command {
        Command::GenData { out } => gen_data(&cfg, out),
        Command::Train { data, out, init } => train_cmd(&cfg, data, out, init.as_deref()),
        Command::Eval {
            data,
            checkpoint,
            subset,
            out,
            ..
        } => eval_cmd(&cfg, data, checkpoint.as_deref(), *subset, out.as_deref()),
        Command::Verify {
            suite,
            expectation_form,
            out,
        } => verify_cmd(&cfg, suite, *expectation_form, out.as_deref()),
        Command::Curves {
            out,
            d_max,
            d_points,
            sigma_min,
            sigma_max,
            sigma_points,
        } => {
            create_dir(out)?;
            let path = write_surfaces(
                out,
                *d_max,
                *d_points,
                *sigma_min,
                *sigma_max,
                *sigma_points,
            )?;
            write_json(&out.join("run_config.json"), &cfg.echo())?;
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
