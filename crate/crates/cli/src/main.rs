use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{error::ErrorKind, ArgAction, Args, Parser, Subcommand};
use serde_json::json;

use disc_grade_core::checkpoint::Stage;
use disc_grade_core::config::{read_config_value, RunConfig};
use disc_grade_core::data_model::DatasetManifest;
use disc_grade_core::models::Preset;
use disc_grade_core::phantom::{generate_phantom_dataset, PhantomConfig};
use disc_grade_core::pipeline::{
    collect_histories, evaluate_checkpoint, export_rois, overlays_for, regress_centers, run_all, EvaluateOptions,
    RunAllOptions, RunManifest, DATA_DIR, REPORT_DIR, SPLIT_CSV,
};
use disc_grade_core::report::{emit_report, MetricsReport};
use disc_grade_core::splitting::{audit_leakage, stratified_disc_split, Partition, SplitAssignment, SplitFractions};
use disc_grade_core::training::{finetune_classifier, pretrain_contrastive, train_roi_regressor, TrainOutcome};
use disc_grade_core::{Error, Result};

/// Disc-level lumbar spinal stenosis grading: phantom data, preprocessing,
/// splitting, three training stages, evaluation and reporting.
#[derive(Parser)]
#[command(name = "disc-grade", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset (16-bit PGM slices plus manifest).
    GenPhantom {
        #[arg(long, default_value_t = 200)]
        patients: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 320)]
        image_size: usize,
        #[arg(long, default_value_t = 9)]
        slices: usize,
        #[arg(long, default_value_t = 0.04)]
        noise: f64,
    },
    /// Export every disc's ROI as an 8-bit PNG.
    Preprocess {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        /// Run config whose `preprocess` table is used.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Stratified, leakage-audited disc-level split.
    Split {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV; defaults to split.csv next to the manifest.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0.7)]
        train: f64,
        #[arg(long, default_value_t = 0.15)]
        val: f64,
        #[arg(long, default_value_t = 0.15)]
        test: f64,
    },
    /// Contrastive pretraining of the encoder.
    Pretrain(TrainArgs),
    /// Grade fine-tuning from a pretraining checkpoint.
    Finetune {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        pretrained: PathBuf,
    },
    /// Disc-center regressor training.
    TrainRoi(TrainArgs),
    /// Evaluate a fine-tuned checkpoint on one partition.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long, default_value = "val")]
        partition: Partition,
        /// Regressor checkpoint, for localization error and predicted crops.
        #[arg(long)]
        roi_ckpt: Option<PathBuf>,
        /// Also classify crops taken at regressor-predicted centers.
        #[arg(long, num_args = 0..=1, require_equals = true, default_value_t = false,
              default_missing_value = "true", action = ArgAction::Set)]
        use_predicted_coords: bool,
        /// Defaults to `eval/` next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plots and tables for a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
        /// Defaults to `<run>/report`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Phantom, split, all three stages, evaluation and report in one go.
    RunAll {
        /// Tiny networks on 256×256 phantoms (the default).
        #[arg(long, conflicts_with = "standard")]
        tiny: bool,
        /// Full-size networks.
        #[arg(long)]
        standard: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "runs/run-all")]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        patients: usize,
        #[arg(long)]
        pretrain_epochs: Option<usize>,
        #[arg(long)]
        finetune_epochs: Option<usize>,
        #[arg(long)]
        roi_epochs: Option<usize>,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Manifest CSV; defaults to `<data-dir>/manifest.csv`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, env = "DISC_GRADE_DATA_DIR", default_value = "data")]
    data_dir: PathBuf,
}

impl DataArgs {
    fn manifest_path(&self) -> PathBuf {
        self.manifest
            .clone()
            .unwrap_or_else(|| self.data_dir.join("manifest.csv"))
    }

    fn load(&self) -> Result<(DatasetManifest, PathBuf)> {
        let p = self.manifest_path();
        if !p.is_file() {
            return Err(Error::Config(format!("manifest {} does not exist", p.display())));
        }
        Ok((DatasetManifest::load(&p)?, p))
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// JSON or TOML run config, merged over the stage defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

impl TrainArgs {
    /// Flags over file over defaults.
    fn config(&self, stage: Stage) -> Result<RunConfig> {
        let mut overlay = match &self.config {
            Some(p) => read_config_value(p)?,
            None => json!({}),
        };
        if !overlay.is_object() {
            return Err(Error::Config("run config must be a table".into()));
        }
        let o = overlay.as_object_mut().expect("checked");
        if let Some(s) = self.seed {
            o.insert("seed".into(), json!(s));
        }
        if let Some(e) = self.epochs {
            o.insert("epochs".into(), json!(e));
        }
        if let Some(b) = self.batch_size {
            o.insert("batch_size".into(), json!(b));
        }
        if let Some(lr) = self.lr {
            o.insert("lr".into(), json!(lr));
        }
        let origin = self
            .config
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_else(|| "defaults".into());
        RunConfig::from_overlay(stage, self.preset, &overlay, &origin)
    }

    fn inputs(&self) -> Result<(DatasetManifest, SplitAssignment, RunManifest)> {
        let (manifest, mpath) = self.data.load()?;
        if !self.split.is_file() {
            return Err(Error::Config(format!("split {} does not exist", self.split.display())));
        }
        let split = SplitAssignment::load(&self.split)?;
        let mut rm = RunManifest::new("").input(&mpath)?.input(&self.split)?;
        if let Some(c) = &self.config {
            rm = rm.input(c)?;
        }
        Ok((manifest, split, rm))
    }
}

fn finish_training(mut rm: RunManifest, command: &str, cfg: &RunConfig, out: &Path, o: &TrainOutcome) -> Result<()> {
    rm.command = command.into();
    rm.with_config(cfg).param("best_epoch", o.best_epoch).write(out)?;
    let best = &o.history.records[o.best_epoch - 1];
    println!(
        "{command}: best epoch {} -> {}",
        o.best_epoch,
        o.best_checkpoint.display()
    );
    println!("  train loss {:.5}, val loss {:?}", best.train_loss, best.val_loss);
    if let Some(ba) = best.val_balanced_accuracy {
        println!("  val balanced accuracy {ba:.4}");
    }
    if let Some(r) = best.val_rmse {
        println!("  val RMSE {r:.3} px");
    }
    Ok(())
}

fn print_metrics(m: &MetricsReport) {
    let show = |label: &str, g: &Option<disc_grade_core::evaluation::GradeMetrics>| {
        if let Some(g) = g {
            println!(
                "{label}: balanced accuracy {:.4}, severe->normal {}/{} ({:.2}%), recall {:?}",
                g.balanced_accuracy.unwrap_or(f64::NAN),
                g.severe_to_normal_count,
                g.severe_count,
                100.0 * g.severe_to_normal_rate.unwrap_or(f64::NAN),
                g.recall
            );
        }
    };
    println!("partition {}", m.partition);
    show("fine-tuned (annotated centers)", &m.ground_truth_coords);
    show("fine-tuned (predicted centers)", &m.predicted_coords);
    show("linear probe", &m.linear_probe);
    show("majority baseline", &m.majority_baseline);
    if let Some(l) = &m.localization {
        println!(
            "localization: RMSE {:.3} px (euclidean {:.3} px) over {} discs",
            l.coordinate_rmse, l.euclidean_rmse, l.n
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenPhantom {
            patients,
            seed,
            out,
            image_size,
            slices,
            noise,
        } => {
            let cfg = PhantomConfig {
                n_patients: patients,
                slices_per_series: slices,
                image_size,
                noise_std: noise,
                seed,
                ..Default::default()
            };
            let m = generate_phantom_dataset(&cfg, &out)?;
            RunManifest::new("gen-phantom")
                .param("phantom", serde_json::to_string(&cfg).expect("serializes"))
                .write(&out)?;
            println!(
                "wrote {} annotations for {patients} patients to {}",
                m.records.len(),
                out.display()
            );
        }
        Command::Preprocess { data, out, config } => {
            let (manifest, mpath) = data.load()?;
            let cfg = match &config {
                Some(p) => RunConfig::from_file(p, Stage::Finetune)?.preprocess,
                None => Default::default(),
            };
            let n = export_rois(&manifest, &cfg, &out)?;
            let mut rm = RunManifest::new("preprocess").input(&mpath)?;
            if let Some(c) = &config {
                rm = rm.input(c)?;
            }
            rm.param("preprocess", serde_json::to_string(&cfg).expect("serializes"))
                .write(&out)?;
            println!("exported {n} ROIs to {}", out.display());
        }
        Command::Split {
            data,
            seed,
            out,
            train,
            val,
            test,
        } => {
            let (manifest, mpath) = data.load()?;
            let out = out.unwrap_or_else(|| mpath.with_file_name(SPLIT_CSV));
            let fractions = SplitFractions::new(train, val, test);
            let outcome = stratified_disc_split(&manifest, fractions, seed)?;
            for w in &outcome.warnings {
                log::warn!("{w}");
            }
            let audit = audit_leakage(&outcome.split, &manifest)?;
            if !audit.is_clean() {
                return Err(Error::Data(format!("split leaks {} disc(s)", audit.violations.len())));
            }
            outcome.split.save(&out)?;
            let dir = out
                .parent()
                .filter(|p| !p.as_os_str().is_empty())
                .unwrap_or(Path::new("."));
            RunManifest::new("split")
                .input(&mpath)?
                .param("seed", seed)
                .param("output", out.display())
                .write(dir)?;
            for p in Partition::ALL {
                println!(
                    "{p}: {} discs, by grade {:?}",
                    outcome.split.keys_in(p).len(),
                    audit.histograms[p.index()]
                );
            }
        }
        Command::Pretrain(a) => {
            let cfg = a.config(Stage::Pretrain)?;
            let (manifest, split, rm) = a.inputs()?;
            let o = pretrain_contrastive(&cfg, &manifest, &split, &a.out)?;
            finish_training(rm, "pretrain", &cfg, &a.out, &o)?;
        }
        Command::Finetune { train: a, pretrained } => {
            let cfg = a.config(Stage::Finetune)?;
            let (manifest, split, rm) = a.inputs()?;
            if !pretrained.is_file() {
                return Err(Error::Config(format!(
                    "checkpoint {} does not exist",
                    pretrained.display()
                )));
            }
            let o = finetune_classifier(&cfg, &manifest, &split, &pretrained, &a.out)?;
            finish_training(rm.input(&pretrained)?, "finetune", &cfg, &a.out, &o)?;
        }
        Command::TrainRoi(a) => {
            let cfg = a.config(Stage::Roi)?;
            let (manifest, split, rm) = a.inputs()?;
            let o = train_roi_regressor(&cfg, &manifest, &split, &a.out)?;
            finish_training(rm, "train-roi", &cfg, &a.out, &o)?;
        }
        Command::Evaluate {
            data,
            ckpt,
            split,
            partition,
            roi_ckpt,
            use_predicted_coords,
            out,
        } => {
            for p in std::iter::once(&ckpt)
                .chain(roi_ckpt.as_ref())
                .chain(std::iter::once(&split))
            {
                if !p.is_file() {
                    return Err(Error::Config(format!("{} does not exist", p.display())));
                }
            }
            let (manifest, mpath) = data.load()?;
            let assignment = SplitAssignment::load(&split)?;
            let opts = EvaluateOptions {
                partition,
                roi_checkpoint: roi_ckpt.clone(),
                use_predicted_coords,
            };
            let (metrics, _) = evaluate_checkpoint(&ckpt, &manifest, &assignment, &opts)?;
            let out = out.unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).join("eval"));
            emit_report(&[], Some(&metrics), &[], &out)?;
            let mut rm = RunManifest::new("evaluate")
                .input(&mpath)?
                .input(&split)?
                .input(&ckpt)?;
            if let Some(r) = &roi_ckpt {
                rm = rm.input(r)?;
            }
            rm.param("partition", partition)
                .param("use_predicted_coords", use_predicted_coords)
                .write(&out)?;
            print_metrics(&metrics);
        }
        Command::Report { run, out } => {
            if !run.is_dir() {
                return Err(Error::Config(format!("run directory {} does not exist", run.display())));
            }
            let histories = collect_histories(&run)?;
            let mp = run.join("metrics.json");
            let metrics = if mp.is_file() {
                Some(MetricsReport::load(&mp)?)
            } else {
                None
            };
            let overlays = overlays_from_run(&run)?;
            let out = out.unwrap_or_else(|| run.join(REPORT_DIR));
            let files = emit_report(&histories, metrics.as_ref(), &overlays, &out)?;
            RunManifest::new("report").param("run", run.display()).write(&out)?;
            println!("wrote {} plots to {}", files.len(), out.display());
        }
        Command::RunAll {
            tiny: _,
            standard,
            seed,
            out,
            patients,
            pretrain_epochs,
            finetune_epochs,
            roi_epochs,
        } => {
            let mut opts = RunAllOptions::tiny(&out, seed);
            opts.phantom.n_patients = patients;
            if standard {
                opts.preset = Preset::Standard;
                opts.phantom.image_size = PhantomConfig::default().image_size;
            }
            opts.epochs = [pretrain_epochs, finetune_epochs, roi_epochs];
            let outcome = run_all(&opts)?;
            print_metrics(&outcome.metrics);
            println!("run written to {}", out.display());
        }
    }
    Ok(())
}

/// Overlays from a `run-all` layout, when its data, split and regressor are there.
fn overlays_from_run(run: &Path) -> Result<Vec<disc_grade_core::report::Overlay>> {
    let manifest = run.join(DATA_DIR).join("manifest.csv");
    let split = run.join(SPLIT_CSV);
    let roi = run.join("roi").join(disc_grade_core::training::BEST_CHECKPOINT);
    if !(manifest.is_file() && split.is_file() && roi.is_file()) {
        return Ok(Vec::new());
    }
    let manifest = DatasetManifest::load(&manifest)?;
    let keys = SplitAssignment::load(&split)?.keys_in(Partition::Val);
    let (centers, _) = regress_centers(&roi, &manifest, &keys)?;
    overlays_for(&manifest, &keys, &centers, 3)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
