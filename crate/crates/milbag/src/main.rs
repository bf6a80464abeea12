use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use milbag::checkpoint::{load_checkpoint, save_checkpoint};
use milbag::config::{Config, SweepParameter};
use milbag::cv::{fold_seed, pool, run_cv, stratified_holdout, train_and_score, FoldResult};
use milbag::dataset::{read_dataset, write_dataset};
use milbag::manifest::{write_provenance, Manifest};
use milbag::report::{
    fold_level, metric_table, summarize_folds, write_json, AblationReport, AblationRow, CvReport, DatasetSummary,
    ToolInfo, REPORT_SCHEMA_VERSION, STD_DEFINITION,
};
use milbag::DATA_DIR_ENV;
use milbag_core::data::{generate_synthetic, stratified_folds, Bag};
use milbag_core::gradsuite::standard_suite;
use milbag_core::metrics::summarize;
use milbag_core::train::{evaluate, train_fold_with, Ablation, TrainConfig};
use rayon::prelude::*;
use serde::Serialize;

/// Attention-based multiple-instance learning with virtual-bag augmentation
/// and patch-location self-supervision.
#[derive(Parser)]
#[command(name = "milbag", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset directory.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model on a whole dataset and save a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a dataset with a checkpoint.
    Evaluate {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write per-bag scores and metrics as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeated stratified cross-validation.
    Cv {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
        /// Also write the virtual-bag provenance of every fold.
        #[arg(long)]
        provenance: bool,
    },
    /// Cross-validate the four ablation configurations A–D over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
        /// Number of seeds, starting from the configured seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Tune α or μ on a validation split carved out of each training fold.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable operation and loss.
    Gradcheck {
        /// Largest acceptable relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Write per-instance attention weights as CSV.
    ExportAttention {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV file to write; `-` for standard output.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a preset as TOML.
    ShowConfig {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset: paper_defaults, synthetic, alpha_sweep or mu_sweep.
    #[arg(long)]
    preset: Option<String>,
    /// Override one setting, e.g. `--set train.epochs=20`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for model initialisation, shuffling and fold assignment.
    #[arg(long)]
    seed: Option<u64>,
    /// Ablation configuration A, B, C or D.
    #[arg(long)]
    ablation: Option<char>,
    /// Worker threads; 0 uses one per core.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    #[arg(long, short)]
    quiet: bool,
}

impl Common {
    fn config(&self) -> Result<Config> {
        let mut config = Config::load(self.config.as_deref(), self.preset.as_deref(), &self.overrides)?;
        if let Some(seed) = self.seed {
            config.train.seed = seed;
            config.cv.seed = seed;
            config.data.seed = seed;
        }
        if let Some(letter) = self.ablation {
            config.train.ablation = Ablation::from_letter(letter)
                .with_context(|| format!("unknown ablation {letter:?}; use A, B, C or D"))?;
        }
        config.validate()?;
        Ok(config)
    }

    fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

#[derive(Args)]
struct DataArg {
    /// Dataset directory, or `synth` to generate the configured synthetic
    /// dataset in memory.
    #[arg(long, env = DATA_DIR_ENV)]
    dataset: Option<String>,
}

impl DataArg {
    fn load(&self, config: Option<&Config>) -> Result<(Option<PathBuf>, Vec<Bag>)> {
        let Some(arg) = &self.dataset else {
            bail!("no dataset given: pass --dataset DIR or set {DATA_DIR_ENV}");
        };
        if arg == "synth" {
            let spec = config.map(|c| c.data.clone()).unwrap_or_default();
            return Ok((None, generate_synthetic(&spec)?.bags));
        }
        let dir = PathBuf::from(arg);
        let dataset = read_dataset(&dir)?;
        if dataset.bags.is_empty() {
            bail!("{}: dataset has no bags", dir.display());
        }
        Ok((Some(dir), dataset.bags))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |v| format!("{v:.4}"))
}

fn cmd_generate(common: &Common, out: &Path) -> Result<()> {
    let config = common.config()?;
    let t = Instant::now();
    let data = generate_synthetic(&config.data)?;
    write_dataset(out, &data.bags, Some(config.data.clone()))?;
    let mut manifest = Manifest::new("generate", &config);
    manifest.seed = config.data.seed;
    manifest.outputs = vec![out.join(milbag::dataset::INDEX_FILE)];
    manifest.elapsed_seconds = t.elapsed().as_secs_f64();
    manifest.write(out)?;
    let pos = data.bags.iter().filter(|b| b.label == 1).count();
    common.note(format!(
        "wrote {} bags ({pos} positive) to {}",
        data.bags.len(),
        out.display()
    ));
    Ok(())
}

fn cmd_train(common: &Common, data: &DataArg, out: &Path) -> Result<()> {
    let config = common.config()?;
    let (dir, bags) = data.load(Some(&config))?;
    create_dir(out)?;
    let t = Instant::now();
    let outcome = train_fold_with(&bags, &config.train, |r, _| {
        common.note(format!(
            "epoch {:3}  loss {:.4}  mil {:.4}  ssl {}  virtual {:3}  train acc {:.3}",
            r.epoch,
            r.mean_total_loss,
            r.mean_mil_loss,
            r.mean_ssl_loss.map_or("-".into(), |v| format!("{v:.4}")),
            r.virtual_bags_used,
            r.train_accuracy
        ))
    })?;
    let ckpt = out.join("model.ckpt");
    save_checkpoint(&ckpt, &outcome.model, Some(&config.train))?;
    let history = out.join("history.json");
    let epochs: Vec<_> = outcome
        .history
        .epochs
        .iter()
        .map(milbag::cv::EpochSummary::from)
        .collect();
    write_json(&history, &epochs)?;
    let prov = out.join("provenance.jsonl");
    let file = std::fs::File::create(&prov).with_context(|| format!("cannot create {}", prov.display()))?;
    let records = outcome
        .history
        .epochs
        .iter()
        .flat_map(|e| e.generated.iter().map(move |p| (None, e.epoch, p.clone())));
    write_provenance(std::io::BufWriter::new(file), records)?;
    std::fs::write(out.join("config.toml"), config.to_toml())?;

    let mut manifest = Manifest::new("train", &config);
    manifest.dataset = dir;
    manifest.elapsed_seconds = t.elapsed().as_secs_f64();
    manifest.outputs = vec![ckpt.clone(), history, prov, out.join("config.toml")];
    manifest.write(out)?;
    common.note(format!("saved {}", ckpt.display()));
    Ok(())
}

#[derive(Serialize)]
struct EvaluationReport {
    schema_version: u32,
    tool: ToolInfo,
    created_at: String,
    checkpoint: PathBuf,
    threshold: f64,
    dataset: DatasetSummary,
    confusion: milbag_core::metrics::Confusion,
    metrics: milbag_core::metrics::MetricSet,
    predictions: Vec<milbag::cv::BagScore>,
}

fn cmd_evaluate(data: &DataArg, checkpoint: &Path, out: Option<&Path>) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let (_, bags) = data.load(None)?;
    let threshold = ckpt.model.config.threshold;
    let eval = evaluate(&ckpt.model, &bags, threshold)?;
    let m = eval.metrics;
    println!("bags         {}", bags.len());
    println!("accuracy     {}", fmt_metric(m.accuracy));
    println!("sensitivity  {}", fmt_metric(m.sensitivity));
    println!("specificity  {}", fmt_metric(m.specificity));
    println!("f1           {}", fmt_metric(m.f1));
    println!("auc          {}", fmt_metric(m.auc));
    if let Some(path) = out {
        let report = EvaluationReport {
            schema_version: REPORT_SCHEMA_VERSION,
            tool: ToolInfo::current(),
            created_at: milbag::report::now_rfc3339(),
            checkpoint: checkpoint.to_path_buf(),
            threshold,
            dataset: DatasetSummary::of(&bags),
            confusion: eval.confusion,
            metrics: eval.metrics,
            predictions: eval
                .bag_ids
                .iter()
                .zip(&eval.labels)
                .zip(&eval.probabilities)
                .map(|((id, &label), &probability)| milbag::cv::BagScore {
                    bag_id: id.clone(),
                    label,
                    probability,
                })
                .collect(),
        };
        write_json(path, &report)?;
    }
    Ok(())
}

fn progress<'a>(common: &'a Common, total: usize, label: String) -> impl Fn(&FoldResult) + Sync + 'a {
    let done = Mutex::new(0usize);
    move |f: &FoldResult| {
        let mut d = done.lock().unwrap();
        *d += 1;
        common.note(format!(
            "{label}[{:>3}/{total}] repeat {} fold {}: auc {}  accuracy {}",
            *d,
            f.repeat,
            f.fold,
            fmt_metric(f.metrics.auc),
            fmt_metric(f.metrics.accuracy)
        ));
    }
}

fn cmd_cv(common: &Common, data: &DataArg, out: &Path, provenance: bool) -> Result<()> {
    let config = common.config()?;
    let (dir, bags) = data.load(Some(&config))?;
    create_dir(out)?;
    let t = Instant::now();
    let total = config.cv.folds * config.cv.repeats;
    let outcome = run_cv(
        &bags,
        &config.train,
        &config.cv,
        common.workers,
        progress(common, total, String::new()),
    )?;
    let report = CvReport::new(&config, &bags, &outcome);
    let path = out.join("cv_report.json");
    write_json(&path, &report)?;
    let mut outputs = vec![path];
    if provenance {
        let prov = out.join("provenance.jsonl");
        let file = std::fs::File::create(&prov).with_context(|| format!("cannot create {}", prov.display()))?;
        let records = outcome.folds.iter().flat_map(|f| {
            f.provenance
                .iter()
                .map(move |(e, p)| (Some((f.repeat, f.fold)), *e, p.clone()))
        });
        write_provenance(std::io::BufWriter::new(file), records)?;
        outputs.push(prov);
    }
    println!(
        "{}",
        metric_table(&[(
            format!("{} (folds)", config.train.ablation.letter()),
            fold_level(&report.summary)
        )])
    );
    let mut manifest = Manifest::new("cv", &config);
    manifest.dataset = dir;
    manifest.workers = common.workers;
    manifest.elapsed_seconds = t.elapsed().as_secs_f64();
    manifest.outputs = outputs;
    manifest.write(out)?;
    Ok(())
}

fn cmd_ablate(common: &Common, data: &DataArg, out: &Path, seeds: u64) -> Result<()> {
    if seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let config = common.config()?;
    let (dir, bags) = data.load(Some(&config))?;
    create_dir(out)?;
    let t = Instant::now();
    let total = config.cv.folds * config.cv.repeats;
    let mut rows = Vec::new();
    for ablation in Ablation::ALL {
        let mut runs = Vec::new();
        for s in 0..seeds {
            let seed = config.train.seed + s;
            let train = TrainConfig {
                ablation,
                seed,
                ..config.train.clone()
            };
            let cv = milbag::config::CvConfig {
                seed,
                ..config.cv.clone()
            };
            let label = format!("{} seed {seed} ", ablation.letter());
            let outcome = run_cv(&bags, &train, &cv, common.workers, progress(common, total, label))?;
            runs.push((seed, outcome.folds));
        }
        rows.push(AblationRow::new(ablation, &runs));
    }
    let report = AblationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        tool: ToolInfo::current(),
        created_at: milbag::report::now_rfc3339(),
        config_hash: config.hash(),
        config: config.clone(),
        dataset: DatasetSummary::of(&bags),
        std_definition: STD_DEFINITION,
        rows,
    };
    let table = report.table();
    println!("{table}");
    let json = out.join("ablation.json");
    write_json(&json, &report)?;
    let txt = out.join("ablation.txt");
    std::fs::write(
        &txt,
        format!("mean ± std over {seeds} seed means; {STD_DEFINITION}\n{table}"),
    )?;
    let mut manifest = Manifest::new("ablate", &config);
    manifest.dataset = dir;
    manifest.workers = common.workers;
    manifest.elapsed_seconds = t.elapsed().as_secs_f64();
    manifest.outputs = vec![json, txt];
    manifest.write(out)?;
    Ok(())
}

#[derive(Serialize)]
struct SweepFold {
    repeat: usize,
    fold: usize,
    /// Validation AUC per candidate value, in configuration order.
    validation_auc: Vec<Option<f64>>,
    chosen: f64,
    test: FoldResult,
}

#[derive(Serialize)]
struct SweepReport {
    schema_version: u32,
    tool: ToolInfo,
    created_at: String,
    config_hash: String,
    config: Config,
    dataset: DatasetSummary,
    std_definition: &'static str,
    parameter: SweepParameter,
    values: Vec<f64>,
    /// Spread of each candidate's validation AUC over folds.
    validation: Vec<milbag_core::metrics::Summary>,
    test_summary: std::collections::BTreeMap<&'static str, milbag::report::MetricSummary>,
    folds: Vec<SweepFold>,
}

fn with_value(train: &TrainConfig, parameter: SweepParameter, value: f64) -> TrainConfig {
    let mut t = train.clone();
    match parameter {
        SweepParameter::Alpha => t.alpha = value,
        SweepParameter::Mu => t.ssl.mu = value,
    }
    t
}

fn cmd_sweep(common: &Common, data: &DataArg, out: &Path) -> Result<()> {
    let config = common.config()?;
    let sweep = &config.sweep;
    if sweep.values.is_empty() {
        bail!("sweep.values is empty");
    }
    for &v in &sweep.values {
        with_value(&config.train, sweep.parameter, v)
            .validate()
            .with_context(|| format!("sweep value {v}"))?;
    }
    let (dir, bags) = data.load(Some(&config))?;
    create_dir(out)?;
    let t = Instant::now();
    let labels: Vec<u8> = bags.iter().map(|b| b.label).collect();
    let plan = stratified_folds(&labels, config.cv.folds, config.cv.repeats, config.cv.seed)?;
    let jobs: Vec<(usize, usize)> = (0..config.cv.repeats)
        .flat_map(|r| (0..config.cv.folds).map(move |f| (r, f)))
        .collect();
    let folds =
        pool(common.workers)?.install(|| {
            jobs.par_iter()
                .map(|&(repeat, fold)| -> Result<SweepFold> {
                    let seed = fold_seed(config.train.seed, repeat, fold);
                    let train_idx = plan.train_indices(repeat, fold);
                    let (fit, val) = stratified_holdout(&bags, &train_idx, sweep.validation_fraction, seed);
                    let mut validation_auc = Vec::new();
                    for &v in &sweep.values {
                        let cfg = TrainConfig {
                            seed,
                            ..with_value(&config.train, sweep.parameter, v)
                        };
                        let (r, _) = train_and_score(&bags, &fit, &val, &cfg)
                            .map_err(|source| milbag::Error::Fold { repeat, fold, source })?;
                        validation_auc.push(r.metrics.auc);
                    }
                    // first best value wins ties; undefined AUC ranks last
                    let best = (0..sweep.values.len())
                        .max_by(|&a, &b| {
                            let key = |i: usize| validation_auc[i].unwrap_or(f64::NEG_INFINITY);
                            key(a).total_cmp(&key(b)).then(b.cmp(&a))
                        })
                        .unwrap();
                    let chosen = sweep.values[best];
                    let cfg = TrainConfig {
                        seed,
                        ..with_value(&config.train, sweep.parameter, chosen)
                    };
                    let (mut test, _) = train_and_score(&bags, &train_idx, &plan.test_indices(repeat, fold), &cfg)
                        .map_err(|source| milbag::Error::Fold { repeat, fold, source })?;
                    test.repeat = repeat;
                    test.fold = fold;
                    common.note(format!(
                        "repeat {repeat} fold {fold}: chose {chosen}, test auc {}",
                        fmt_metric(test.metrics.auc)
                    ));
                    Ok(SweepFold {
                        repeat,
                        fold,
                        validation_auc,
                        chosen,
                        test,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })?;
    let validation = (0..sweep.values.len())
        .map(|i| summarize(&folds.iter().map(|f| f.validation_auc[i]).collect::<Vec<_>>()))
        .collect::<Vec<_>>();
    let tests: Vec<FoldResult> = folds.iter().map(|f| f.test.clone()).collect();
    let report = SweepReport {
        schema_version: REPORT_SCHEMA_VERSION,
        tool: ToolInfo::current(),
        created_at: milbag::report::now_rfc3339(),
        config_hash: config.hash(),
        config: config.clone(),
        dataset: DatasetSummary::of(&bags),
        std_definition: STD_DEFINITION,
        parameter: sweep.parameter,
        values: sweep.values.clone(),
        validation,
        test_summary: summarize_folds(&tests),
        folds,
    };
    for (v, s) in report.values.iter().zip(&report.validation) {
        println!("{:?} = {v:<8} validation auc {}", sweep.parameter, fmt_metric(s.mean));
    }
    println!(
        "{}",
        metric_table(&[("tuned (folds)".into(), fold_level(&report.test_summary))])
    );
    let json = out.join("sweep_report.json");
    write_json(&json, &report)?;
    let mut manifest = Manifest::new("sweep", &config);
    manifest.dataset = dir;
    manifest.workers = common.workers;
    manifest.elapsed_seconds = t.elapsed().as_secs_f64();
    manifest.outputs = vec![json];
    manifest.write(out)?;
    Ok(())
}

fn cmd_gradcheck(tolerance: f64) -> Result<bool> {
    let t = Instant::now();
    let cases = standard_suite()?;
    let width = cases.iter().map(|c| c.name.len()).max().unwrap_or(0);
    let mut ok = true;
    for c in &cases {
        let pass = c.report.max_relative_error < tolerance;
        ok &= pass;
        println!(
            "{}  {:width$}  max relative error {:.3e}  ({} elements)",
            if pass { "PASS" } else { "FAIL" },
            c.name,
            c.report.max_relative_error,
            c.report.elements_checked
        );
    }
    println!("{} cases in {:.1} s", cases.len(), t.elapsed().as_secs_f64());
    Ok(ok)
}

fn cmd_export_attention(data: &DataArg, checkpoint: &Path, out: &Path) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let (_, bags) = data.load(None)?;
    let rows = if out == Path::new("-") {
        milbag::attention::write_attention_csv(std::io::stdout().lock(), &ckpt.model, &bags)?
    } else {
        let file = std::fs::File::create(out).with_context(|| format!("cannot create {}", out.display()))?;
        milbag::attention::write_attention_csv(std::io::BufWriter::new(file), &ckpt.model, &bags)?
    };
    eprintln!("wrote {rows} rows");
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate { common, out } => cmd_generate(&common, &out)?,
        Command::Train { common, data, out } => cmd_train(&common, &data, &out)?,
        Command::Evaluate { data, checkpoint, out } => cmd_evaluate(&data, &checkpoint, out.as_deref())?,
        Command::Cv {
            common,
            data,
            out,
            provenance,
        } => cmd_cv(&common, &data, &out, provenance)?,
        Command::Ablate {
            common,
            data,
            out,
            seeds,
        } => cmd_ablate(&common, &data, &out, seeds)?,
        Command::Sweep { common, data, out } => cmd_sweep(&common, &data, &out)?,
        Command::Gradcheck { tolerance } => return cmd_gradcheck(tolerance),
        Command::ExportAttention { data, checkpoint, out } => cmd_export_attention(&data, &checkpoint, &out)?,
        Command::ShowConfig { common } => print!("{}", common.config()?.to_toml()),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            let _ = std::io::stdout().flush();
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
