//! Command implementations behind the `ucdr` binary.
//!
//! Every command validates its inputs before writing anything, and every
//! file it writes is a deterministic function of its inputs and `--seed`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use snmpnet::checkpoint::{load_checkpoint, save_checkpoint};
use snmpnet::data::{
    build_split, validate_dataset, Dataset, Protocol, RunConfig, SearchSetMode, SemanticTable, SplitRequest,
    SplitSpec,
};
use snmpnet::gradsuite::{random_instance, Fault, InstanceLimits, LossPart};
use snmpnet::io::{export, import, read_split, write_split};
use snmpnet::model::SnMpModel;
use snmpnet::retrieval::{evaluate, EvalReport};
use snmpnet::synthgen::{generate, GeneratorSpec};
use snmpnet::trainer::{train_variant, write_train_log, TrainOutcome, Variant};

pub const CHECKPOINT: &str = "checkpoint.bin";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const SPLIT: &str = "split.json";
pub const CONFIG: &str = "config.txt";
pub const EVAL_JSON: &str = "eval.json";
pub const EVAL_CSV: &str = "eval.csv";
pub const KAPPA_SWEEP: &str = "kappa_sweep.csv";
pub const ABLATION: &str = "ablation.csv";
pub const ABLATION_RUNS: &str = "ablation_runs.csv";
pub const EMBEDDINGS: &str = "embeddings.csv";

#[derive(Debug, Parser)]
#[command(name = "ucdr", version, about = "Train and evaluate universal cross-domain retrieval embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-domain dataset directory.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint and training log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test queries of a split.
    Eval(EvalArgs),
    /// Compare loss gradients with central differences on random instances.
    Gradcheck(GradcheckArgs),
    /// Train the neighbourhood-loss variant for each kappa.
    SweepKappa(SweepKappaArgs),
    /// Train and evaluate the six-variant ablation ladder.
    Ablate(AblateArgs),
    /// Write the latent features of every sample.
    DumpEmbeddings(DumpArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    Uccdr,
    Udcdr,
    Ucdr,
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::Uccdr => Protocol::UcCdr,
            ProtocolArg::Udcdr => Protocol::UdCdr,
            ProtocolArg::Ucdr => Protocol::Ucdr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    #[value(name = "unseen_only", alias = "unseen-only")]
    UnseenOnly,
    #[value(name = "seen_plus_unseen", alias = "seen-plus-unseen")]
    SeenPlusUnseen,
}

impl From<ModeArg> for SearchSetMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::UnseenOnly => SearchSetMode::UnseenOnly,
            ModeArg::SeenPlusUnseen => SearchSetMode::SeenPlusUnseen,
        }
    }
}

/// Flags that select a protocol split.
#[derive(Debug, Clone, Args)]
pub struct SplitArgs {
    #[arg(long, value_enum, default_value = "ucdr")]
    pub protocol: ProtocolArg,
    /// Domain left out of training; defaults to the last domain for udcdr and ucdr.
    #[arg(long)]
    pub holdout: Option<usize>,
    #[arg(long, value_enum, default_value = "unseen_only")]
    pub mode: ModeArg,
    /// Domain the search set is drawn from.
    #[arg(long, default_value_t = 0)]
    pub search_domain: usize,
}

impl SplitArgs {
    pub fn request(&self, num_domains: usize, seed: u64) -> Result<SplitRequest> {
        let protocol = Protocol::from(self.protocol);
        let held_out = match (self.holdout, protocol.needs_held_out_domain()) {
            (Some(d), _) => Some(d),
            (None, true) => Some(num_domains.checked_sub(1).context("dataset has no domains")?),
            (None, false) => None,
        };
        let mut req = SplitRequest::new(protocol, held_out);
        req.seed = seed;
        req.search_domain = self.search_domain;
        req.search_set_mode = self.mode.into();
        Ok(req)
    }

    pub fn build(&self, ds: &Dataset, seed: u64) -> Result<SplitSpec> {
        Ok(build_split(ds.num_classes, ds.num_domains, &self.request(ds.num_domains, seed)?)?)
    }
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = GeneratorSpec::default().num_classes)]
    pub classes: usize,
    #[arg(long, default_value_t = GeneratorSpec::default().num_domains)]
    pub domains: usize,
    #[arg(long, default_value_t = GeneratorSpec::default().samples_per_class_per_domain)]
    pub per_class: usize,
    #[arg(long, default_value_t = GeneratorSpec::default().input_dim)]
    pub input_dim: usize,
    #[arg(long, default_value_t = GeneratorSpec::default().semantic_dim)]
    pub semantic_dim: usize,
    #[arg(long, default_value_t = GeneratorSpec::default().class_spread)]
    pub spread: f64,
    #[arg(long, default_value_t = GeneratorSpec::default().domain_shift_strength)]
    pub shift: f64,
}

impl GenDataArgs {
    pub fn spec(&self) -> GeneratorSpec {
        GeneratorSpec {
            num_classes: self.classes,
            num_domains: self.domains,
            samples_per_class_per_domain: self.per_class,
            input_dim: self.input_dim,
            semantic_dim: self.semantic_dim,
            class_spread: self.spread,
            domain_shift_strength: self.shift,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// `key = value` file; unspecified keys take the published defaults.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub split: SplitArgs,
    /// Overrides the config seed; also seeds the class split.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "full", value_parser = parse_variant)]
    pub variant: Variant,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Split file written by `train`; takes precedence over the split flags.
    #[arg(long)]
    pub split_file: Option<PathBuf>,
    #[command(flatten)]
    pub split: SplitArgs,
    /// Seeds the class split when no split file is given.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Evaluate both search-set modes, one subdirectory each.
    #[arg(long)]
    pub both_modes: bool,
    /// Defaults to min(200, search set size).
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    /// First instance seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of consecutive seeds to check.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    #[arg(long, default_value_t = snmpnet::gradsuite::DEFAULT_TOLERANCE)]
    pub tol: f64,
    /// One of combined, ce, mp, sn; all four when omitted.
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long, default_value_t = 8)]
    pub max_classes: usize,
    #[arg(long, default_value_t = 16)]
    pub max_input_dim: usize,
    #[arg(long, default_value_t = 8)]
    pub max_latent_dim: usize,
    /// Corrupts a backward pass so the check is seen to fail.
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepKappaArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 1.0, 2.0, 3.0, 4.0])]
    pub kappas: Vec<f64>,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub split: SplitArgs,
    /// Seeds to average over; each seeds both the split and training.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Single seed, used when `--seeds` is absent; defaults to the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct DumpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: snmpnet::Error| e.to_string())
}

pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    run(cli.command)
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Gradcheck(a) => cmd_gradcheck(&a).map(|_| ()),
        Command::SweepKappa(a) => cmd_sweep_kappa(&a).map(|_| ()),
        Command::Ablate(a) => cmd_ablate(&a).map(|_| ()),
        Command::DumpEmbeddings(a) => cmd_dump_embeddings(&a),
    }
}

pub fn read_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut cfg = RunConfig::parse_kv(&text, RunConfig::default())
        .with_context(|| format!("parsing config {}", path.display()))?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Imports and validates a dataset directory; semantics are required.
pub fn load_data(dir: &Path) -> Result<(Dataset, SemanticTable)> {
    let imported = import(dir).with_context(|| format!("reading dataset {}", dir.display()))?;
    let sem = imported
        .semantics
        .with_context(|| format!("{} has no semantics.csv", dir.display()))?;
    let report = validate_dataset(&imported.dataset, &sem);
    if !report.is_ok() {
        let lines: Vec<String> = report.violations.iter().take(10).map(|v| v.message.clone()).collect();
        bail!(
            "dataset {} failed validation ({} violations):\n  {}",
            dir.display(),
            report.violations.len(),
            lines.join("\n  ")
        );
    }
    Ok((imported.dataset, sem))
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Renders rows as a left-aligned text table.
pub fn text_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let mut line = |cells: Vec<&str>| {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(header.to_vec());
    for row in rows {
        line(row.iter().map(String::as_str).collect());
    }
    out
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let spec = args.spec();
    spec.validate()?;
    let (ds, sem) = generate(&spec)?;
    export(&ds, Some(&sem), &args.out)?;
    println!(
        "wrote {} samples ({} classes x {} domains) to {}",
        ds.samples.len(),
        ds.num_classes,
        ds.num_domains,
        args.out.display()
    );
    Ok(())
}

/// Trains one variant and returns its outcome alongside the split used.
pub fn train_run(
    ds: &Dataset,
    sem: &SemanticTable,
    split: &SplitSpec,
    config: &RunConfig,
    variant: Variant,
) -> Result<TrainOutcome> {
    Ok(train_variant(ds, split, sem, config, variant)?)
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutcome> {
    let config = read_config(&args.config, args.seed)?;
    let (ds, sem) = load_data(&args.data)?;
    let split = args.split.build(&ds, config.seed)?;
    create_out(&args.out)?;
    let outcome = train_run(&ds, &sem, &split, &config, args.variant)?;
    save_checkpoint(&outcome.state, &args.out.join(CHECKPOINT))?;
    write_train_log(&args.out.join(TRAIN_LOG), &outcome.logs)?;
    write_split(&split, &args.out.join(SPLIT))?;
    write(&args.out.join(CONFIG), &config.to_kv_string())?;
    let rows: Vec<Vec<String>> = outcome
        .logs
        .iter()
        .map(|l| {
            vec![
                l.epoch.to_string(),
                format!("{:.5}", l.loss),
                format!("{:.5}", l.ce_mix),
                format!("{:.5}", l.mp),
                format!("{:.5}", l.sn),
                format!("{:.3e}", l.lr),
                format!("{:.4}", l.val_map),
                format!("{:.2}s", l.wall_seconds),
            ]
        })
        .collect();
    print!(
        "{}",
        text_table(&["epoch", "loss", "ce_mix", "mp", "sn", "lr", "val_map", "time"], &rows)
    );
    println!(
        "best validation mAP {:.4} at epoch {}; checkpoint in {}",
        outcome.state.best_val_map,
        outcome.state.best_epoch,
        args.out.display()
    );
    Ok(outcome)
}

/// Best model of a checkpoint, checked against the data and split.
pub fn load_model(path: &Path, ds: &Dataset, sem: &SemanticTable, split: &SplitSpec) -> Result<SnMpModel> {
    let state = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let model = state.best_model()?;
    let dims = model.dims();
    ensure!(
        dims.input_dim == ds.input_dim,
        "checkpoint expects input dimension {}, dataset has {}",
        dims.input_dim,
        ds.input_dim
    );
    ensure!(
        dims.latent_dim == sem.dim,
        "checkpoint latent dimension {} differs from the semantic dimension {}",
        dims.latent_dim,
        sem.dim
    );
    ensure!(
        dims.num_classes == split.seen_classes.len(),
        "checkpoint has {} mixture-prediction outputs, split has {} seen classes",
        dims.num_classes,
        split.seen_classes.len()
    );
    Ok(model)
}

pub fn eval_csv(report: &EvalReport) -> String {
    let mut out = String::from("query_id,class_id,average_precision\n");
    for q in &report.per_query {
        let _ = writeln!(out, "{},{},{:?}", q.query_id, q.class_id, q.average_precision);
    }
    out
}

pub fn write_eval(report: &EvalReport, dir: &Path) -> Result<()> {
    create_out(dir)?;
    write(&dir.join(EVAL_JSON), &(serde_json::to_string_pretty(report)? + "\n"))?;
    write(&dir.join(EVAL_CSV), &eval_csv(report))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<Vec<EvalReport>> {
    let (ds, sem) = load_data(&args.data)?;
    let split = match &args.split_file {
        Some(path) => read_split(path).with_context(|| format!("reading split {}", path.display()))?,
        None => args.split.build(&ds, args.seed)?,
    };
    split.check(ds.num_classes, ds.num_domains)?;
    let model = load_model(&args.checkpoint, &ds, &sem, &split)?;
    let modes: Vec<SearchSetMode> = if args.both_modes {
        vec![SearchSetMode::UnseenOnly, SearchSetMode::SeenPlusUnseen]
    } else {
        vec![SearchSetMode::from(args.split.mode)]
    };
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    for mode in modes {
        let report = evaluate(&model, &ds, &split.with_mode(mode), args.k)?;
        let dir = if args.both_modes {
            args.out.join(mode.to_string())
        } else {
            args.out.clone()
        };
        write_eval(&report, &dir)?;
        rows.push(vec![
            split.protocol.to_string(),
            mode.to_string(),
            report.k.to_string(),
            format!("{:.4}", report.map_at_k),
            format!("{:.4}", report.prec_at_k),
            report.num_queries.to_string(),
            report.search_size.to_string(),
        ]);
        if !report.flagged_queries.is_empty() {
            log::warn!("{} queries have no relevant search item", report.flagged_queries.len());
        }
        reports.push(report);
    }
    print!(
        "{}",
        text_table(&["protocol", "mode", "k", "mAP@k", "Prec@k", "queries", "search"], &rows)
    );
    Ok(reports)
}

/// Worst gradient error per loss part, over all checked seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckSummary {
    pub part: String,
    pub max_rel_error: f64,
    pub worst_seed: u64,
    pub worst_coordinate: Option<String>,
    pub excluded: usize,
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<Vec<GradcheckSummary>> {
    ensure!(args.tol > 0.0, "tolerance must be positive");
    ensure!(args.seeds >= 1, "at least one seed is required");
    let parts = match &args.loss {
        Some(name) => vec![name.parse::<LossPart>()?],
        None => LossPart::ALL.to_vec(),
    };
    let fault = match args.inject_fault.as_deref() {
        None => None,
        Some("sn-sign") => Some(Fault::SnSignFlip),
        Some(other) => bail!("unknown fault {other:?}"),
    };
    let limits = InstanceLimits {
        max_classes: args.max_classes,
        max_input_dim: args.max_input_dim,
        max_latent_dim: args.max_latent_dim,
    };
    let mut summaries: Vec<GradcheckSummary> = parts
        .iter()
        .map(|p| GradcheckSummary {
            part: p.to_string(),
            max_rel_error: 0.0,
            worst_seed: args.seed,
            worst_coordinate: None,
            excluded: 0,
        })
        .collect();
    for seed in args.seed..args.seed + args.seeds {
        let inst = random_instance(seed, limits)?;
        for (part, summary) in parts.iter().zip(summaries.iter_mut()) {
            let report = inst.check(*part, fault)?;
            summary.excluded += report.excluded.len();
            if summary.worst_coordinate.is_none() || report.max_rel_error > summary.max_rel_error {
                summary.max_rel_error = report.max_rel_error;
                summary.worst_seed = seed;
                summary.worst_coordinate = report.worst_index.map(|i| {
                    let (name, offset) = inst.model.params().locate(i).unwrap_or(("?", i));
                    format!(
                        "{name}[{offset}] analytic {:.6e} numeric {:.6e}",
                        report.worst_analytic, report.worst_numeric
                    )
                });
            }
        }
    }
    let rows: Vec<Vec<String>> = summaries
        .iter()
        .map(|s| {
            vec![
                s.part.clone(),
                format!("{:.3e}", s.max_rel_error),
                s.worst_seed.to_string(),
                s.excluded.to_string(),
                s.worst_coordinate.clone().unwrap_or_default(),
            ]
        })
        .collect();
    print!(
        "{}",
        text_table(&["loss", "max_rel_err", "seed", "excluded", "worst coordinate"], &rows)
    );
    let failed: Vec<&str> = summaries
        .iter()
        .filter(|s| s.max_rel_error >= args.tol)
        .map(|s| s.part.as_str())
        .collect();
    if !failed.is_empty() {
        bail!("gradient check failed for {} at tolerance {:e}", failed.join(", "), args.tol);
    }
    println!("all gradients within {:e} over {} seeds", args.tol, args.seeds);
    Ok(summaries)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KappaRow {
    pub kappa: f64,
    pub val_map: f64,
    pub test_map: f64,
}

pub fn cmd_sweep_kappa(args: &SweepKappaArgs) -> Result<Vec<KappaRow>> {
    let config = read_config(&args.config, args.seed)?;
    ensure!(!args.kappas.is_empty(), "no kappa values given");
    ensure!(
        args.kappas.iter().all(|k| k.is_finite() && *k >= 0.0),
        "kappa values must be non-negative"
    );
    let (ds, sem) = load_data(&args.data)?;
    let split = args.split.build(&ds, config.seed)?;
    create_out(&args.out)?;
    let mut kappas = args.kappas.clone();
    kappas.sort_by(f64::total_cmp);
    let mut rows = Vec::with_capacity(kappas.len());
    for kappa in kappas {
        let cfg = RunConfig { kappa, ..config.clone() };
        let outcome = train_run(&ds, &sem, &split, &cfg, Variant::BaseSn)?;
        let report = evaluate(&outcome.best_model()?, &ds, &split, args.k)?;
        rows.push(KappaRow {
            kappa,
            val_map: outcome.state.best_val_map,
            test_map: report.map_at_k,
        });
    }
    let mut csv = String::from("kappa,val_map,test_map\n");
    for r in &rows {
        let _ = writeln!(csv, "{:?},{:?},{:?}", r.kappa, r.val_map, r.test_map);
    }
    write(&args.out.join(KAPPA_SWEEP), &csv)?;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![format!("{}", r.kappa), format!("{:.4}", r.val_map), format!("{:.4}", r.test_map)])
        .collect();
    print!("{}", text_table(&["kappa", "val mAP", "test mAP"], &table));
    if let Some(best) = rows.iter().max_by(|a, b| a.val_map.total_cmp(&b.val_map)) {
        println!("highest validation mAP at kappa = {}", best.kappa);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRun {
    pub seed: u64,
    pub variant: Variant,
    pub map_at_k: f64,
    pub prec_at_k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seeds: usize,
    pub map_at_k: f64,
    pub prec_at_k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationResult {
    pub k: Option<usize>,
    pub runs: Vec<AblationRun>,
    pub rows: Vec<AblationRow>,
}

impl AblationResult {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<AblationResult> {
    let config = read_config(&args.config, args.seed)?;
    let seeds = args.seeds.clone().unwrap_or_else(|| vec![config.seed]);
    ensure!(!seeds.is_empty(), "no seeds given");
    let (ds, sem) = load_data(&args.data)?;
    let splits = seeds
        .iter()
        .map(|&s| args.split.build(&ds, s))
        .collect::<Result<Vec<_>>>()?;
    create_out(&args.out)?;

    let mut runs = Vec::with_capacity(seeds.len() * Variant::ALL.len());
    for (&seed, split) in seeds.iter().zip(&splits) {
        let cfg = RunConfig { seed, ..config.clone() };
        for variant in Variant::ALL {
            let outcome = train_run(&ds, &sem, split, &cfg, variant)?;
            let report = evaluate(&outcome.best_model()?, &ds, split, args.k)?;
            log::info!("seed {seed} {variant}: mAP@{} {:.4}", report.k, report.map_at_k);
            runs.push(AblationRun {
                seed,
                variant,
                map_at_k: report.map_at_k,
                prec_at_k: report.prec_at_k,
            });
        }
    }
    let n = seeds.len() as f64;
    let rows: Vec<AblationRow> = Variant::ALL
        .iter()
        .map(|&variant| {
            let mine = runs.iter().filter(|r| r.variant == variant);
            let (map, prec) = mine.fold((0.0, 0.0), |(m, p), r| (m + r.map_at_k, p + r.prec_at_k));
            AblationRow {
                variant,
                seeds: seeds.len(),
                map_at_k: map / n,
                prec_at_k: prec / n,
            }
        })
        .collect();

    let mut csv = String::from("variant,seeds,map_at_k,prec_at_k\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{:?},{:?}", r.variant, r.seeds, r.map_at_k, r.prec_at_k);
    }
    write(&args.out.join(ABLATION), &csv)?;
    let mut csv = String::from("seed,variant,map_at_k,prec_at_k\n");
    for r in &runs {
        let _ = writeln!(csv, "{},{},{:?},{:?}", r.seed, r.variant, r.map_at_k, r.prec_at_k);
    }
    write(&args.out.join(ABLATION_RUNS), &csv)?;

    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.variant.to_string(), format!("{:.4}", r.map_at_k), format!("{:.4}", r.prec_at_k)])
        .collect();
    print!("{}", text_table(&["variant", "mAP@k", "Prec@k"], &table));
    Ok(AblationResult {
        k: args.k,
        runs,
        rows,
    })
}

pub fn cmd_dump_embeddings(args: &DumpArgs) -> Result<()> {
    let (ds, sem) = load_data(&args.data)?;
    let state = load_checkpoint(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let model = state.best_model()?;
    ensure!(
        model.dims().input_dim == ds.input_dim && model.dims().latent_dim == sem.dim,
        "checkpoint dimensions do not match the dataset"
    );
    let inputs: Vec<&[f64]> = ds.samples.iter().map(|s| s.input.as_slice()).collect();
    let features = model.embed_batch(&inputs)?;
    create_out(&args.out)?;
    let mut csv = String::from("id,class_id,domain_id");
    for i in 0..model.dims().latent_dim {
        let _ = write!(csv, ",f{i}");
    }
    csv.push('\n');
    for (s, f) in ds.samples.iter().zip(&features) {
        let _ = write!(csv, "{},{},{}", s.id, s.class_id, s.domain_id);
        for v in f {
            let _ = write!(csv, ",{v:?}");
        }
        csv.push('\n');
    }
    let path = args.out.join(EMBEDDINGS);
    write(&path, &csv)?;
    println!("wrote {} embeddings to {}", features.len(), path.display());
    Ok(())
}

/// Caps the worker pool from `UCDR_THREADS` when set.
pub fn configure_threads() -> Result<()> {
    if let Ok(value) = std::env::var("UCDR_THREADS") {
        let n: usize = value
            .trim()
            .parse()
            .with_context(|| format!("UCDR_THREADS must be a positive integer, got {value:?}"))?;
        ensure!(n >= 1, "UCDR_THREADS must be at least 1");
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}
