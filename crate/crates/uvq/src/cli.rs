//! Command-line driver. Each subcommand writes a run log whose first
//! record is the fully resolved command line; `replay` re-executes a log
//! and checks that every artifact comes out byte-identical.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use uvq_core::codebook::{Codebook, DEFAULT_BANDWIDTH};
use uvq_core::nn::{Mode, TinyNet};
use uvq_core::pnc::{Construction, PncConfig};
use uvq_core::storage::{account, CompressionReport, Sharing};
use uvq_core::train::score_output;

use crate::format::{self, CodebookFile, CompressedFile, FormatError};
use crate::pipeline::{self, CodebookSpec, ZooMember, DESK_D, DESK_K};
use crate::presets::{run_preset, Preset};
use crate::report::{self, OutputFormat, Table};
use crate::runlog::{self, RunLog};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numeric: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<uvq_core::Error> for CliError {
    fn from(e: uvq_core::Error) -> Self {
        use uvq_core::Error as E;
        match e {
            E::Parameter(_) => CliError::Usage(e.to_string()),
            E::Diverged { .. } | E::NonFinite { .. } | E::Unconverged { .. } => {
                CliError::Numeric(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Clone, Debug, Serialize, Deserialize)]
#[command(
    name = "uvq",
    version,
    about = "Universal-codebook vector quantization of small networks"
)]
pub struct Cli {
    /// Base seed for every random choice.
    #[arg(long, global = true, env = "UVQ_SEED")]
    pub seed: Option<u64>,
    /// Output format of printed tables.
    #[arg(long, global = true, value_enum, default_value_t)]
    pub format: OutputFormat,
    /// Run log destination; defaults to `<out>.log.jsonl` or standard error.
    #[arg(long, global = true)]
    pub log: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct CodebookArgs {
    /// Number of codewords.
    #[arg(long, default_value_t = DESK_K)]
    pub k: usize,
    /// Sub-vector length.
    #[arg(long, default_value_t = DESK_D)]
    pub d: usize,
    /// Kernel bandwidth.
    #[arg(long, default_value_t = DEFAULT_BANDWIDTH)]
    pub bandwidth: f64,
    /// Sub-vectors drawn per network (default: the most every network can supply).
    #[arg(long)]
    pub quota: Option<usize>,
}

impl CodebookArgs {
    fn spec(&self, seed: u64) -> CodebookSpec {
        CodebookSpec {
            k: self.k,
            d: self.d,
            bandwidth: self.bandwidth,
            quota: self.quota,
            seed,
        }
    }
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct PncArgs {
    /// Freeze threshold on the largest ratio.
    #[arg(long, default_value_t = 0.9999)]
    pub alpha: f64,
    /// Candidate codewords per sub-vector.
    #[arg(long, default_value_t = 64)]
    pub candidates: usize,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long = "lr-ratios", default_value_t = 0.3)]
    pub lr_ratios: f64,
    #[arg(long = "lr-params", default_value_t = 1e-3)]
    pub lr_params: f64,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    /// Fail instead of hardening sub-vectors left unfrozen by the budget.
    #[arg(long)]
    pub no_harden_leftovers: bool,
    /// Disable progressive freezing; harden everything after the budget.
    #[arg(long)]
    pub harden_at_end: bool,
    /// Probe hard accuracy every this many epochs (0 disables).
    #[arg(long, default_value_t = 0)]
    pub eval_cadence: usize,
}

impl PncArgs {
    fn config(&self, seed: u64) -> PncConfig {
        PncConfig {
            alpha: self.alpha,
            candidates: self.candidates,
            max_epochs: self.epochs,
            lr_ratios: self.lr_ratios,
            lr_params: self.lr_params,
            batch: self.batch,
            harden_leftovers: !self.no_harden_leftovers,
            construction: if self.harden_at_end {
                Construction::HardenAtEnd
            } else {
                Construction::Progressive
            },
            eval_cadence: self.eval_cadence,
            seed,
            ..PncConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum BaselineKind {
    /// Per-tensor symmetric uniform quantization.
    Uq,
    /// Per-layer k-means vector quantization.
    Pvq,
    /// Nearest codeword of a universal codebook.
    Uvq,
}

#[derive(Subcommand, Clone, Debug, Serialize, Deserialize)]
pub enum Command {
    /// Train the float zoo and write one weight bundle per network.
    Zoo {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pool sub-vectors of float networks and sample a universal codebook.
    FitCodebook {
        /// Weight bundles to pool (repeatable).
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        #[command(flatten)]
        codebook: CodebookArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compress a float network against a universal codebook.
    Compress {
        #[arg(long)]
        codebook: PathBuf,
        /// Weight bundle of the float network.
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        pnc: PncArgs,
        /// Store the universal codebook inside the compressed file.
        #[arg(long)]
        embed_codebook: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a compressed model and score it on its test split.
    Eval {
        /// Compressed model file.
        #[arg(long)]
        model: PathBuf,
        /// Universal codebook, unless embedded in the model.
        #[arg(long)]
        codebook: Option<PathBuf>,
    },
    /// Compare quantizers on the universal layers of float networks.
    Baseline {
        #[arg(long = "type", value_enum, required = true)]
        kinds: Vec<BaselineKind>,
        /// Bit-width for uniform quantization.
        #[arg(long, default_value_t = 2)]
        bits: u32,
        #[arg(long, default_value_t = DESK_K)]
        k: usize,
        #[arg(long, default_value_t = DESK_D)]
        d: usize,
        /// Lloyd iterations for per-layer k-means.
        #[arg(long, default_value_t = 50)]
        iters: usize,
        /// Weight bundles (repeatable).
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        /// Universal codebook for the `uvq` row.
        #[arg(long)]
        codebook: Option<PathBuf>,
    },
    /// Storage and I/O accounting for compressed models.
    Report {
        /// Compressed model files (repeatable).
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        #[arg(long)]
        codebook: Option<PathBuf>,
        /// Float bundles, matched by network name, for weight MSE.
        #[arg(long = "float")]
        floats: Vec<PathBuf>,
        /// Codebook sharing policy used for the I/O count.
        #[arg(long, value_enum, default_value = "universal")]
        sharing: SharingArg,
    },
    /// Run an ablation preset on one network.
    Ablate {
        #[arg(long, value_enum)]
        preset: Preset,
        #[arg(long)]
        codebook: PathBuf,
        /// Weight bundle of the network to compress.
        #[arg(long)]
        model: PathBuf,
        /// Bundles pooled by the codebook-source sweep, in order.
        #[arg(long = "source")]
        sources: Vec<PathBuf>,
        #[command(flatten)]
        codebook_args: CodebookArgs,
        #[command(flatten)]
        pnc: PncArgs,
        /// Write the preset results as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run a logged command and compare its artifacts.
    Replay {
        /// Run log to replay.
        run_log: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum SharingArg {
    Universal,
    PerLayer,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Zoo { .. } => "zoo",
            Command::FitCodebook { .. } => "fit-codebook",
            Command::Compress { .. } => "compress",
            Command::Eval { .. } => "eval",
            Command::Baseline { .. } => "baseline",
            Command::Report { .. } => "report",
            Command::Ablate { .. } => "ablate",
            Command::Replay { .. } => "replay",
        }
    }

    fn out(&self) -> Option<&Path> {
        match self {
            Command::Zoo { out }
            | Command::FitCodebook { out, .. }
            | Command::Compress { out, .. } => Some(out),
            Command::Ablate { out, .. } => out.as_deref(),
            _ => None,
        }
    }

    fn out_mut(&mut self) -> Option<&mut PathBuf> {
        match self {
            Command::Zoo { out }
            | Command::FitCodebook { out, .. }
            | Command::Compress { out, .. } => Some(out),
            Command::Ablate { out, .. } => out.as_mut(),
            _ => None,
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn format_err(path: &Path) -> impl Fn(FormatError) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

pub fn load_member(path: &Path) -> Result<ZooMember> {
    let bundle = format::decode_bundle(&read(path)?).map_err(format_err(path))?;
    Ok(ZooMember::from_bundle(bundle)?)
}

pub fn load_codebook(path: &Path) -> Result<CodebookFile> {
    format::decode_codebook(&read(path)?).map_err(format_err(path))
}

pub fn load_model(path: &Path) -> Result<CompressedFile> {
    format::decode_model(&read(path)?).map_err(format_err(path))
}

/// The universal codebook for a compressed model: embedded, else loaded.
fn universal_for(file: &CompressedFile, path: Option<&Path>) -> Result<Option<Codebook>> {
    if let Some(cb) = &file.embedded {
        return Ok(Some(cb.clone()));
    }
    match (file.model.universal, path) {
        (None, _) => Ok(None),
        (Some(_), Some(p)) => Ok(Some(load_codebook(p)?.codebook)),
        (Some(_), None) => Err(CliError::Usage("this model needs --codebook".into())),
    }
}

struct Ctx<'a> {
    seed: u64,
    format: OutputFormat,
    log: RunLog,
    stdout: &'a mut dyn Write,
}

impl Ctx<'_> {
    fn write_artifact(&mut self, role: &str, path: &Path, bytes: &[u8]) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, bytes)?;
        self.log.artifact(role, path, bytes)?;
        Ok(())
    }

    fn print(&mut self, table: &Table) -> Result<()> {
        self.stdout
            .write_all(table.render(self.format).as_bytes())?;
        self.log.record("table", &table.json())?;
        Ok(())
    }
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli, &mut io::stdout()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("uvq: {e}");
            e.exit_code()
        }
    }
}

/// Runs one command, writing tables to `stdout`.
pub fn run(mut cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    cli.seed = Some(seed);
    if let Command::Replay { run_log } = &cli.command {
        return replay(run_log, cli.format, stdout);
    }
    let log = match (&cli.log, cli.command.out()) {
        (Some(p), _) => RunLog::to_file(p)?,
        (None, Some(out)) => {
            let mut name = out.as_os_str().to_owned();
            name.push(".log.jsonl");
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            RunLog::to_file(Path::new(&name))?
        }
        (None, None) => RunLog::to_stderr(),
    };
    let mut ctx = Ctx {
        seed,
        format: cli.format,
        log,
        stdout,
    };
    ctx.log.record(
        "config",
        &json!({ "command": cli.command.name(), "cli": cli }),
    )?;
    let result = dispatch(&cli.command, &mut ctx);
    match &result {
        Ok(()) => ctx.log.record("status", &json!({ "ok": true }))?,
        Err(e) => ctx.log.record(
            "status",
            &json!({ "ok": false, "error": e.to_string(), "exit_code": e.exit_code() }),
        )?,
    }
    ctx.log.flush()?;
    result
}

fn dispatch(cmd: &Command, ctx: &mut Ctx<'_>) -> Result<()> {
    match cmd {
        Command::Zoo { out } => cmd_zoo(ctx, out),
        Command::FitCodebook {
            models,
            codebook,
            out,
        } => cmd_fit_codebook(ctx, models, codebook, out),
        Command::Compress {
            codebook,
            model,
            pnc,
            embed_codebook,
            out,
        } => cmd_compress(ctx, codebook, model, pnc, *embed_codebook, out),
        Command::Eval { model, codebook } => cmd_eval(ctx, model, codebook.as_deref()),
        Command::Baseline {
            kinds,
            bits,
            k,
            d,
            iters,
            models,
            codebook,
        } => cmd_baseline(
            ctx,
            kinds,
            *bits,
            *k,
            *d,
            *iters,
            models,
            codebook.as_deref(),
        ),
        Command::Report {
            models,
            codebook,
            floats,
            sharing,
        } => cmd_report(ctx, models, codebook.as_deref(), floats, *sharing),
        Command::Ablate {
            preset,
            codebook,
            model,
            sources,
            codebook_args,
            pnc,
            out,
        } => cmd_ablate(
            ctx,
            *preset,
            codebook,
            model,
            sources,
            codebook_args,
            pnc,
            out.as_deref(),
        ),
        Command::Replay { .. } => unreachable!("handled before dispatch"),
    }
}

fn cmd_zoo(ctx: &mut Ctx<'_>, out: &Path) -> Result<()> {
    let zoo = pipeline::train_zoo(ctx.seed)?;
    for m in &zoo {
        let path = out.join(format!("{}.uvqw", m.net.name));
        ctx.write_artifact(&m.net.name, &path, &format::encode_bundle(&m.bundle()))?;
        ctx.log.record(
            "float",
            &json!({ "network": m.net.name, "score": m.float_score }),
        )?;
    }
    ctx.print(&report::zoo_table(&zoo))
}

fn cmd_fit_codebook(
    ctx: &mut Ctx<'_>,
    models: &[PathBuf],
    args: &CodebookArgs,
    out: &Path,
) -> Result<()> {
    let members = models
        .iter()
        .map(|p| load_member(p))
        .collect::<Result<Vec<_>>>()?;
    let nets: Vec<&TinyNet> = members.iter().map(|m| &m.net).collect();
    let file = pipeline::fit_codebook(&nets, &args.spec(ctx.seed))?;
    ctx.write_artifact("codebook", out, &format::encode_codebook(&file))?;
    let mut t = Table::new(
        "universal codebook",
        &["k", "d", "bandwidth", "quota", "sources", "fingerprint"],
    );
    t.push(vec![
        file.codebook.k().into(),
        file.codebook.d().into(),
        file.meta.bandwidth.into(),
        file.meta.quota.into(),
        file.meta.sources.join("+").into(),
        format!("{:016x}", file.codebook.fingerprint()).into(),
    ]);
    ctx.print(&t)
}

fn cmd_compress(
    ctx: &mut Ctx<'_>,
    codebook: &Path,
    model: &Path,
    pnc: &PncArgs,
    embed: bool,
    out: &Path,
) -> Result<()> {
    let cb = load_codebook(codebook)?.codebook;
    let member = load_member(model)?;
    let cfg = pnc.config(ctx.seed);
    let outcome = pipeline::run_compress(&member, &cb, &cfg)?;
    for s in &outcome.trace.steps {
        ctx.log.record("step", s)?;
    }
    for p in &outcome.trace.probes {
        ctx.log.record("probe", p)?;
    }
    let file = CompressedFile {
        model: outcome.model.clone(),
        embedded: embed.then(|| cb.clone()),
        data_seed: member.data_seed,
    };
    ctx.write_artifact("model", out, &format::encode_model(&file))?;
    let trace = &outcome.trace;
    ctx.log.record(
        "result",
        &json!({
            "network": member.net.name,
            "float_score": member.float_score,
            "hard_score": trace.final_score,
            "leftovers": trace.leftovers,
            "steps": trace.steps.len(),
            "weight_mse": trace.weight_mse,
            "histogram": trace.histogram,
        }),
    )?;
    let rep = account(
        &outcome.model,
        Some(&member.net),
        Some(&cb),
        Sharing::Universal,
        1,
        1,
    )?;
    let mut t = Table::new(
        "compression",
        &[
            "network",
            "float",
            "hard",
            "leftovers",
            "steps",
            "weight_mse",
            "bits_per_weight",
            "ratio_total",
        ],
    );
    t.push(vec![
        member.net.name.clone().into(),
        member.float_score.into(),
        trace.final_score.into(),
        trace.leftovers.into(),
        trace.steps.len().into(),
        trace.weight_mse.into(),
        rep.bits_per_weight.into(),
        rep.ratio_total.into(),
    ]);
    ctx.print(&t)
}

fn cmd_eval(ctx: &mut Ctx<'_>, model: &Path, codebook: Option<&Path>) -> Result<()> {
    let file = load_model(model)?;
    let universal = universal_for(&file, codebook)?;
    let net = file.model.decode(universal.as_ref())?;
    let kind = uvq_core::nn::ZooNet::from_name(&net.name)
        .ok_or_else(|| CliError::Data(format!("'{}' is not a zoo network", net.name)))?;
    let ds = uvq_core::data::Dataset::for_net(kind, file.data_seed);
    let mut t = Table::new("evaluation", &["network", "split", "examples", "score"]);
    for (name, split) in [("calib", &ds.calib), ("test", &ds.test)] {
        let out = net.forward(&split.inputs, Mode::Eval)?;
        let s = score_output(out.output(), &split.targets, ds.task);
        ctx.log
            .record("score", &json!({ "split": name, "score": s }))?;
        t.push(vec![
            net.name.clone().into(),
            name.into(),
            split.len().into(),
            s.into(),
        ]);
    }
    ctx.print(&t)
}

#[allow(clippy::too_many_arguments)]
fn cmd_baseline(
    ctx: &mut Ctx<'_>,
    kinds: &[BaselineKind],
    bits: u32,
    k: usize,
    d: usize,
    iters: usize,
    models: &[PathBuf],
    codebook: Option<&Path>,
) -> Result<()> {
    let members = models
        .iter()
        .map(|p| load_member(p))
        .collect::<Result<Vec<_>>>()?;
    let nets: Vec<&TinyNet> = members.iter().map(|m| &m.net).collect();
    let mut rows = Vec::new();
    for kind in kinds {
        let row = match kind {
            BaselineKind::Uq => pipeline::uq_baseline(&nets, bits)?,
            BaselineKind::Pvq => pipeline::pvq_baseline(&nets, k, d, iters, ctx.seed)?,
            BaselineKind::Uvq => {
                let path = codebook
                    .ok_or_else(|| CliError::Usage("--type uvq needs --codebook".into()))?;
                pipeline::uvq_baseline(&nets, &load_codebook(path)?.codebook)?
            }
        };
        ctx.log.record("baseline", &row)?;
        rows.push(row);
    }
    ctx.print(&report::baseline_table(&rows))
}

fn cmd_report(
    ctx: &mut Ctx<'_>,
    models: &[PathBuf],
    codebook: Option<&Path>,
    floats: &[PathBuf],
    sharing: SharingArg,
) -> Result<()> {
    let files = models
        .iter()
        .map(|p| load_model(p))
        .collect::<Result<Vec<_>>>()?;
    let float_nets = floats
        .iter()
        .map(|p| load_member(p).map(|m| m.net))
        .collect::<Result<Vec<_>>>()?;
    let layer_count: usize = files.iter().map(|f| f.model.layers.len()).sum();
    let sharing = match sharing {
        SharingArg::Universal => Sharing::Universal,
        SharingArg::PerLayer => Sharing::PerLayer,
    };
    let mut reports: Vec<CompressionReport> = Vec::new();
    for f in &files {
        let universal = universal_for(f, codebook)?;
        let float = float_nets.iter().find(|n| n.name == f.model.net.name);
        let r = account(
            &f.model,
            float,
            universal.as_ref(),
            sharing,
            layer_count,
            files.len(),
        )?;
        ctx.log.record("report", &r)?;
        reports.push(r);
    }
    ctx.print(&report::compression_table(&reports))
}

#[allow(clippy::too_many_arguments)]
fn cmd_ablate(
    ctx: &mut Ctx<'_>,
    preset: Preset,
    codebook: &Path,
    model: &Path,
    sources: &[PathBuf],
    codebook_args: &CodebookArgs,
    pnc: &PncArgs,
    out: Option<&Path>,
) -> Result<()> {
    let cb = load_codebook(codebook)?.codebook;
    let target = load_member(model)?;
    let source_members = sources
        .iter()
        .map(|p| load_member(p))
        .collect::<Result<Vec<_>>>()?;
    if preset == Preset::CodebookSourceSweep && source_members.is_empty() {
        return Err(CliError::Usage(
            "codebook-source-sweep needs at least one --source".into(),
        ));
    }
    let source_nets: Vec<&TinyNet> = source_members.iter().map(|m| &m.net).collect();
    let result = run_preset(
        preset,
        &target,
        &cb,
        &source_nets,
        &codebook_args.spec(ctx.seed),
        &pnc.config(ctx.seed),
    )?;
    for r in &result.rows {
        ctx.log.record("arm", r)?;
    }
    if let Some(path) = out {
        let bytes =
            serde_json::to_vec_pretty(&result).map_err(|e| CliError::Data(e.to_string()))?;
        ctx.write_artifact("ablation", path, &bytes)?;
    }
    ctx.print(&result.table())
}

/// Re-executes the command recorded in `run_log` with outputs redirected to
/// a scratch directory and compares artifact digests.
fn replay(run_log: &Path, format: OutputFormat, stdout: &mut dyn Write) -> Result<()> {
    let records = runlog::read_records(run_log)?;
    let config = records
        .iter()
        .find(|r| r["kind"] == "config")
        .ok_or_else(|| CliError::Data("run log has no config record".into()))?;
    let mut cli: Cli = serde_json::from_value(config["cli"].clone())
        .map_err(|e| CliError::Data(format!("bad config record: {e}")))?;
    if matches!(cli.command, Command::Replay { .. }) {
        return Err(CliError::Usage("cannot replay a replay".into()));
    }
    let recorded: Vec<&Value> = records.iter().filter(|r| r["kind"] == "artifact").collect();
    let scratch = std::env::temp_dir().join(format!(
        "uvq-replay-{}-{}",
        std::process::id(),
        cli.command.name()
    ));
    fs::create_dir_all(&scratch)?;
    let original_out = cli.command.out().map(Path::to_path_buf);
    if let Some(out) = cli.command.out_mut() {
        *out = scratch.join(out.file_name().unwrap_or_else(|| "out".as_ref()));
    }
    let new_out = cli.command.out().map(Path::to_path_buf);
    let replay_log = scratch.join("replay.log.jsonl");
    cli.log = Some(replay_log.clone());
    run(cli, &mut io::sink())?;
    let fresh = runlog::read_records(&replay_log)?;
    let fresh: Vec<&Value> = fresh.iter().filter(|r| r["kind"] == "artifact").collect();

    let mut t = Table::new(
        "replay",
        &[
            "artifact",
            "recorded_sha256",
            "replayed_sha256",
            "identical",
        ],
    );
    let mut all_match = recorded.len() == fresh.len();
    for rec in &recorded {
        let role = rec["role"].as_str().unwrap_or("");
        let again = fresh.iter().find(|f| f["role"] == rec["role"]);
        let (a, b) = (
            rec["sha256"].as_str().unwrap_or(""),
            again.and_then(|f| f["sha256"].as_str()).unwrap_or("-"),
        );
        let same = a == b;
        all_match &= same;
        t.push(vec![role.into(), a.into(), b.into(), same.into()]);
    }
    stdout.write_all(t.render(format).as_bytes())?;
    if let (Some(_), Some(new)) = (original_out, new_out) {
        let _ = fs::remove_dir_all(if new.is_dir() { new } else { scratch.clone() });
    }
    let _ = fs::remove_dir_all(&scratch);
    if all_match {
        Ok(())
    } else {
        Err(CliError::Data(
            "replayed artifacts differ from the run log".into(),
        ))
    }
}
