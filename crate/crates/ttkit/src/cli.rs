//! Command-line harness: `ttkit gen|pack|check|objective|mcla|curate`.
//!
//! Global flags: `--seed` (single entropy root; every stream is a documented
//! substream of it), `--format table|json` for reports, `--strict` for
//! record parsing, `--config <path>` for a JSON file with optional
//! `workload` / `objective` / `mcla` sections mirroring the corresponding
//! struct field names.
//!
//! Exit codes are a stable contract: 0 success, 1 verification failure,
//! 2 input error. `TTKIT_THREADS` caps per-task worker threads (unset means
//! single-threaded); task outputs are ordered by index regardless of
//! scheduling.

use crate::batch_file;
use crate::checks::{self, CheckOutcome};
use crate::mcla::{variance_report, MclaConfig, NoiseDistribution, NoiseModel};
use crate::objectives::{
    combined_loss, f2p_p2p_verify, group_advantages, grpo_reference, gspo_reference, opd_loss,
    pass_at_k_filter, turn_level_objective, CurationSample, ObjectiveConfig, TestOutcomes,
    TrajectoryTokens,
};
use crate::packing::{dfs_flatten, estimate_speedup, DenseMask, NormalizationMode};
use crate::records::{parse_records, write_task_line, ParsedTask};
use crate::refnet::{forward_logprobs, RefNetParams};
use crate::report::{render, ReportFormat, RunManifest, Section};
use crate::rng::Lcg64;
use crate::trajectory::{build_tree, Origin};
use crate::workload::{generate, WorkloadSpec};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFICATION: i32 = 1;
pub const EXIT_INPUT: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ttkit", version, about = "Trajectory-tree packing and RL-objective toolkit")]
pub struct Cli {
    /// Root seed for all randomness.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Report format.
    #[arg(long, global = true, value_enum, default_value = "table")]
    pub format: ReportFormat,
    /// Reject unknown record fields instead of warning.
    #[arg(long, global = true)]
    pub strict: bool,
    /// JSON config file with optional workload/objective/mcla sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic trajectory record file.
    Gen(GenArgs),
    /// Pack records into flattened TTK1 batches.
    Pack(PackArgs),
    /// Run verification suites over records (and optionally packed files).
    Check(CheckArgs),
    /// Compute objective values, ratios, and reduction residuals.
    Objective(ObjectiveArgs),
    /// Measure the K-fold log-probability averaging variance law.
    Mcla(MclaArgs),
    /// Apply the curation predicates to a results file.
    Curate(CurateArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Output record file (line-delimited JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Use a named entry of the shipped workload grid.
    #[arg(long)]
    pub grid: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    PathSum,
    PathMean,
}

impl From<ModeArg> for NormalizationMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::PathSum => NormalizationMode::PathSum,
            ModeArg::PathMean => NormalizationMode::PathMean,
        }
    }
}

#[derive(Debug, Args)]
pub struct PackArgs {
    /// Input record file.
    #[arg(long)]
    pub input: PathBuf,
    /// Directory for task_<i>.ttk1 outputs.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Loss-weight normalization mode.
    #[arg(long, value_enum, default_value = "path-sum")]
    pub mode: ModeArg,
    /// Also report the quadratic attention proxy.
    #[arg(long)]
    pub quadratic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SuiteArg {
    Roundtrip,
    Mask,
    Gradequiv,
    Objective,
    All,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Input record file.
    #[arg(long)]
    pub input: PathBuf,
    /// Directory of packed .ttk1 files to verify against the records.
    #[arg(long)]
    pub packed: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    pub suite: SuiteArg,
}

#[derive(Debug, Args)]
pub struct ObjectiveArgs {
    /// Input record file with rewards (and optionally dual logprobs).
    #[arg(long)]
    pub input: PathBuf,
    /// Reference-net parameter snapshot used to produce train logprobs when
    /// the records do not carry them. Defaults to a net seeded from --seed.
    #[arg(long)]
    pub params: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MclaArgs {}

#[derive(Debug, Args)]
pub struct CurateArgs {
    /// Input results file (line-delimited JSON).
    #[arg(long)]
    pub input: PathBuf,
}

/// Optional config file sections. Field names inside each section mirror the
/// corresponding struct exactly.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfigFile {
    pub workload: Option<WorkloadSpec>,
    pub objective: Option<ObjectiveConfig>,
    pub mcla: Option<MclaSection>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct MclaSection {
    pub sigma: f64,
    pub distribution: NoiseDistribution,
    /// Noise seed; defaults to the global --seed.
    pub seed: Option<u64>,
    #[serde(rename = "K")]
    pub k: u32,
    pub apply_icepop: bool,
    pub trials: usize,
    pub tokens: usize,
}

impl Default for MclaSection {
    fn default() -> Self {
        Self {
            sigma: 0.5,
            distribution: NoiseDistribution::Gaussian,
            seed: None,
            k: 8,
            apply_icepop: false,
            trials: 10_000,
            tokens: 1,
        }
    }
}

#[derive(Debug)]
struct CliError {
    code: i32,
    message: String,
}

impl CliError {
    fn input(message: impl ToString) -> Self {
        Self { code: EXIT_INPUT, message: message.to_string() }
    }

    fn verification(message: impl ToString) -> Self {
        Self { code: EXIT_VERIFICATION, message: message.to_string() }
    }
}

/// Worker count from TTKIT_THREADS; unset or unparsable means 1.
pub fn worker_threads() -> usize {
    std::env::var("TTKIT_THREADS").ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0).unwrap_or(1)
}

/// Index-ordered parallel map over tasks with a bounded worker count.
/// Results come back in input order regardless of scheduling.
pub fn par_map_indexed<T, R, F>(items: Vec<T>, threads: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(usize, T) -> R + Sync,
{
    if threads <= 1 || items.len() <= 1 {
        return items.into_iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let work: Vec<(usize, T)> = items.into_iter().enumerate().collect();
    let queue = std::sync::Mutex::new(work);
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let item = queue.lock().unwrap().pop();
                match item {
                    Some((i, t)) => {
                        let r = f(i, t);
                        results.lock().unwrap()[i] = Some(r);
                    }
                    None => break,
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("worker filled every slot")).collect()
}

/// Entry point used by the binary and by tests. Writes reports to `out` and
/// returns the process exit code.
pub fn run<W: Write>(args: &[String], out: &mut W) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(out, "{e}");
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match dispatch(&cli, args, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(out, "error: {}", e.message);
            e.code
        }
    }
}

fn dispatch<W: Write>(cli: &Cli, argv: &[String], out: &mut W) -> Result<i32, CliError> {
    let config = load_config(cli)?;
    let command_line = argv.join(" ");
    match &cli.command {
        Command::Gen(args) => cmd_gen(cli, &config, args, &command_line, out),
        Command::Pack(args) => cmd_pack(cli, &config, args, &command_line, out),
        Command::Check(args) => cmd_check(cli, args, out),
        Command::Objective(args) => cmd_objective(cli, &config, args, out),
        Command::Mcla(_) => cmd_mcla(cli, &config, out),
        Command::Curate(args) => cmd_curate(cli, args, out),
    }
}

fn load_config(cli: &Cli) -> Result<ConfigFile, CliError> {
    match &cli.config {
        None => Ok(ConfigFile::default()),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::input(format!("config {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::input(format!("config {}: {e}", path.display())))
        }
    }
}

fn seed_of(cli: &Cli) -> u64 {
    cli.seed.unwrap_or(0)
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

fn cmd_gen<W: Write>(
    cli: &Cli,
    config: &ConfigFile,
    args: &GenArgs,
    command_line: &str,
    out: &mut W,
) -> Result<i32, CliError> {
    let mut spec = match (&args.grid, &config.workload) {
        (Some(name), _) => WorkloadSpec::grid()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
            .ok_or_else(|| {
                let names: Vec<&str> = WorkloadSpec::grid().iter().map(|(n, _)| *n).collect();
                CliError::input(format!("unknown grid entry {name:?}; known: {names:?}"))
            })?,
        (None, Some(w)) => *w,
        (None, None) => WorkloadSpec::default(),
    };
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    spec.validate().map_err(CliError::input)?;

    let records = generate(&spec);
    let mut buf = Vec::new();
    for record in &records {
        write_task_line(&mut buf, record).map_err(CliError::input)?;
    }
    std::fs::write(&args.out, &buf)
        .map_err(|e| CliError::input(format!("{}: {e}", args.out.display())))?;

    let config_json = serde_json::to_string(&spec).expect("spec json");
    let mut manifest = RunManifest::new(command_line.to_string(), &config_json, spec.seed);
    manifest.add_output(&args.out).map_err(CliError::input)?;
    manifest
        .write_to(&manifest_path(&args.out))
        .map_err(|e| CliError::input(format!("manifest: {e}")))?;

    #[derive(Serialize)]
    struct GenReport<'a> {
        spec: &'a WorkloadSpec,
        tasks: usize,
        paths_per_task: u64,
        closed_form_ratio: f64,
        out: String,
    }
    let payload = GenReport {
        spec: &spec,
        tasks: records.len(),
        paths_per_task: spec.paths_per_task(),
        closed_form_ratio: spec.closed_form_ratio(),
        out: args.out.display().to_string(),
    };
    let mut section = Section::new("gen");
    section.push("tasks", payload.tasks);
    section.push("paths_per_task", payload.paths_per_task);
    section.push("closed_form_ratio", format!("{:.6}", payload.closed_form_ratio));
    section.push("out", &payload.out);
    let _ = write!(out, "{}", render(cli.format, &[section], &payload));
    Ok(EXIT_OK)
}

fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    output.with_file_name(name)
}

// ---------------------------------------------------------------------------
// pack
// ---------------------------------------------------------------------------

fn read_tasks(path: &Path, strict: bool) -> Result<(Vec<ParsedTask>, Vec<String>), CliError> {
    let file = std::fs::File::open(path)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let outcome = parse_records(std::io::BufReader::new(file), strict)
        .map_err(|e| CliError::input(e.to_string()))?;
    Ok((outcome.tasks, outcome.warnings))
}

fn cmd_pack<W: Write>(
    cli: &Cli,
    _config: &ConfigFile,
    args: &PackArgs,
    command_line: &str,
    out: &mut W,
) -> Result<i32, CliError> {
    let (tasks, warnings) = read_tasks(&args.input, cli.strict)?;
    for w in &warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| CliError::input(format!("{}: {e}", args.out_dir.display())))?;
    let mode: NormalizationMode = args.mode.into();

    struct TaskOut {
        index: usize,
        bytes: Vec<u8>,
        json: Option<String>,
        tree: crate::trajectory::TrajectoryTree,
    }
    let emit_json = cli.format == ReportFormat::Json;
    let packed: Vec<Result<TaskOut, String>> =
        par_map_indexed(tasks, worker_threads(), |index, task| {
            let tree = build_tree(&task.group.trajectories)
                .map_err(|e| format!("line {}: {e}", task.line))?;
            let batch =
                dfs_flatten(&tree, mode).map_err(|e| format!("line {}: {e}", task.line))?;
            let bytes = batch_file::to_bytes(&batch);
            let json = if emit_json {
                Some(batch_file::to_json(&batch).map_err(|e| e.to_string())?)
            } else {
                None
            };
            Ok(TaskOut { index, bytes, json, tree })
        });

    let mut trees = Vec::new();
    let mut outputs = Vec::new();
    for result in packed {
        let task = result.map_err(CliError::input)?;
        let path = args.out_dir.join(format!("task_{}.ttk1", task.index));
        std::fs::write(&path, &task.bytes)
            .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        outputs.push(path.clone());
        if let Some(json) = task.json {
            let jpath = args.out_dir.join(format!("task_{}.ttk1.json", task.index));
            std::fs::write(&jpath, json)
                .map_err(|e| CliError::input(format!("{}: {e}", jpath.display())))?;
            outputs.push(jpath);
        }
        trees.push(task.tree);
    }

    let speedup = estimate_speedup(&trees, args.quadratic);
    let mut manifest = RunManifest::new(command_line.to_string(), "{}", seed_of(cli));
    manifest.add_input(&args.input).map_err(CliError::input)?;
    for path in &outputs {
        manifest.add_output(path).map_err(CliError::input)?;
    }
    manifest
        .write_to(&args.out_dir.join("manifest.json"))
        .map_err(|e| CliError::input(format!("manifest: {e}")))?;

    let mut section = Section::new("pack");
    section.push("tasks", speedup.trees);
    section.push("tree_tokens", speedup.tree_tokens);
    section.push("linear_tokens", speedup.linear_tokens);
    section.push("redundancy_ratio", format!("{:.6}", speedup.token_ratio));
    if let Some(q) = &speedup.quadratic {
        section.push("quadratic_ratio", format!("{:.6}", q.ratio));
    }
    let _ = write!(out, "{}", render(cli.format, &[section], &speedup));
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------------
// check
// ---------------------------------------------------------------------------

fn cmd_check<W: Write>(cli: &Cli, args: &CheckArgs, out: &mut W) -> Result<i32, CliError> {
    let (tasks, warnings) = read_tasks(&args.input, cli.strict)?;
    for w in &warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    let packed = match &args.packed {
        None => None,
        Some(dir) => {
            let mut files = Vec::new();
            let entries = std::fs::read_dir(dir)
                .map_err(|e| CliError::input(format!("{}: {e}", dir.display())))?;
            for entry in entries {
                let entry = entry.map_err(|e| CliError::input(e.to_string()))?;
                let path = entry.path();
                if path.extension().is_some_and(|e| e == "ttk1") {
                    let bytes = std::fs::read(&path)
                        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
                    files.push((path.display().to_string(), bytes));
                }
            }
            files.sort_by(|a, b| a.0.cmp(&b.0));
            Some(files)
        }
    };

    let seed = seed_of(cli);
    let mut outcomes: Vec<CheckOutcome> = Vec::new();
    let run_suite = |s: SuiteArg| matches!(args.suite, SuiteArg::All) || args.suite == s;
    if run_suite(SuiteArg::Roundtrip) {
        outcomes.push(checks::run_roundtrip(&tasks, packed.as_deref()));
    }
    if run_suite(SuiteArg::Mask) {
        outcomes.push(checks::run_mask(&tasks, seed));
    }
    if run_suite(SuiteArg::Gradequiv) {
        outcomes.push(checks::run_gradequiv(&tasks, seed));
    }
    if run_suite(SuiteArg::Objective) {
        outcomes.push(checks::run_objective(&tasks, seed));
    }

    let mut sections = Vec::new();
    let mut all_passed = true;
    for outcome in &outcomes {
        let mut section = Section::new(format!("check {}", outcome.suite));
        section.push("cases", outcome.cases);
        section.push("status", if outcome.passed() { "pass" } else { "FAIL" });
        if let Some(err) = outcome.max_rel_err {
            section.push("max_rel_err", format!("{err:.3e}"));
        }
        for failure in outcome.failures.iter().take(10) {
            section.push("failure", failure);
        }
        all_passed &= outcome.passed();
        sections.push(section);
    }
    let _ = write!(out, "{}", render(cli.format, &sections, &outcomes));
    if cli.format == ReportFormat::Json {
        let _ = writeln!(out);
    }
    Ok(if all_passed { EXIT_OK } else { EXIT_VERIFICATION })
}

// ---------------------------------------------------------------------------
// objective
// ---------------------------------------------------------------------------

/// Trajectories longer than this must ship their own train logprobs; the
/// reference net is quadratic in sequence length and meant for desk scale.
const REFNET_TRAJ_LIMIT: usize = 1024;

fn refnet_train_logprobs(
    params: &RefNetParams,
    call: &crate::trajectory::LinearCall,
) -> Result<Vec<Option<f64>>, CliError> {
    let ids: Vec<u32> = call.tokens.iter().map(|t| t.token_id).collect();
    let pos: Vec<u32> = (0..ids.len() as u32).collect();
    let mask = DenseMask::causal(ids.len());
    let (lps, _) = forward_logprobs(params, &ids, &pos, &mask)
        .map_err(|e| CliError::input(format!("reference net: {e}")))?;
    Ok(call
        .tokens
        .iter()
        .zip(lps)
        .map(|(t, lp)| (t.origin == Origin::Generated).then_some(lp))
        .collect())
}

#[derive(Serialize)]
struct TrajectoryReport {
    call_id: String,
    advantage: f64,
    num_turns: usize,
    ratios: Vec<f64>,
    value: f64,
}

#[derive(Serialize)]
struct TaskObjectiveReport {
    line: usize,
    group_size: usize,
    advantages: Vec<f64>,
    trajectories: Vec<TrajectoryReport>,
    turn_level: f64,
    gspo: f64,
    grpo: f64,
    residual_gspo: f64,
    residual_grpo: f64,
    opd: f64,
    combined: f64,
}

fn cmd_objective<W: Write>(
    cli: &Cli,
    config: &ConfigFile,
    args: &ObjectiveArgs,
    out: &mut W,
) -> Result<i32, CliError> {
    let (tasks, warnings) = read_tasks(&args.input, cli.strict)?;
    for w in &warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    let cfg = config.objective.unwrap_or_default();
    cfg.validate().map_err(|e| CliError::input(e.to_string()))?;
    let seed = seed_of(cli);

    let mut reports = Vec::new();
    for task in &tasks {
        if task.group.trajectories.len() < 2 {
            return Err(CliError::input(format!(
                "line {}: objective needs at least 2 trajectories per task",
                task.line
            )));
        }
        let max_len =
            task.group.trajectories.iter().map(|c| c.tokens.len()).max().unwrap_or(0);
        let vocab = task.group.trajectories[0].vocab_size as usize;
        let needs_net = task.train_logprobs.iter().any(Option::is_none)
            || task.teacher_logprobs.iter().any(Option::is_none);
        if needs_net && max_len > REFNET_TRAJ_LIMIT {
            return Err(CliError::input(format!(
                "line {}: trajectories of {max_len} tokens exceed the reference-net \
                 limit {REFNET_TRAJ_LIMIT}; supply train_logprobs/teacher_logprobs in the records",
                task.line
            )));
        }
        let (train_net, teacher_net) = if needs_net {
            let train = match &args.params {
                Some(path) => {
                    let text = std::fs::read_to_string(path)
                        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
                    RefNetParams::from_snapshot_json(&text)
                        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?
                }
                None => RefNetParams::seeded(seed, vocab, 8, max_len + 1),
            };
            // The teacher is a disjoint substream of the same root seed.
            let teacher_seed = Lcg64::substream(seed, 0x7465).next_u64();
            let teacher = RefNetParams::seeded(teacher_seed, vocab, 8, max_len + 1);
            (Some(train), Some(teacher))
        } else {
            (None, None)
        };

        let mut group = Vec::new();
        let mut opd_students = Vec::new();
        let mut opd_teachers = Vec::new();
        let mut opd_sampled = Vec::new();
        for (i, call) in task.group.trajectories.iter().enumerate() {
            let train = match &task.train_logprobs[i] {
                Some(values) => values.clone(),
                None => refnet_train_logprobs(train_net.as_ref().unwrap(), call)?,
            };
            let teacher = match &task.teacher_logprobs[i] {
                Some(values) => values.clone(),
                None => refnet_train_logprobs(teacher_net.as_ref().unwrap(), call)?,
            };
            let traj = checks::trajectory_tokens_from_call(call, Some(&train));
            for token in 0..traj.len() {
                if traj.origins[token] == Origin::Generated {
                    opd_students.push(train[token].unwrap_or(0.0));
                    opd_teachers.push(teacher[token].unwrap_or(0.0));
                    opd_sampled.push(true);
                }
            }
            group.push(traj);
        }
        let rewards = &task.group.rewards;

        let outcome = turn_level_objective(&group, rewards, &cfg)
            .map_err(|e| CliError::input(format!("line {}: {e}", task.line)))?;
        let gspo = gspo_reference(&group, rewards, &cfg)
            .map_err(|e| CliError::input(format!("line {}: {e}", task.line)))?;
        let grpo = grpo_reference(&group, rewards, &cfg)
            .map_err(|e| CliError::input(format!("line {}: {e}", task.line)))?;

        // Reduction residuals on the forced views.
        let single: Vec<TrajectoryTokens> = group
            .iter()
            .map(|t| {
                let mut v = t.clone();
                v.turns = vec![crate::trajectory::TurnSpan::new(
                    0,
                    v.len(),
                    crate::trajectory::Role::Assistant,
                )];
                v
            })
            .collect();
        let per_token: Vec<TrajectoryTokens> = group
            .iter()
            .map(|t| {
                let mut v = t.clone();
                v.turns = (0..v.len())
                    .map(|i| {
                        crate::trajectory::TurnSpan::new(
                            i,
                            i + 1,
                            crate::trajectory::Role::Assistant,
                        )
                    })
                    .collect();
                v
            })
            .collect();
        let residual_gspo = (turn_level_objective(&single, rewards, &cfg)
            .map_err(|e| CliError::input(format!("line {}: {e}", task.line)))?
            .value
            - gspo)
            .abs();
        let residual_grpo = (turn_level_objective(&per_token, rewards, &cfg)
            .map_err(|e| CliError::input(format!("line {}: {e}", task.line)))?
            .value
            - grpo)
            .abs();

        let opd = opd_loss(&opd_students, &opd_teachers, &opd_sampled, &cfg)
            .map_err(|e| CliError::input(format!("line {}: {e}", task.line)))?;
        let advantages = group_advantages(rewards, &cfg)
            .map_err(|e| CliError::input(format!("line {}: {e}", task.line)))?;

        reports.push(TaskObjectiveReport {
            line: task.line,
            group_size: group.len(),
            advantages,
            trajectories: task
                .group
                .trajectories
                .iter()
                .zip(&outcome.per_trajectory)
                .map(|(call, t)| TrajectoryReport {
                    call_id: call.call_id.clone(),
                    advantage: t.advantage,
                    num_turns: t.num_turns,
                    ratios: t.ratios.ratios.clone(),
                    value: t.value,
                })
                .collect(),
            turn_level: outcome.value,
            gspo,
            grpo,
            residual_gspo,
            residual_grpo,
            opd: opd.value,
            combined: combined_loss(outcome.value, opd.value, &cfg),
        });
    }

    let mut sections = Vec::new();
    for report in &reports {
        let mut section = Section::new(format!("objective line {}", report.line));
        section.push("group_size", report.group_size);
        section.push("turn_level", format!("{:.9}", report.turn_level));
        section.push("gspo", format!("{:.9}", report.gspo));
        section.push("grpo", format!("{:.9}", report.grpo));
        section.push("residual_gspo", format!("{:.3e}", report.residual_gspo));
        section.push("residual_grpo", format!("{:.3e}", report.residual_grpo));
        section.push("opd", format!("{:.9}", report.opd));
        section.push("combined", format!("{:.9}", report.combined));
        sections.push(section);
    }
    let _ = write!(out, "{}", render(cli.format, &sections, &reports));
    if cli.format == ReportFormat::Json {
        let _ = writeln!(out);
    }
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------------
// mcla
// ---------------------------------------------------------------------------

fn cmd_mcla<W: Write>(cli: &Cli, config: &ConfigFile, out: &mut W) -> Result<i32, CliError> {
    let section = config.mcla.unwrap_or_default();
    let seed = section.seed.unwrap_or_else(|| seed_of(cli));
    let model = NoiseModel { sigma: section.sigma, distribution: section.distribution, seed };
    let cfg = MclaConfig { k: section.k, apply_icepop: section.apply_icepop };
    // Deterministic true logprob sequence from a documented substream.
    let mut rng = Lcg64::substream(seed, 0x6c7073);
    let true_lps: Vec<f64> = (0..section.tokens.max(1)).map(|_| -rng.uniform(0.1, 3.0)).collect();
    let report = variance_report(&true_lps, &model, &cfg, section.trials)
        .map_err(|e| CliError::input(e.to_string()))?;

    #[derive(Serialize)]
    struct MclaReport<'a> {
        config: &'a MclaSection,
        #[serde(flatten)]
        report: &'a crate::mcla::VarianceReport,
    }
    let payload = MclaReport { config: &section, report: &report };
    let mut table = Section::new("mcla");
    table.push("sigma", report.sigma);
    table.push("K", report.k);
    table.push("tokens", report.tokens);
    table.push("trials", report.trials);
    table.push("var_raw", format!("{:.6e}", report.var_raw));
    table.push("var_mcla", format!("{:.6e}", report.var_mcla));
    table.push("weight_var_raw", format!("{:.6e}", report.weight_var_raw));
    table.push("weight_var_mcla", format!("{:.6e}", report.weight_var_mcla));
    match report.reduction_factor {
        Some(r) => {
            table.push("reduction_factor", format!("{r:.4}"));
            table.push(
                "ci_95",
                format!("[{:.4}, {:.4}]", report.ci_low.unwrap(), report.ci_high.unwrap()),
            );
        }
        None => table.push("reduction_factor", "not applicable (degenerate noise)"),
    }
    let _ = write!(out, "{}", render(cli.format, &[table], &payload));
    if cli.format == ReportFormat::Json {
        let _ = writeln!(out);
    }
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------------
// curate
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct CurateRecord {
    id: String,
    #[serde(default)]
    pass_at_k: Option<CurationSample>,
    #[serde(default)]
    tests: Option<TestsRecord>,
}

#[derive(Debug, Deserialize)]
struct TestsRecord {
    fail_set: BTreeMap<String, crate::objectives::TestStatus>,
    pass_set: BTreeMap<String, crate::objectives::TestStatus>,
}

#[derive(Debug, Serialize)]
struct CurateDecision {
    id: String,
    kind: &'static str,
    retained: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    r_hat: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    f2p: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    p2p: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    reason: Option<String>,
}

#[derive(Debug, Serialize)]
struct CurateReport {
    decisions: Vec<CurateDecision>,
    records: usize,
    retained: usize,
    retention_rate: f64,
}

fn cmd_curate<W: Write>(cli: &Cli, args: &CurateArgs, out: &mut W) -> Result<i32, CliError> {
    let text = std::fs::read_to_string(&args.input)
        .map_err(|e| CliError::input(format!("{}: {e}", args.input.display())))?;
    let mut decisions = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: CurateRecord = serde_json::from_str(line)
            .map_err(|e| CliError::input(format!("line {}: {e}", idx + 1)))?;
        match (record.pass_at_k, record.tests) {
            (Some(sample), None) => {
                let d = pass_at_k_filter(&sample);
                decisions.push(CurateDecision {
                    id: record.id,
                    kind: "pass_at_k",
                    retained: d.retained,
                    r_hat: Some(d.r_hat),
                    f2p: None,
                    p2p: None,
                    reason: (!d.retained).then(|| {
                        if d.correct == 0 { "r_hat=0".into() } else { "r_hat=1".into() }
                    }),
                });
            }
            (None, Some(tests)) => {
                let outcomes = TestOutcomes::new(tests.fail_set, tests.pass_set)
                    .map_err(|e| CliError::input(format!("line {}: {e}", idx + 1)))?;
                let v = f2p_p2p_verify(&outcomes);
                let reason = match (v.f2p, v.p2p) {
                    (false, false) => Some("F2P+P2P".to_string()),
                    (false, true) => Some("F2P".to_string()),
                    (true, false) => Some("P2P".to_string()),
                    (true, true) => None,
                };
                decisions.push(CurateDecision {
                    id: record.id,
                    kind: "f2p_p2p",
                    retained: v.retained,
                    r_hat: None,
                    f2p: Some(v.f2p),
                    p2p: Some(v.p2p),
                    reason,
                });
            }
            _ => {
                return Err(CliError::input(format!(
                    "line {}: record must carry exactly one of pass_at_k or tests",
                    idx + 1
                )))
            }
        }
    }
    if decisions.is_empty() {
        return Err(CliError::verification("no curation records found"));
    }
    let retained = decisions.iter().filter(|d| d.retained).count();
    let report = CurateReport {
        records: decisions.len(),
        retained,
        retention_rate: retained as f64 / decisions.len() as f64,
        decisions,
    };

    let mut section = Section::new("curate");
    section.push("records", report.records);
    section.push("retained", report.retained);
    section.push("retention_rate", format!("{:.4}", report.retention_rate));
    for d in &report.decisions {
        let detail = match d.kind {
            "pass_at_k" => format!(
                "{} r_hat={:.3} -> {}",
                d.id,
                d.r_hat.unwrap(),
                if d.retained { "retained" } else { "discarded" }
            ),
            _ => format!(
                "{} f2p={} p2p={} -> {}{}",
                d.id,
                d.f2p.unwrap(),
                d.p2p.unwrap(),
                if d.retained { "retained" } else { "discarded" },
                d.reason.as_ref().map(|r| format!(" ({r})")).unwrap_or_default()
            ),
        };
        section.push("decision", detail);
    }
    let _ = write!(out, "{}", render(cli.format, &[section], &report));
    if cli.format == ReportFormat::Json {
        let _ = writeln!(out);
    }
    Ok(EXIT_OK)
}
