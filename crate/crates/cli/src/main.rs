use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use evalkit::comparison::ComparisonMatrix;
use evalkit::datatools::{
    filter_corpus, fit_normalizer, parse_demo_jsonl, MotionThresholds, NormalizerRegistry, ROTATION_THRESHOLD_DEG,
    TRANSLATION_THRESHOLD_M,
};
use evalkit::posterior::{beta_posterior, dirichlet_mean_posterior};
use evalkit::protocol::{create_session, SessionPlan};
use evalkit::report::{
    analyze_aggregate, analyze_cell, csv_num, load_campaign, run_report, task_completion, CampaignConfig,
    ComparisonSection, Specs,
};
use evalkit::rollout::{parse_rollout_log, validate_store, CellStatus, LogFormat, RolloutStore};
use evalkit::scoring::TaskCompletion;
use evalkit::synthlab::{calibrate_sequential_boundary, CalibrationConfig};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "evalkit", version, about = "Blind A/B evaluation of robot policies")]
struct Cli {
    /// Overrides the seed of the config or the command default.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the family-wise significance level.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MetricArg {
    /// Paired success outcomes, sequential test.
    Binary,
    /// Task completion, Welch's t-test.
    Tc,
}

#[derive(Subcommand)]
enum Command {
    /// Parse rollout logs into one canonical JSONL stream.
    Ingest {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        #[arg(long)]
        rubrics: Option<PathBuf>,
        /// Write records here and print the summary on stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a campaign's logs against its planned rollout counts.
    Validate {
        config: PathBuf,
        /// Planned rollouts per cell; defaults to the config's value.
        #[arg(long)]
        expected: Option<i64>,
        /// Exit 1 when any cell is short or over plan.
        #[arg(long)]
        strict: bool,
    },
    /// Task completion of every rollout in a log.
    Score {
        log: PathBuf,
        #[arg(long)]
        rubrics: Option<PathBuf>,
        #[arg(long)]
        predicates: Option<PathBuf>,
    },
    /// Beta posterior of a success rate, or Dirichlet posterior of mean completion.
    Posterior {
        #[arg(long, requires = "trials", conflicts_with = "counts")]
        successes: Option<u64>,
        #[arg(long, requires = "successes")]
        trials: Option<u64>,
        /// Rollouts per completion level 0/m, 1/m, ..., m/m.
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<u64>>,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        #[arg(long, default_value_t = 4000)]
        draws: usize,
        /// Include the density grid.
        #[arg(long)]
        grid: bool,
    },
    /// Pairwise comparison matrix and letter display per cell.
    Compare {
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = MetricArg::Binary)]
        metric: MetricArg,
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        condition: Option<String>,
    },
    /// Write the full report directory for a campaign.
    Report {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw a blinded session plan.
    Bundles {
        /// `policy_id=Display Name`, at least two.
        #[arg(long = "policy", required = true)]
        policies: Vec<String>,
        #[arg(long = "task", required = true)]
        tasks: Vec<String>,
        #[arg(long)]
        n_bundles: usize,
        /// Also print the blinding key.
        #[arg(long)]
        reveal: bool,
    },
    /// Monte Carlo calibration of the sequential boundary.
    Calibrate {
        #[arg(long, default_value_t = 200)]
        horizon: usize,
        #[arg(long, default_value_t = 10_000)]
        replications: usize,
        #[arg(long, default_value_t = 0.0)]
        correlation: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit or apply percentile normalizers.
    #[command(subcommand)]
    Normalize(NormalizeCommand),
    /// Trim low-motion frames from the start of demonstrations.
    Filter {
        /// One demo per line.
        demos: PathBuf,
        #[arg(long, default_value_t = TRANSLATION_THRESHOLD_M)]
        translation: f64,
        #[arg(long, default_value_t = ROTATION_THRESHOLD_DEG)]
        rotation: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the evaluation service.
    Serve { config: PathBuf },
}

#[derive(Subcommand)]
enum NormalizeCommand {
    /// Fit one source and add it to a table, creating the table if needed.
    Fit {
        #[arg(long)]
        source: String,
        /// JSON array of samples, each `[timestep][dim]`.
        #[arg(long)]
        input: PathBuf,
        /// Dimensions passed through unchanged, e.g. rotation columns.
        #[arg(long, value_delimiter = ',')]
        exempt: Vec<usize>,
        #[arg(long)]
        table: PathBuf,
    },
    /// Normalize (or invert) one `[timestep][dim]` chunk.
    Apply {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        source: String,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        inverse: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("output serializes") + "\n"
}

fn load_config(path: &Path, cli: &Cli) -> Result<CampaignConfig> {
    let mut cfg = CampaignConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(alpha) = cli.alpha {
        if !(alpha > 0.0 && alpha < 1.0) {
            bail!("alpha {alpha} outside (0, 1)");
        }
        cfg.alpha = alpha;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let out = match &cli.command {
        Command::Ingest { logs, rubrics, out } => ingest(&cli, logs, rubrics.as_deref(), out.as_deref())?,
        Command::Validate { config, expected, strict } => {
            let (text, clean) = validate(&cli, config, *expected)?;
            print!("{text}");
            return Ok(if *strict && !clean { ExitCode::FAILURE } else { ExitCode::SUCCESS });
        }
        Command::Score { log, rubrics, predicates } => score(&cli, log, rubrics.as_deref(), predicates.as_deref())?,
        Command::Posterior {
            successes,
            trials,
            counts,
            level,
            draws,
            grid,
        } => posterior(&cli, successes.zip(*trials), counts.as_deref(), *level, *draws, *grid)?,
        Command::Compare {
            config,
            metric,
            task,
            condition,
        } => compare(&cli, config, *metric, task.as_deref(), condition.as_deref())?,
        Command::Report { config, out } => {
            let cfg = load_config(config, &cli)?;
            let bundle = run_report(&cfg, out)?;
            match cli.format {
                Format::Json => json(&bundle.provenance),
                Format::Text => {
                    let mut s = format!("wrote {} files to {}\n", bundle.files.len(), out.display());
                    for f in &bundle.files {
                        let _ = writeln!(s, "  {}", f.display());
                    }
                    s
                }
            }
        }
        Command::Bundles {
            policies,
            tasks,
            n_bundles,
            reveal,
        } => bundles(&cli, policies, tasks, *n_bundles, *reveal)?,
        Command::Calibrate {
            horizon,
            replications,
            correlation,
            out,
        } => calibrate(&cli, *horizon, *replications, *correlation, out.as_deref())?,
        Command::Normalize(cmd) => normalize(&cli, cmd)?,
        Command::Filter {
            demos,
            translation,
            rotation,
            out,
        } => filter(&cli, demos, *translation, *rotation, out.as_deref())?,
        Command::Serve { config } => {
            serve(&cli, config)?;
            String::new()
        }
    };
    print!("{out}");
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct IngestSummary {
    records: usize,
    rejects: Vec<(String, usize, String)>,
}

fn ingest(cli: &Cli, logs: &[PathBuf], rubrics: Option<&Path>, out: Option<&Path>) -> Result<String> {
    let specs = Specs::load(rubrics, None)?;
    let mut store = RolloutStore::new();
    let mut rejects = Vec::new();
    for log in logs {
        let ingested = parse_rollout_log(log, LogFormat::Jsonl, &specs.rubrics)?;
        for r in ingested.rejects {
            rejects.push((log.display().to_string(), r.line, r.reason));
        }
        for rec in ingested.store.records() {
            store.insert(rec.clone())?;
        }
    }
    let summary = IngestSummary {
        records: store.len(),
        rejects,
    };
    let mut report = String::new();
    for (log, line, reason) in &summary.rejects {
        let _ = writeln!(report, "{log}:{line}: {reason}");
    }
    let _ = writeln!(report, "{} records, {} rejected lines", summary.records, summary.rejects.len());
    match out {
        Some(path) => {
            fs::write(path, store.to_jsonl()).with_context(|| format!("writing {}", path.display()))?;
            Ok(match cli.format {
                Format::Json => json(&summary),
                Format::Text => report,
            })
        }
        None => {
            eprint!("{report}");
            Ok(store.to_jsonl())
        }
    }
}

fn validate(cli: &Cli, config: &Path, expected: Option<i64>) -> Result<(String, bool)> {
    let mut cfg = load_config(config, cli)?;
    if expected.is_some() {
        cfg.expected_per_cell = expected;
    }
    let Some(plan) = cfg.plan() else {
        bail!("no planned count: set expected_per_cell in the config or pass --expected");
    };
    let loaded = load_campaign(&cfg)?;
    let report = validate_store(&loaded.store, &plan)?;
    let clean = report.cells.iter().all(|c| c.status == CellStatus::Complete);
    if cli.format == Format::Json {
        return Ok((json(&report), clean));
    }
    let ids: BTreeMap<&str, &str> = cfg
        .policies
        .iter()
        .map(|p| (p.blinding_code.as_str(), p.policy_id.as_str()))
        .collect();
    let mut s = format!("{:<28} {:<24} {:<12} {:>8} {:>8} {:>7}  status\n", "task", "policy", "condition", "expected", "observed", "missing");
    for c in &report.cells {
        let policy = ids.get(c.cell.policy.as_str()).copied().unwrap_or(&c.cell.policy);
        let status = serde_json::to_value(c.status).expect("status serializes");
        let _ = writeln!(
            s,
            "{:<28} {:<24} {:<12} {:>8} {:>8} {:>7}  {}",
            c.cell.task,
            policy,
            c.cell.condition.label(),
            c.expected,
            c.observed,
            c.missing,
            status.as_str().unwrap_or_default()
        );
    }
    let _ = writeln!(s, "{} records, {} rejected lines", report.total_records, loaded.rejected_lines.len());
    Ok((s, clean))
}

#[derive(Serialize)]
struct ScoreRow {
    rollout_id: String,
    task: String,
    achieved: Option<usize>,
    milestones: Option<usize>,
    task_completion: Option<f64>,
}

fn score(cli: &Cli, log: &Path, rubrics: Option<&Path>, predicates: Option<&Path>) -> Result<String> {
    let specs = Specs::load(rubrics, predicates)?;
    let ingested = parse_rollout_log(log, LogFormat::Jsonl, &specs.rubrics)?;
    for r in &ingested.rejects {
        eprintln!("{}:{}: {}", log.display(), r.line, r.reason);
    }
    let mut rows = Vec::with_capacity(ingested.store.len());
    for r in ingested.store.records() {
        let tc = task_completion(r, &specs).with_context(|| format!("scoring {}", r.rollout_id))?;
        rows.push(ScoreRow {
            rollout_id: r.rollout_id.clone(),
            task: r.task.clone(),
            achieved: tc.as_ref().map(TaskCompletion::numerator),
            milestones: tc.as_ref().map(TaskCompletion::denominator),
            task_completion: tc.as_ref().map(TaskCompletion::value),
        });
    }
    if cli.format == Format::Json {
        return Ok(json(&rows));
    }
    let mut s = String::new();
    for r in &rows {
        match (r.achieved, r.milestones, r.task_completion) {
            (Some(a), Some(m), Some(v)) => {
                let _ = writeln!(s, "{}\t{}\t{a}/{m}\t{}", r.rollout_id, r.task, csv_num(v));
            }
            _ => {
                let _ = writeln!(s, "{}\t{}\t-\t-", r.rollout_id, r.task);
            }
        }
    }
    Ok(s)
}

fn posterior(cli: &Cli, counts_sn: Option<(u64, u64)>, tc_counts: Option<&[u64]>, level: f64, draws: usize, grid: bool) -> Result<String> {
    if let Some((s, n)) = counts_sn {
        let post = beta_posterior(s, n)?;
        let ci = post.credible_interval(level);
        if cli.format == Format::Json {
            let mut v = serde_json::json!({
                "n": n,
                "s": s,
                "alpha": post.alpha,
                "beta": post.beta,
                "empirical_sr": post.empirical_rate(),
                "mean": post.mean(),
                "mode": post.mode(),
                "credible_interval": ci,
            });
            if grid {
                v["grid"] = serde_json::to_value(post.density_grid())?;
            }
            return Ok(json(&v));
        }
        let mut out = format!("Beta({}, {})  n {n}  s {s}\n", csv_num(post.alpha), csv_num(post.beta));
        let _ = writeln!(out, "empirical SR    {}", post.empirical_rate().map_or("-".into(), csv_num));
        let _ = writeln!(out, "posterior mean  {}", csv_num(post.mean()));
        let _ = writeln!(out, "mode            {}", post.mode().map_or("-".into(), csv_num));
        let _ = writeln!(out, "{}% interval    [{}, {}]", csv_num(level * 100.0), csv_num(ci.lower), csv_num(ci.upper));
        if grid {
            for (x, d) in post.density_grid().support.iter().zip(&post.density_grid().density) {
                let _ = writeln!(out, "{}\t{}", csv_num(*x), csv_num(*d));
            }
        }
        return Ok(out);
    }
    let Some(counts) = tc_counts else {
        bail!("pass --successes and --trials, or --counts");
    };
    if counts.len() < 2 {
        bail!("--counts needs one entry per completion level, at least 2");
    }
    let m = counts.len() - 1;
    let samples: Vec<TaskCompletion> = counts
        .iter()
        .enumerate()
        .flat_map(|(i, &c)| std::iter::repeat_n(TaskCompletion::from_counts(i, m), c as usize))
        .collect();
    let seed = cli.seed.unwrap_or(0);
    let post = dirichlet_mean_posterior(&samples, m, draws, seed)?;
    if cli.format == Format::Json {
        let mut v = serde_json::json!({
            "counts": counts,
            "expected_mean": post.posterior.expected_mean(),
            "mc_mean": post.mc_mean,
            "mc_std_error": post.mc_std_error,
            "draws": draws,
            "seed": seed,
        });
        if grid {
            v["grid"] = serde_json::to_value(&post.grid)?;
        }
        return Ok(json(&v));
    }
    let mut out = format!("Dirichlet mean over {m} milestones  n {}\n", samples.len());
    let _ = writeln!(out, "expected mean   {}", csv_num(post.posterior.expected_mean()));
    let _ = writeln!(out, "MC mean         {} (se {}, {draws} draws, seed {seed})", csv_num(post.mc_mean), csv_num(post.mc_std_error));
    if grid {
        for (x, d) in post.grid.support.iter().zip(&post.grid.density) {
            let _ = writeln!(out, "{}\t{}", csv_num(*x), csv_num(*d));
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct CompareOutput<'a> {
    task: &'a str,
    condition: String,
    section: Option<&'a ComparisonSection>,
}

fn render_section(out: &mut String, title: &str, section: &ComparisonSection) {
    let m: &ComparisonMatrix = &section.matrix;
    let metric = serde_json::to_value(m.metric).expect("metric serializes");
    let _ = writeln!(out, "== {title} ({}) ==", metric.as_str().unwrap_or_default());
    let _ = writeln!(
        out,
        "global alpha {}  per-test alpha {}",
        csv_num(m.global_alpha),
        csv_num(m.per_test_alpha)
    );
    let width = m.policies.iter().map(String::len).max().unwrap_or(0).max(6);
    let _ = writeln!(
        out,
        "{:<width$}  {:<width$}  {:<13}  {:>7}  {:>11}  {:>7}  {:>10}",
        "A", "B", "verdict", "stop", "informative", "missing", "statistic"
    );
    for d in &m.decisions {
        let stop = serde_json::to_value(d.decision.stopped_at).expect("stop serializes");
        let stop = match stop {
            serde_json::Value::String(s) => s,
            other => other.to_string(),
        };
        let _ = writeln!(
            out,
            "{:<width$}  {:<width$}  {:<13}  {:>7}  {:>11}  {:>7}  {:>10}",
            d.a,
            d.b,
            d.decision.verdict.as_str(),
            stop,
            d.decision.informative,
            d.decision.missing_pairs,
            csv_num(d.decision.statistic)
        );
    }
    let _ = writeln!(out, "letters");
    for (p, l) in section.cld.policies.iter().zip(&section.cld.letters) {
        let _ = writeln!(out, "  {p:<width$}  {l}");
    }
    out.push('\n');
}

fn compare(cli: &Cli, config: &Path, metric: MetricArg, task: Option<&str>, condition: Option<&str>) -> Result<String> {
    let cfg = load_config(config, cli)?;
    if let Some(t) = task {
        if !cfg.tasks.iter().any(|x| x == t) {
            bail!("task {t:?} is not in the campaign");
        }
    }
    if let Some(c) = condition {
        if !cfg.conditions.iter().any(|x| x.label() == c) {
            bail!("condition {c:?} is not in the campaign");
        }
    }
    let loaded = load_campaign(&cfg)?;
    let settings = cfg.settings();
    let mut text = String::new();
    let mut records = Vec::new();
    let mut stream = 0u64;
    for cond in &cfg.conditions {
        let label = cond.label();
        let mut pooling = Vec::new();
        for t in &cfg.tasks {
            // same stream numbering as the report
            let (cell, pool) = analyze_cell(&loaded.store, t, cond, &cfg.policies, &loaded.specs, &settings, stream)?;
            stream += 1;
            pooling.push(pool);
            if task.is_some_and(|x| x != t) || condition.is_some_and(|c| c != label) {
                continue;
            }
            let section = match metric {
                MetricArg::Binary => Some(cell.binary.clone()),
                MetricArg::Tc => cell.completion_comparison.clone(),
            };
            match &section {
                Some(s) => render_section(&mut text, &format!("{t} / {label}"), s),
                None => {
                    let _ = writeln!(text, "== {t} / {label} ==\nno task-completion data\n");
                }
            }
            records.push((t.clone(), label.clone(), section));
        }
        if metric == MetricArg::Binary && task.is_none() && condition.is_none_or(|c| c == label) && cfg.tasks.len() > 1 {
            let agg = analyze_aggregate(cond, &cfg.tasks, &cfg.policies, &pooling, &settings)?;
            render_section(&mut text, &format!("all tasks / {label}"), &agg.binary);
            records.push(("all tasks".into(), label.clone(), Some(agg.binary)));
        }
    }
    Ok(match cli.format {
        Format::Text => text,
        Format::Json => {
            let view: Vec<CompareOutput> = records
                .iter()
                .map(|(t, c, s)| CompareOutput {
                    task: t,
                    condition: c.clone(),
                    section: s.as_ref(),
                })
                .collect();
            json(&view)
        }
    })
}

fn bundles(cli: &Cli, policies: &[String], tasks: &[String], n_bundles: usize, reveal: bool) -> Result<String> {
    let policies = policies
        .iter()
        .map(|p| match p.split_once('=') {
            Some((id, name)) => (id.trim().to_string(), name.trim().to_string()),
            None => (p.clone(), p.clone()),
        })
        .collect();
    let session = create_session(&SessionPlan {
        policies,
        tasks: tasks.to_vec(),
        n_bundles,
        rng_seed: cli.seed.unwrap_or(0),
        ..Default::default()
    })?;
    if cli.format == Format::Json {
        let mut v = serde_json::to_value(&session)?;
        if !reveal {
            v.as_object_mut().expect("session is an object").remove("policies");
        }
        return Ok(json(&v));
    }
    let mut s = format!("session {}  seed {}\n", session.session_id, session.rng_seed);
    for b in &session.bundles {
        let _ = writeln!(s, "{}\t{}\t{}\t{}", b.bundle_id, b.ic.task_id, b.ic.ic_id, b.ordering().join(" "));
    }
    if reveal {
        s.push_str("key\n");
        for p in &session.policies {
            let _ = writeln!(s, "  {}\t{}\t{}", p.blinding_code, p.policy_id, p.display_name);
        }
    }
    Ok(s)
}

fn calibrate(cli: &Cli, horizon: usize, replications: usize, correlation: f64, out: Option<&Path>) -> Result<String> {
    let mut cfg = CalibrationConfig::new(cli.alpha.unwrap_or(0.05), horizon, replications, cli.seed.unwrap_or(2024));
    cfg.correlation = correlation;
    let report = calibrate_sequential_boundary(&cfg)?;
    if let Some(path) = out {
        fs::write(path, report.to_json() + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    if cli.format == Format::Json {
        return Ok(report.to_json() + "\n");
    }
    let frozen = report.frozen_boundary();
    let mut s = format!(
        "alpha {}  horizon {}  replications {}  seed {}\n",
        csv_num(cfg.alpha),
        horizon,
        replications,
        cfg.seed
    );
    let _ = writeln!(
        s,
        "calibrated constant {}{}",
        csv_num(report.boundary_constant),
        if report.grid_floor_hit { " (grid floor)" } else { "" }
    );
    let _ = writeln!(s, "exact constant      {}", csv_num(report.exact_kappa));
    let _ = writeln!(s, "frozen constant     {}", csv_num(frozen.kappa));
    for r in &report.per_null_rate {
        let _ = writeln!(s, "  p {}  type-I {}  at exact {}", csv_num(r.p), csv_num(r.type1), csv_num(r.type1_exact));
    }
    for e in &report.empirical_power {
        let _ = writeln!(s, "  power {} vs {}: {}", csv_num(e.p_a), csv_num(e.p_b), csv_num(e.power));
    }
    Ok(s)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn normalize(cli: &Cli, cmd: &NormalizeCommand) -> Result<String> {
    match cmd {
        NormalizeCommand::Fit {
            source,
            input,
            exempt,
            table,
        } => {
            let samples: Vec<Vec<Vec<f64>>> = read_json(input)?;
            let nz = fit_normalizer(source, &samples, &exempt.iter().copied().collect())?;
            let mut reg = if table.exists() {
                NormalizerRegistry::read_table(fs::File::open(table)?)?
            } else {
                NormalizerRegistry::new()
            };
            let (dims, timesteps) = (nz.dims, nz.timesteps);
            reg.insert(nz)?;
            let mut buf = Vec::new();
            reg.write_table(&mut buf)?;
            fs::write(table, buf).with_context(|| format!("writing {}", table.display()))?;
            Ok(format!(
                "fitted {source}: {} samples, {timesteps} timesteps, {dims} dims, {} exempt\n",
                samples.len(),
                exempt.len()
            ))
        }
        NormalizeCommand::Apply {
            table,
            source,
            input,
            inverse,
        } => {
            let reg = NormalizerRegistry::read_table(fs::File::open(table).with_context(|| format!("reading {}", table.display()))?)?;
            let chunk: Vec<Vec<f64>> = read_json(input)?;
            let (rows, lossy) = if *inverse {
                reg.denormalize_chunk(source, &chunk)?
            } else {
                (reg.normalize_chunk(source, &chunk)?, false)
            };
            if lossy {
                eprintln!("warning: clipped values cannot be inverted exactly");
            }
            Ok(match cli.format {
                Format::Json => serde_json::to_string(&rows)? + "\n",
                Format::Text => rows
                    .iter()
                    .map(|r| r.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ") + "\n")
                    .collect(),
            })
        }
    }
}

fn filter(cli: &Cli, demos: &Path, translation: f64, rotation: f64, out: Option<&Path>) -> Result<String> {
    let text = fs::read_to_string(demos).with_context(|| format!("reading {}", demos.display()))?;
    let corpus = parse_demo_jsonl(&text)?;
    let th = MotionThresholds {
        translation_m: translation,
        rotation_deg: rotation,
    };
    let (filtered, summary) = filter_corpus(&corpus, th)?;
    if let Some(path) = out {
        let mut body = String::new();
        for f in &filtered {
            body.push_str(&serde_json::to_string(&f.demo)?);
            body.push('\n');
        }
        fs::write(path, body).with_context(|| format!("writing {}", path.display()))?;
    }
    if cli.format == Format::Json {
        return Ok(json(&summary));
    }
    let mut s = String::new();
    for f in &filtered {
        let _ = writeln!(
            s,
            "{}\tremoved {}{}",
            f.demo.demo_id,
            f.removed(),
            if f.never_moved { "\tnever moved" } else { "" }
        );
    }
    let _ = writeln!(
        s,
        "{} demos, {} of {} frames removed ({}), {} never moved",
        summary.demos,
        summary.removed_frames,
        summary.total_frames,
        csv_num(summary.removed_fraction),
        summary.never_moved
    );
    Ok(s)
}

fn serve(cli: &Cli, config: &Path) -> Result<()> {
    let mut cfg = evalkit_service::ServiceConfig::load(config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(alpha) = cli.alpha {
        cfg.alpha = alpha;
    }
    cfg.check()?;
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
    rt.block_on(evalkit_service::serve(cfg))?;
    Ok(())
}
