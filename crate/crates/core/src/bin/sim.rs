use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mmo_sim::analytics::{self, majority_predictions, stepwise_accuracy, LogView, Prediction};
use mmo_sim::api::{self, ControlPlane};
use mmo_sim::battle::{self, BattleModel, FitOptions};
use mmo_sim::datagen::{self, SeasonSpec};
use mmo_sim::domain::ProfileClass;
use mmo_sim::engine::{PopulationConfig, RunConfig, Simulation};
use mmo_sim::persistence::{RunStore, StoredRun, RECORD_FILE};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "sim", version, about = "Extraction-shooter economy simulator")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags every subcommand accepts; each uses the ones that apply to it.
#[derive(Args)]
struct Common {
    /// Overrides the config seed, or seeds a generator.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Built-in config name or path to a TOML config.
    #[arg(long, global = true, default_value = "default")]
    config: String,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Runs a config to completion into a run directory.
    Run {
        /// Overrides total_days.
        #[arg(long)]
        days: Option<u32>,
        /// Overrides the planning worker count.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Continues a run from a snapshot, re-executing from there to the end.
    Resume {
        /// A snapshot file inside a run directory.
        #[arg(long, conflicts_with = "run")]
        snapshot: Option<PathBuf>,
        /// A run directory; resumes from its newest snapshot.
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Serves the control plane and the console.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Existing run directories to load.
        #[arg(long)]
        run: Vec<PathBuf>,
    },
    /// Fits a battle model from a match log.
    Fit {
        #[arg(long)]
        logs: PathBuf,
        #[arg(long, default_value_t = 30)]
        min_bin_count: u64,
    },
    /// Prints the predicted win and income curve of a class.
    PredictCurve {
        #[arg(long)]
        model: PathBuf,
        /// Roman index (I..V) or class name.
        #[arg(long)]
        class: ProfileClass,
        #[arg(long, default_value_t = 40)]
        n_max: u32,
    },
    /// Generates synthetic data.
    #[command(subcommand)]
    Datagen(Datagen),
    /// Scores predictions against a trajectory corpus.
    Eval {
        /// Corpus whose actions are the predictions.
        #[arg(long, required_unless_present = "majority")]
        pred: Option<PathBuf>,
        /// Predict the most frequent action instead.
        #[arg(long)]
        majority: bool,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Prints the stats frame of a run at a step.
    Stats {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        step: u64,
        /// Trailing window in steps; defaults to one day.
        #[arg(long)]
        window: Option<u64>,
    },
    /// Writes per-day series and intervention reports for plotting.
    Report {
        #[arg(long)]
        run: PathBuf,
        /// Settle steps skipped after an intervention; defaults to two days.
        #[arg(long)]
        settle: Option<u64>,
    },
    /// Re-executes one day of a run under the replay policy and scores the
    /// replayed decisions against the corpus.
    Replay {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        day: u32,
        /// Corpus to replay; exported from the run when omitted.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum Datagen {
    /// Player profiles as JSON lines.
    Population {
        #[arg(long, default_value_t = 500)]
        n: u32,
    },
    /// Two season match logs: season-1.jsonl (train), season-2.jsonl (holdout).
    Season {
        #[arg(long, default_value_t = 2_200)]
        players_per_class: u32,
        #[arg(long, default_value_t = 35)]
        min_matches: u32,
        #[arg(long, default_value_t = 40)]
        max_matches: u32,
    },
    /// Decision trajectories of one day. Uses `--run` when given, otherwise
    /// runs `--config` in memory up to the end of the day.
    Trajectories {
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        day: u32,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            eprintln!("{}", text.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(2);
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    print_text(&format!("{}\n", serde_json::to_string_pretty(value)?))
}

/// A closed pipe (e.g. `| head`) is not an error.
fn print_text(text: &str) -> Result<()> {
    use std::io::Write;
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut config = RunConfig::resolve(&common.config).with_context(|| format!("loading config {}", common.config))?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn out_path<'a>(common: &'a Common, what: &str) -> Result<&'a Path> {
    common.out.as_deref().with_context(|| format!("--out is required for {what}"))
}

fn dispatch(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match cli.command {
        Command::Run { days, workers } => {
            let mut config = load_config(common)?;
            if let Some(d) = days {
                config.total_days = d;
            }
            if let Some(w) = workers {
                config.workers = w;
            }
            config.validate()?;
            let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(&config.run_id));
            if dir.join(RECORD_FILE).exists() {
                bail!("{} already holds a run; use `sim resume`", dir.display());
            }
            let mut sim = Simulation::new(config)?;
            let mut store = RunStore::create(&dir, &sim)?;
            store.drive(&mut sim, u64::MAX)?;
            summarize(&dir)
        }
        Command::Resume { snapshot, run } => {
            let (dir, at) = match (snapshot, run) {
                (Some(snap), _) => {
                    let dir = run_dir_of_snapshot(&snap)?;
                    let step = mmo_sim::persistence::Snapshot::load(&snap)?.step;
                    (dir, Some(step))
                }
                (None, Some(run)) => (run, None),
                (None, None) => bail!("give --snapshot or --run"),
            };
            let (mut store, mut sim) = RunStore::resume(&dir, at)?;
            store.drive(&mut sim, u64::MAX)?;
            summarize(&dir)
        }
        Command::Serve { addr, run } => {
            let cp = ControlPlane::new(common.out.clone());
            for dir in &run {
                let id = cp.load(dir).with_context(|| format!("loading {}", dir.display()))?;
                eprintln!("loaded run {id} ({:?})", cp.get(&id)?.status());
            }
            let rt = tokio::runtime::Runtime::new()?;
            eprintln!("serving on http://{addr}");
            rt.block_on(api::serve(cp.clone(), addr))?;
            cp.shutdown();
            Ok(())
        }
        Command::Fit { logs, min_bin_count } => {
            let (_, records) = datagen::read_match_log(&logs)?;
            let opts = FitOptions {
                min_bin_count,
                ..Default::default()
            };
            let model = battle::fit(&records, &opts)?;
            let out = out_path(common, "fit")?;
            model.save(out)?;
            eprintln!("wrote {} ({} records, fingerprint {})", out.display(), records.len(), model.fitted_on);
            Ok(())
        }
        Command::PredictCurve { model, class, n_max } => {
            let model = BattleModel::load(&model)?;
            print_json(&battle::predict_curve(&model, class, n_max)?)
        }
        Command::Datagen(d) => datagen_cmd(common, d),
        Command::Eval { pred, majority, truth } => {
            let (_, truth) = datagen::read_corpus(&truth)?;
            let predictions: Vec<Prediction> = match pred {
                _ if majority => majority_predictions(&truth),
                Some(p) => datagen::read_corpus(&p)?.1.iter().map(Prediction::from).collect(),
                None => unreachable!("clap requires --pred without --majority"),
            };
            print_json(&stepwise_accuracy(&predictions, &truth)?)
        }
        Command::Stats { run, step, window } => {
            let stored = StoredRun::open(&run)?;
            let window = window.unwrap_or(stored.config().steps_per_day as u64);
            print_json(&analytics::compute_frame(&stored.view(), step, window)?)
        }
        Command::Report { run, settle } => report(common, &run, settle),
        Command::Replay { run, day, corpus } => {
            let stored = StoredRun::open(&run)?;
            let (header, truth) = match &corpus {
                Some(p) => datagen::read_corpus(p)?,
                None => datagen::export_trajectories(&stored.view(), day)?,
            };
            let tmp;
            let corpus_path = match corpus {
                Some(p) => p,
                None => {
                    tmp = std::env::temp_dir().join(format!("sim-replay-{}-{day}.jsonl", std::process::id()));
                    datagen::write_corpus(&tmp, &header, &truth)?;
                    tmp.clone()
                }
            };
            let replayed = datagen::replay_day(&stored, day, &corpus_path);
            if corpus_path.starts_with(std::env::temp_dir()) {
                let _ = std::fs::remove_file(&corpus_path);
            }
            let (h, replayed) = replayed?;
            if let Some(out) = &common.out {
                datagen::write_corpus(out, &h, &replayed)?;
            }
            let preds: Vec<Prediction> = replayed.iter().map(Prediction::from).collect();
            print_json(&stepwise_accuracy(&preds, &truth)?)
        }
    }
}

fn run_dir_of_snapshot(snap: &Path) -> Result<PathBuf> {
    let dir = snap
        .parent()
        .and_then(Path::parent)
        .with_context(|| format!("{} is not inside a run directory", snap.display()))?;
    if !dir.join(RECORD_FILE).exists() {
        bail!("{} is not inside a run directory", snap.display());
    }
    Ok(dir.to_path_buf())
}

#[derive(Serialize)]
struct RunSummary<'a> {
    run_id: &'a str,
    dir: String,
    status: mmo_sim::persistence::RunStatus,
    committed_steps: u64,
    events: usize,
    content_hash: String,
}

fn summarize(dir: &Path) -> Result<()> {
    let stored = StoredRun::open(dir)?;
    print_json(&RunSummary {
        run_id: &stored.record.run_id,
        dir: dir.display().to_string(),
        status: stored.record.status,
        committed_steps: stored.log.committed_steps,
        events: stored.log.events.len(),
        content_hash: stored.log.content_hash(),
    })
}

fn datagen_cmd(common: &Common, d: Datagen) -> Result<()> {
    match d {
        Datagen::Population { n } => {
            let config = load_config(common)?;
            let (seed, overrides) = match &config.population {
                PopulationConfig::Generated { seed, overrides, .. } => (seed.unwrap_or(config.seed), overrides.clone()),
                PopulationConfig::Explicit { .. } => (config.seed, Default::default()),
            };
            let seed = common.seed.unwrap_or(seed);
            let profiles = datagen::generate_population_with(&config.cluster_table()?, n, seed, &overrides)?;
            let mut text = String::new();
            for p in &profiles {
                text.push_str(&serde_json::to_string(p)?);
                text.push('\n');
            }
            write_or_print(common.out.as_deref(), &text)?;
            eprintln!("{} profiles, per class {:?}", profiles.len(), datagen::class_counts(&profiles));
            Ok(())
        }
        Datagen::Season {
            players_per_class,
            min_matches,
            max_matches,
        } => {
            let config = load_config(common)?;
            let table = config.cluster_table()?;
            let spec = SeasonSpec {
                players_per_class,
                min_matches,
                max_matches,
                seed: common.seed.unwrap_or(SeasonSpec::default().seed),
            };
            let logs = datagen::generate_season_logs(&table, &spec)?;
            let dir = out_path(common, "datagen season")?;
            std::fs::create_dir_all(dir)?;
            let hash = table.content_hash();
            for (name, records) in [("season-1.jsonl", &logs.train), ("season-2.jsonl", &logs.holdout)] {
                datagen::write_match_log(&dir.join(name), records, spec.seed, &hash)?;
                eprintln!("wrote {} ({} records)", dir.join(name).display(), records.len());
            }
            Ok(())
        }
        Datagen::Trajectories { run, day } => {
            let (header, records) = match run {
                Some(dir) => datagen::export_trajectories(&StoredRun::open(&dir)?.view(), day)?,
                None => {
                    let mut config = load_config(common)?;
                    config.total_days = config.total_days.max(day + 1);
                    let mut sim = Simulation::new(config.clone())?;
                    let steps = (day as u64 + 1) * config.steps_per_day as u64;
                    let events = sim.advance(steps)?;
                    datagen::export_trajectories(&LogView::new(&config, &events, steps), day)?
                }
            };
            let out = out_path(common, "datagen trajectories")?;
            datagen::write_corpus(out, &header, &records)?;
            eprintln!("wrote {} ({} records, day {day})", out.display(), records.len());
            Ok(())
        }
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => Ok(std::fs::write(p, text)?),
        None => print_text(text),
    }
}

fn report(common: &Common, run: &Path, settle: Option<u64>) -> Result<()> {
    let stored = StoredRun::open(run)?;
    let view = stored.view();
    let spd = stored.config().steps_per_day as u64;
    let out = common.out.clone().unwrap_or_else(|| run.join("report"));
    std::fs::create_dir_all(&out)?;

    let days = analytics::daily_series(&view)?;
    let mut csv = String::from(
        "day,gini,activeness,players_total,reserve,burn,offline,battle,buy,sell,informal,market,npc,informal_share,npc_spent,tax_burned\n",
    );
    for d in &days {
        let count = |a| d.action_counts.get(&a).copied().unwrap_or(0);
        use mmo_sim::domain::Action::*;
        csv.push_str(&format!(
            "{},{:.6},{:.6},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            d.day,
            d.gini,
            d.activeness,
            d.money_supply.players_total,
            d.money_supply.reserve,
            d.money_supply.burn,
            count(Offline),
            count(Battle),
            count(Buy),
            count(Sell),
            d.trades.informal,
            d.trades.market,
            d.trades.npc,
            d.informal_share.map_or(String::new(), |s| format!("{s:.6}")),
            d.npc_spent,
            d.tax_burned,
        ));
    }
    std::fs::write(out.join("daily.csv"), csv)?;
    std::fs::write(out.join("daily.json"), serde_json::to_vec_pretty(&days)?)?;

    let applied: Vec<u64> = view
        .events
        .iter()
        .filter_map(|e| match e.payload {
            mmo_sim::domain::EventPayload::InterventionApplied { intervention_id, .. } => Some(intervention_id),
            _ => None,
        })
        .collect();
    let settle = settle.unwrap_or(2 * spd);
    let reports = applied
        .iter()
        .map(|&id| analytics::intervention_report(&view, id, spd, settle))
        .collect::<Result<Vec<_>, _>>()?;
    std::fs::write(out.join("interventions.json"), serde_json::to_vec_pretty(&reports)?)?;
    eprintln!("wrote {} days and {} intervention reports to {}", days.len(), reports.len(), out.display());
    Ok(())
}
