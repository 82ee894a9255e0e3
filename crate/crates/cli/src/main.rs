use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use melo_core::config::EngineConfig;
use melo_core::editor::EditorState;
use melo_core::error::{MeloError, Result};
use melo_core::evalkit::{self, SweepAxis};
use melo_core::hostnet::{pretrain, Example};
use melo_core::snapshot::{RunStatus, Snapshot};
use melo_core::taskgen::{from_records, gen_base_task, gen_edit_stream, to_records, EditStream, Record};

#[derive(Parser)]
#[command(name = "melo", version, about = "Sequential model editing with scoped LoRA blocks")]
struct Cli {
    /// Print the default configuration as TOML and exit.
    #[arg(long, global = true)]
    defaults: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args)]
struct Common {
    /// TOML config; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the host and write a snapshot with no edits.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Dataset whose base split is used instead of a generated one.
        #[arg(long)]
        stream: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a dataset as JSON lines.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply the edit batches of a dataset to a snapshot.
    Edit {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        stream: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a snapshot against the holdout and out-of-scope splits.
    Eval {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        stream: PathBuf,
        /// Directory for report.json and report.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the whole pipeline for each value of one hyperparameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// radius | partial_rank | key_layer
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Directory for sweep_<axis>.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize the clusters of a snapshot.
    Inspect {
        #[arg(long)]
        snapshot: PathBuf,
        /// Directory for clusters.jsonl and keys.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if cli.defaults {
        print!("{}", EngineConfig::default().to_toml());
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command else {
        eprintln!("error: a subcommand is required (see --help)");
        return ExitCode::from(1);
    };
    match run(command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &MeloError) -> u8 {
    match e {
        MeloError::EditFailure { .. } => 2,
        MeloError::Io(_) | MeloError::Format(_) => 3,
        _ => 1,
    }
}

fn load_config(common: &Common) -> Result<EngineConfig> {
    let mut cfg = match &common.config {
        Some(path) => EngineConfig::from_toml(&fs::read_to_string(path)?)?,
        None => EngineConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn read_records(path: &Path) -> Result<Vec<Record>> {
    let file = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| MeloError::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

fn read_stream(path: &Path) -> Result<(Vec<Example>, EditStream)> {
    from_records(&read_records(path)?)
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("report types serialize")
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen { common, out } => {
            let cfg = load_config(&common)?;
            cfg.validate()?;
            let seeds = cfg.seeds();
            let registry = gen_base_task(&cfg.task_config(), seeds.task)?;
            let stream = gen_edit_stream(&registry, &cfg.stream, seeds.stream)?;
            let records = to_records(&registry, &stream);
            let mut w = create(&out)?;
            for r in &records {
                writeln!(w, "{}", json(r))?;
            }
            w.flush()?;
            println!("wrote {} records to {}", records.len(), out.display());
        }
        Command::Pretrain { common, stream, out } => {
            let cfg = load_config(&common)?;
            cfg.validate()?;
            let seeds = cfg.seeds();
            let base = match stream {
                Some(path) => read_stream(&path)?.0,
                None => gen_base_task(&cfg.task_config(), seeds.task)?.base_examples(),
            };
            let model = pretrain(&cfg.host, &base, &cfg.pretrain, seeds.host)?;
            let state = EditorState::new(model, &cfg.editor, seeds.adapters)?;
            Snapshot::new(&cfg, state, RunStatus::Complete)?.save(&out)?;
            println!("pretrained host on {} examples; snapshot {}", base.len(), out.display());
        }
        Command::Edit { snapshot, stream, out } => {
            let snap = Snapshot::load(&snapshot)?;
            if let RunStatus::Incomplete { failed_batch } = snap.status {
                return Err(MeloError::Input(format!(
                    "snapshot is from a run that failed at batch {failed_batch}"
                )));
            }
            let (_, stream) = read_stream(&stream)?;
            let Snapshot { config, mut state, .. } = snap;
            let mut log = io::stdout().lock();
            for batch in &stream.batches {
                match state.apply_batch(batch) {
                    Ok(report) => writeln!(log, "{}", json(&report))?,
                    Err(e @ MeloError::EditFailure { .. }) => {
                        let failed_batch = state.next_block().get();
                        Snapshot::new(&config, state, RunStatus::Incomplete { failed_batch })?.save(&out)?;
                        return Err(e);
                    }
                    Err(e) => return Err(e),
                }
            }
            Snapshot::new(&config, state, RunStatus::Complete)?.save(&out)?;
        }
        Command::Eval { snapshot, stream, out } => {
            let snap = Snapshot::load(&snapshot)?;
            let (_, stream) = read_stream(&stream)?;
            let report = evalkit::evaluate(&snap.state, &stream.holdout, &stream.out_of_scope)?;
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("report.json"), report.to_json())?;
                fs::write(dir.join("report.csv"), report.to_csv())?;
            }
            if let RunStatus::Incomplete { failed_batch } = snap.status {
                println!("note: snapshot holds a run that failed at batch {failed_batch}");
            }
            println!(
                "edits {} es {:.4} locality {:.4} generality {:.4} consistency {:.4} clusters {} conflicts {} extra_params {}",
                report.edits,
                report.es,
                report.locality,
                report.generality,
                report.sequential_consistency,
                report.clusters,
                report.conflicts,
                report.extra_params
            );
        }
        Command::Sweep { common, axis, values, out } => {
            let cfg = load_config(&common)?;
            let prepared = evalkit::prepare(&cfg)?;
            let rows = evalkit::sweep(&prepared, axis, &values)?;
            fs::create_dir_all(&out)?;
            let mut w = create(&out.join(format!("sweep_{axis}.csv")))?;
            evalkit::write_sweep_csv(&rows, &mut w)?;
            w.flush()?;
            for row in &rows {
                match (&row.report, &row.failure) {
                    (Some(r), _) => println!(
                        "{axis}={} es {:.4} locality {:.4} generality {:.4} clusters {}",
                        row.value, r.es, r.locality, r.generality, r.clusters
                    ),
                    (None, f) => println!("{axis}={} failed: {}", row.value, f.as_deref().unwrap_or("unknown")),
                }
            }
        }
        Command::Inspect { snapshot, out } => {
            let snap = Snapshot::load(&snapshot)?;
            let db = snap.state.db();
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                let mut w = create(&dir.join("clusters.jsonl"))?;
                db.dump_clusters(&mut w)?;
                w.flush()?;
                let mut w = create(&dir.join("keys.csv"))?;
                db.dump_keys(&mut w)?;
                w.flush()?;
            }
            let stats = db.stats();
            let mut w = io::stdout().lock();
            writeln!(
                w,
                "{} clusters, {} keys, {} conflicts, {} forgotten, {} blocks used",
                stats.clusters,
                stats.keys,
                stats.conflicts,
                stats.forgotten,
                snap.state.log().len()
            )?;
            for (i, c) in db.clusters().iter().enumerate() {
                let norm = c.center.iter().map(|v| v * v).sum::<f64>().sqrt();
                writeln!(
                    w,
                    "cluster {i}: |center| {norm:.4} radius {:.4} label {} members {}",
                    c.radius,
                    c.label,
                    c.members.len()
                )?;
            }
        }
    }
    Ok(())
}
