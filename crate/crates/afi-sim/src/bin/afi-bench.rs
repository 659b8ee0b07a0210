//! Benchmark harness entry point. Runs single episodes, full suites, and
//! the standard ablations, and dumps published fields for offline
//! inspection. Everything deterministic lives in the library; this binary
//! is argument parsing and file placement.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use afi_core::intervention::FieldSource;
use anyhow::Context;
use clap::{Parser, Subcommand};

use afi_sim::emit::{fold_records, suite_table, write_field_binary, write_jsonl, write_slice_csv};
use afi_sim::episode::run_episode_watching;
use afi_sim::scenario::{PerturbationSpec, ScenarioConfig};
use afi_sim::suite::{
    ablation_cells, run_cells, run_suite, write_suite_outputs, AblationAxis, SuiteConfig,
    SuiteOutput,
};
use afi_sim::{prepare, run_episode, EpisodeRecord, Mode};

#[derive(Parser)]
#[command(name = "afi-bench", version, about = "Affordance field intervention benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one episode and print its summary.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value = "baseline")]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Shift the first stage's target by (dx, dy) before running.
        #[arg(long, num_args = 2, value_names = ["DX", "DY"], allow_negative_numbers = true)]
        shift: Option<Vec<f64>>,
        /// Write the per-step log (one JSON record per step) here.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Run a scenarios x modes x conditions grid and write csv/table/jsonl.
    Suite {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run one ablation axis against a single scenario.
    Ablate {
        #[arg(long)]
        axis: AblationAxis,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 20)]
        trials: u64,
        #[arg(long, default_value_t = 0)]
        seed_base: u64,
        /// Reference target shift in meters along +x.
        #[arg(long, default_value_t = 0.10)]
        shift: f64,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an episode up to sim time t and dump the live field.
    DumpField {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        t: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "baseline")]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write a z-slice at this voxel index as csv next to `out`.
        #[arg(long)]
        slice_z: Option<usize>,
    },
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Run { scenario, mode, seed, shift, log } => {
            run_one(&scenario, mode, seed, shift.as_deref(), log.as_deref())
        }
        Command::Suite { config, out, jobs } => suite(&config, &out, jobs),
        Command::Ablate { axis, scenario, trials, seed_base, shift, jobs, out } => {
            ablate(axis, &scenario, trials, seed_base, shift, jobs, &out)
        }
        Command::DumpField { scenario, t, out, mode, seed, slice_z } => {
            dump_field(&scenario, t, &out, mode, seed, slice_z)
        }
    }
}

fn load_scenario(path: &Path) -> anyhow::Result<ScenarioConfig> {
    ScenarioConfig::load(path).map_err(anyhow::Error::msg)
}

fn run_one(
    scenario: &Path,
    mode: Mode,
    seed: u64,
    shift: Option<&[f64]>,
    log: Option<&Path>,
) -> anyhow::Result<()> {
    let prepared = prepare(load_scenario(scenario)?).map_err(anyhow::Error::msg)?;
    let condition = shift.map(|s| PerturbationSpec::PositionShift {
        object: None,
        dx: s[0],
        dy: s[1],
    });
    let setup = prepared
        .setup(condition.as_ref(), None, log.is_some())
        .map_err(anyhow::Error::msg)?;
    let record = run_episode(setup, mode, seed);
    if let Some(path) = log {
        write_jsonl(&record.step_log, path)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    print_record(&record);
    Ok(())
}

fn print_record(r: &EpisodeRecord) {
    println!(
        "{} / {} mode={} condition={} seed={}",
        r.scenario, r.task, r.mode, r.condition, r.seed
    );
    println!(
        "success={} steps={} sim_time={:.2}s stages={}/{} traps={}",
        r.success, r.steps, r.sim_time, r.final_stage, r.stage_count, r.trap_count
    );
    for (i, iv) in r.interventions.iter().enumerate() {
        let outcome = match (&iv.failure, iv.selected_waypoint) {
            (Some(f), _) => format!("failed: {f}"),
            (None, Some(w)) => {
                let cost = iv.selected_cost.unwrap_or(f64::NAN);
                format!("committed waypoint {w} (cost {cost:.4})")
            }
            (None, None) => "no selection".into(),
        };
        println!(
            "  intervention {i}: t={:.2}s rollback={:?} visited={} skipped={} {outcome}",
            iv.t, iv.rollback_index, iv.visited, iv.skipped
        );
    }
}

fn suite(config: &Path, out: &Path, jobs: usize) -> anyhow::Result<()> {
    let cfg = SuiteConfig::load(config).map_err(anyhow::Error::msg)?;
    let base = config.parent().unwrap_or(Path::new("."));
    let output = run_suite(&cfg, base, jobs).map_err(anyhow::Error::msg)?;
    write_suite_outputs(&output, out).with_context(|| format!("writing {}", out.display()))?;
    print!("{}", suite_table(&output.cells, &output.records));
    println!("wrote {}", out.display());
    Ok(())
}

fn ablate(
    axis: AblationAxis,
    scenario: &Path,
    trials: u64,
    seed_base: u64,
    shift: f64,
    jobs: usize,
    out: &Path,
) -> anyhow::Result<()> {
    let prepared = Arc::new(prepare(load_scenario(scenario)?).map_err(anyhow::Error::msg)?);
    let cells = ablation_cells(axis, shift);
    let records = run_cells(&prepared, &cells, trials, seed_base, jobs);
    let output = SuiteOutput { cells: fold_records(&records), records };
    write_suite_outputs(&output, out).with_context(|| format!("writing {}", out.display()))?;
    print!("{}", suite_table(&output.cells, &output.records));
    println!("wrote {}", out.display());
    Ok(())
}

fn dump_field(
    scenario: &Path,
    t: f64,
    out: &Path,
    mode: Mode,
    seed: u64,
    slice_z: Option<usize>,
) -> anyhow::Result<()> {
    let prepared = prepare(load_scenario(scenario)?).map_err(anyhow::Error::msg)?;
    let setup = prepared.setup(None, None, false).map_err(anyhow::Error::msg)?;
    let (record, publisher) = run_episode_watching(setup, mode, seed, Some(t));
    let field = publisher.latest();
    write_field_binary(&field, out).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "dumped field at sim_time={:.2}s (requested {t:.2}s) to {}",
        record.sim_time,
        out.display()
    );
    if let Some(k) = slice_z {
        let path = out.with_extension(format!("z{k}.csv"));
        write_slice_csv(&field, k, &path)
            .with_context(|| format!("writing {}", path.display()))?;
        println!("wrote slice {}", path.display());
    }
    Ok(())
}
