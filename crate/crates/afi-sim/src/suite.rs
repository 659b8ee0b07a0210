//! Benchmark suite: a grid of (scenario, mode, condition) cells, each run
//! for a fixed number of trials. Execution order and thread count must not
//! affect any reported number, so episodes get their seeds from (cell,
//! trial) alone and results are folded after collection, never during.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use afi_core::math::mix_seed;
use serde::{Deserialize, Serialize};

use crate::emit::{fold_records, suite_csv, suite_table, write_jsonl, CellResult};
use crate::episode::{run_episode, EpisodeRecord, Mode};
use crate::scenario::{prepare, PerturbationSpec, Prepared, ScenarioConfig};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConditionConfig {
    #[serde(default)]
    pub label: Option<String>,
    #[serde(flatten)]
    pub perturbation: PerturbationSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteConfig {
    /// Scenario files, resolved relative to the suite config's directory.
    pub scenarios: Vec<PathBuf>,
    pub modes: Vec<String>,
    pub conditions: Vec<ConditionConfig>,
    pub trials: u64,
    #[serde(default)]
    pub seed_base: u64,
}

impl SuiteConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        let cfg: SuiteConfig =
            toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        if cfg.scenarios.is_empty() || cfg.modes.is_empty() || cfg.conditions.is_empty() {
            return Err("suite needs scenarios, modes, and conditions".into());
        }
        if cfg.trials == 0 {
            return Err("suite needs at least one trial".into());
        }
        Ok(cfg)
    }
}

/// One benchmark cell: a mode and condition to run against a scenario,
/// with optional per-cell overrides used by ablations.
#[derive(Clone, Debug)]
pub struct Cell {
    pub mode: Mode,
    pub perturbation: PerturbationSpec,
    pub label: String,
    pub waypoint_count: Option<usize>,
}

/// Run every (cell, trial) episode of one prepared scenario across
/// `jobs` threads. The result vector is ordered by (cell, trial) no
/// matter how work was scheduled. Episodes that cannot even start (an
/// illegal perturbed layout, say) become failed records, not errors:
/// a suite never aborts mid-grid.
pub fn run_cells(
    prepared: &Prepared,
    cells: &[Cell],
    trials: u64,
    seed_base: u64,
    jobs: usize,
) -> Vec<EpisodeRecord> {
    let jobs = jobs.max(1);
    struct Job<'c> {
        cell: &'c Cell,
        seed: u64,
    }
    let mut queue = Vec::with_capacity(cells.len() * trials as usize);
    for cell in cells {
        for trial in 0..trials {
            // Seeds depend on the trial alone, so modes and conditions
            // face paired policy noise.
            queue.push(Job { cell, seed: mix_seed(seed_base, trial) });
        }
    }
    if queue.is_empty() {
        return Vec::new();
    }

    let mut results: Vec<Option<EpisodeRecord>> = Vec::new();
    results.resize_with(queue.len(), || None);
    let chunk = queue.len().div_ceil(jobs);

    std::thread::scope(|scope| {
        for (jobs_chunk, results_chunk) in queue.chunks(chunk).zip(results.chunks_mut(chunk)) {
            scope.spawn(move || {
                for (job, slot) in jobs_chunk.iter().zip(results_chunk.iter_mut()) {
                    let record = match prepared.setup(
                        Some(&job.cell.perturbation),
                        Some(&job.cell.label),
                        false,
                    ) {
                        Ok(mut setup) => {
                            if let Some(n) = job.cell.waypoint_count {
                                setup.intervention.waypoint_count = n;
                            }
                            run_episode(setup, job.cell.mode, job.seed)
                        }
                        Err(err) => failed_record(prepared, job.cell, job.seed, err),
                    };
                    *slot = Some(record);
                }
            });
        }
    });

    results
        .into_iter()
        .map(|slot| slot.expect("every job ran"))
        .collect()
}

fn failed_record(prepared: &Prepared, cell: &Cell, seed: u64, err: String) -> EpisodeRecord {
    EpisodeRecord {
        scenario: prepared.config.name.clone(),
        task: prepared.config.task.name.clone(),
        mode: cell.mode.label(),
        condition: cell.label.clone(),
        seed,
        success: false,
        steps: 0,
        sim_time: 0.0,
        final_stage: 0,
        stage_count: prepared.config.task.stages.len(),
        stage_transitions: Vec::new(),
        trap_count: 0,
        trap_events: Vec::new(),
        interventions: Vec::new(),
        rebuild_count: 0,
        rebuild_us: Vec::new(),
        step_log: Vec::new(),
        error: Some(err),
    }
}

pub struct SuiteOutput {
    pub records: Vec<EpisodeRecord>,
    pub cells: Vec<CellResult>,
}

pub fn run_suite(
    config: &SuiteConfig,
    base_dir: &Path,
    jobs: usize,
) -> Result<SuiteOutput, String> {
    let mut records = Vec::new();
    for scenario_path in &config.scenarios {
        let path = if scenario_path.is_absolute() {
            scenario_path.clone()
        } else {
            base_dir.join(scenario_path)
        };
        let scenario = ScenarioConfig::load(&path)?;
        let prepared = Arc::new(prepare(scenario)?);

        let mut cells = Vec::new();
        for mode_str in &config.modes {
            let mode: Mode = mode_str.parse()?;
            for condition in &config.conditions {
                let label = condition
                    .label
                    .clone()
                    .unwrap_or_else(|| condition.perturbation.label());
                cells.push(Cell {
                    mode,
                    perturbation: condition.perturbation.clone(),
                    label,
                    waypoint_count: None,
                });
            }
        }
        records.extend(run_cells(&prepared, &cells, config.trials, config.seed_base, jobs));
    }
    let cells = fold_records(&records);
    Ok(SuiteOutput { records, cells })
}

/// Write the three suite artifacts into `out_dir`: the deterministic CSV,
/// the human-readable table with timing percentiles, and the per-episode
/// JSONL every reported count can be re-derived from.
pub fn write_suite_outputs(out: &SuiteOutput, out_dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("suite.csv"), suite_csv(&out.cells))?;
    std::fs::write(out_dir.join("suite.txt"), suite_table(&out.cells, &out.records))?;
    write_jsonl(&out.records, &out_dir.join("episodes.jsonl"))?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Waypoints,
    Rollback,
    FixedStep,
    PositionShift,
}

impl std::str::FromStr for AblationAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "waypoints" => Ok(AblationAxis::Waypoints),
            "rollback" => Ok(AblationAxis::Rollback),
            "fixed-step" | "fixed_step" => Ok(AblationAxis::FixedStep),
            "position-shift" | "position_shift" => Ok(AblationAxis::PositionShift),
            other => Err(format!(
                "unknown ablation axis {other:?} (waypoints, rollback, fixed-step, position-shift)"
            )),
        }
    }
}

/// Cells for one ablation axis against a reference shift magnitude.
pub fn ablation_cells(axis: AblationAxis, shift: f64) -> Vec<Cell> {
    let shifted = PerturbationSpec::PositionShift { object: None, dx: shift, dy: 0.0 };
    let shift_label = shifted.label();
    match axis {
        AblationAxis::Waypoints => [3usize, 10, 13]
            .into_iter()
            .map(|n| Cell {
                mode: Mode::Afi,
                perturbation: shifted.clone(),
                label: format!("{shift_label}+nw{n}"),
                waypoint_count: Some(n),
            })
            .collect(),
        AblationAxis::Rollback => vec![
            Cell {
                mode: Mode::Afi,
                perturbation: shifted.clone(),
                label: shift_label.clone(),
                waypoint_count: None,
            },
            Cell {
                mode: Mode::AfiNoRollback,
                perturbation: shifted.clone(),
                label: shift_label.clone(),
                waypoint_count: None,
            },
            Cell {
                mode: Mode::Baseline,
                perturbation: shifted,
                label: shift_label,
                waypoint_count: None,
            },
        ],
        AblationAxis::FixedStep => {
            let mut cells = vec![Cell {
                mode: Mode::Afi,
                perturbation: shifted.clone(),
                label: shift_label.clone(),
                waypoint_count: None,
            }];
            for t in [30u64, 60, 90] {
                cells.push(Cell {
                    mode: Mode::FixedStep(t),
                    perturbation: shifted.clone(),
                    label: shift_label.clone(),
                    waypoint_count: None,
                });
            }
            cells
        }
        AblationAxis::PositionShift => {
            let mut cells = Vec::new();
            for magnitude in [0.0, 0.05, shift, 0.15] {
                let p = PerturbationSpec::PositionShift { object: None, dx: magnitude, dy: 0.0 };
                let label = p.label();
                for mode in [Mode::Baseline, Mode::Afi] {
                    cells.push(Cell {
                        mode,
                        perturbation: p.clone(),
                        label: label.clone(),
                        waypoint_count: None,
                    });
                }
            }
            cells
        }
    }
}
