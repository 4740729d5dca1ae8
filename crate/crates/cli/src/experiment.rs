//! The `run` subcommand: execute a scene's probe sequence, register after
//! every probe across several trial seeds, and optionally score each estimate
//! set against the per-probe plausible set.
//!
//! Outputs under the run directory:
//! - `results.csv`: one row per (probe, trial) with scores and wall time;
//! - `session_seed<S>.jsonl`: one record per probe (wall time lives here, in
//!   its own field, estimate files stay byte-reproducible);
//! - `estimates_seed<S>_probe<K>.json`: the estimate set; reruns with the
//!   same seed produce identical bytes.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use volreg::cost::CostConfig;
use volreg::eval::{plausible_diversity, GridSpec, PlausibleSet};
use volreg::online::{OnlineConfig, Session};
use volreg::points::SemanticPointSet;
use volreg::qd::{Optimizer, QdConfig};
use volreg::sim::{ProbeRun, Scene};

use crate::{plausible_set_for, scene_grid, CliError, CliResult};

/// On-disk run settings; every field is optional and flags override.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SettingsFile {
    pub scene: Option<String>,
    pub scene_seed: Option<u64>,
    pub output_dir: Option<String>,
    pub seed: Option<u64>,
    pub seeds: Option<u32>,
    pub optimizer: Option<Optimizer>,
    pub evaluate: Option<bool>,
    pub rotations: Option<usize>,
    pub reduced_grid: Option<bool>,
    pub cost: Option<CostConfig>,
    pub qd: Option<QdConfig>,
    pub online: Option<OnlineConfig>,
    pub eval_grid: Option<GridSpec>,
}

impl SettingsFile {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        let parsed: Self = if text.trim_start().starts_with('{') {
            serde_json::from_str(&text).map_err(|e| CliError::Usage(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| CliError::Usage(e.to_string()))?
        };
        Ok(parsed)
    }
}

/// Fully resolved and validated run settings.
pub struct RunSettings {
    pub scene: Scene,
    pub optimizer: Optimizer,
    pub seeds: u32,
    pub base_seed: u64,
    pub evaluate: bool,
    pub rotations: usize,
    pub eval_grid: GridSpec,
    pub cost: CostConfig,
    pub qd: QdConfig,
    pub online: OnlineConfig,
    pub out: PathBuf,
}

impl RunSettings {
    pub fn resolve(file: SettingsFile, out: PathBuf) -> CliResult<Self> {
        let scene_spec = file
            .scene
            .ok_or_else(|| CliError::Usage("a scene is required (--scene or config)".into()))?;
        let scene = crate::load_scene(&scene_spec, file.scene_seed.unwrap_or(0))?;
        let cost = file.cost.unwrap_or_default();
        let qd = file.qd.unwrap_or_default();
        let online = file.online.unwrap_or_default();
        cost.validate().map_err(CliError::Usage)?;
        qd.validate().map_err(CliError::Usage)?;
        online.validate().map_err(CliError::Usage)?;
        let eval_grid = file.eval_grid.unwrap_or_else(|| {
            if file.reduced_grid.unwrap_or(true) {
                GridSpec::reduced()
            } else {
                GridSpec::default()
            }
        });
        let out = match (&file.output_dir, out) {
            // explicit flag/env wins; fall back to the config value only when
            // the default would be used
            (Some(cfg), resolved) if resolved == PathBuf::from("out") => PathBuf::from(cfg),
            (_, resolved) => resolved,
        };
        Ok(Self {
            scene,
            optimizer: file.optimizer.unwrap_or(Optimizer::CmaMega),
            seeds: file.seeds.unwrap_or(1).max(1),
            base_seed: file.seed.unwrap_or(0),
            evaluate: file.evaluate.unwrap_or(false),
            rotations: file.rotations.unwrap_or(2000),
            eval_grid,
            cost,
            qd,
            online,
            out,
        })
    }
}

#[derive(Serialize)]
struct SessionRecord {
    probe: u32,
    seed: u64,
    counts: [usize; 3],
    best_cost: f64,
    skipped: bool,
    wall_ms: f64,
    estimates: serde_json::Value,
}

fn optimizer_name(o: Optimizer) -> &'static str {
    match o {
        Optimizer::CmaMega => "cma-mega",
        Optimizer::CmaMe => "cma-me",
        Optimizer::SgdOnly => "sgd-only",
    }
}

pub fn run_experiment(run: &RunSettings) -> CliResult<()> {
    std::fs::create_dir_all(&run.out)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", run.out.display())))?;
    let cache_dir = run.out.join("cache");
    let grid = scene_grid(&run.scene, Some(&cache_dir))?;

    // the probe sequence is fixed: observations are shared by all trials
    let mut probe_run = ProbeRun::new(&run.scene)
        .map_err(|e| CliError::Computation(e.to_string()))?;
    let steps = probe_run
        .run_all()
        .map_err(|e| CliError::Computation(e.to_string()))?;
    let observations: Vec<SemanticPointSet> =
        steps.into_iter().map(|(_, obs)| obs).collect();

    // plausible sets are per probe, shared across trials
    let plausible: Vec<Option<PlausibleSet>> = if run.evaluate {
        observations
            .iter()
            .enumerate()
            .map(|(k, x)| {
                plausible_set_for(
                    &run.scene,
                    &grid,
                    x,
                    k + 1,
                    run.scene.delta,
                    &run.eval_grid,
                    run.rotations,
                    run.scene.seed,
                    Some(&cache_dir),
                )
                .map(Some)
            })
            .collect::<CliResult<Vec<_>>>()?
    } else {
        vec![None; observations.len()]
    };

    let method = optimizer_name(run.optimizer);
    let mut csv = String::from("probe,method,seed,coverage,plausibility,pd,wall_ms\n");

    for trial in 0..run.seeds {
        let seed = run.base_seed + trial as u64;
        let mut session = Session::new(
            run.online,
            run.qd,
            run.cost,
            run.optimizer,
            run.scene.workspace,
            seed,
        );
        let mut log = String::new();
        for (k, x) in observations.iter().enumerate() {
            let started = Instant::now();
            let step = session
                .step(x, &grid)
                .map_err(|e| CliError::Computation(e.to_string()))?;
            let wall_ms = started.elapsed().as_secs_f64() * 1000.0;

            let estimates_json = step.estimates.to_json();
            let est_path = run
                .out
                .join(format!("estimates_seed{seed}_probe{:02}.json", k + 1));
            crate::write_file(
                &est_path,
                &serde_json::to_string_pretty(&estimates_json)
                    .map_err(|e| CliError::Computation(e.to_string()))?,
            )?;

            let (coverage, plausibility, pd) = match &plausible[k] {
                Some(set) if !step.estimates.estimates.is_empty() => {
                    // surface samples differ per trial and per probe
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(seed ^ ((k as u64 + 1) << 32));
                    let surface = run.scene.mesh.sample_surface(200, &mut rng);
                    let score = plausible_diversity(
                        &set.transforms,
                        &step.estimates.transforms(),
                        &surface,
                    )
                    .map_err(|e| CliError::Computation(e.to_string()))?;
                    (
                        format!("{:.9e}", score.coverage),
                        format!("{:.9e}", score.plausibility),
                        format!("{:.9e}", score.plausible_diversity),
                    )
                }
                _ => (String::new(), String::new(), String::new()),
            };
            csv.push_str(&format!(
                "{},{},{},{},{},{},{:.1}\n",
                k + 1,
                method,
                seed,
                coverage,
                plausibility,
                pd,
                wall_ms
            ));

            let record = SessionRecord {
                probe: k as u32 + 1,
                seed,
                counts: [step.counts.0, step.counts.1, step.counts.2],
                best_cost: step.best_cost,
                skipped: step.skipped,
                wall_ms,
                estimates: estimates_json,
            };
            log.push_str(&serde_json::to_string(&record).unwrap());
            log.push('\n');
        }
        crate::write_file(&run.out.join(format!("session_seed{seed}.jsonl")), &log)?;
    }

    crate::write_file(&run.out.join("results.csv"), &csv)?;
    println!(
        "{} trials x {} probes ({method}) -> {}",
        run.seeds,
        observations.len(),
        run.out.join("results.csv").display()
    );
    Ok(())
}
