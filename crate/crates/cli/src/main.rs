//! Command-line pipeline: SDF precomputation, probe simulation, registration,
//! experiment runs, and diversity evaluation.
//!
//! Exit codes: 0 on success, 1 on computation failure, 2 on usage errors
//! (bad flags, missing files, invalid configs).

mod experiment;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use volreg::eval::{named_delta, plausible_diversity, GridSpec, PlausibleSet};
use volreg::points::ObservationFile;
use volreg::qd::{register, EstimateSet, Optimizer};
use volreg::sdf::SdfGrid;
use volreg::sim::{Scene, SceneConfig};

use experiment::{RunSettings, SettingsFile};

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, missing inputs, invalid configs (exit 2).
    Usage(String),
    /// A pipeline stage failed (exit 1).
    Computation(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Computation(m) => write!(f, "{m}"),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

fn failure<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Computation(e.to_string())
}

#[derive(Parser)]
#[command(
    name = "volreg",
    version,
    about = "Diverse pose estimation from semantically labeled 3D points"
)]
struct Cli {
    /// Worker thread cap for all parallel stages (default: available cores;
    /// env VOLREG_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Precompute and cache the voxel SDF grid for a mesh.
    BuildSdf(BuildSdfArgs),
    /// Execute a scene's probe sequence and write per-probe observations.
    SimulateProbes(SimulateArgs),
    /// Register one observation file and write the estimate set.
    Register(RegisterArgs),
    /// Full experiment: probes, online registration, optional evaluation.
    Run(RunArgs),
    /// Score an estimate file against the scene's plausible set.
    Evaluate(EvaluateArgs),
    /// Run a registration and dump the final archive as CSV.
    DumpArchive(RegisterArgs),
}

#[derive(Args)]
struct BuildSdfArgs {
    /// Mesh file (.obj or .stl).
    #[arg(long)]
    mesh: PathBuf,
    /// Voxel resolution, meters.
    #[arg(long)]
    res: f64,
    /// Grid padding beyond the mesh bounds, meters.
    #[arg(long)]
    pad: f64,
    /// Cache directory (default: alongside the mesh).
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Voxel-count budget.
    #[arg(long, default_value_t = volreg::sdf::DEFAULT_VOXEL_BUDGET)]
    budget: usize,
}

#[derive(Args)]
struct SimulateArgs {
    /// Builtin scene name or scene config path (.toml/.json).
    #[arg(long)]
    scene: String,
    /// Scene seed (builtin scenes only).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (env VOLREG_OUT_DIR).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RegisterArgs {
    /// Observation JSON produced by simulate-probes.
    #[arg(long)]
    obs: PathBuf,
    /// Builtin scene name or scene config path (supplies mesh and grid
    /// resolutions).
    #[arg(long)]
    scene: String,
    /// Scene seed (builtin scenes only).
    #[arg(long, default_value_t = 0)]
    scene_seed: u64,
    #[arg(long, value_enum, default_value = "cma-mega")]
    optimizer: OptimizerArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Estimate-set output file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write a per-class cost breakdown of the best estimate.
    #[arg(long)]
    diagnostics: Option<PathBuf>,
    /// Write the final archive as CSV.
    #[arg(long)]
    dump_archive: Option<PathBuf>,
    /// SDF cache directory.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Builtin scene name or scene config path.
    #[arg(long)]
    scene: Option<String>,
    /// Run settings file (TOML or JSON); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    /// Number of trials (seeds seed..seed+N-1).
    #[arg(long)]
    seeds: Option<u32>,
    /// Base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Compute the diversity score after each probe.
    #[arg(long)]
    evaluate: bool,
    /// Output directory (env VOLREG_OUT_DIR).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Builtin scene name or scene config path.
    #[arg(long)]
    scene: String,
    /// Scene seed (builtin scenes only).
    #[arg(long, default_value_t = 0)]
    scene_seed: u64,
    /// Estimate-set JSON file.
    #[arg(long)]
    estimates: PathBuf,
    /// Probes executed before the estimates were produced (fixes the
    /// observation the plausible set is computed from).
    #[arg(long)]
    probes: Option<usize>,
    /// Suboptimality threshold; overrides the scene default.
    #[arg(long)]
    delta: Option<f64>,
    /// Named threshold (e.g. sim-mustard); overrides the scene default.
    #[arg(long)]
    object: Option<String>,
    /// Rotations sampled for the plausible set.
    #[arg(long, default_value_t = 2000)]
    rotations: usize,
    /// Use the full 15-cell evaluation grid instead of the reduced 9-cell
    /// grid.
    #[arg(long)]
    full_grid: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Plausible-set cache directory.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Score output file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum OptimizerArg {
    CmaMega,
    CmaMe,
    SgdOnly,
}

impl From<OptimizerArg> for Optimizer {
    fn from(a: OptimizerArg) -> Self {
        match a {
            OptimizerArg::CmaMega => Optimizer::CmaMega,
            OptimizerArg::CmaMe => Optimizer::CmaMe,
            OptimizerArg::SgdOnly => Optimizer::SgdOnly,
        }
    }
}

fn load_scene(spec: &str, seed: u64) -> CliResult<Scene> {
    let path = Path::new(spec);
    if path.extension().is_some() && path.exists() {
        SceneConfig::load(path).map_err(usage)
    } else if path.extension().is_some() {
        Err(CliError::Usage(format!("scene config not found: {spec}")))
    } else {
        Scene::builtin(spec, seed).map_err(usage)
    }
}

fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var("VOLREG_OUT_DIR").ok().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    std::fs::write(path, contents)
        .map_err(|e| CliError::Computation(format!("writing {}: {e}", path.display())))
}

/// Builds the scene's SDF grid, using `cache_dir` when given.
pub fn scene_grid(scene: &Scene, cache_dir: Option<&Path>) -> CliResult<SdfGrid> {
    let build = || {
        SdfGrid::build(scene.mesh.clone(), scene.r_target, scene.d_pad).map_err(failure)
    };
    let Some(dir) = cache_dir else {
        return build();
    };
    ensure_dir(dir)?;
    let key = SdfGrid::cache_key(&scene.mesh, scene.r_target, scene.d_pad);
    let path = dir.join(format!("{key}.sdfg"));
    if path.exists() {
        if let Ok(grid) = SdfGrid::load(&path, scene.mesh.clone()) {
            return Ok(grid);
        }
    }
    let grid = build()?;
    grid.save(&path).map_err(failure)?;
    Ok(grid)
}

fn cmd_build_sdf(args: BuildSdfArgs) -> CliResult<()> {
    if !args.mesh.exists() {
        return Err(CliError::Usage(format!(
            "mesh not found: {}",
            args.mesh.display()
        )));
    }
    let mesh = Arc::new(volreg::mesh::TriangleMesh::load(&args.mesh).map_err(usage)?);
    let cache_dir = args
        .cache_dir
        .unwrap_or_else(|| args.mesh.parent().unwrap_or(Path::new(".")).to_path_buf());
    ensure_dir(&cache_dir)?;
    let key = SdfGrid::cache_key(&mesh, args.res, args.pad);
    let path = cache_dir.join(format!("{key}.sdfg"));
    if path.exists() {
        let grid = SdfGrid::load(&path, mesh).map_err(failure)?;
        println!("cache hit: {}", path.display());
        print_grid_stats(&grid);
        return Ok(());
    }
    let grid =
        SdfGrid::build_with_budget(mesh, args.res, args.pad, args.budget).map_err(failure)?;
    grid.save(&path).map_err(failure)?;
    println!("wrote {}", path.display());
    print_grid_stats(&grid);
    Ok(())
}

fn print_grid_stats(grid: &SdfGrid) {
    let d = grid.dims();
    println!(
        "grid {}x{}x{} ({} voxels), resolution {} m, origin [{:.4}, {:.4}, {:.4}]",
        d[0],
        d[1],
        d[2],
        grid.voxel_count(),
        grid.resolution(),
        grid.origin().x,
        grid.origin().y,
        grid.origin().z
    );
}

fn cmd_simulate(args: SimulateArgs) -> CliResult<()> {
    let scene = load_scene(&args.scene, args.seed)?;
    let dir = out_dir(args.out);
    ensure_dir(&dir)?;

    let mesh_path = dir.join("object.obj");
    scene.mesh.save_obj(&mesh_path).map_err(failure)?;
    let cfg = SceneConfig::from_scene(&scene, volreg::sim::MeshRef::Path("object.obj".into()));
    write_file(
        &dir.join("scene.toml"),
        &toml::to_string_pretty(&cfg).map_err(failure)?,
    )?;

    let mut run = volreg::sim::ProbeRun::new(&scene).map_err(failure)?;
    let steps = run.run_all().map_err(failure)?;
    let mut contacts = 0usize;
    for (i, (result, obs)) in steps.iter().enumerate() {
        let file = ObservationFile::from_points(obs, scene.r_free, scene.workspace);
        write_file(
            &dir.join(format!("obs_{:03}.json", i + 1)),
            &serde_json::to_string(&file).map_err(failure)?,
        )?;
        if result.contact.is_some() {
            contacts += 1;
        }
    }
    println!(
        "{} probes executed, {} contacts; observations in {}",
        steps.len(),
        contacts,
        dir.display()
    );
    Ok(())
}

fn load_estimates(path: &Path) -> CliResult<EstimateSet> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("estimates {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(usage)?;
    let set = EstimateSet::from_json(&value).map_err(usage)?;
    if set.estimates.is_empty() {
        return Err(CliError::Computation(
            "estimate file has no estimates; diversity score is undefined".into(),
        ));
    }
    Ok(set)
}

fn cmd_register(args: RegisterArgs, archive_only: bool) -> CliResult<()> {
    let scene = load_scene(&args.scene, args.scene_seed)?;
    let text = std::fs::read_to_string(&args.obs)
        .map_err(|e| CliError::Usage(format!("observation {}: {e}", args.obs.display())))?;
    let obs_file: ObservationFile = serde_json::from_str(&text).map_err(usage)?;
    let x = obs_file.to_points();
    let workspace = obs_file.workspace;
    let grid = scene_grid(&scene, args.cache_dir.as_deref())?;

    let online = volreg::online::OnlineConfig::default();
    let qd = volreg::qd::QdConfig::default();
    let cost = volreg::cost::CostConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let starts: Vec<volreg::pose::PoseParam> = (0..online.estimate_size)
        .map(|_| volreg::pose::sample_uniform_pose(&workspace, &mut rng))
        .collect();
    let outcome = register(
        &x,
        &starts,
        &[],
        &grid,
        &cost,
        &qd,
        args.optimizer.into(),
        &workspace,
        &mut rng,
    )
    .map_err(failure)?;

    if archive_only {
        let path = args
            .dump_archive
            .unwrap_or_else(|| PathBuf::from("archive.csv"));
        write_file(&path, &outcome.archive.to_csv())?;
        println!(
            "archive: {} filled cells, best cost {:.6}; wrote {}",
            outcome.archive.filled(),
            outcome.archive.best_cost().unwrap_or(f64::NAN),
            path.display()
        );
        return Ok(());
    }

    let out = args.out.unwrap_or_else(|| PathBuf::from("estimates.json"));
    write_file(
        &out,
        &serde_json::to_string_pretty(&outcome.estimates.to_json()).map_err(failure)?,
    )?;
    if let Some(diag) = &args.diagnostics {
        let best = outcome
            .estimates
            .best()
            .ok_or_else(|| failure("no estimates produced"))?;
        let report = volreg::cost::cost_report(&x, &best.transform, &grid, &cost);
        write_file(diag, &serde_json::to_string_pretty(&report).map_err(failure)?)?;
    }
    if let Some(csv) = &args.dump_archive {
        write_file(csv, &outcome.archive.to_csv())?;
    }
    let best = outcome.estimates.best().map_or(f64::NAN, |e| e.cost);
    println!(
        "{} estimates (best cost {:.6}) -> {}",
        outcome.estimates.estimates.len(),
        best,
        out.display()
    );
    Ok(())
}

/// Computes (or loads) the plausible set for a scene after `probes_done`
/// probes.
pub fn plausible_set_for(
    scene: &Scene,
    grid: &SdfGrid,
    x: &volreg::points::SemanticPointSet,
    probes_done: usize,
    delta: f64,
    spec: &GridSpec,
    rotations: usize,
    seed: u64,
    cache_dir: Option<&Path>,
) -> CliResult<PlausibleSet> {
    let hash = scene.content_hash(probes_done);
    if let Some(dir) = cache_dir {
        ensure_dir(dir)?;
        let path = dir.join(PlausibleSet::cache_file_name(&hash, delta, seed));
        if path.exists() {
            if let Ok((set, stored_hash, stored_seed)) = PlausibleSet::load(&path) {
                if stored_hash == hash && stored_seed == seed && stored_set_matches(&set, delta) {
                    println!("cache hit: {}", path.display());
                    return Ok(set);
                }
            }
        }
        let set = compute_set(scene, grid, x, delta, spec, rotations, seed)?;
        set.save(&path, &hash, seed).map_err(failure)?;
        return Ok(set);
    }
    compute_set(scene, grid, x, delta, spec, rotations, seed)
}

fn stored_set_matches(set: &PlausibleSet, delta: f64) -> bool {
    (set.delta - delta).abs() < 1e-15
}

fn compute_set(
    scene: &Scene,
    grid: &SdfGrid,
    x: &volreg::points::SemanticPointSet,
    delta: f64,
    spec: &GridSpec,
    rotations: usize,
    seed: u64,
) -> CliResult<PlausibleSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    volreg::eval::compute_plausible_set(
        x,
        &scene.registration_truth(),
        grid,
        delta,
        spec,
        rotations,
        &mut rng,
        &[],
        &volreg::cost::CostConfig::default(),
    )
    .map_err(failure)
}

fn cmd_evaluate(args: EvaluateArgs) -> CliResult<()> {
    let scene = load_scene(&args.scene, args.scene_seed)?;
    let delta = match (&args.object, args.delta) {
        (Some(name), None) => named_delta(name)
            .ok_or_else(|| CliError::Usage(format!("unknown object '{name}'")))?,
        (None, Some(d)) => d,
        (None, None) => scene.delta,
        (Some(_), Some(_)) => {
            return Err(CliError::Usage(
                "pass either --delta or --object, not both".into(),
            ))
        }
    };
    let estimates = load_estimates(&args.estimates)?;

    let probes_done = args.probes.unwrap_or(scene.probes.len());
    if probes_done > scene.probes.len() {
        return Err(CliError::Usage(format!(
            "--probes {} exceeds the scene's {} probes",
            probes_done,
            scene.probes.len()
        )));
    }
    let mut run = volreg::sim::ProbeRun::new(&scene).map_err(failure)?;
    let mut observation = None;
    for _ in 0..probes_done {
        observation = Some(run.step().map_err(failure)?.1);
    }
    let x = observation
        .ok_or_else(|| CliError::Usage("--probes must be at least 1".into()))?;

    let grid = scene_grid(&scene, args.cache_dir.as_deref())?;
    let spec = if args.full_grid {
        GridSpec::default()
    } else {
        GridSpec::reduced()
    };
    let set = plausible_set_for(
        &scene,
        &grid,
        &x,
        probes_done,
        delta,
        &spec,
        args.rotations,
        args.seed,
        args.cache_dir.as_deref(),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed.wrapping_add(1));
    let surface = scene.mesh.sample_surface(200, &mut rng);
    let score = plausible_diversity(&set.transforms, &estimates.transforms(), &surface)
        .map_err(failure)?;
    println!(
        "plausible set: {} members (baseline cost {:.6}, delta {})",
        set.transforms.len(),
        set.baseline_cost,
        set.delta
    );
    println!(
        "coverage {:.6e}  plausibility {:.6e}  diversity {:.6e}",
        score.coverage, score.plausibility, score.plausible_diversity
    );
    if let Some(out) = &args.out {
        write_file(out, &serde_json::to_string_pretty(&score).map_err(failure)?)?;
    }
    Ok(())
}

fn cmd_run(args: RunArgs) -> CliResult<()> {
    let mut settings = match &args.config {
        Some(path) => SettingsFile::load(path)?,
        None => SettingsFile::default(),
    };
    // flags override the settings file
    if let Some(s) = &args.scene {
        settings.scene = Some(s.clone());
    }
    if let Some(o) = args.optimizer {
        settings.optimizer = Some(o.into());
    }
    if let Some(n) = args.seeds {
        settings.seeds = Some(n);
    }
    if let Some(s) = args.seed {
        settings.seed = Some(s);
    }
    if args.evaluate {
        settings.evaluate = Some(true);
    }
    let run = RunSettings::resolve(settings, out_dir(args.out))?;
    experiment::run_experiment(&run)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli
        .threads
        .or_else(|| {
            std::env::var("VOLREG_THREADS")
                .ok()
                .and_then(|t| t.parse().ok())
        })
        .unwrap_or(0);
    if threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    let result = match cli.command {
        Command::BuildSdf(args) => cmd_build_sdf(args),
        Command::SimulateProbes(args) => cmd_simulate(args),
        Command::Register(args) => cmd_register(args, false),
        Command::DumpArchive(args) => cmd_register(args, true),
        Command::Run(args) => cmd_run(args),
        Command::Evaluate(args) => cmd_evaluate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Computation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
