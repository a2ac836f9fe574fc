//! Subcommand implementations.

use crate::error::{CliError, CliResult};
use crate::service::{self, ServeConfig};
use aerograph_core::archive::RolloutArchive;
use aerograph_core::consts::HISTORY;
use aerograph_core::eval::{self, EvalReport};
use aerograph_core::mesh::graph::{load_graph, save_graph};
use aerograph_core::mesh::{extract_case, EulerianGraph};
use aerograph_core::nn::Model;
use aerograph_core::physics::{nondim_groups, AirProperties, DropletProperties, RoomGeometry};
use aerograph_core::refsim::{generate_case, CaseSpec, SWEEP_U_MAG, SWEEP_V_IN};
use aerograph_core::rollout::{rollout, RolloutConfig};
use aerograph_core::training::{log_to_csv, run_curriculum, toy_graph, Dataset, TrainConfig};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Representative droplet diameter of the non-dimensional grid (m).
pub const GRID_D_BAR: f64 = 21.7e-6;

#[derive(Debug, Parser)]
#[command(name = "aerograph", version, about = "Aerosol dispersion surrogate tools")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse an OpenFOAM case into a mesh-graph file.
    Extract(ExtractArgs),
    /// Generate a reference archive from a case spec.
    Synth(SynthArgs),
    /// Run the training curriculum.
    Train(TrainArgs),
    /// Roll a checkpoint out from the priming frames of a reference archive.
    Rollout(RolloutArgs),
    /// Compare a predicted archive against a reference.
    Eval(EvalArgs),
    /// Non-dimensional groups, dispersion and ACH fit over archives.
    Analyze(AnalyzeArgs),
    /// Start the what-if HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// JSON with `mesh_dir` and `fields_dir`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// The `constant/polyMesh` directory.
    #[arg(long)]
    pub mesh_dir: Option<PathBuf>,
    /// Directory with `U`, `p`, `k`, `omega` (default `<mesh-dir>/../../0`).
    #[arg(long)]
    pub fields_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Case spec JSON; defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Mesh-graph file; the coarse room grid when absent.
    #[arg(long)]
    pub mesh: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training config JSON; the toy configuration when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for `checkpoint.bin`, `loss_log.csv`, `train_config.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    /// Rollout config JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Reference archive supplying the priming frames.
    #[arg(long)]
    pub case: PathBuf,
    #[arg(long)]
    pub mesh: Option<PathBuf>,
    /// Number of steps; defaults to the reference length.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Archives to analyze.
    pub archives: Vec<PathBuf>,
    /// Also write the groups over the sweep grid to `nondim_grid.csv`.
    #[arg(long)]
    pub grid: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Service config JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Checkpoint files offered to scenarios; repeatable.
    #[arg(long)]
    pub checkpoint: Vec<PathBuf>,
    /// Run storage root.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Extract(a) => extract(&a),
        Command::Synth(a) => synth(&a),
        Command::Train(a) => train(&a),
        Command::Rollout(a) => rollout_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Analyze(a) => analyze(&a),
        Command::Serve(a) => serve(a),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let s = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&s).map_err(|e| CliError::other("json", format!("{}: {e}", path.display())))
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    let msg = format!("{}: {e}", path.display());
    if e.kind() == std::io::ErrorKind::NotFound {
        CliError::not_found(msg)
    } else {
        CliError::other("io", msg)
    }
}

fn create_parent(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p).map_err(|e| io_err(p, e)),
        _ => Ok(()),
    }
}

fn write_file(path: &Path, body: &str) -> CliResult<()> {
    create_parent(path)?;
    std::fs::write(path, body).map_err(|e| io_err(path, e))
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ExtractConfig {
    mesh_dir: Option<PathBuf>,
    fields_dir: Option<PathBuf>,
}

pub fn extract(a: &ExtractArgs) -> CliResult<()> {
    let cfg: ExtractConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => ExtractConfig::default(),
    };
    let mesh_dir = a
        .mesh_dir
        .clone()
        .or(cfg.mesh_dir)
        .ok_or_else(|| CliError::usage("extract needs --mesh-dir or a config with mesh_dir"))?;
    let fields_dir = a.fields_dir.clone().or(cfg.fields_dir).unwrap_or_else(|| mesh_dir.join("../../0"));
    let g = extract_case(&mesh_dir, &fields_dir)?;
    create_parent(&a.out)?;
    save_graph(&g, &a.out)?;
    log::info!("{} cells, {} edges -> {}", g.n_cells(), g.n_edges(), a.out.display());
    Ok(())
}

fn graph_or_toy(mesh: Option<&Path>) -> CliResult<EulerianGraph> {
    Ok(match mesh {
        Some(p) => load_graph(p)?,
        None => toy_graph()?,
    })
}

pub fn synth(a: &SynthArgs) -> CliResult<()> {
    let mut spec: CaseSpec = match &a.config {
        Some(p) => read_json(p)?,
        None => CaseSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let graph = graph_or_toy(a.mesh.as_deref())?;
    let archive = generate_case(&spec, &graph)?;
    create_parent(&a.out)?;
    archive.save(&a.out)?;
    log::info!("{}: {} frames -> {}", spec.name, archive.frames.len(), a.out.display());
    Ok(())
}

pub fn train(a: &TrainArgs) -> CliResult<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let s = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            TrainConfig::from_json(&s)?
        }
        None => TrainConfig::toy(aerograph_core::nn::Variant::Elgin, 0),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let data = Dataset::from_config(&cfg.data)?;
    let out = run_curriculum(&cfg, &data)?;
    std::fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    out.model.save(&a.out.join("checkpoint.bin"))?;
    write_file(&a.out.join("loss_log.csv"), &log_to_csv(&out.log))?;
    write_file(&a.out.join("train_config.json"), &serde_json::to_string_pretty(&cfg)?)?;
    log::info!("{} epochs -> {}", out.log.len(), a.out.display());
    Ok(())
}

pub fn rollout_cmd(a: &RolloutArgs) -> CliResult<()> {
    let reference = RolloutArchive::load(&a.case)?;
    let model = Model::load(&a.checkpoint)?;
    let mut cfg: RolloutConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => RolloutConfig {
            n_steps: reference.frames.len().saturating_sub(HISTORY),
            ..RolloutConfig::default()
        },
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.steps {
        cfg.n_steps = n;
    }
    let graph = graph_or_toy(a.mesh.as_deref())?;
    let outcome = rollout(&model, &graph, &reference, &cfg)?;
    if let Some(d) = &outcome.diagnostic {
        log::warn!("rollout stopped early: {d}");
    }
    create_parent(&a.out)?;
    outcome.archive.save(&a.out)?;
    Ok(())
}

pub fn eval_cmd(a: &EvalArgs) -> CliResult<()> {
    let pred = RolloutArchive::load(&a.pred)?;
    let gt = RolloutArchive::load(&a.reference)?;
    let report = EvalReport::build(&pred, &gt)?;
    report.write(&a.out)?;
    println!("{}", report.metrics_json()?);
    Ok(())
}

/// Groups at every (V_in, U_mag) pair of the sweep grid.
pub fn nondim_grid_csv(d_bar: f64) -> String {
    let (geo, air, drop) = (RoomGeometry::default(), AirProperties::default(), DropletProperties::default());
    let mut s = String::from("v_in,u_mag,d_bar,st,s_v,ach,re_jet,pe_t,k0,omega0,d_turb\n");
    for &v in &SWEEP_V_IN {
        for &u in &SWEEP_U_MAG {
            let g = nondim_groups(v, u, d_bar, &geo, &air, &drop);
            let _ = writeln!(
                s,
                "{v},{u},{d_bar},{},{},{},{},{},{},{},{}",
                g.st, g.s_v, g.ach, g.re_jet, g.pe_t, g.k0, g.omega0, g.d_turb
            );
        }
    }
    s
}

pub fn analyze(a: &AnalyzeArgs) -> CliResult<()> {
    if a.archives.is_empty() && !a.grid {
        return Err(CliError::usage("analyze needs archive files or --grid"));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    if a.grid {
        write_file(&a.out.join("nondim_grid.csv"), &nondim_grid_csv(GRID_D_BAR))?;
    }
    if !a.archives.is_empty() {
        let mut loaded = Vec::with_capacity(a.archives.len());
        for p in &a.archives {
            let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            loaded.push((name, RolloutArchive::load(p)?));
        }
        eval::analyze(&loaded)?.write(&a.out)?;
    }
    Ok(())
}

pub fn serve(a: ServeArgs) -> CliResult<()> {
    let mut cfg: ServeConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => ServeConfig::default(),
    };
    if let Some(h) = a.host {
        cfg.host = h;
    }
    if let Some(p) = a.port {
        cfg.port = p;
    }
    if let Some(w) = a.workers {
        cfg.workers = w;
    }
    cfg.checkpoints.extend(a.checkpoint);
    cfg.data_dir = service::resolve_data_dir(a.out.or(cfg.data_dir.take()));
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::other("io", e.to_string()))?;
    rt.block_on(service::serve(cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_twenty_rows_and_constant_pe() {
        let csv = nondim_grid_csv(GRID_D_BAR);
        let rows: Vec<&str> = csv.lines().skip(1).collect();
        assert_eq!(rows.len(), 20);
        let pe: Vec<f64> = rows.iter().map(|r| r.split(',').nth(7).unwrap().parse().unwrap()).collect();
        for p in &pe {
            assert!((p / pe[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn parses_subcommands() {
        let c = Cli::try_parse_from(["aerograph", "eval", "--pred", "a", "--ref", "b", "--out", "o"]).unwrap();
        assert!(matches!(c.command, Command::Eval(_)));
        let c = Cli::try_parse_from(["aerograph", "synth", "--seed", "7", "--out", "x.elgn"]).unwrap();
        match c.command {
            Command::Synth(s) => assert_eq!(s.seed, Some(7)),
            _ => panic!(),
        }
        assert!(Cli::try_parse_from(["aerograph", "synth"]).is_err());
    }

    #[test]
    fn analyze_without_inputs_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let e = analyze(&AnalyzeArgs {
            archives: vec![],
            grid: false,
            out: dir.path().into(),
        })
        .unwrap_err();
        assert_eq!(e.code, 2);
    }
}
