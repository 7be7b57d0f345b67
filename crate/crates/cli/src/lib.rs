//! The `efumi` command line: synthetic scenes, eFUMI runs, influence
//! sweeps, segmentation, the three experiments, and the HTTP service.
//!
//! Every command except `serve` writes into one output directory and ends
//! with a `manifest.json` (see [`manifest`]). Exit status is 0 on success, 1
//! on a runtime error and 2 on a usage error.

pub mod manifest;
pub mod scatter;

use std::ffi::OsString;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use efumi_core::efumi::run_efumi;
use efumi_core::experiments::{single_point, superpixel_experiment, Selector};
use efumi_core::influence::{exact_influence_sweep, mislabel_recovery, surrogate_records, surrogates, Restart};
use efumi_core::io::{decode_cube, encode_cube};
use efumi_core::superpixel::{segment, DEFAULT_COMPACTNESS};
use efumi_core::synth::generate_synthetic;
use efumi_core::{BagSet, Cube, Efumi, EfumiConfig, LabelMask, RankBy, Rng, SuperpixelMap, SyntheticConfig, Unit};
use serde_json::json;

use manifest::{Input, OutDir};
use scatter::{emit_scatter, records_csv, scatter_csv};

#[derive(Debug, Parser)]
#[command(name = "efumi", version, about = "Target signature estimation and label influence for hyperspectral scenes")]
pub struct Cli {
    /// Output directory. Defaults to $EFUMI_WORKSPACE/<command>, or
    /// ./efumi-out/<command> when the variable is unset.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for parallel sweeps (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene with known endmembers and labels.
    Synth(SynthArgs),
    /// Fit eFUMI to a cube and label mask.
    Run(RunArgs),
    /// Surrogate maps, and exact influence for selected units.
    Influence(InfluenceArgs),
    /// Over-segment a cube into superpixels.
    Segment(SegmentArgs),
    #[command(subcommand)]
    Experiment(Experiment),
    /// Serve the HTTP API over a workspace directory.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
pub enum Experiment {
    /// Exact influence of single-pixel flips against the surrogates.
    SinglePoint(SinglePointArgs),
    /// Mislabel negatives, correct by each strategy, score the recovery.
    Recovery(RecoveryArgs),
    /// Exact influence of superpixel flips against region metrics.
    Superpixel(SuperpixelArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub rows: usize,
    #[arg(long)]
    pub cols: usize,
    #[arg(long)]
    pub bands: usize,
    /// Background endmember count.
    #[arg(long)]
    pub m: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.01)]
    pub target_fraction: f64,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Share of negative pixels that secretly contain target.
    #[arg(long, default_value_t = 0.0)]
    pub confusers: f64,
    /// Side of the square positive bag around each target site.
    #[arg(long, default_value_t = 5)]
    pub halo: usize,
}

#[derive(Debug, Args)]
pub struct SceneArgs {
    /// Cube container (.hsic).
    #[arg(long)]
    pub cube: PathBuf,
    /// Label mask (.hsim): 0 unlabeled, 1 negative, k >= 2 positive bag k.
    #[arg(long)]
    pub mask: PathBuf,
}

/// eFUMI settings: a JSON file, then individual overrides.
#[derive(Debug, Args)]
pub struct EfumiArgs {
    /// EfumiConfig as JSON; unspecified fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub m_init: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lambda_sparse: Option<f64>,
    #[arg(long)]
    pub lambda_mean: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub rel_tol: Option<f64>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    #[command(flatten)]
    pub efumi: EfumiArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct InfluenceArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    #[command(flatten)]
    pub efumi: EfumiArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Units for exact reruns, e.g. `top-pt:50` or `random:100,top-re:100`,
    /// or `all` for every labelled pixel. Without it only surrogates are written.
    #[arg(long)]
    pub units: Option<String>,
    #[arg(long, default_value = "warm", value_parser = parse_restart)]
    pub restart: Restart,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub cube: PathBuf,
    /// Approximate number of segments.
    #[arg(long)]
    pub segments: usize,
    #[arg(long, default_value_t = DEFAULT_COMPACTNESS)]
    pub compactness: f64,
}

#[derive(Debug, Args)]
pub struct SinglePointArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    #[command(flatten)]
    pub efumi: EfumiArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Selectors with a shared count: `random:N`, `top-pt:N`, `top-re:N`.
    #[arg(long, default_value = "random:1000,top-pt:1000")]
    pub units: String,
    #[arg(long, default_value = "warm", value_parser = parse_restart)]
    pub restart: Restart,
}

#[derive(Debug, Args)]
pub struct RecoveryArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    #[command(flatten)]
    pub efumi: EfumiArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Share of negative pixels to mislabel.
    #[arg(long, default_value_t = 0.005)]
    pub alpha: f64,
    /// Share of labelled pixels each strategy may inspect.
    #[arg(long, default_value_t = 0.2)]
    pub inspect: f64,
}

#[derive(Debug, Args)]
pub struct SuperpixelArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    #[command(flatten)]
    pub efumi: EfumiArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Segment the cube into about this many superpixels.
    #[arg(long, conflicts_with = "map", required_unless_present = "map")]
    pub segments: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_COMPACTNESS)]
    pub compactness: f64,
    /// Use an existing superpixel map instead.
    #[arg(long)]
    pub map: Option<PathBuf>,
    #[arg(long, default_value = "warm", value_parser = parse_restart)]
    pub restart: Restart,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Workspace directory (default: $EFUMI_WORKSPACE or ./efumi-workspace).
    #[arg(long)]
    pub workspace: Option<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
    /// Concurrent jobs (default: logical cores).
    #[arg(long)]
    pub workers: Option<usize>,
}

fn parse_restart(s: &str) -> std::result::Result<Restart, String> {
    match s {
        "warm" => Ok(Restart::Warm),
        "cold" => Ok(Restart::Cold),
        other => Err(format!("expected warm or cold, got {other:?}")),
    }
}

/// Parses `sel:N[,sel:N...]`.
pub fn parse_units(spec: &str) -> Result<Vec<(Selector, usize)>> {
    spec.split(',')
        .map(|part| {
            let (sel, n) = part
                .trim()
                .split_once(':')
                .with_context(|| format!("unit spec {part:?} is not selector:count"))?;
            let n: usize = n.parse().with_context(|| format!("bad count in {part:?}"))?;
            if n == 0 {
                bail!("unit count must be positive in {part:?}");
            }
            Ok((sel.parse::<Selector>()?, n))
        })
        .collect()
}

fn selector_name(s: Selector) -> &'static str {
    match s {
        Selector::Random => "random",
        Selector::TopPt => "top_pt",
        Selector::TopRe => "top_re",
    }
}

fn restart_name(r: Restart) -> &'static str {
    match r {
        Restart::Warm => "warm",
        Restart::Cold => "cold",
    }
}

impl EfumiArgs {
    /// Config from the file (if any), flags on top, and `seed`.
    fn resolve(&self, seed: u64, out: &mut OutDir) -> Result<EfumiConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let input = Input::read(path)?;
                out.input(&input);
                serde_json::from_slice(&input.bytes).with_context(|| format!("parsing {}", path.display()))?
            }
            None => EfumiConfig::default(),
        };
        if let Some(v) = self.m_init {
            cfg.m_init = v;
        }
        if self.beta.is_some() {
            cfg.beta = self.beta;
        }
        if self.lambda_sparse.is_some() {
            cfg.lambda_sparse = self.lambda_sparse;
        }
        if let Some(v) = self.lambda_mean {
            cfg.lambda_mean = v;
        }
        if let Some(v) = self.max_iters {
            cfg.max_iters = v;
        }
        if let Some(v) = self.rel_tol {
            cfg.rel_tol = v;
        }
        cfg.seed = seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_cube(path: &Path, out: &mut OutDir) -> Result<Cube> {
    let input = Input::read(path)?;
    out.input(&input);
    let cube: Cube = decode_cube(&input.bytes).with_context(|| format!("decoding {}", path.display()))?;
    let violations = cube.validate();
    if let Some(first) = violations.first() {
        bail!("{} has {} invalid value(s), first {first}", path.display(), violations.len());
    }
    Ok(cube)
}

fn load_scene(scene: &SceneArgs, out: &mut OutDir) -> Result<(Cube, BagSet)> {
    let cube = load_cube(&scene.cube, out)?;
    let input = Input::read(&scene.mask)?;
    out.input(&input);
    let mask = LabelMask::decode(&input.bytes).with_context(|| format!("decoding {}", scene.mask.display()))?;
    mask.matches(&cube)?;
    Ok((cube, mask.to_bags()?))
}

fn default_out(command: &str) -> PathBuf {
    let root = std::env::var_os("EFUMI_WORKSPACE").map_or_else(|| PathBuf::from("efumi-out"), PathBuf::from);
    root.join(command)
}

fn open_out(cli_out: &Option<PathBuf>, command: &str) -> Result<OutDir> {
    let dir = cli_out.clone().unwrap_or_else(|| default_out(&command.replace(' ', "-")));
    OutDir::create(dir, command)
}

/// Writes the fitted model: summary JSON plus per-pixel payloads.
fn write_result(out: &mut OutDir, cube: &Cube, res: &Efumi) -> Result<()> {
    out.write_json("result.json", &res.summary())?;
    let e = res.endmembers.columns();
    let e_cube = Cube::from_pixels(1, e.len(), e)?;
    out.write("endmembers.hsic", &encode_cube(&e_cube)?)?;
    let p = Cube::new(cube.rows(), cube.cols(), res.proportions.n_cols(), res.proportions.values().to_vec())?;
    out.write("proportions.hsic", &encode_cube(&p)?)?;
    let z = Cube::new(cube.rows(), cube.cols(), 1, res.zweights.clone())?;
    out.write("zweights.hsic", &encode_cube(&z)?)?;
    Ok(())
}

const PIXEL_AXES: [RankBy; 2] = [RankBy::Pt, RankBy::Re];
const REGION_AXES: [RankBy; 4] = [RankBy::MaxPt, RankBy::SumPt, RankBy::MaxRe, RankBy::SumRe];

fn synth(cli: &Cli, a: &SynthArgs) -> Result<PathBuf> {
    let mut out = open_out(&cli.out, "synth")?;
    let cfg = SyntheticConfig {
        halo: a.halo,
        ..SyntheticConfig::new(a.rows, a.cols, a.bands, a.m)
            .target_fraction(a.target_fraction)
            .noise(a.noise)
            .confusers(a.confusers)
    };
    let (cube, truth, mask) = generate_synthetic::<f64>(&cfg, &mut Rng::new(a.seed))?;
    out.write("cube.hsic", &encode_cube(&cube)?)?;
    out.write("mask.hsim", &mask.encode()?)?;
    out.write_json(
        "truth.json",
        &json!({
            "target": truth.endmembers.target(),
            "background": truth.endmembers.background(),
            "target_pixels": truth.target_pixels,
            "confuser_pixels": truth.confuser_pixels,
            "noise_sigma": truth.noise_sigma,
        }),
    )?;
    let p = Cube::new(a.rows, a.cols, truth.proportions.n_cols(), truth.proportions.values().to_vec())?;
    out.write("truth_proportions.hsic", &encode_cube(&p)?)?;
    out.finish(Some(a.seed), serde_json::to_value(&cfg)?)
}

fn run(cli: &Cli, a: &RunArgs) -> Result<PathBuf> {
    let mut out = open_out(&cli.out, "run")?;
    let (cube, bags) = load_scene(&a.scene, &mut out)?;
    let cfg = a.efumi.resolve(a.seed, &mut out)?;
    let res = run_efumi(&cube, &bags, &cfg, None)?;
    write_result(&mut out, &cube, &res)?;
    out.finish(Some(a.seed), json!({ "efumi": cfg }))
}

fn influence(cli: &Cli, a: &InfluenceArgs) -> Result<PathBuf> {
    let mut out = open_out(&cli.out, "influence")?;
    let (cube, bags) = load_scene(&a.scene, &mut out)?;
    let cfg = a.efumi.resolve(a.seed, &mut out)?;
    let base = run_efumi(&cube, &bags, &cfg, None)?;
    write_result(&mut out, &cube, &base)?;
    let (pt, re) = surrogates(&cube, &base.endmembers)?;
    let maps: Vec<f64> = pt.iter().zip(&re).flat_map(|(a, b)| [*a, *b]).collect();
    out.write("surrogates.hsic", &encode_cube(&Cube::new(cube.rows(), cube.cols(), 2, maps)?)?)?;

    let labelled = bags.labeled_pixels();
    let records = match a.units.as_deref() {
        None => surrogate_records(&cube, &base.endmembers, &labelled)?,
        Some(spec) => {
            let pixels: Vec<usize> = if spec == "all" {
                labelled
            } else {
                let mut rng = Rng::new(a.seed);
                let mut picked = Vec::new();
                for (sel, n) in parse_units(spec)? {
                    for p in efumi_core::experiments::select_pixels(&cube, &bags, &base, sel, n, &mut rng)? {
                        if !picked.contains(&p) {
                            picked.push(p);
                        }
                    }
                }
                picked
            };
            let units: Vec<Unit> = pixels.into_iter().map(Unit::pixel).collect();
            let records = exact_influence_sweep(&cube, &bags, &base, &units, a.restart)?;
            let rows = emit_scatter(&records, &PIXEL_AXES)?;
            out.write("scatter.csv", &scatter_csv(&rows, &PIXEL_AXES)?)?;
            records
        }
    };
    out.write("records.csv", &records_csv(&records)?)?;
    out.write_json("records.json", &records)?;
    out.finish(
        Some(a.seed),
        json!({ "efumi": cfg, "units": a.units, "restart": restart_name(a.restart) }),
    )
}

fn segment_cmd(cli: &Cli, a: &SegmentArgs) -> Result<PathBuf> {
    let mut out = open_out(&cli.out, "segment")?;
    let cube = load_cube(&a.cube, &mut out)?;
    let map = segment(&cube, a.segments, a.compactness)?;
    out.write("segments.hsim", &map.encode()?)?;
    out.write_json(
        "summary.json",
        &json!({
            "n_segments": map.n_segments(),
            "mean_size": cube.n_pixels() as f64 / map.n_segments() as f64,
            "sizes": map.sizes(),
        }),
    )?;
    out.finish(None, json!({ "target_segments": a.segments, "compactness": a.compactness }))
}

fn single_point_cmd(cli: &Cli, a: &SinglePointArgs) -> Result<PathBuf> {
    let mut out = open_out(&cli.out, "experiment single-point")?;
    let (cube, bags) = load_scene(&a.scene, &mut out)?;
    let cfg = a.efumi.resolve(a.seed, &mut out)?;
    let units = parse_units(&a.units)?;
    let n = units[0].1;
    if units.iter().any(|&(_, k)| k != n) {
        bail!("all --units entries must use the same count");
    }
    let selectors: Vec<Selector> = units.iter().map(|&(s, _)| s).collect();
    let base = run_efumi(&cube, &bags, &cfg, None)?;
    let report = single_point(&cube, &bags, &base, &selectors, n, a.restart, &mut Rng::new(a.seed))?;
    for sweep in &report.sweeps {
        let name = selector_name(sweep.selector);
        out.write(&format!("records_{name}.csv"), &records_csv(&sweep.records)?)?;
        let rows = emit_scatter(&sweep.records, &PIXEL_AXES)?;
        out.write(&format!("scatter_{name}.csv"), &scatter_csv(&rows, &PIXEL_AXES)?)?;
    }
    let spearman: serde_json::Map<String, serde_json::Value> = report
        .sweeps
        .iter()
        .map(|s| (selector_name(s.selector).to_string(), serde_json::to_value(&s.spearman).expect("serializes")))
        .collect();
    out.write_json(
        "summary.json",
        &json!({
            "n_units": report.n_units,
            "overlap_random_top_pt": report.overlap_random_top_pt,
            "spearman_log_influence": spearman,
            "baseline": { "iterations": base.iterations, "converged": base.converged, "params": base.params },
        }),
    )?;
    out.finish(
        Some(a.seed),
        json!({ "efumi": cfg, "units": a.units, "restart": restart_name(a.restart) }),
    )
}

fn recovery_cmd(cli: &Cli, a: &RecoveryArgs) -> Result<PathBuf> {
    let mut out = open_out(&cli.out, "experiment recovery")?;
    let (cube, bags) = load_scene(&a.scene, &mut out)?;
    let cfg = a.efumi.resolve(a.seed, &mut out)?;
    let outcome = mislabel_recovery(&cube, &bags, &cfg, a.alpha, a.inspect, &mut Rng::new(a.seed))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["strategy", "doi", "n_selected", "n_corrected"])?;
    for r in &outcome.reports {
        w.write_record([
            r.strategy.name().to_string(),
            r.doi.to_string(),
            r.n_selected.to_string(),
            r.n_corrected.to_string(),
        ])?;
    }
    out.write("doi.csv", &w.into_inner()?)?;
    out.write_json("recovery.json", &outcome)?;
    out.finish(Some(a.seed), json!({ "efumi": cfg, "alpha": a.alpha, "inspect": a.inspect }))
}

fn superpixel_cmd(cli: &Cli, a: &SuperpixelArgs) -> Result<PathBuf> {
    let mut out = open_out(&cli.out, "experiment superpixel")?;
    let (cube, bags) = load_scene(&a.scene, &mut out)?;
    let cfg = a.efumi.resolve(a.seed, &mut out)?;
    let map = match (&a.map, a.segments) {
        (Some(path), _) => {
            let input = Input::read(path)?;
            out.input(&input);
            SuperpixelMap::decode(&input.bytes)?
        }
        (None, Some(n)) => {
            let map = segment(&cube, n, a.compactness)?;
            out.write("segments.hsim", &map.encode()?)?;
            map
        }
        (None, None) => bail!("pass --segments or --map"),
    };
    let base = run_efumi(&cube, &bags, &cfg, None)?;
    let report = superpixel_experiment(&cube, &bags, &base, &map, a.restart)?;
    out.write("records.csv", &records_csv(&report.records)?)?;
    let rows = emit_scatter(&report.records, &REGION_AXES)?;
    out.write("scatter.csv", &scatter_csv(&rows, &REGION_AXES)?)?;
    out.write_json(
        "summary.json",
        &json!({
            "n_segments": report.n_segments,
            "mean_size": report.mean_size,
            "skipped": report.skipped,
            "spearman_log_influence": report.spearman,
        }),
    )?;
    out.finish(
        Some(a.seed),
        json!({
            "efumi": cfg,
            "target_segments": a.segments,
            "compactness": a.compactness,
            "restart": restart_name(a.restart),
        }),
    )
}

fn serve(a: &ServeArgs) -> Result<()> {
    let root = a
        .workspace
        .clone()
        .or_else(|| std::env::var_os("EFUMI_WORKSPACE").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("efumi-workspace"));
    let workers = a
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    efumi_service::run_blocking(efumi_service::ServiceConfig {
        root,
        addr: SocketAddr::new(a.host, a.port),
        workers,
    })?;
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            bail!("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let dir = match &cli.command {
        Command::Synth(a) => synth(cli, a)?,
        Command::Run(a) => run(cli, a)?,
        Command::Influence(a) => influence(cli, a)?,
        Command::Segment(a) => segment_cmd(cli, a)?,
        Command::Experiment(Experiment::SinglePoint(a)) => single_point_cmd(cli, a)?,
        Command::Experiment(Experiment::Recovery(a)) => recovery_cmd(cli, a)?,
        Command::Experiment(Experiment::Superpixel(a)) => superpixel_cmd(cli, a)?,
        Command::Serve(a) => return serve(a),
    };
    eprintln!("wrote {}", dir.display());
    Ok(())
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version go to stdout with status 0; the rest are usage errors.
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
