use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use msslam::eval::{evaluate_logs, read_timelines, run_experiment, write_csv, ExperimentConfig, TimelineRow};
use msslam::features::FamilyId;
use msslam::geom::CameraIntrinsics;
use msslam::graph::MultiSessionMap;
use msslam::io::{load_map, load_session, load_world, save_map, save_session, save_world};
use msslam::slam::{localize_session, map_session, merge_maps, SlamConfig};
use msslam::synthworld::{
    generate_world, parse_start_time, simulate_session, FamilyModel, FamilyPreset, OdometryNoise, RenderConfig,
    TrajectorySpec, WorldParams,
};
use msslam::vocabulary::SearchBackend;

#[derive(Parser)]
#[command(name = "msslam", version, about = "Multi-session visual SLAM on synthetic illumination-varying sessions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct EngineArgs {
    /// Proximity search radius in meters.
    #[arg(long, default_value_t = 1.0)]
    radius: f64,
    /// Posterior threshold for loop-closure hypotheses.
    #[arg(long, default_value_t = 0.15)]
    threshold: f64,
    /// Minimum PnP inliers to accept a transform.
    #[arg(long, default_value_t = 20)]
    min_inliers: usize,
}

impl EngineArgs {
    fn config(&self) -> SlamConfig {
        let mut cfg = SlamConfig::default();
        cfg.proximity_radius = self.radius;
        cfg.bayes.threshold = self.threshold;
        cfg.registration.min_inliers = self.min_inliers;
        cfg
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world.
    Genworld {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "world.json")]
        out: PathBuf,
    },
    /// Simulate one traversal of a world with one descriptor family.
    Simulate {
        #[arg(long)]
        world: PathBuf,
        /// Family code: SU, SI, BF, BK, KA, FR, DY or SP.
        #[arg(long, default_value = "SU")]
        family: String,
        /// Start time as HH:MM, a mapping session 1-6 or a query session A-F.
        #[arg(long, default_value = "1")]
        time: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "session.json")]
        out: PathBuf,
    },
    /// Map one session, optionally onto a prior map.
    Map {
        #[arg(long)]
        sessions: PathBuf,
        /// Prior map the session is chained onto.
        #[arg(long)]
        prior: Option<PathBuf>,
        /// World file supplying camera intrinsics when there is no prior.
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long, default_value = "map.json")]
        out: PathBuf,
        #[command(flatten)]
        engine: EngineArgs,
    },
    /// Merge two or more maps by re-mapping their sessions in order.
    Merge {
        #[arg(long, num_args = 1.., required = true)]
        maps: Vec<PathBuf>,
        #[arg(long, default_value = "merged.json")]
        out: PathBuf,
        #[command(flatten)]
        engine: EngineArgs,
    },
    /// Localize query sessions against a map; writes a timeline CSV.
    Localize {
        #[arg(long)]
        maps: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        sessions: Vec<PathBuf>,
        /// Map id recorded in the timeline; defaults to the map file stem.
        #[arg(long)]
        map_id: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "timeline.csv")]
        out: PathBuf,
        #[command(flatten)]
        engine: EngineArgs,
    },
    /// Summarize timeline CSVs into per-cell metrics.
    Eval {
        #[arg(long, num_args = 1.., required = true)]
        logs: Vec<PathBuf>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Run the full mapping/localization matrices on seeded synthetic data.
    Experiment {
        /// First seed.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Number of consecutive seeds.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Comma-separated family codes, or "all".
        #[arg(long, default_value = "all")]
        family: String,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        #[command(flatten)]
        engine: EngineArgs,
    },
}

#[derive(Debug)]
struct Failure {
    kind: &'static str,
    message: String,
}

impl<E: std::error::Error> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure {
            kind: "data",
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        kind: "usage",
        message: message.into(),
    }
}

fn parse_time(s: &str) -> Result<f64, Failure> {
    parse_start_time(s).ok_or_else(|| usage(format!("bad time {s}")))
}

fn parse_families(s: &str) -> Result<Vec<FamilyId>, Failure> {
    if s == "all" {
        return Ok(FamilyId::ALL.to_vec());
    }
    s.split(',')
        .map(|c| FamilyId::from_code(c.trim()).map_err(|e| usage(e.to_string())))
        .collect()
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Genworld { seed, out } => {
            save_world(&out, &generate_world(seed, &WorldParams::default())?)?;
        }
        Command::Simulate {
            world,
            family,
            time,
            seed,
            out,
        } => {
            let family = FamilyId::from_code(&family).map_err(|e| usage(e.to_string()))?;
            let start = parse_time(&time)?;
            let world = load_world(&world)?;
            let model = FamilyModel::new(&world, &FamilyPreset::for_family(family));
            let rec = simulate_session(
                &world,
                &model,
                &TrajectorySpec::default(),
                start,
                &OdometryNoise::default(),
                &RenderConfig::default(),
                seed,
                time,
            );
            save_session(&out, &rec)?;
        }
        Command::Map {
            sessions,
            prior,
            world,
            out,
            engine,
        } => {
            let rec = load_session(&sessions)?;
            let family = rec
                .frames
                .first()
                .map(|f| f.frame.family)
                .ok_or_else(|| usage("session has no frames"))?;
            let mut map = match (prior, world) {
                (Some(p), _) => load_map(&p)?,
                (None, Some(w)) => MultiSessionMap::new(load_world(&w)?.camera, family, SearchBackend::default()),
                (None, None) => MultiSessionMap::new(CameraIntrinsics::default(), family, SearchBackend::default()),
            };
            let summary = map_session(&mut map, &rec, &engine.config())?;
            save_map(&out, &map)?;
            println!("{}", serde_json::to_string(&summary_json(&summary))?);
        }
        Command::Merge { maps, out, engine } => {
            if maps.len() < 2 {
                return Err(usage("merge needs at least two maps"));
            }
            let loaded = maps.iter().map(|p| load_map(p)).collect::<Result<Vec<_>, _>>()?;
            let (map, summaries) = merge_maps(&loaded, &engine.config())?;
            save_map(&out, &map)?;
            for s in &summaries {
                println!("{}", serde_json::to_string(&summary_json(s))?);
            }
        }
        Command::Localize {
            maps,
            sessions,
            map_id,
            seed,
            out,
            engine,
        } => {
            let map = load_map(&maps)?;
            let map_id = map_id.unwrap_or_else(|| stem(&maps));
            let cfg = engine.config();
            let mut rows = Vec::new();
            for s in &sessions {
                let rec = load_session(s)?;
                for e in localize_session(&map, &rec, &cfg)? {
                    rows.push(TimelineRow::from_event(&map_id, &rec.label, map.family, seed, &e));
                }
            }
            write_csv(&out, &rows)?;
        }
        Command::Eval { logs, out_dir } => {
            let mut rows = Vec::new();
            for l in &logs {
                rows.extend(read_timelines(l)?);
            }
            let summary = evaluate_logs(&rows)?;
            std::fs::create_dir_all(&out_dir)?;
            write_csv(&out_dir.join("summary.csv"), &summary)?;
        }
        Command::Experiment {
            seed,
            seeds,
            family,
            out_dir,
            engine,
        } => {
            let cfg = ExperimentConfig {
                seeds: (seed..seed + seeds).collect(),
                families: parse_families(&family)?,
                slam: engine.config(),
                ..Default::default()
            };
            run_experiment(&cfg)?.write_csvs(&out_dir)?;
        }
    }
    Ok(())
}

fn summary_json(s: &msslam::slam::SessionSummary) -> serde_json::Value {
    json!({
        "session": s.label,
        "frames": s.frames,
        "aligned": s.aligned,
        "anchor_frame": s.anchor_frame,
        "inter_session_frames": s.inter_session_frames,
        "max_gap": s.max_gap,
        "loop_closures": s.loop_closures,
        "proximity_links": s.proximity_links,
    })
}

fn report(f: &Failure) {
    eprintln!("{}", json!({ "error": f.kind, "message": f.message }));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report(&usage(e.to_string().trim_end()));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            report(&f);
            ExitCode::from(if f.kind == "usage" { 2 } else { 3 })
        }
    }
}
