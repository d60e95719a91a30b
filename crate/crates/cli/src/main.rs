use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use difftrack::harness::config::{self, DenoiserKind, RunConfig, SEED_ENV};
use difftrack::harness::experiments::{
    ablate, robustness, sweep, track_scene, write_csv, AblationGrid, AblationRow, RobustnessRow, SweepRow,
    ROBUSTNESS_ALPHAS,
};
use difftrack::harness::manifest::RunManifest;
use difftrack::harness::motchallenge as mot;
use difftrack::metrics::{evaluate, MetricsReport};
use difftrack::pipeline::Pipeline;
use difftrack::simulator::{generate, NoiseBox};
use difftrack::{diffusion::PaddingStrategy, diffusion::PerturbationSchedule};

#[derive(Parser)]
#[command(name = "difftrack", version, about = "Noise-to-tracking engine with an oracle denoiser")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene as a MOTChallenge directory.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Output directory; receives seqinfo.ini, gt/gt.txt and det/det.txt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Track a scene directory or a detection file.
    Track {
        #[command(flatten)]
        common: Common,
        /// Scene directory with seqinfo.ini and gt/gt.txt.
        #[arg(long, conflicts_with = "det")]
        scene: Option<PathBuf>,
        /// Detection file; the image size comes from a seqinfo.ini next to it
        /// or in its parent directory.
        #[arg(long)]
        det: Option<PathBuf>,
        /// Result file in MOTChallenge format.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a result file against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Scene directory or ground-truth file.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        result: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print a CSV row instead of key=value lines.
        #[arg(long)]
        csv: bool,
    },
    /// Grid over prior proportion, padding and perturbation schedule.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seeds: Seeds,
        #[arg(long, value_delimiter = ',')]
        proportions: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        paddings: Option<Vec<String>>,
        #[arg(long, value_delimiter = ',')]
        perturbations: Option<Vec<String>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// MOTA and latency over proposal counts and DDIM step counts.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seeds: Seeds,
        #[arg(long, value_delimiter = ',', default_value = "100,300,500,800")]
        boxes: Vec<usize>,
        #[arg(long = "step-counts", value_delimiter = ',', default_value = "1,2,4,8")]
        step_counts: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// MOTA under prior and detection perturbation.
    Robustness {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seeds: Seeds,
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        #[arg(long, default_value_t = 0.5)]
        noise_mean: f64,
        #[arg(long, default_value_t = 0.25)]
        noise_std: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Settings shared by every subcommand. Flags override the config file,
/// which overrides the built-in defaults.
#[derive(Args)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `pipeline.tracker.max_lost_age=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    denoiser: Option<String>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    proportion: Option<f64>,
    #[arg(long)]
    padding: Option<String>,
    #[arg(long)]
    perturbation: Option<String>,
    #[arg(long)]
    fidelity: Option<f64>,
    #[arg(long)]
    scene_kind: Option<String>,
    #[arg(long)]
    objects: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    iou_gate: Option<f64>,
}

impl Common {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut out = vec![];
        for s in &self.sets {
            out.push(config::parse_assignment(s).map_err(|e| Usage(e.to_string()))?);
        }
        let quoted = |s: &str| format!("{s:?}");
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        push("seed", self.seed.map(|v| v.to_string()));
        push("denoiser", self.denoiser.as_deref().map(quoted));
        push("pipeline.variant", self.variant.as_deref().map(quoted));
        push("pipeline.n_test", self.n_test.map(|v| v.to_string()));
        push("pipeline.steps", self.steps.map(|v| v.to_string()));
        push("pipeline.proportion", self.proportion.map(|v| format!("{v:?}")));
        push("pipeline.padding", self.padding.as_deref().map(quoted));
        push("pipeline.perturbation", self.perturbation.as_deref().map(quoted));
        push("oracle.fidelity", self.fidelity.map(|v| format!("{v:?}")));
        push("scene.kind", self.scene_kind.as_deref().map(quoted));
        push("scene.objects", self.objects.map(|v| v.to_string()));
        push("scene.frames", self.frames.map(|v| v.to_string()));
        push("iou_gate", self.iou_gate.map(|v| format!("{v:?}")));
        Ok(out)
    }

    fn resolve(&self) -> Result<RunConfig> {
        let env = std::env::var(SEED_ENV).ok();
        config::load(self.config.as_deref(), &self.overrides()?, env.as_deref()).map_err(|e| match e {
            difftrack::Error::Config(_) | difftrack::Error::InvalidArgument(_) => Usage(e.to_string()).into(),
            other => anyhow::Error::new(other),
        })
    }
}

#[derive(Args)]
struct Seeds {
    /// Number of seeds, counting up from the run seed.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
}

impl Seeds {
    fn list(&self, base: u64) -> Vec<u64> {
        (0..self.seeds).map(|i| base.wrapping_add(i)).collect()
    }
}

/// A bad invocation rather than bad data.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn parse_list<T>(items: &[String], what: &str, parse: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
    items
        .iter()
        .map(|s| parse(s).ok_or_else(|| Usage(format!("unknown {what} {s:?}")).into()))
        .collect()
}

fn write_manifest(m: &RunManifest, output: &Path) -> Result<()> {
    m.write(&RunManifest::path_for(output))?;
    Ok(())
}

fn seqinfo_near(det: &Path) -> Result<mot::SeqInfo> {
    let dir = det.parent().unwrap_or(Path::new("."));
    for cand in [dir.join("seqinfo.ini"), dir.join("..").join("seqinfo.ini")] {
        if cand.exists() {
            return Ok(mot::read_seqinfo(&cand)?);
        }
    }
    bail!(Usage(format!("no seqinfo.ini found next to {}", det.display())))
}

fn read_gt(path: &Path) -> Result<difftrack::simulator::SceneGroundTruth> {
    if path.is_dir() {
        return Ok(mot::read_scene(path)?);
    }
    let info = seqinfo_near(path)?;
    let rows = mot::read_rows(path)?;
    Ok(mot::to_ground_truth(&rows, info.image_size, Some(info.length))?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { common, out } => {
            let cfg = common.resolve()?;
            let gt = generate(&cfg.scene.spec(cfg.seed))?;
            mot::write_scene(&gt, &out)?;
            let mut m = RunManifest::new("simulate", &cfg);
            m.outputs.push(out.clone());
            write_manifest(&m, &out)?;
            println!("wrote {} frames to {}", gt.num_frames(), out.display());
        }
        Command::Track { common, scene, det, out } => {
            let mut cfg = common.resolve()?;
            let mut m = RunManifest::new("track", &cfg);
            let result = match (scene, det) {
                (Some(dir), _) => {
                    let gt = mot::read_scene(&dir)?;
                    m.inputs.push(dir);
                    track_scene(&cfg, &gt, cfg.seed)?
                }
                (None, Some(det)) => {
                    if common.denoiser.is_none() && cfg.denoiser == DenoiserKind::Oracle {
                        cfg.denoiser = DenoiserKind::DetectionSnap;
                        m.config = cfg.clone();
                    }
                    if cfg.denoiser == DenoiserKind::Oracle {
                        bail!(Usage("the oracle denoiser needs --scene".into()));
                    }
                    let info = seqinfo_near(&det)?;
                    let stream = mot::to_detection_stream(&mot::read_rows(&det)?, info.image_size, Some(info.length));
                    m.inputs.push(det);
                    let denoiser = cfg.build_denoiser()?;
                    Pipeline::new(cfg.pipeline.clone(), denoiser.as_ref())?.run_sequence(&stream, cfg.seed)?
                }
                (None, None) => bail!(Usage("track needs --scene or --det".into())),
            };
            mot::write_results(&result, &out)?;
            m.outputs.push(out.clone());
            write_manifest(&m, &out)?;
            println!("wrote {} rows to {}", result.num_rows(), out.display());
        }
        Command::Eval {
            common,
            gt,
            result,
            out,
            csv,
        } => {
            let cfg = common.resolve()?;
            let truth = read_gt(&gt)?;
            let res = mot::to_tracking_result(&mot::read_rows(&result)?)?;
            let report = evaluate(&truth, &res, cfg.iou_gate)?;
            let text = if csv {
                format!("{}\n{}\n", MetricsReport::csv_header(), report.to_csv_row())
            } else {
                report.to_kv()
            };
            print!("{text}");
            if let Some(path) = out {
                std::fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
                let mut m = RunManifest::new("eval", &cfg);
                m.inputs = vec![gt, result];
                m.outputs.push(path.clone());
                write_manifest(&m, &path)?;
            }
        }
        Command::Ablate {
            common,
            seeds,
            proportions,
            paddings,
            perturbations,
            out,
        } => {
            let cfg = common.resolve()?;
            let mut grid = AblationGrid::default();
            if let Some(p) = proportions {
                grid.proportions = p;
            }
            if let Some(p) = paddings {
                grid.paddings = parse_list(&p, "padding", PaddingStrategy::parse)?;
            }
            if let Some(p) = perturbations {
                grid.perturbations = parse_list(&p, "perturbation schedule", PerturbationSchedule::parse)?;
            }
            let seed_list = seeds.list(cfg.seed);
            let rows = ablate(&cfg, &grid, &seed_list)?;
            write_csv(&out, &AblationRow::csv_header(), rows.iter().map(|r| r.to_csv_row()))?;
            let mut m = RunManifest::new("ablate", &cfg);
            m.seeds = seed_list;
            m.outputs.push(out.clone());
            write_manifest(&m, &out)?;
            println!("wrote {} rows to {}", rows.len(), out.display());
        }
        Command::Sweep {
            common,
            seeds,
            boxes,
            step_counts,
            out,
        } => {
            let cfg = common.resolve()?;
            let seed_list = seeds.list(cfg.seed);
            let rows = sweep(&cfg, &boxes, &step_counts, &seed_list)?;
            write_csv(&out, &SweepRow::csv_header(), rows.iter().map(|r| r.to_csv_row()))?;
            let mut m = RunManifest::new("sweep", &cfg);
            m.seeds = seed_list;
            m.outputs.push(out.clone());
            write_manifest(&m, &out)?;
            println!("wrote {} rows to {}", rows.len(), out.display());
        }
        Command::Robustness {
            common,
            seeds,
            alphas,
            noise_mean,
            noise_std,
            out,
        } => {
            let cfg = common.resolve()?;
            let alphas = alphas.unwrap_or_else(|| ROBUSTNESS_ALPHAS.to_vec());
            let noise = NoiseBox {
                mean: noise_mean,
                std: noise_std,
            };
            let seed_list = seeds.list(cfg.seed);
            let rows = robustness(&cfg, &alphas, &noise, &seed_list)?;
            write_csv(&out, &RobustnessRow::csv_header(), rows.iter().map(|r| r.to_csv_row()))?;
            let mut m = RunManifest::new("robustness", &cfg);
            m.seeds = seed_list;
            m.outputs.push(out.clone());
            write_manifest(&m, &out)?;
            println!("wrote {} rows to {}", rows.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<Usage>() => {
            eprintln!("error: {e}");
            eprintln!("run with --help for usage");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
