use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use angiosynth::checkpoint::Checkpoint;
use angiosynth::config::RunConfig;
use angiosynth::pipeline::{self, CODEC_FILE, DIFFUSION_FILE, EMBEDDER_FILE};
use angiosynth::volume::{extract_slices, image_to_pgm, load_volume, max_projection, save_volume, Axis, Volume3D};
use angiosynth::{selfcheck, Error};
use clap::{Parser, Subcommand};

/// Angiography synthesis from non-angiographic volumes.
///
/// Relative paths in the config (data_dir, checkpoint_dir, report_path) are
/// resolved against --out.
#[derive(Debug, Parser)]
#[command(name = "angiosynth", version)]
struct Cli {
    /// Run configuration (`key = value` lines); defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Overrides the `seed` key of the config.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,

    /// Root directory for outputs and config-relative paths.
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate seeded paired phantoms into the data directory.
    Phantom,
    /// Fit the latent codec on the training pairs.
    TrainCodec,
    /// Fit the conditional vision embedder (needs the codec checkpoint).
    TrainEmbedder,
    /// Fit the denoiser (needs codec and embedder checkpoints).
    TrainDiffusion,
    /// Synthesize an angiographic volume from a non-angiographic one.
    Synthesize {
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        /// Defaults to `<out>/synth.vvol`.
        #[arg(long, value_name = "PATH")]
        output: Option<PathBuf>,
        /// Also write PGM images of the middle slices and projections.
        #[arg(long)]
        dump_slices: bool,
    },
    /// Score a synthesized volume against the true angiogram.
    Evaluate {
        #[arg(long, value_name = "PATH")]
        synth: PathBuf,
        #[arg(long, value_name = "PATH")]
        truth: PathBuf,
    },
    /// Run the oracle and gradient checks.
    Selfcheck,
}

#[derive(Debug)]
enum Failure {
    Core(Error),
    /// A volume file exists but cannot be decoded.
    CorruptVolume(PathBuf, Error),
    ChecksFailed(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Core(Error::MissingCheckpoint(_)) => 2,
            Failure::Core(Error::Config(_)) => 3,
            Failure::CorruptVolume(..) => 4,
            _ => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Core(e) => write!(f, "{e}"),
            Failure::CorruptVolume(p, e) => write!(f, "corrupt volume {}: {e}", p.display()),
            Failure::ChecksFailed(n) => write!(f, "{n} self-check(s) failed"),
        }
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

fn read_volume(path: &Path) -> Outcome<Volume3D> {
    load_volume(path).map_err(|e| match e {
        Error::Io { .. } => Failure::Core(e),
        other => Failure::CorruptVolume(path.to_path_buf(), other),
    })
}

fn read_pairs(dir: &Path, indices: std::ops::Range<usize>) -> Outcome<Vec<angiosynth::phantom::VolumePair>> {
    indices
        .map(|i| {
            let [a, b, c] = pipeline::pair_paths(dir, i);
            Ok(angiosynth::phantom::VolumePair {
                non_angio: read_volume(&a)?,
                angio: read_volume(&b)?,
                vessel_mask: read_volume(&c)?,
            })
        })
        .collect()
}

struct Context {
    cfg: RunConfig,
    out: PathBuf,
}

impl Context {
    fn data_dir(&self) -> PathBuf {
        self.out.join(&self.cfg.data_dir)
    }

    fn checkpoint(&self, file: &str) -> PathBuf {
        self.out.join(&self.cfg.checkpoint_dir).join(file)
    }

    fn save(&self, ck: &Checkpoint, file: &str) -> Outcome {
        let path = self.checkpoint(file);
        let dir = path.parent().expect("checkpoint path has a parent");
        std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
        ck.save(&path)?;
        println!("wrote {}", path.display());
        Ok(())
    }

    fn load(&self, file: &str) -> Outcome<Checkpoint> {
        Ok(Checkpoint::load(self.checkpoint(file))?)
    }

    fn training_pairs(&self) -> Outcome<Vec<angiosynth::phantom::VolumePair>> {
        read_pairs(&self.data_dir(), self.cfg.train_pairs())
    }
}

fn load_config(cli: &Cli) -> Outcome<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dump_slices(v: &Volume3D, dir: &Path) -> Outcome {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    let mut images = Vec::new();
    for (axis, name) in [(Axis::Z, "z"), (Axis::Y, "y"), (Axis::X, "x")] {
        let slices = extract_slices(v, axis);
        images.push((format!("mid_{name}.pgm"), slices[slices.len() / 2].clone()));
        images.push((format!("mip_{name}.pgm"), max_projection(v, axis)));
    }
    for (file, img) in images {
        let path = dir.join(file);
        std::fs::write(&path, image_to_pgm(&img, 0.0, 1.0)).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    }
    println!("wrote slice images to {}", dir.display());
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    if let Command::Selfcheck = cli.command {
        let outcomes = selfcheck::run_all();
        outcomes.iter().for_each(|o| println!("{o}"));
        let failed = outcomes.iter().filter(|o| !o.passed).count();
        return if failed == 0 { Ok(()) } else { Err(Failure::ChecksFailed(failed)) };
    }
    let ctx = Context { cfg: load_config(&cli)?, out: cli.out.clone() };
    let cfg = &ctx.cfg;
    let started = Instant::now();
    match cli.command {
        Command::Phantom => {
            let pairs = pipeline::generate_pairs(cfg)?;
            pipeline::save_pairs(&pairs, &ctx.data_dir())?;
            println!("wrote {} phantom pairs to {}", pairs.len(), ctx.data_dir().display());
        }
        Command::TrainCodec => {
            let codec = pipeline::fit_codec(cfg, &ctx.training_pairs()?)?;
            ctx.save(&pipeline::codec_to_checkpoint(&codec, cfg)?, CODEC_FILE)?;
        }
        Command::TrainEmbedder => {
            let codec = pipeline::codec_from_checkpoint(&ctx.load(CODEC_FILE)?)?;
            let trained = pipeline::fit_embedder(cfg, &ctx.training_pairs()?, &codec)?;
            println!("final InfoNCE {:.4}", trained.infonce);
            ctx.save(&pipeline::embedder_to_checkpoint(&trained, cfg)?, EMBEDDER_FILE)?;
        }
        Command::TrainDiffusion => {
            let codec = pipeline::codec_from_checkpoint(&ctx.load(CODEC_FILE)?)?;
            let embedder = pipeline::embedder_from_checkpoint(&ctx.load(EMBEDDER_FILE)?)?;
            let (model, losses) = pipeline::fit_diffusion(cfg, &ctx.training_pairs()?, &codec, &embedder)?;
            if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
                println!("total loss {first:.4} -> {last:.4} over {} steps", losses.len());
            }
            ctx.save(&pipeline::diffusion_to_checkpoint(&model, cfg)?, DIFFUSION_FILE)?;
        }
        Command::Synthesize { input, output, dump_slices: dump } => {
            let model = pipeline::diffusion_from_checkpoint(&ctx.load(DIFFUSION_FILE)?)?;
            let codec = pipeline::codec_from_checkpoint(&ctx.load(CODEC_FILE)?)?;
            let embedder = pipeline::embedder_from_checkpoint(&ctx.load(EMBEDDER_FILE)?)?;
            let non_angio = read_volume(&input)?;
            let synth = pipeline::synthesize(&non_angio, &codec, &embedder.embedder, &model, cfg.seed)?;
            let output = output.unwrap_or_else(|| ctx.out.join("synth.vvol"));
            save_volume(&synth, &output)?;
            println!("wrote {}", output.display());
            if dump {
                dump_slices(&synth, &ctx.out.join("slices"))?;
            }
        }
        Command::Evaluate { synth, truth } => {
            let report = pipeline::evaluate_volumes(cfg, &read_volume(&synth)?, &read_volume(&truth)?)?;
            let line = report.to_json_line();
            let path = ctx.out.join(&cfg.report_path);
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
            }
            std::fs::write(&path, format!("{line}\n")).map_err(|e| Error::Io { path: path.clone(), source: e })?;
            println!("{line}");
        }
        Command::Selfcheck => unreachable!("handled above"),
    }
    eprintln!("done in {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 64 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
