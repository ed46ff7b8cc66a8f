//! Argument handling for the `swtex` binary.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, ValueEnum};
use swtex_core::losses::{DirectionPolicy, LossKind, MONITOR_DIRECTIONS};
use swtex_core::optim::{LbfgsConfig, RestartConfig};
use swtex_core::synth::{run_config, InitKind, Mode, Precision, SynthesisConfig, SynthesisOptions, TagSource};
use swtex_core::Error;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Texture,
    Style,
    Tagged,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LossArg {
    Sw,
    Gram,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InitArg {
    Noise,
    Content,
    Exemplar,
}

#[derive(Parser, Debug)]
#[command(name = "swtex", version, about = "Texture synthesis by optimizing the Sliced Wasserstein loss over VGG-19 features")]
struct Args {
    #[arg(long, value_enum, default_value = "texture")]
    mode: ModeArg,
    /// Texture exemplar (8-bit RGB PNG).
    #[arg(long)]
    exemplar: PathBuf,
    /// Content image for style transfer.
    #[arg(long)]
    content: Option<PathBuf>,
    /// Tag map of the exemplar (8-bit grayscale PNG, value = tag id).
    #[arg(long)]
    tag_src: Option<PathBuf>,
    /// Tag map of the output.
    #[arg(long)]
    tag_dst: Option<PathBuf>,
    /// Pseudo-periodic tags instead of tag files, as PXxPY.
    #[arg(long, value_parser = parse_pair, conflicts_with_all = ["tag_src", "tag_dst"])]
    tag_period: Option<(usize, usize)>,
    /// 1-based conv layers that receive tags.
    #[arg(long, value_delimiter = ',', default_value = "1,2")]
    tag_layers: Vec<usize>,
    #[arg(long, default_value = "out.png")]
    out: PathBuf,
    /// Output size as HxW (default: exemplar size, or content size for style transfer).
    #[arg(long, value_parser = parse_pair)]
    size: Option<(usize, usize)>,
    #[arg(long, value_enum, default_value = "sw")]
    loss: LossArg,
    /// Projection directions per layer: `auto` (one per feature) or a count.
    #[arg(long, default_value = "auto", value_parser = parse_dirs)]
    dirs: DirectionPolicy,
    #[arg(long, default_value_t = 20)]
    restarts: usize,
    /// Objective evaluations per restart.
    #[arg(long, default_value_t = 64)]
    evals: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// SWTXW weight bundle (default: built-in synthetic weights).
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = MONITOR_DIRECTIONS)]
    monitor_dirs: usize,
    /// Skip held-out loss monitoring.
    #[arg(long)]
    no_monitor: bool,
    /// JSON-lines loss log.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "f32")]
    precision: PrecisionArg,
    /// Initial image (default: noise, or content for style transfer).
    #[arg(long, value_enum)]
    init: Option<InitArg>,
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected AxB, got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((p(a)?, p(b)?))
}

fn parse_dirs(s: &str) -> Result<DirectionPolicy, String> {
    if s == "auto" {
        return Ok(DirectionPolicy::PerFeature);
    }
    match s.parse::<usize>() {
        Ok(0) => Err("direction count must be positive".into()),
        Ok(d) => Ok(DirectionPolicy::Fixed(d)),
        Err(e) => Err(format!("expected auto or a count: {e}")),
    }
}

fn to_config(a: Args) -> Result<SynthesisConfig, String> {
    let mode = match a.mode {
        ModeArg::Texture => Mode::Texture,
        ModeArg::Style => Mode::StyleTransfer,
        ModeArg::Tagged => Mode::TextureTagged,
    };
    let tags = match (a.tag_period, a.tag_src, a.tag_dst) {
        (Some((px, py)), _, _) => Some(TagSource::Periodic { period_x: px, period_y: py }),
        (None, Some(source), Some(target)) => Some(TagSource::Files { source, target }),
        (None, None, None) => None,
        _ => return Err("--tag-src and --tag-dst must be given together".into()),
    };
    if tags.is_some() && mode != Mode::TextureTagged {
        return Err("tag maps are only used with --mode tagged".into());
    }
    if a.tag_layers.contains(&0) {
        return Err("--tag-layers is 1-based".into());
    }
    let mut cfg = SynthesisConfig::new(mode, a.exemplar);
    cfg.content = a.content;
    cfg.tags = tags;
    cfg.size = a.size;
    cfg.weights = a.weights;
    cfg.out = Some(a.out);
    cfg.log = a.log;
    cfg.precision = match a.precision {
        PrecisionArg::F32 => Precision::F32,
        PrecisionArg::F64 => Precision::F64,
    };
    cfg.init = a.init.map(|i| match i {
        InitArg::Noise => InitKind::Noise,
        InitArg::Content => InitKind::Content,
        InitArg::Exemplar => InitKind::Exemplar,
    });
    cfg.options = SynthesisOptions {
        loss: match a.loss {
            LossArg::Sw => LossKind::Sw,
            LossArg::Gram => LossKind::Gram,
        },
        directions: a.dirs,
        seed: a.seed,
        optim: RestartConfig {
            restarts: a.restarts,
            lbfgs: LbfgsConfig { max_evals: a.evals, ..Default::default() },
            clamp_unit: true,
        },
        monitor: !a.no_monitor,
        monitor_dirs: a.monitor_dirs,
        tag_layers: a.tag_layers.iter().map(|l| l - 1).collect(),
        ..Default::default()
    };
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

/// Runs the command line; returns the process exit code (0 success, 1
/// runtime failure, 2 usage error).
pub fn cli_main<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cfg = match to_config(args) {
        Ok(c) => c,
        Err(msg) => {
            eprintln!("error: {msg}");
            return 2;
        }
    };
    match run_config(&cfg) {
        Ok(res) => {
            println!("{}", res.summary_line());
            0
        }
        Err(e @ Error::InvalidArgument(_)) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
