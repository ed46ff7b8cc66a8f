use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{InitKind, Mode, Precision, SynthesisConfig, SynthesisOptions, TagSource};
use super::image::ImageTensor;
use super::tagmap::{make_periodic_tagmap, validate_pair, TagMap};
use crate::error::{invalid_arg, Result};
use crate::features::FeatureStack;
use crate::losses::{
    draw_directions, mix_seed, DirectionPolicy, GramTarget, LayerTags, LossKind, LossRecord, LossReport, RecordKind,
    SlicedTarget, TargetCache,
};
use crate::optim::{run_restarts, OptimRun, RestartProblem};
use crate::real::Real;
use crate::vgg::{load_weights, synthetic_vgg19, Network, WeightBundle, SYNTHETIC_SEED};

/// Seed of the held-out monitor directions; shared by every run so that
/// monitored values are comparable across runs and loss kinds.
pub const MONITOR_SEED: u64 = 0x6d6f_6e69_746f_72;

const NOISE_STREAM: u64 = 0x6e6f_6973_65;

/// Gaussian noise image, clamped to `[0, 1]`.
pub fn noise_init(height: usize, width: usize, mean: [f64; 3], sigma: f64, seed: u64) -> Result<ImageTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, NOISE_STREAM));
    let normal = Normal::new(0.0, sigma).map_err(|e| crate::Error::InvalidArgument(format!("noise sigma: {e}")))?;
    let mut data = Vec::with_capacity(height * width * 3);
    for _ in 0..height * width {
        for m in mean {
            data.push((m + normal.sample(&mut rng)).clamp(0.0, 1.0));
        }
    }
    ImageTensor::new(height, width, data)
}

#[derive(Clone, Debug)]
pub struct SynthesisResult {
    pub image: ImageTensor,
    pub run: OptimRun,
    /// Training loss at the starting image (first restart's directions).
    pub initial_loss: f64,
    /// Whether the final projection onto `[0, 1]` changed any value.
    pub final_clamp_changed: bool,
    pub wall_time: f64,
}

impl SynthesisResult {
    pub fn monitor_records(&self, kind: RecordKind) -> Vec<&LossRecord> {
        self.run.records.iter().filter(|r| r.kind == kind).collect()
    }

    pub fn summary_line(&self) -> String {
        let last = |k| self.monitor_records(k).last().map(|r| format!("{:.6e}", r.loss_total));
        format!(
            "restarts={} evals={} final_loss={:.6e} monitor_sw={} monitor_gram={} clamp_changed={} wall_time={:.2}s",
            self.run.restarts.len(),
            self.run.evals,
            self.run.restarts.last().map_or(self.initial_loss, |r| r.final_loss),
            last(RecordKind::MonitorSw).unwrap_or_else(|| "-".into()),
            last(RecordKind::MonitorGram).unwrap_or_else(|| "-".into()),
            self.final_clamp_changed,
            self.wall_time
        )
    }
}

enum Objective<T> {
    Sw(SlicedTarget<T>),
    Gram,
}

struct ImageProblem<'a, T> {
    net: &'a Network<T>,
    height: usize,
    width: usize,
    opts: &'a SynthesisOptions,
    target: FeatureStack<T>,
    gram: GramTarget<T>,
    tags: Vec<Option<LayerTags>>,
    objective: Option<Objective<T>>,
    monitor_sw: Option<SlicedTarget<T>>,
    evals: usize,
    start: Instant,
}

impl<'a, T: Real> ImageProblem<'a, T> {
    fn image(&self, x: &[f64]) -> Result<ImageTensor> {
        ImageTensor::new(self.height, self.width, x.to_vec())
    }

    fn out_pixels(&self) -> Vec<usize> {
        self.net.layer_pixels(self.height, self.width, self.opts.n_layers)
    }

    fn record(&self, report: &LossReport, restart: usize, kind: RecordKind) -> LossRecord {
        let mut r = report.to_record(restart + 1, kind);
        r.wall_time_s = self.start.elapsed().as_secs_f64();
        r
    }
}

impl<T: Real> RestartProblem for ImageProblem<'_, T> {
    fn dim(&self) -> usize {
        self.height * self.width * 3
    }

    fn prepare(&mut self, _restart: usize, seed: u64) -> Result<()> {
        self.objective = Some(match self.opts.loss {
            LossKind::Gram => Objective::Gram,
            LossKind::Sw => {
                let channels: Vec<usize> = self.target.layers.iter().map(|l| l.channels).collect();
                let dirs = draw_directions(&channels, self.opts.directions, seed)?;
                Objective::Sw(SlicedTarget::new(
                    &self.target,
                    dirs,
                    &self.out_pixels(),
                    &self.tags,
                    TargetCache::UpTo(self.opts.cache_bytes),
                    seed,
                )?)
            }
        });
        Ok(())
    }

    fn evaluate(&mut self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        let image = self.image(x)?;
        let (stack, tape) = self.net.forward(&image, self.opts.n_layers)?;
        let mut grads = Vec::new();
        let per_layer = match self.objective.as_ref() {
            Some(Objective::Sw(st)) => st.evaluate(&stack, Some(&mut grads))?,
            Some(Objective::Gram) => self.gram.evaluate(&stack, Some(&mut grads))?,
            None => return invalid_arg("problem evaluated before prepare"),
        };
        let g = self.net.image_gradient(&tape, &grads)?;
        grad.copy_from_slice(&g);
        self.evals += 1;
        Ok(per_layer.iter().sum())
    }

    fn monitor(&mut self, x: &[f64], restart: usize) -> Result<Vec<LossRecord>> {
        if !self.opts.monitor {
            return Ok(Vec::new());
        }
        let image = self.image(x)?;
        let (stack, _) = self.net.forward(&image, self.opts.n_layers)?;
        let mut out = Vec::with_capacity(2);
        if let Some(m) = &self.monitor_sw {
            out.push(self.record(&m.report(&stack)?, restart, RecordKind::MonitorSw));
        }
        let t = Instant::now();
        let per_layer = self.gram.evaluate(&stack, None)?;
        let report = LossReport {
            total: per_layer.iter().sum(),
            per_layer,
            wall_time: t.elapsed().as_secs_f64(),
            n_directions_used: vec![],
            seed: 0,
        };
        out.push(self.record(&report, restart, RecordKind::MonitorGram));
        Ok(out)
    }
}

/// Per-layer tags for the layers listed in `opts.tag_layers`.
pub fn layer_tags<T: Real>(
    net: &Network<T>,
    source: &TagMap,
    target: &TagMap,
    opts: &SynthesisOptions,
) -> Result<Vec<Option<LayerTags>>> {
    validate_pair(source, target)?;
    let mut tags = vec![None; opts.n_layers];
    for &l in &opts.tag_layers {
        if l >= opts.n_layers {
            return invalid_arg(format!("tag layer {} is not among the {} used layers", l + 1, opts.n_layers));
        }
        let f = 1 << net.pools_before(l);
        let src = source.downsample_nearest(f)?;
        let dst = target.downsample_nearest(f)?;
        tags[l] = Some(LayerTags::new(dst.ids_u32(), src.ids_u32())?);
    }
    Ok(tags)
}

/// Optimizes `init` so its features match `exemplar`'s under the configured
/// loss. `tags` is `(exemplar map, output map)`.
pub fn optimize_image<T: Real>(
    net: &Network<T>,
    exemplar: &ImageTensor,
    init: ImageTensor,
    tags: Option<(&TagMap, &TagMap)>,
    opts: &SynthesisOptions,
) -> Result<SynthesisResult> {
    let start = Instant::now();
    let n = opts.n_layers;
    net.check_size(exemplar.height, exemplar.width, n)?;
    net.check_size(init.height, init.width, n)?;
    let (target, _) = net.forward(exemplar, n)?;
    let layer_tags = match tags {
        Some((src, dst)) => {
            if (src.height, src.width) != (exemplar.height, exemplar.width)
                || (dst.height, dst.width) != (init.height, init.width)
            {
                return invalid_arg("tag maps must match the exemplar and output sizes");
            }
            if opts.loss != LossKind::Sw {
                return invalid_arg("spatial tags require the sliced Wasserstein loss");
            }
            layer_tags(net, src, dst, opts)?
        }
        None => Vec::new(),
    };
    let out_pixels = net.layer_pixels(init.height, init.width, n);
    let monitor_sw = if opts.monitor {
        let channels: Vec<usize> = target.layers.iter().map(|l| l.channels).collect();
        let dirs = draw_directions(&channels, DirectionPolicy::Fixed(opts.monitor_dirs), MONITOR_SEED)?;
        Some(SlicedTarget::new(&target, dirs, &out_pixels, &[], TargetCache::UpTo(opts.cache_bytes), MONITOR_SEED)?)
    } else {
        None
    };
    let mut problem = ImageProblem {
        net,
        height: init.height,
        width: init.width,
        opts,
        gram: GramTarget::new(&target)?,
        target,
        tags: layer_tags,
        objective: None,
        monitor_sw,
        evals: 0,
        start,
    };

    problem.prepare(0, mix_seed(opts.seed, 0))?;
    let mut scratch = vec![0.0; problem.dim()];
    let initial_loss = problem.evaluate(&init.data, &mut scratch)?;

    let run = run_restarts(&mut problem, &init.data, &opts.optim, opts.seed)?;
    let mut image = ImageTensor::new(init.height, init.width, run.x.clone())?;
    let final_clamp_changed = if opts.optim.clamp_unit { run.final_clamp_changed() } else { image.clamp_unit() > 0 };
    Ok(SynthesisResult { image, run, initial_loss, final_clamp_changed, wall_time: start.elapsed().as_secs_f64() })
}

pub fn load_bundle(path: Option<&Path>) -> Result<WeightBundle> {
    match path {
        Some(p) => load_weights(p),
        None => {
            log::info!("no weights given, using the synthetic bundle");
            Ok(synthetic_vgg19(SYNTHETIC_SEED))
        }
    }
}

fn run_typed<T: Real>(cfg: &SynthesisConfig, bundle: &WeightBundle) -> Result<SynthesisResult> {
    let net = Network::<T>::new(bundle)?;
    let exemplar = ImageTensor::load_png(&cfg.exemplar)?;
    let content = cfg.content.as_ref().map(ImageTensor::load_png).transpose()?;
    let (h, w) = match (cfg.size, &content) {
        (Some(s), _) => s,
        (None, Some(c)) if cfg.mode == Mode::StyleTransfer => (c.height, c.width),
        _ => (exemplar.height, exemplar.width),
    };
    let o = &cfg.options;
    let init = match cfg.init_kind() {
        InitKind::Noise => noise_init(h, w, exemplar.channel_means(), o.noise_sigma, o.seed)?,
        InitKind::Content => {
            let c = content.ok_or_else(|| crate::Error::InvalidArgument("content image required".into()))?;
            if (c.height, c.width) != (h, w) {
                return invalid_arg(format!("content is {}x{}, output is {h}x{w}", c.height, c.width));
            }
            c
        }
        InitKind::Exemplar => {
            if (exemplar.height, exemplar.width) != (h, w) {
                return invalid_arg("exemplar initialization needs the output size to equal the exemplar size");
            }
            exemplar.clone()
        }
    };
    let tag_maps = match (&cfg.tags, cfg.mode) {
        (Some(TagSource::Files { source, target }), Mode::TextureTagged) => {
            Some((TagMap::load_png(source)?, TagMap::load_png(target)?))
        }
        (Some(TagSource::Periodic { period_x, period_y }), Mode::TextureTagged) => Some((
            make_periodic_tagmap(exemplar.height, exemplar.width, *period_x, *period_y)?,
            make_periodic_tagmap(h, w, *period_x, *period_y)?,
        )),
        _ => None,
    };
    let res = optimize_image(&net, &exemplar, init, tag_maps.as_ref().map(|(s, d)| (s, d)), o)?;
    if let Some(out) = &cfg.out {
        res.image.save_png(out)?;
    }
    if let Some(log_path) = &cfg.log {
        write_log(log_path, &res.run.records)?;
    }
    Ok(res)
}

pub fn write_log(path: impl AsRef<Path>, records: &[LossRecord]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    for r in records {
        writeln!(f, "{}", r.to_json_line())?;
    }
    f.flush()?;
    Ok(())
}

/// Loads inputs, runs the configured mode, writes image and log.
pub fn run_config(cfg: &SynthesisConfig) -> Result<SynthesisResult> {
    cfg.validate()?;
    let bundle = load_bundle(cfg.weights.as_deref())?;
    match cfg.precision {
        Precision::F32 => run_typed::<f32>(cfg, &bundle),
        Precision::F64 => run_typed::<f64>(cfg, &bundle),
    }
}

fn run_mode(cfg: &SynthesisConfig, mode: Mode) -> Result<SynthesisResult> {
    if cfg.mode != mode {
        return invalid_arg(format!("configuration is for {:?}, not {:?}", cfg.mode, mode));
    }
    run_config(cfg)
}

pub fn synthesize_texture(cfg: &SynthesisConfig) -> Result<SynthesisResult> {
    run_mode(cfg, Mode::Texture)
}

pub fn style_transfer(cfg: &SynthesisConfig) -> Result<SynthesisResult> {
    run_mode(cfg, Mode::StyleTransfer)
}

pub fn synthesize_tagged(cfg: &SynthesisConfig) -> Result<SynthesisResult> {
    run_mode(cfg, Mode::TextureTagged)
}
