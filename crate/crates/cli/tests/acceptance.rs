//! Acceptance suite: one `[PASS]`/`[FAIL]` line per criterion.
//!
//! Run with `cargo test --release -p swtex-cli --test acceptance`; an
//! optional argument selects criteria whose name contains it.

use std::fs;
use std::path::PathBuf;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swtex_core::losses::{
    draw_directions, gram_loss_grad, sw_loss_grad, GramTarget, LayerTags, RecordKind, SlicedTarget, TargetCache,
};
use swtex_core::optim::{lbfgs_minimize, run_restarts, LbfgsConfig, RestartConfig, RestartProblem, StepKind};
use swtex_core::sliced_ot::{sw1d_grad, sw1d_loss};
use swtex_core::synth::{make_periodic_tagmap, optimize_image, noise_init, SynthesisOptions};
use swtex_core::vgg::{synthetic_vgg19, Network, SYNTHETIC_SEED};
use swtex_core::{DirectionPolicy, FeatureLayer, FeatureStack, ImageTensor, LossKind, Result, TagMap};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

struct Criterion {
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

const MIN: u64 = 60;

fn criteria() -> Vec<Criterion> {
    vec![
        Criterion { name: "1d_ot_oracle", limit: Duration::from_secs(5), run: one_d_oracle },
        Criterion { name: "gradient_suite", limit: Duration::from_secs(2 * MIN), run: gradient_suite },
        Criterion { name: "forward_fidelity", limit: Duration::from_secs(30), run: forward_fidelity },
        Criterion { name: "sw_minimizes_gram", limit: Duration::from_secs(30 * MIN), run: sw_minimizes_gram },
        Criterion { name: "direction_count_trend", limit: Duration::from_secs(45 * MIN), run: direction_count_trend },
        Criterion { name: "overhead_ratio", limit: Duration::from_secs(10 * MIN), run: overhead_ratio },
        Criterion { name: "spatial_tag_toy", limit: Duration::from_secs(MIN), run: spatial_tag_toy },
        Criterion { name: "tag_cancellation", limit: Duration::from_secs(MIN), run: tag_cancellation },
        Criterion { name: "optimizer_suite", limit: Duration::from_secs(MIN), run: optimizer_suite },
        Criterion { name: "cli_determinism", limit: Duration::from_secs(5 * MIN), run: cli_determinism },
    ]
}

fn main() {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    let mut ran = 0;
    for c in criteria() {
        if filter.as_deref().is_some_and(|f| !c.name.contains(f)) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let out = (c.run)();
        let elapsed = start.elapsed();
        let in_time = elapsed <= c.limit;
        let pass = out.pass && in_time;
        if !pass {
            failed += 1;
        }
        let timing = if in_time { String::new() } else { format!(" [over the {}s limit]", c.limit.as_secs()) };
        println!(
            "[{}] {:<22} {} ({:.1}s){}",
            if pass { "PASS" } else { "FAIL" },
            c.name,
            out.detail,
            elapsed.as_secs_f64(),
            timing
        );
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// helpers

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-10)
}

fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageTensor::new(h, w, (0..h * w * 3).map(|_| rng.random_range(0.1..0.9)).collect()).unwrap()
}

fn random_stack(shapes: &[(usize, usize)], rng: &mut ChaCha8Rng) -> FeatureStack<f64> {
    FeatureStack::unnamed(
        shapes
            .iter()
            .map(|&(m, n)| FeatureLayer::from_rows(m, n, (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
            .collect(),
    )
}

/// Oriented stripes under soft blobs plus noise; the blobs wrap around.
fn exemplar(size: usize) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let blobs: Vec<(f64, f64, f64)> = (0..40)
        .map(|_| (rng.random_range(0.0..size as f64), rng.random_range(0.0..size as f64), rng.random_range(3.0..9.0)))
        .collect();
    let mut data = Vec::with_capacity(size * size * 3);
    let n = size as f64;
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            let a = 0.5 + 0.35 * (std::f64::consts::TAU * (xf * 0.5f64.cos() + yf * 0.5f64.sin()) / 11.0).sin();
            let mut blob: f64 = 0.0;
            for &(cx, cy, r) in &blobs {
                let dx = (xf - cx).abs().min(n - (xf - cx).abs());
                let dy = (yf - cy).abs().min(n - (yf - cy).abs());
                blob = blob.max((-(dx * dx + dy * dy) / (2.0 * r * r)).exp());
            }
            for v in [0.6 * a + 0.4 * blob, 0.3 + 0.5 * blob * a, 0.8 - 0.5 * blob] {
                data.push((v + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0));
            }
        }
    }
    ImageTensor::new(size, size, data).unwrap()
}

fn texture_run(net: &Network<f32>, ex: &ImageTensor, loss: LossKind, dirs: DirectionPolicy, restarts: usize, seed: u64) -> Result<swtex_core::synth::SynthesisResult> {
    let opts = SynthesisOptions {
        loss,
        directions: dirs,
        seed,
        optim: RestartConfig { restarts, lbfgs: LbfgsConfig::default(), clamp_unit: true },
        ..Default::default()
    };
    let init = noise_init(ex.height, ex.width, ex.channel_means(), opts.noise_sigma, seed)?;
    optimize_image(net, ex, init, None, &opts)
}

fn totals(res: &swtex_core::synth::SynthesisResult, kind: RecordKind) -> Vec<f64> {
    res.monitor_records(kind).iter().map(|r| r.loss_total).collect()
}

// ---------------------------------------------------------------------------
// criteria

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..n {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn one_d_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let perms: Vec<Vec<Vec<usize>>> = (0..=6).map(permutations).collect();
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let m = rng.random_range(2..=6);
        let a: Vec<f64> = (0..m).map(|_| rng.random_range(-10.0..=10.0)).collect();
        let b: Vec<f64> = (0..m).map(|_| rng.random_range(-10.0..=10.0)).collect();
        let best = perms[m]
            .iter()
            .map(|p| p.iter().enumerate().map(|(i, &j)| (a[i] - b[j]).powi(2)).sum::<f64>() / m as f64)
            .fold(f64::INFINITY, f64::min);
        worst = worst.max((sw1d_loss(&a, &b).unwrap() - best).abs());
    }
    outcome(worst <= 1e-12, format!("500 pairs, max |sw1d - exhaustive| = {worst:.2e} (tol 1e-12)"))
}

fn gradient_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut parts = Vec::new();
    let mut pass = true;
    let mut record = |name: &str, err: f64| {
        pass &= err < 1e-3;
        parts.push(format!("{name} {err:.1e}"));
    };

    // 1D: distinct values so no tie is crossed
    let s: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let t: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let g = sw1d_grad(&s, &t).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..16 {
        let (mut p, mut q) = (s.clone(), s.clone());
        p[i] += 1e-5;
        q[i] -= 1e-5;
        let fd = (sw1d_loss(&p, &t).unwrap() - sw1d_loss(&q, &t).unwrap()) / 2e-5;
        worst = worst.max(rel_err(fd, g[i]));
    }
    record("sw1d_grad", worst);

    let shapes = [(5, 4)];
    let x = random_stack(&shapes, &mut rng);
    let y = random_stack(&shapes, &mut rng);
    let (_, g) = gram_loss_grad(&x, &y).unwrap();
    let loss = |s: &FeatureStack<f64>| swtex_core::losses::gram_loss(s, &y).unwrap().total;
    record("gram_loss_grad", stack_fd(&x, &g, 1e-6, loss));

    let shapes = [(16, 3), (16, 5)];
    let x = random_stack(&shapes, &mut rng);
    let y = random_stack(&shapes, &mut rng);
    let policy = DirectionPolicy::Fixed(7);
    let (_, g) = sw_loss_grad(&x, &y, policy, 9).unwrap();
    let loss = |s: &FeatureStack<f64>| swtex_core::losses::sw_loss(s, &y, policy, 9).unwrap().total;
    record("sw_loss_grad", stack_fd(&x, &g, 1e-6, loss));

    record("image L_SW", image_gradient_fd());
    outcome(pass, format!("max rel err: {} (tol 1e-3)", parts.join(", ")))
}

fn stack_fd(x: &FeatureStack<f64>, g: &[Vec<f64>], h: f64, loss: impl Fn(&FeatureStack<f64>) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (l, layer) in x.layers.iter().enumerate() {
        for i in 0..layer.data.len() {
            let mut p = x.clone();
            p.layers[l].data[i] += h;
            let mut q = x.clone();
            q.layers[l].data[i] -= h;
            worst = worst.max(rel_err((loss(&p) - loss(&q)) / (2.0 * h), g[l][i]));
        }
    }
    worst
}

/// conv1_1..conv2_2 on a 16x16 image in double precision, 40 coordinates.
fn image_gradient_fd() -> f64 {
    const LAYERS: usize = 4;
    let net = Network::<f64>::new(&synthetic_vgg19(SYNTHETIC_SEED)).unwrap();
    let (target, _) = net.forward(&random_image(16, 16, 1), LAYERS).unwrap();
    let x = random_image(16, 16, 2);
    let channels: Vec<usize> = target.layers.iter().map(|l| l.channels).collect();
    let dirs = draw_directions(&channels, DirectionPolicy::PerFeature, 3).unwrap();
    let st = SlicedTarget::new(&target, dirs, &net.layer_pixels(16, 16, LAYERS), &[], TargetCache::Never, 3).unwrap();
    let loss = |img: &ImageTensor| -> f64 { st.evaluate(&net.forward(img, LAYERS).unwrap().0, None).unwrap().iter().sum() };
    let (stack, tape) = net.forward(&x, LAYERS).unwrap();
    let mut grads = Vec::new();
    st.evaluate(&stack, Some(&mut grads)).unwrap();
    let g = net.image_gradient(&tape, &grads).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // small enough to stay between sort-order and ReLU kinks
    let h = 1e-7;
    let mut worst: f64 = 0.0;
    for i in sample(&mut rng, x.data.len(), 40) {
        let mut p = x.clone();
        p.data[i] += h;
        let mut q = x.clone();
        q.data[i] -= h;
        worst = worst.max(rel_err((loss(&p) - loss(&q)) / (2.0 * h), g[i]));
    }
    worst
}

fn forward_fidelity() -> Outcome {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures");
    let manifest: serde_json::Value = match fs::read_to_string(dir.join("manifest.json")) {
        Ok(s) => serde_json::from_str(&s).unwrap(),
        Err(e) => return outcome(false, format!("no fixtures: {e}")),
    };
    let bundle = synthetic_vgg19(SYNTHETIC_SEED);
    let crc = format!("{:08x}", bundle.payload_crc32());
    if manifest["bundle_crc32"] != crc.as_str() {
        return outcome(false, format!("fixtures were made from bundle {} but weights are {crc}", manifest["bundle_crc32"]));
    }
    let net = Network::<f32>::new(&bundle).unwrap();
    let mut worst = (0.0f32, String::new());
    let mut compared = 0;
    for entry in manifest["images"].as_array().unwrap() {
        let img = ImageTensor::load_png(dir.join(entry["png"].as_str().unwrap())).unwrap();
        let (stack, _) = net.forward(&img, 12).unwrap();
        for (layer, want) in stack.layers.iter().zip(entry["layers"].as_array().unwrap()) {
            let golden: Vec<f32> = fs::read(dir.join(want["file"].as_str().unwrap()))
                .unwrap()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if golden.len() != layer.data.len() {
                return outcome(false, format!("{}: size mismatch", want["name"]));
            }
            let err = layer.data.iter().zip(&golden).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
            if err >= worst.0 {
                worst = (err, format!("{} {}", entry["png"].as_str().unwrap(), want["name"].as_str().unwrap()));
            }
            compared += 1;
        }
    }
    outcome(
        compared == 24 && worst.0 < 1e-3,
        format!("{compared} layer dumps, max abs err {:.2e} at {} (tol 1e-3)", worst.0, worst.1),
    )
}

fn sw_minimizes_gram() -> Outcome {
    let net = Network::<f32>::new(&synthetic_vgg19(SYNTHETIC_SEED)).unwrap();
    let ex = exemplar(128);
    let runs = texture_run(&net, &ex, LossKind::Sw, DirectionPolicy::PerFeature, 20, 1)
        .and_then(|sw| Ok((sw, texture_run(&net, &ex, LossKind::Gram, DirectionPolicy::PerFeature, 20, 1)?)));
    let (sw, gram) = match runs {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("run failed: {e}")),
    };
    let gram_under_sw = totals(&sw, RecordKind::MonitorGram);
    let sw_under_sw = totals(&sw, RecordKind::MonitorSw);
    let sw_under_gram = totals(&gram, RecordKind::MonitorSw);
    let drop = gram_under_sw[0] / gram_under_sw[gram_under_sw.len() - 1];
    let ratio = sw_under_gram[sw_under_gram.len() - 1] / sw_under_sw[sw_under_sw.len() - 1];
    outcome(
        drop >= 10.0 && ratio >= 3.0,
        format!(
            "(a) L_Gram under SW {:.3e} -> {:.3e}, {drop:.1}x (need >= 10x); \
             (b) final L_SW gram-run {:.3e} / sw-run {:.3e} = {ratio:.1}x (need >= 3x)",
            gram_under_sw[0],
            gram_under_sw[gram_under_sw.len() - 1],
            sw_under_gram[sw_under_gram.len() - 1],
            sw_under_sw[sw_under_sw.len() - 1],
        ),
    )
}

fn direction_count_trend() -> Outcome {
    let net = Network::<f32>::new(&synthetic_vgg19(SYNTHETIC_SEED)).unwrap();
    let ex = exemplar(128);
    let mut means = Vec::new();
    for d in [1usize, 8, 64] {
        let mut sum = 0.0;
        for seed in 0..3 {
            match texture_run(&net, &ex, LossKind::Sw, DirectionPolicy::Fixed(d), 5, seed) {
                Ok(r) => sum += totals(&r, RecordKind::MonitorSw).last().copied().unwrap_or(f64::NAN),
                Err(e) => return outcome(false, format!("{d} dirs, seed {seed}: {e}")),
            }
        }
        means.push(sum / 3.0);
    }
    outcome(
        means[2] < means[1] && means[1] < means[0],
        format!("monitored L_SW after 5 restarts: 1 dir {:.4e}, 8 dirs {:.4e}, 64 dirs {:.4e}", means[0], means[1], means[2]),
    )
}

fn overhead_ratio() -> Outcome {
    let net = Network::<f32>::new(&synthetic_vgg19(SYNTHETIC_SEED)).unwrap();
    let (target, _) = net.forward(&exemplar(256), 12).unwrap();
    let (stack, tape) = net.forward(&random_image(256, 256, 12), 12).unwrap();
    let best_of = |f: &mut dyn FnMut()| -> f64 {
        (0..3)
            .map(|_| {
                let t = Instant::now();
                f();
                t.elapsed().as_secs_f64()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let t_sw = best_of(&mut || {
        sw_loss_grad(&stack, &target, DirectionPolicy::PerFeature, 5).unwrap();
    });
    let t_gram = best_of(&mut || {
        gram_loss_grad(&stack, &target).unwrap();
    });
    let ratio = t_sw / t_gram;

    // whole objective: forward + loss + backward, as seen by the optimizer
    let img = random_image(256, 256, 13);
    let channels: Vec<usize> = target.layers.iter().map(|l| l.channels).collect();
    let pixels: Vec<usize> = stack.layers.iter().map(|l| l.n_pixels()).collect();
    let dirs = draw_directions(&channels, DirectionPolicy::PerFeature, 5).unwrap();
    let st = SlicedTarget::new(&target, dirs, &pixels, &[], TargetCache::UpTo(768 << 20), 5).unwrap();
    let gt = GramTarget::new(&target).unwrap();
    drop(tape);
    let full = |sw: bool| {
        let (s, tape) = net.forward(&img, 12).unwrap();
        let mut grads = Vec::new();
        if sw {
            st.evaluate(&s, Some(&mut grads)).unwrap();
        } else {
            gt.evaluate(&s, Some(&mut grads)).unwrap();
        }
        net.image_gradient(&tape, &grads).unwrap();
    };
    let f_sw = best_of(&mut || full(true));
    let f_gram = best_of(&mut || full(false));
    outcome(
        (1.0..=6.0).contains(&ratio),
        format!(
            "sw_loss_grad {t_sw:.3}s / gram_loss_grad {t_gram:.3}s = {ratio:.2} (bounds [1, 6]); \
             full objective {f_sw:.3}s / {f_gram:.3}s = {:.2}",
            f_sw / f_gram
        ),
    )
}

/// Feature-space optimization of 2D points on a 16x16 checkerboard.
struct PointProblem {
    target: FeatureStack<f64>,
    tags: Option<LayerTags>,
    objective: Option<SlicedTarget<f64>>,
}

impl RestartProblem for PointProblem {
    fn dim(&self) -> usize {
        self.target.layers[0].data.len()
    }

    fn prepare(&mut self, _restart: usize, seed: u64) -> Result<()> {
        let dirs = draw_directions(&[2], DirectionPolicy::Fixed(16), seed)?;
        let tags = vec![self.tags.clone()];
        self.objective = Some(SlicedTarget::new(&self.target, dirs, &[256], &tags, TargetCache::Never, seed)?);
        Ok(())
    }

    fn evaluate(&mut self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        let stack = FeatureStack::unnamed(vec![FeatureLayer::new(16, 16, 2, x.to_vec())?]);
        let mut grads = Vec::new();
        let loss = self.objective.as_ref().expect("prepared").evaluate(&stack, Some(&mut grads))?;
        grad.copy_from_slice(&grads[0]);
        Ok(loss[0])
    }

    fn monitor(&mut self, _x: &[f64], _restart: usize) -> Result<Vec<swtex_core::LossRecord>> {
        Ok(Vec::new())
    }
}

/// Largest squared 1D Wasserstein distance between per-tag coordinate
/// marginals of `x` and the target.
fn per_tag_marginal_distance(x: &[f64], target: &[f64], tags: &[u32]) -> f64 {
    let mut worst: f64 = 0.0;
    for t in 0..2 {
        for k in 0..2 {
            let pick = |v: &[f64]| -> Vec<f64> { (0..256).filter(|&m| tags[m] == t).map(|m| v[2 * m + k]).collect() };
            worst = worst.max(sw1d_loss(&pick(x), &pick(target)).unwrap());
        }
    }
    worst
}

fn spatial_tag_toy() -> Outcome {
    let tags: Vec<u32> = (0..256).map(|m| (((m / 16) + (m % 16)) % 2) as u32).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let centers = [[-1.0, 0.0], [1.0, 0.5]];
    let target: Vec<f64> = tags
        .iter()
        .flat_map(|&t| centers[t as usize].map(|c| c + rng.random_range(-0.2..0.2)))
        .collect();
    let x0: Vec<f64> = (0..512).map(|_| rng.random_range(-1.5..1.5)).collect();
    let cfg = RestartConfig { restarts: 10, lbfgs: LbfgsConfig { max_evals: 100, ..Default::default() }, clamp_unit: false };
    let mut dist = Vec::new();
    for tagged in [true, false] {
        let mut p = PointProblem {
            target: FeatureStack::unnamed(vec![FeatureLayer::new(16, 16, 2, target.clone()).unwrap()]),
            tags: tagged.then(|| LayerTags::new(tags.clone(), tags.clone()).unwrap()),
            objective: None,
        };
        match run_restarts(&mut p, &x0, &cfg, 11) {
            Ok(run) => dist.push(per_tag_marginal_distance(&run.x, &target, &tags)),
            Err(e) => return outcome(false, format!("optimization failed: {e}")),
        }
    }
    outcome(
        dist[0] < 1e-3 && dist[1] > 0.1,
        format!("max per-tag marginal distance: tagged {:.2e} (need < 1e-3), untagged {:.3} (need > 0.1)", dist[0], dist[1]),
    )
}

fn tag_cancellation() -> Outcome {
    let net = Network::<f64>::new(&synthetic_vgg19(SYNTHETIC_SEED)).unwrap();
    let n_layers = 4;
    let img = random_image(32, 32, 21);
    let (stack, _) = net.forward(&img, n_layers).unwrap();
    let channels: Vec<usize> = stack.layers.iter().map(|l| l.channels).collect();
    let pixels = net.layer_pixels(32, 32, n_layers);
    let opts = SynthesisOptions { n_layers, ..Default::default() };
    let periodic = make_periodic_tagmap(32, 32, 4, 2).unwrap();
    let sliced = |tags: &[Option<LayerTags>]| {
        let dirs = draw_directions(&channels, DirectionPolicy::PerFeature, 8).unwrap();
        SlicedTarget::new(&stack, dirs, &pixels, tags, TargetCache::Never, 8).unwrap()
    };
    let tagged = swtex_core::synth::layer_tags(&net, &periodic, &periodic, &opts).unwrap();
    let zero: f64 = sliced(&tagged).evaluate(&stack, None).unwrap().iter().sum();

    let other = random_image(32, 32, 22);
    let (out, _) = net.forward(&other, n_layers).unwrap();
    let uniform = TagMap::uniform(32, 32, 3);
    let single = swtex_core::synth::layer_tags(&net, &uniform, &uniform, &opts).unwrap();
    let with: f64 = sliced(&single).evaluate(&out, None).unwrap().iter().sum();
    let without: f64 = sliced(&[]).evaluate(&out, None).unwrap().iter().sum();
    let rel = rel_err(with, without);
    outcome(
        zero == 0.0 && rel < 1e-9,
        format!("identical tagged loss {zero:e} (need exactly 0); single-tag vs untagged rel diff {rel:.1e} (tol 1e-9)"),
    )
}

fn optimizer_suite() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    let mut wolfe_violations = 0;
    let mut accepted = 0;
    let cfg30 = LbfgsConfig { max_evals: 30, ..Default::default() };

    // random SPD quadratic with eigenvalues 1..10
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let n = 10;
    let mut q: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    for i in 0..n {
        for j in 0..i {
            let d: f64 = (0..n).map(|k| q[i][k] * q[j][k]).sum();
            let row_j = q[j].clone();
            q[i].iter_mut().zip(&row_j).for_each(|(a, b)| *a -= d * b);
        }
        let norm = q[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        q[i].iter_mut().for_each(|v| *v /= norm);
    }
    let a: Vec<Vec<f64>> =
        (0..n).map(|i| (0..n).map(|j| (0..n).map(|k| q[k][i] * (k + 1) as f64 * q[k][j]).sum()).collect()).collect();
    let x0: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let quad = |x: &[f64], g: &mut [f64]| -> Result<f64> {
        for i in 0..n {
            g[i] = (0..n).map(|j| a[i][j] * x[j]).sum();
        }
        Ok(0.5 * x.iter().zip(g.iter()).map(|(u, v)| u * v).sum::<f64>())
    };
    let check = |r: &swtex_core::optim::LbfgsResult, cfg: &LbfgsConfig, acc: &mut usize, bad: &mut usize| {
        for s in r.steps.iter().filter(|s| s.kind == StepKind::Accepted) {
            *acc += 1;
            if !(s.f <= s.f_prev + cfg.c1 * s.step * s.dphi0 && s.dphi.abs() <= -cfg.c2 * s.dphi0) {
                *bad += 1;
            }
        }
    };
    match lbfgs_minimize(quad, &x0, &cfg30) {
        Ok(r) => {
            let gn = r.grad.iter().map(|v| v * v).sum::<f64>().sqrt();
            pass &= gn < 1e-8 && r.evals <= 30;
            notes.push(format!("quadratic |g| {gn:.1e} in {} evals", r.evals));
            check(&r, &cfg30, &mut accepted, &mut wolfe_violations);
        }
        Err(e) => return outcome(false, format!("quadratic: {e}")),
    }

    let rosen = |x: &[f64], g: &mut [f64]| -> Result<f64> {
        let (a, b) = (x[0], x[1]);
        g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
        g[1] = 200.0 * (b - a * a);
        Ok((1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2))
    };
    let cfg = LbfgsConfig { max_evals: 500, ..Default::default() };
    match lbfgs_minimize(rosen, &[-1.2, 1.0], &cfg) {
        Ok(r) => {
            pass &= r.f < 1e-8;
            notes.push(format!("Rosenbrock f {:.1e} in {} evals", r.f, r.evals));
            check(&r, &cfg, &mut accepted, &mut wolfe_violations);
        }
        Err(e) => return outcome(false, format!("Rosenbrock: {e}")),
    }
    pass &= wolfe_violations == 0;
    notes.push(format!("Wolfe violations {wolfe_violations}/{accepted} accepted steps"));
    outcome(pass, notes.join("; "))
}

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let ex = dir.path().join("exemplar.png");
    exemplar(128).save_png(&ex).unwrap();
    let mut outputs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("out{k}.png"));
        let log = dir.path().join(format!("log{k}.jsonl"));
        let status = Command::new(env!("CARGO_BIN_EXE_swtex"))
            .args(["--exemplar", ex.to_str().unwrap(), "--size", "64x64", "--restarts", "3", "--evals", "10"])
            .args(["--monitor-dirs", "64", "--seed", "42", "--out", out.to_str().unwrap(), "--log", log.to_str().unwrap()])
            .output()
            .unwrap();
        if !status.status.success() {
            return outcome(false, format!("swtex exited with {}", status.status));
        }
        // wall-clock time is the one field that cannot repeat
        let log_lines: Vec<String> = fs::read_to_string(&log)
            .unwrap()
            .lines()
            .map(|l| {
                let start = l.find("\"wall_time_s\":").expect("wall_time_s field");
                let end = l[start..].find([',', '}']).map_or(l.len(), |e| start + e);
                format!("{}{}", &l[..start], &l[end..])
            })
            .collect();
        outputs.push((fs::read(&out).unwrap(), log_lines));
    }
    let same_png = outputs[0].0 == outputs[1].0;
    let same_log = outputs[0].1 == outputs[1].1;
    outcome(
        same_png && same_log,
        format!(
            "PNG identical: {same_png}; {} log lines identical apart from wall_time_s: {same_log}",
            outputs[0].1.len()
        ),
    )
}
