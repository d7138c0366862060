//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Run with `cargo test -p angiosynth-core --test acceptance`.

use std::time::{Duration, Instant};

use angiosynth::attention::{cross_slice_weights, SliceFeature};
use angiosynth::config::RunConfig;
use angiosynth::diffusion::{
    diffusion_objective, forward_diffuse, loss_and_gradient, make_schedule, mix, sample, Denoise, DenoiserParams,
    LossWeights,
};
use angiosynth::embedder::ConditionEmbedding;
use angiosynth::metrics::{dice, jaccard, psnr, ssim, MetricReport};
use angiosynth::oracle::{central_differences, exhaustive_mst_weight, path_product_aggregate, rel_close};
use angiosynth::pipeline::{
    evaluate_volumes, fit_codec, fit_diffusion, fit_embedder, generate_pairs, synthesize, TrainedEmbedder,
};
use angiosynth::scan::{
    build_grid_graph, edge_gates, kruskal_mst, tree_aggregate, tree_scan_backward, tree_scan_forward, FeatureGraph,
    ScanMode, ScanParams,
};
use angiosynth::tokens::TokenGrid;
use angiosynth::volume::{Image2D, Volume3D};
use angiosynth::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { passed, detail })
}

fn uniform_grid(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> TokenGrid {
    TokenGrid::new(h, w, c, (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn gaussian_grid(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> TokenGrid {
    TokenGrid::new(h, w, c, (0..h * w * c).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

fn random_cond(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> ConditionEmbedding {
    let mask = (0..h * w).map(|_| rng.random_range(0.05..0.95)).collect();
    let mut t = uniform_grid(h, w, c, rng);
    t.data.iter_mut().for_each(|v| *v *= 0.3);
    ConditionEmbedding::new(mask, t).unwrap()
}

fn mst_oracle() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut mismatches = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..=8);
        let mut edges: Vec<_> = (1..n).map(|j| (rng.random_range(0..j), j, rng.random_range(0.0..1.0))).collect();
        for _ in 0..rng.random_range(0..=2 * n) {
            let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
            if i != j {
                edges.push((i, j, rng.random_range(0.0..1.0)));
            }
        }
        let tree = kruskal_mst(&FeatureGraph::new(n, edges.iter().copied())?)?;
        if Some(tree.total_weight()) != exhaustive_mst_weight(n, &edges) {
            mismatches += 1;
        }
    }
    verdict(mismatches == 0, format!("{mismatches}/100 graphs differ from exhaustive minimum"))
}

fn scan_oracle() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let (h, w) = if case == 0 { (8, 8) } else { (rng.random_range(1..=8), rng.random_range(1..=8)) };
        let c = rng.random_range(1..=4);
        let x = uniform_grid(h, w, c, &mut rng);
        let lambda = rng.random_range(0.1..4.0);
        let p = ScanParams::random(c, lambda, 1.0, &mut rng);
        let tree = kruskal_mst(&build_grid_graph(&x)?)?;
        let fast = tree_aggregate(&tree, &x, &p)?;
        let slow = path_product_aggregate(&tree.parent, &edge_gates(&tree, lambda), &p.b, &x.data, c);
        let scale = slow.iter().map(|v| v.abs()).fold(1e-300, f64::max);
        let err = fast.iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale;
        worst = worst.max(err);
    }
    verdict(worst <= 1e-6, format!("max relative error {worst:.2e} on 20 grids up to 8x8"))
}

/// Every gradient of `Σ probe ⊙ Y` against central differences; returns
/// (entries checked, entries failing).
fn kernel_check(seed: u64, mode: ScanMode) -> Result<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, c) = (3, 3, 3);
    let x = uniform_grid(h, w, c, &mut rng);
    let cond = random_cond(h, w, c, &mut rng);
    let p = ScanParams::random(c, rng.random_range(0.5..2.0), 0.8, &mut rng);
    let probe = uniform_grid(h, w, c, &mut rng);
    let (_, state) = tree_scan_forward(&x, Some(&cond), &p, mode)?;
    let g = tree_scan_backward(&state, &p, &probe, None)?;
    let objective = |x: &TokenGrid, cond: &ConditionEmbedding, p: &ScanParams| {
        let (y, _) = tree_scan_forward(x, Some(cond), p, mode).expect("valid instance");
        y.data.iter().zip(&probe.data).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut pairs: Vec<(f64, f64)> = Vec::new();
    let fd_x = central_differences(&x.data, 1e-4, |v| objective(&TokenGrid::new(h, w, c, v.to_vec()).unwrap(), &cond, &p));
    pairs.extend(g.dx.data.iter().copied().zip(fd_x));
    for t in 0..5 {
        let fd = central_differences(p.tensors()[t], 1e-4, |v| {
            let mut q = p.clone();
            q.tensors_mut()[t].copy_from_slice(v);
            objective(&x, &cond, &q)
        });
        pairs.extend(g.params.tensors()[t].iter().copied().zip(fd));
    }
    let fd_m = central_differences(&cond.mask, 1e-4, |v| {
        let mut c2 = cond.clone();
        c2.mask.copy_from_slice(v);
        objective(&x, &c2, &p)
    });
    pairs.extend(g.dmask.iter().copied().zip(fd_m));
    let bad = pairs.iter().filter(|(a, n)| !rel_close(*a, *n, 1e-4, 1e-8)).count();
    Ok((pairs.len(), bad))
}

fn full_model_check(seed: u64, mode: ScanMode) -> Result<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, c, n, steps, t) = (3, 3, 3, 3, 4, 3);
    let schedule = make_schedule(steps, 0.95, 0.2)?;
    let mut model = DenoiserParams::init(c, &schedule, 3, 1.0, 1.0, 1, mode, &mut rng)?;
    for tensor in model.tensors_mut() {
        tensor.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
    let cond: Vec<_> = (0..n).map(|_| random_cond(h, w, c, &mut rng)).collect();
    let target: Vec<_> = (0..n).map(|_| gaussian_grid(h, w, c, &mut rng)).collect();
    let z_t: Vec<_> = target.iter().map(|z| mix(z, &gaussian_grid(h, w, c, &mut rng), schedule.alpha(t))).collect();
    let weights = LossWeights::new(1.0, 1.0, 5.0)?;
    let (_, _, grad) = loss_and_gradient(&model, &z_t, t, &cond, &target, &weights, 0.7)?;
    let objective = |m: &DenoiserParams| diffusion_objective(m, &z_t, t, &cond, &target, &weights, 0.7).unwrap().0;
    let names = model.tensor_names();
    let sizes: Vec<usize> = model.tensors().iter().map(|x| x.len()).collect();
    let total: usize = sizes.iter().sum();
    let (mut checked, mut bad) = (0, 0);
    while checked < 20 {
        let mut k = rng.random_range(0..total);
        let mut ti = 0;
        while k >= sizes[ti] {
            k -= sizes[ti];
            ti += 1;
        }
        if names[ti] == "time_embed" && k / c != t - 1 {
            continue;
        }
        let step = 1e-5;
        let mut plus = model.clone();
        plus.tensors_mut()[ti][k] += step;
        let mut minus = model.clone();
        minus.tensors_mut()[ti][k] -= step;
        let numeric = (objective(&plus) - objective(&minus)) / (2.0 * step);
        if !rel_close(grad.tensors()[ti][k], numeric, 1e-3, 1e-8) {
            bad += 1;
        }
        checked += 1;
    }
    Ok((checked, bad))
}

fn gradient_suite() -> Result<Verdict> {
    let (mut k_total, mut k_bad, mut f_total, mut f_bad) = (0, 0, 0, 0);
    for (seed, mode) in [(201, ScanMode::Tree), (202, ScanMode::Tree), (203, ScanMode::Identity)] {
        let (n, b) = kernel_check(seed, mode)?;
        k_total += n;
        k_bad += b;
        let (n, b) = full_model_check(seed + 10, mode)?;
        f_total += n;
        f_bad += b;
    }
    verdict(
        k_bad == 0 && f_bad == 0,
        format!("kernel {k_bad}/{k_total} outside 1e-4, full model {f_bad}/{f_total} outside 1e-3"),
    )
}

struct Oracle(Vec<TokenGrid>);

impl Denoise for Oracle {
    fn denoise(&self, _: &[TokenGrid], _: usize, _: &[ConditionEmbedding]) -> Result<Vec<TokenGrid>> {
        Ok(self.0.clone())
    }
}

fn diffusion_algebra() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let raw = gaussian_grid(100, 100, 1, &mut rng);
    let mean = raw.data.iter().sum::<f64>() / 1e4;
    let sd = (raw.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 1e4).sqrt();
    let z0 = TokenGrid { data: raw.data.iter().map(|v| (v - mean) / sd).collect(), ..raw };
    let schedule = make_schedule(10, 0.999, 0.01)?;
    let mut worst: f64 = 0.0;
    for t in 1..=10 {
        let zt = forward_diffuse(&z0, t, &gaussian_grid(100, 100, 1, &mut rng), &schedule)?;
        let m = zt.data.iter().sum::<f64>() / 1e4;
        let var = zt.data.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 1e4;
        worst = worst.max((var - 1.0).abs());
    }
    let target: Vec<_> = (0..3).map(|_| gaussian_grid(4, 4, 2, &mut rng)).collect();
    let cond: Vec<_> = (0..3).map(|_| random_cond(4, 4, 2, &mut rng)).collect();
    let mut exact = Vec::new();
    for steps in [1, 5, 50] {
        let schedule = make_schedule(steps, 0.99, 0.02)?;
        exact.push(sample(&Oracle(target.clone()), &cond, &schedule, 2, 7)? == target);
    }
    verdict(
        worst < 0.05 && exact.iter().all(|e| *e),
        format!("max variance deviation {:.2}%, oracle sampler exact for T = 1, 5, 50: {exact:?}", 100.0 * worst),
    )
}

fn attention_properties() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(1..=12);
        let c = rng.random_range(1..=6);
        let features: Vec<_> = (0..n)
            .map(|_| SliceFeature {
                h: (0..c).map(|_| rng.random_range(-1.0..1.0)).collect(),
                mask: rng.random_range(0.0..1.0),
            })
            .collect();
        let alpha = cross_slice_weights(&features, rng.random_range(-1.0..3.0), rng.random_range(1..=4))?;
        for i in 0..n {
            worst = worst.max(((0..n).map(|k| alpha.get(i, k)).sum::<f64>() - 1.0).abs());
        }
    }
    let two = [
        SliceFeature { h: vec![1.0, 0.0], mask: 1.0 },
        SliceFeature { h: vec![0.5, 3f64.sqrt() / 2.0], mask: 1.0 },
    ];
    let hand = 1.2f64.exp() / (1.2f64.exp() + 0.7f64.exp());
    let err = (cross_slice_weights(&two, 0.2, 1)?.get(0, 0) - hand).abs();
    verdict(
        worst <= 1e-6 && err <= 1e-9,
        format!("max |row sum - 1| {worst:.1e} over 50 configurations, 2-slice hand case error {err:.1e}"),
    )
}

fn metric_identities() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let density = rng.random_range(0.0..1.0);
        let mut mask = || {
            let v = (0..6 * 6 * 6).map(|_| if rng.random_bool(density) { 1.0 } else { 0.0 }).collect();
            Volume3D::new([6, 6, 6], [1.0; 3], v)
        };
        let (a, b) = (mask()?, mask()?);
        let j = jaccard(&a, &b)?;
        worst = worst.max((dice(&a, &b)? - 2.0 * j / (1.0 + j)).abs());
    }
    let p20 = psnr(&[0.0; 64], &[0.1; 64], 1.0)?;
    let img = Image2D::new(16, 16, (0..256).map(|_| rng.random_range(0.0f32..1.0)).collect())?;
    let s1 = ssim(&img, &img, 1.0)?;
    verdict(
        worst <= 1e-9 && (p20 - 20.0).abs() < 1e-4 && (s1 - 1.0).abs() < 1e-12,
        format!("dice/jaccard relation error {worst:.1e}, PSNR case {p20:.4} dB, SSIM(a, a) = {s1}"),
    )
}

fn desk_config() -> RunConfig {
    RunConfig { n_pairs: 10, holdout_pairs: 2, volume_size: 32, ..RunConfig::default() }
}

/// Trains every stage on the first 8 pairs and scores the 2 held-out pairs.
fn desk_run(cfg: &RunConfig) -> Result<Vec<(MetricReport, MetricReport)>> {
    let pairs = generate_pairs(cfg)?;
    let train = &pairs[cfg.train_pairs()];
    let codec = fit_codec(cfg, train)?;
    let embedder: TrainedEmbedder = fit_embedder(cfg, train, &codec)?;
    let (model, _) = fit_diffusion(cfg, train, &codec, &embedder)?;
    pairs[cfg.holdout()]
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let synth = synthesize(&p.non_angio, &codec, &embedder.embedder, &model, cfg.seed + i as u64)?;
            Ok((evaluate_volumes(cfg, &synth, &p.angio)?, evaluate_volumes(cfg, &p.non_angio, &p.angio)?))
        })
        .collect()
}

fn end_to_end() -> Result<Verdict> {
    let start = Instant::now();
    let cfg = desk_config();
    let tree = desk_run(&cfg)?;
    let ablation = desk_run(&RunConfig { scan_mode: ScanMode::Identity, ..cfg.clone() })?;
    let elapsed = start.elapsed();

    let margins: Vec<f64> = tree.iter().map(|(synth, input)| synth.psnr - input.psnr).collect();
    let psnr_ok = margins.iter().all(|m| *m >= 3.0);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let conn_tree: Vec<f64> = tree.iter().map(|(s, _)| s.connectivity).collect();
    let conn_ablation: Vec<f64> = ablation.iter().map(|(s, _)| s.connectivity).collect();
    let conn_ok = mean(&conn_tree) >= mean(&conn_ablation);
    let time_ok = elapsed < Duration::from_secs(30 * 60);
    let fmt = |v: &[f64], digits: usize| v.iter().map(|x| format!("{x:.digits$}")).collect::<Vec<_>>().join(", ");
    verdict(
        psnr_ok && conn_ok && time_ok,
        format!(
            "(a) synth PSNR {} dB vs input {} dB, margins [{}] (need >= 3); \
             (b) connectivity tree [{}] mean {:.4} vs identity [{}] mean {:.4}; {:.0}s (limit 1800s)",
            fmt(&tree.iter().map(|(s, _)| s.psnr).collect::<Vec<_>>(), 2),
            fmt(&tree.iter().map(|(_, i)| i.psnr).collect::<Vec<_>>(), 2),
            fmt(&margins, 2),
            fmt(&conn_tree, 4),
            mean(&conn_tree),
            fmt(&conn_ablation, 4),
            mean(&conn_ablation),
            elapsed.as_secs_f64()
        ),
    )
}

fn determinism() -> Result<Verdict> {
    let cfg = RunConfig { train_steps: 40, seed: 77, ..desk_config() };
    let run = || -> Result<Vec<Vec<u8>>> {
        let pairs = generate_pairs(&cfg)?;
        let train = &pairs[cfg.train_pairs()];
        let codec = fit_codec(&cfg, train)?;
        let embedder = fit_embedder(&cfg, train, &codec)?;
        let (model, losses) = fit_diffusion(&cfg, train, &codec, &embedder)?;
        let synth = synthesize(&pairs[8].non_angio, &codec, &embedder.embedder, &model, cfg.seed)?;
        let report = evaluate_volumes(&cfg, &synth, &pairs[8].angio)?;
        let pair_bytes = pairs.iter().flat_map(|p| [&p.non_angio, &p.angio, &p.vessel_mask]).flat_map(|v| v.to_bytes());
        let ckpt = |c: angiosynth::checkpoint::Checkpoint| c.to_bytes();
        Ok(vec![
            pair_bytes.collect(),
            ckpt(angiosynth::pipeline::codec_to_checkpoint(&codec, &cfg)?),
            ckpt(angiosynth::pipeline::embedder_to_checkpoint(&embedder, &cfg)?),
            ckpt(angiosynth::pipeline::diffusion_to_checkpoint(&model, &cfg)?),
            losses.iter().flat_map(|l| l.to_le_bytes()).collect(),
            synth.to_bytes(),
            report.to_json_line().into_bytes(),
        ])
    };
    let (a, b) = (run()?, run()?);
    let stages = ["phantoms", "codec", "embedder", "diffusion", "loss trace", "synthesis", "report"];
    let differing: Vec<_> = stages.iter().zip(a.iter().zip(&b)).filter(|(_, (x, y))| x != y).map(|(s, _)| *s).collect();
    verdict(differing.is_empty(), format!("stages differing between two runs: {differing:?}"))
}

type Criterion = (&'static str, &'static str, fn() -> Result<Verdict>, Option<u64>);

fn main() {
    let criteria: [Criterion; 8] = [
        ("1", "MST oracle", mst_oracle, Some(10)),
        ("2", "scan/oracle equivalence", scan_oracle, Some(10)),
        ("3", "gradient suite", gradient_suite, Some(60)),
        ("4", "diffusion algebra", diffusion_algebra, Some(10)),
        ("5", "attention properties", attention_properties, None),
        ("6", "metric identities", metric_identities, None),
        ("7", "end-to-end desk-scale synthesis", end_to_end, None),
        ("8", "determinism", determinism, None),
    ];
    let mut failures = 0;
    for (id, name, check, limit) in criteria {
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        let (passed, detail) = match outcome {
            Ok(v) => match limit {
                Some(l) if secs >= l as f64 => (false, format!("{}; took {secs:.1}s, limit {l}s", v.detail)),
                Some(l) => (v.passed, format!("{}; {secs:.1}s (limit {l}s)", v.detail)),
                None => (v.passed, format!("{}; {secs:.1}s", v.detail)),
            },
            Err(e) => (false, format!("error: {e}")),
        };
        failures += usize::from(!passed);
        println!("{} criterion {id} ({name}): {detail}", if passed { "PASS" } else { "FAIL" });
    }
    println!("acceptance: {} of 8 criteria passed", 8 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
