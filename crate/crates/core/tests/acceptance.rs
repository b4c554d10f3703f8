//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 1-4 and 10 are quick. Criteria 5-9 run the comparison matrix on
//! the default benchmark for three seeds and criterion 11 times the default
//! end-to-end run through the CLI; together these take a few CPU hours.
//! Set `EUDA_ACCEPTANCE_DIR` to keep the run directories and
//! `EUDA_ACCEPTANCE_ONLY=1,2,10` to run a subset. Failing criteria are
//! reported but only fail the process with `EUDA_ACCEPTANCE_STRICT` set.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ensemble_uda::autodiff::{grad_check, Padding, Tape, Tensor, Var};
use ensemble_uda::dataio::{standard_benchmark, SceneSpec, SegmentationMap, SplitCounts};
use ensemble_uda::ensemble::{
    generate_pseudo_labels, meta_fit_from, meta_forward, meta_scores, MetaDataset, MetaFitOptions, MetaWeights,
    ProbabilityMap, PseudoLabelConfig,
};
use ensemble_uda::evalkit::{run_ablation_suite, AblationOptions, ComparisonReport};
use ensemble_uda::losses::{
    cosine_discrepancy, discriminator_loss, entropy_charbonnier, generator_loss, seg_cross_entropy, GanMode,
};
use ensemble_uda::nets::{
    classifier_forward, discriminator_forward, encoder_forward, init_params, Bound, BoundConv, NetConfig, ParamSet,
};
use ensemble_uda::trainer::{run_full_pipeline, Phase, PipelineOptions, PipelineSplits, RunConfig};

const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

// ---------------------------------------------------------------- criterion 1

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    // away from zero, where abs and leaky-relu have kinks
    let v = (0..n)
        .map(|_| {
            let x: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) { -x } else { x }
        })
        .collect::<Vec<_>>();
    Tensor::from_f64(shape, &v).unwrap()
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    random(shape, rng).map(|v| v.abs() + 0.2)
}

type Check = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> ensemble_uda::Result<Var>>;

fn labels(n: usize, k: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<SegmentationMap> {
    (0..n)
        .map(|_| {
            let data = (0..h * w).map(|_| if rng.random_bool(0.15) { 255 } else { rng.random_range(0..k as u8) }).collect();
            SegmentationMap::new(h, w, data).unwrap()
        })
        .collect()
}

fn bound_from(vars: &[Var], set: &ParamSet<f64>) -> Bound {
    Bound {
        layers: set
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| BoundConv {
                weight: vars[2 * i],
                bias: vars[2 * i + 1],
                stride: l.stride,
            })
            .collect(),
    }
}

fn set_tensors(set: &ParamSet<f64>) -> Vec<Tensor<f64>> {
    set.layers
        .iter()
        .flat_map(|l| [Tensor::new(&l.shape, l.weight.clone()).unwrap(), Tensor::new(&[l.shape[0]], l.bias.clone()).unwrap()])
        .collect()
}

/// Every tape operation and every loss, as `(name, function, inputs)`.
fn gradient_cases(seed: u64) -> Vec<(&'static str, Check, Vec<Tensor<f64>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<(&'static str, Check, Vec<Tensor<f64>>)> = Vec::new();
    let x = random(&[2, 3, 4, 4], &mut rng);

    cases.push((
        "conv2d",
        Box::new(|t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            let y = t.mul(y, y)?;
            t.sum_all(y)
        }),
        vec![x.clone(), random(&[2, 3, 3, 3], &mut rng), random(&[2], &mut rng)],
    ));
    cases.push((
        "conv2d_padded",
        Box::new(|t, v| {
            let pad = Padding { top: 1, left: 1, bottom: 2, right: 2 };
            let y = t.conv2d_padded(v[0], v[1], Some(v[2]), 2, pad)?;
            let y = t.mul(y, y)?;
            t.mean_all(y)
        }),
        vec![x.clone(), random(&[2, 3, 4, 4], &mut rng), random(&[2], &mut rng)],
    ));
    cases.push((
        "elementwise",
        Box::new(|t, v| {
            let s = t.sigmoid(v[0])?;
            let d = t.div(s, v[1])?;
            let m = t.sub(d, v[0])?;
            let a = t.abs(m)?;
            let p = t.add_scalar(a, 0.3)?;
            let p = t.pow_scalar(p, 1.7)?;
            let l = t.leaky_relu(v[0], 0.2)?;
            let q = t.add(p, l)?;
            let q = t.scale(q, 0.7)?;
            let lg = t.log(v[1])?;
            let c = t.clamp_min(v[1], 0.01)?;
            let r = t.mul(lg, c)?;
            let z = t.add(q, r)?;
            t.sum_all(z)
        }),
        vec![random(&[2, 3, 4], &mut rng), positive(&[2, 3, 4], &mut rng)],
    ));
    cases.push((
        "reductions",
        Box::new(|t, v| {
            let a = t.sum_axes(v[0], &[1], true)?;
            let b = t.mean_axes(v[0], &[0, 2], false)?;
            let a2 = t.mul(a, a)?;
            let b2 = t.mul(b, b)?;
            let s = t.sum_all(a2)?;
            let m = t.mean_all(b2)?;
            t.add(s, m)
        }),
        vec![random(&[2, 3, 4], &mut rng)],
    ));
    cases.push((
        "softmax/upsample/reshape",
        Box::new(|t, v| {
            let up = t.upsample_bilinear(v[0], 2)?;
            let sm = t.softmax(up, 1)?;
            let r = t.reshape(sm, &[2, 3 * 8 * 8])?;
            let f = t.flatten(r)?;
            let w = t.constant(Tensor::from_f64(&[2, 3 * 64], &(0..384).map(|i| ((i * 37) % 11) as f64 / 11.0).collect::<Vec<_>>()).unwrap());
            let p = t.mul(f, w)?;
            t.sum_all(p)
        }),
        vec![random(&[2, 3, 4, 4], &mut rng)],
    ));

    let k = 4;
    let lab = labels(2, k, 4, 4, &mut rng);
    cases.push((
        "seg cross-entropy",
        Box::new(move |t, v| {
            let p = t.softmax(v[0], 1)?;
            let refs: Vec<&SegmentationMap> = lab.iter().collect();
            Ok(seg_cross_entropy(t, p, &refs)?.loss)
        }),
        vec![random(&[2, k, 4, 4], &mut rng)],
    ));
    cases.push((
        "adversarial (D)",
        Box::new(|t, v| discriminator_loss(t, v[0], v[1])),
        vec![random(&[2, 1, 3, 3], &mut rng), random(&[2, 1, 3, 3], &mut rng)],
    ));
    for (name, mode) in [("adversarial (G, non-saturating)", GanMode::NonSaturating), ("adversarial (G, minimax)", GanMode::Minimax)] {
        cases.push((name, Box::new(move |t, v| generator_loss(t, v[0], mode)), vec![random(&[2, 1, 3, 3], &mut rng)]));
    }
    cases.push((
        "entropy",
        Box::new(|t, v| {
            let p = t.softmax(v[0], 1)?;
            entropy_charbonnier(t, p, 2.0)
        }),
        vec![random(&[2, k, 3, 3], &mut rng)],
    ));

    let net = NetConfig {
        encoder_channels: vec![4, 4, 4, 4],
        head_channels: 4,
        disc_channels: vec![2, 2, 1],
        ..NetConfig::with_classes(3)
    };
    let params = init_params::<f64>(&net, seed).unwrap();
    let (h1, h2) = (params.heads[0].clone(), params.heads[1].clone());
    let n1 = h1.layers.len() * 2;
    let mut inputs = set_tensors(&h1);
    inputs.extend(set_tensors(&h2));
    cases.push((
        "cosine discrepancy",
        Box::new(move |t, v| {
            let a = bound_from(&v[..n1], &h1);
            let b = bound_from(&v[n1..], &h2);
            cosine_discrepancy(t, &a, &b)
        }),
        inputs,
    ));

    // the whole network: encoder, a head and the discriminator
    let (enc, head, disc) = (params.encoder.clone(), params.heads[2].clone(), params.discriminator.clone());
    let (ne, nh) = (enc.layers.len() * 2, head.layers.len() * 2);
    let mut inputs = vec![positive(&[1, 3, 16, 16], &mut rng).map(|v| v.min(1.0))];
    inputs.extend(set_tensors(&enc));
    inputs.extend(set_tensors(&head));
    inputs.extend(set_tensors(&disc));
    let lab = labels(1, 3, 16, 16, &mut rng);
    cases.push((
        "network",
        Box::new(move |t, v| {
            let e = bound_from(&v[1..1 + ne], &enc);
            let h = bound_from(&v[1 + ne..1 + ne + nh], &head);
            let d = bound_from(&v[1 + ne + nh..], &disc);
            let f = encoder_forward(t, &net, &e, v[0])?;
            let out = classifier_forward(t, &net, &h, f)?;
            let refs: Vec<&SegmentationMap> = lab.iter().collect();
            let seg = seg_cross_entropy(t, out.probs, &refs)?.loss;
            let ent = entropy_charbonnier(t, out.probs, 2.0)?;
            let dl = discriminator_forward(t, &net, &d, f)?;
            let g = generator_loss(t, dl, GanMode::NonSaturating)?;
            let a = t.add(seg, ent)?;
            t.add(a, g)
        }),
        inputs,
    ));
    cases
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    let seeds = 10;
    let mut count = 0;
    for seed in 0..seeds {
        for (name, f, inputs) in gradient_cases(1000 + seed) {
            count += 1;
            match grad_check(f, &inputs, 1e-6, 1e-4) {
                Ok(r) => {
                    worst = worst.max(r.worst());
                    if !r.passed {
                        failures.push(format!("{name} seed {seed}: {:.2e}", r.worst()));
                    }
                }
                Err(e) => failures.push(format!("{name} seed {seed}: {e}")),
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 60.0;
    outcome(
        pass,
        format!(
            "{count} checks over {seeds} seeds, worst relative error {worst:.2e} (tol 1e-4), {secs:.1}s (limit 60s){}",
            if failures.is_empty() { String::new() } else { format!("; failed: {}", failures.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------- criterion 2

fn random_map(k: usize, h: usize, w: usize, sharp: f64, rng: &mut ChaCha8Rng) -> ProbabilityMap {
    let mut data = vec![0.0f32; k * h * w];
    for p in 0..h * w {
        let logits: Vec<f64> = (0..k).map(|_| sharp * rng.random_range(-1.0..1.0)).collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for c in 0..k {
            data[c * h * w + p] = ((logits[c] - m).exp() / z) as f32;
        }
    }
    ProbabilityMap::new(k, h, w, data).unwrap()
}

/// Mean cross-entropy of the meta output, computed here from the scores.
fn meta_loss(maps: &[[ProbabilityMap; 3]], labels: &[SegmentationMap], w: &MetaWeights) -> f64 {
    let (mut total, mut n) = (0.0, 0usize);
    for (m, y) in maps.iter().zip(labels) {
        let k = m[0].classes;
        let hw = m[0].pixels();
        let z = meta_scores([&m[0], &m[1], &m[2]], w).unwrap();
        for p in 0..hw {
            let yc = y.data[p];
            if yc == 255 {
                continue;
            }
            let zs: Vec<f64> = (0..k).map(|c| z[c * hw + p]).collect();
            let mx = zs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + zs.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - zs[yc as usize];
            n += 1;
        }
    }
    total / n as f64
}

fn dataset(maps: &[[ProbabilityMap; 3]], labels: &[SegmentationMap]) -> MetaDataset {
    let mut d = MetaDataset::new(maps[0][0].classes);
    for (m, y) in maps.iter().zip(labels) {
        d.push([&m[0], &m[1], &m[2]], y).unwrap();
    }
    d
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (k, h, w) = (4, 6, 6);
    let mut notes = Vec::new();
    let mut pass = true;

    // (a) sparsity
    let maps: [ProbabilityMap; 3] = std::array::from_fn(|_| random_map(k, h, w, 2.0, &mut rng));
    let weights = MetaWeights {
        w: std::array::from_fn(|_| (0..k).map(|_| rng.random_range(-2.0..2.0)).collect()),
    };
    let base = meta_scores([&maps[0], &maps[1], &maps[2]], &weights).unwrap();
    let mut violations = 0;
    for _ in 0..200 {
        let probe = (rng.random_range(0..k), rng.random_range(0..h * w));
        let (head, c, p) = (rng.random_range(0..3), rng.random_range(0..k), rng.random_range(0..h * w));
        if (c, p) == probe {
            continue;
        }
        let mut moved = maps.clone();
        let mut data: Vec<f32> = (0..k * h * w).map(|i| moved[head].get(i / (h * w), i % (h * w))).collect();
        data[c * h * w + p] += 0.3;
        moved[head] = ProbabilityMap::new(k, h, w, data).unwrap();
        let z = meta_scores([&moved[0], &moved[1], &moved[2]], &weights).unwrap();
        if z[probe.0 * h * w + probe.1] != base[probe.0 * h * w + probe.1] {
            violations += 1;
        }
    }
    pass &= violations == 0;
    notes.push(format!("(a) {violations} probe changes in 200 perturbations"));

    // (b) two random starts
    let n = 6;
    let maps: Vec<[ProbabilityMap; 3]> =
        (0..n).map(|_| std::array::from_fn(|_| random_map(k, h, w, 3.0, &mut rng))).collect();
    let planted = MetaWeights {
        w: std::array::from_fn(|_| (0..k).map(|_| rng.random_range(0.5..4.0)).collect()),
    };
    // labels drawn from the planted model's own distribution
    let labels: Vec<SegmentationMap> = maps
        .iter()
        .map(|m| {
            let out = meta_forward([&m[0], &m[1], &m[2]], &planted).unwrap();
            let data = (0..h * w)
                .map(|p| {
                    let u: f32 = rng.random_range(0.0..1.0);
                    let mut acc = 0.0;
                    for c in 0..k {
                        acc += out.get(c, p);
                        if u < acc {
                            return c as u8;
                        }
                    }
                    (k - 1) as u8
                })
                .collect();
            SegmentationMap::new(h, w, data).unwrap()
        })
        .collect();
    let data = dataset(&maps, &labels);
    let opts = MetaFitOptions::default();
    let starts: Vec<MetaWeights> = (0..2)
        .map(|_| MetaWeights {
            w: std::array::from_fn(|_| (0..k).map(|_| rng.random_range(-3.0..3.0)).collect()),
        })
        .collect();
    let fits: Vec<f64> = starts
        .iter()
        .map(|s| {
            let (w, _) = meta_fit_from(&data, s, &opts).unwrap();
            meta_loss(&maps, &labels, &w)
        })
        .collect();
    let gap = (fits[0] - fits[1]).abs();
    pass &= gap <= 1e-4;
    notes.push(format!("(b) final losses {:.6} / {:.6}, gap {gap:.1e} (tol 1e-4)", fits[0], fits[1]));

    // (c) uniform scalar weights on one head keep its argmax
    let mut mismatches = 0;
    for (sel, s) in [(0usize, 0.5), (1, 3.0), (2, 17.0)] {
        let mut wts = MetaWeights::constant(k, 0.0);
        wts.w[sel] = vec![s; k];
        for m in &maps {
            let fused = meta_forward([&m[0], &m[1], &m[2]], &wts).unwrap();
            mismatches += fused.argmax().data.iter().zip(&m[sel].argmax().data).filter(|(a, b)| a != b).count();
        }
    }
    pass &= mismatches == 0;
    notes.push(format!("(c) {mismatches} argmax mismatches"));

    // (d) planted solution
    let (w, _) = meta_fit_from(&data, &MetaWeights::constant(k, 1.0), &opts).unwrap();
    let (fitted, at_planted) = (meta_loss(&maps, &labels, &w), meta_loss(&maps, &labels, &planted));
    pass &= fitted <= at_planted + 1e-6;
    notes.push(format!("(d) fitted {fitted:.6} vs planted {at_planted:.6} (+1e-6)"));
    outcome(pass, notes.join("; "))
}

// ---------------------------------------------------------------- criterion 3

fn entropy_of(p: &[f64], eta: f64) -> f64 {
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(Tensor::from_f64(&[1, p.len(), 1, 1], p).unwrap());
    let l = entropy_charbonnier(&mut tape, v, eta).unwrap();
    tape.value(l).item()
}

/// Independent scalar evaluator: `((H/ln K)² + 1e-6)^η`.
fn entropy_oracle(p: &[f64], eta: f64) -> f64 {
    let h: f64 = -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>();
    let hn = h / (p.len() as f64).ln();
    (hn * hn + 1e-6).powf(eta)
}

fn criterion_3() -> Outcome {
    let eta = 2.0;
    let mut notes = Vec::new();
    let one_hot = entropy_of(&[0.0, 1.0, 0.0, 0.0], eta);
    let uniform = entropy_of(&[0.25; 4], eta);
    let want_u = (1.0f64 + 1e-6).powf(eta);
    let mut pass = (one_hot - 1e-12).abs() <= 1e-15 && (uniform - want_u).abs() <= 1e-12;
    notes.push(format!("one-hot {one_hot:.3e} (want 1e-12), uniform {uniform:.12} (want {want_u:.12})"));

    let sweep: Vec<(f64, f64)> = (0..100)
        .map(|i| {
            let t = i as f64 / 99.0;
            let p: Vec<f64> = (0..5).map(|c| (1.0 - t) * f64::from(c == 0) + t / 5.0).collect();
            let h = -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>();
            (h, entropy_of(&p, eta))
        })
        .collect();
    let monotone = sweep.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
    pass &= monotone;
    notes.push(format!("monotone over 100 interpolated distributions: {monotone}"));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let k = rng.random_range(2..8);
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0f64).powi(3) + 1e-9).collect();
        let s: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
        worst = worst.max((entropy_of(&p, eta) - entropy_oracle(&p, eta)).abs());
    }
    pass &= worst <= 1e-10;
    notes.push(format!("max deviation from scalar oracle over 1000 distributions {worst:.1e} (tol 1e-10)"));
    outcome(pass, notes.join("; "))
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let maps: Vec<ProbabilityMap> = (0..5).map(|_| random_map(5, 8, 8, 4.0, &mut rng)).collect();
    let taus: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
    let runs: Vec<Vec<SegmentationMap>> = taus
        .iter()
        .map(|&t| generate_pseudo_labels(&maps, &PseudoLabelConfig { threshold: t, ..Default::default() }))
        .collect();
    let coverage: Vec<usize> = runs.iter().map(|r| r.iter().map(|m| m.data.iter().filter(|&&v| v != 255).count()).sum()).collect();
    let monotone = coverage.windows(2).all(|w| w[1] <= w[0]);
    let total = 5 * 64;
    let all_at_zero = coverage[0] == total;
    let nested = runs.windows(2).all(|w| {
        w[0].iter().zip(&w[1]).all(|(lo, hi)| lo.data.iter().zip(&hi.data).all(|(&a, &b)| b == 255 || a == b))
    });
    outcome(
        monotone && all_at_zero && nested,
        format!(
            "coverage from τ=0 to 1: {} .. {} of {total}; monotone {monotone}; τ=0 labels all {all_at_zero}; nested {nested}",
            coverage[0],
            coverage[coverage.len() - 1]
        ),
    )
}

// ---------------------------------------------------------------- criteria 5-9

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn pts(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

/// Configuration the comparison matrix runs with.
fn suite_config(seed: u64) -> RunConfig {
    RunConfig { seed, ..RunConfig::default() }
}

struct Suite {
    reports: Vec<ComparisonReport>,
    secs: f64,
    error: Option<String>,
}

fn run_suite(root: &Path) -> Suite {
    let start = Instant::now();
    let bench = match standard_benchmark(&SceneSpec::default(), SplitCounts::default()) {
        Ok(b) => b,
        Err(e) => return Suite { reports: Vec::new(), secs: 0.0, error: Some(e.to_string()) },
    };
    let mut reports = Vec::new();
    for seed in SEEDS {
        let t = Instant::now();
        match run_ablation_suite(&bench, &suite_config(seed), &root.join(format!("seed{seed}")), &AblationOptions { parallel: true }) {
            Ok(r) => {
                eprintln!("  comparison matrix seed {seed}: {:.0}s", t.elapsed().as_secs_f64());
                reports.push(r)
            }
            Err(e) => {
                return Suite {
                    reports,
                    secs: start.elapsed().as_secs_f64(),
                    error: Some(format!("seed {seed}: {e}")),
                }
            }
        }
    }
    Suite {
        reports,
        secs: start.elapsed().as_secs_f64(),
        error: None,
    }
}

/// Seed-mean of a headline number, or `None` if any seed lacks it.
fn avg(s: &Suite, f: impl Fn(&ComparisonReport) -> Option<f64>) -> Option<f64> {
    let v: Option<Vec<f64>> = s.reports.iter().map(f).collect();
    v.filter(|v| v.len() == SEEDS.len()).map(|v| mean(&v))
}

fn missing(s: &Suite) -> Outcome {
    let why = s.error.clone().unwrap_or_else(|| "a run failed; see comparison.json".into());
    outcome(false, format!("missing results: {why}"))
}

fn criterion_5(s: &Suite) -> Outcome {
    let (Some(cm), Some(best), Some(sed), Some(mtri)) = (
        avg(s, |r| r.checks.ours_cm),
        avg(s, |r| r.checks.ours_best_head),
        avg(s, |r| r.checks.sed_best),
        avg(s, |r| r.checks.mtri_best),
    ) else {
        return missing(s);
    };
    let hours = s.secs / 3600.0;
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let pass = cm > sed && cm > mtri && 100.0 * cm >= 100.0 * best - 0.5 && hours < 2.0;
    outcome(
        pass,
        format!(
            "target-val mIoU (3-seed mean): ours C_m {} vs sed {} vs mtri {}; best ours head {} (C_m must be ≥ best − 0.5); suite {:.2} h on {cores} core(s) (limit 2 h)",
            pts(cm),
            pts(sed),
            pts(mtri),
            pts(best),
            hours
        ),
    )
}

fn ssl_rounds(s: &Suite, translated: bool) -> Option<Vec<Vec<f64>>> {
    let v: Vec<Vec<f64>> = s
        .reports
        .iter()
        .map(|r| if translated { r.checks.ssl_t_rounds_cm.clone() } else { r.checks.ssl_rounds_cm.clone() })
        .collect();
    (v.len() == SEEDS.len()).then_some(v)
}

fn criterion_6(s: &Suite) -> Outcome {
    let (Some(stage1), Some(rounds)) = (avg(s, |r| r.checks.ours_cm), ssl_rounds(s, false)) else {
        return missing(s);
    };
    if rounds.iter().any(|r| r.is_empty()) {
        return missing(s);
    }
    // a run the gap rule stopped after round 1 keeps its round-1 model
    let stopped = rounds.iter().filter(|r| r.len() == 1).count();
    let r1 = mean(&rounds.iter().map(|r| r[0]).collect::<Vec<_>>());
    let r2 = mean(&rounds.iter().map(|r| *r.get(1).unwrap_or(&r[0])).collect::<Vec<_>>());
    let pass = 100.0 * (r1 - stage1) >= 2.0 && 100.0 * (r2 - r1) >= -0.5;
    outcome(
        pass,
        format!(
            "C_m target-val (3-seed mean): stage 1 {} → round 1 {} (need +2.00) → round 2 {} (need ≥ round 1 − 0.50){}",
            pts(stage1),
            pts(r1),
            pts(r2),
            if stopped > 0 { format!("; {stopped} seed(s) stopped after round 1 by the gap rule and keep the round-1 model") } else { String::new() }
        ),
    )
}

fn criterion_7(s: &Suite) -> Outcome {
    let (Some(on), Some(off)) = (avg(s, |r| r.checks.ours_cm), avg(s, |r| r.checks.ours_noent_cm)) else {
        return missing(s);
    };
    outcome(
        100.0 * on >= 100.0 * off - 0.5,
        format!("ours C_m with entropy {} vs without {} (need with ≥ without − 0.50)", pts(on), pts(off)),
    )
}

fn criterion_8(s: &Suite) -> Outcome {
    let (Some(ours), Some(sed)) = (avg(s, |r| r.checks.ours_cm_wild), avg(s, |r| r.checks.sed_wild)) else {
        return missing(s);
    };
    outcome(ours >= sed, format!("wild-val mIoU: ours C_m {} vs sed {}", pts(ours), pts(sed)))
}

fn criterion_9(s: &Suite) -> Outcome {
    let (Some(plain), Some(trans)) = (ssl_rounds(s, false), ssl_rounds(s, true)) else {
        return missing(s);
    };
    if plain.iter().chain(&trans).any(|r| r.is_empty()) {
        return missing(s);
    }
    let last = |v: &[Vec<f64>]| mean(&v.iter().map(|r| *r.last().unwrap()).collect::<Vec<_>>());
    let (p, t) = (last(&plain), last(&trans));
    outcome(
        100.0 * t <= 100.0 * p + 0.3,
        format!("final C_m target-val: SSL with translation {} vs without {} (need ≤ without + 0.30)", pts(t), pts(p)),
    )
}

// ---------------------------------------------------------------- criterion 10

fn criterion_10(root: &Path) -> Outcome {
    let bench = standard_benchmark(&SceneSpec::default(), SplitCounts::default()).unwrap();
    let splits = PipelineSplits::from_benchmark(&bench);
    // short phases keep this quick; the code path is the default one
    let cfg = RunConfig {
        seed: 5,
        stage1_iters: 30,
        ssl_iters_per_round: 20,
        stop_gap: -100.0,
        ..RunConfig::default()
    };
    let run = |name: &str, opts: &PipelineOptions| run_full_pipeline(&cfg, &splits, &root.join(name), opts);
    let read = |name: &str, f: &str| std::fs::read(root.join(name).join(f)).unwrap_or_default();
    let result = (|| -> ensemble_uda::Result<(bool, bool, usize)> {
        let a = run("a", &PipelineOptions::default())?;
        run("b", &PipelineOptions::default())?;
        let same = read("a", "metrics.jsonl") == read("b", "metrics.jsonl") && !read("a", "metrics.jsonl").is_empty();
        let mut resumed_ok = true;
        let mut n = 0;
        for (i, halt) in [(Phase::Stage1, 17), (Phase::Ssl { round: 1 }, 0), (Phase::Ssl { round: 2 }, 9)].into_iter().enumerate() {
            let name = format!("halt{i}");
            let h = run(&name, &PipelineOptions { halt_at: Some(halt), ..Default::default() })?;
            let ckpt = h.run_dir.join("checkpoints/interrupted.ckpt");
            let r = run(&name, &PipelineOptions { resume: Some(ckpt), ..Default::default() })?;
            resumed_ok &= r.state == a.state
                && read(&name, "metrics.jsonl") == read("a", "metrics.jsonl")
                && read(&name, "checkpoints/final.ckpt") == read("a", "checkpoints/final.ckpt");
            n += 1;
        }
        Ok((same, resumed_ok, n))
    })();
    match result {
        Ok((same, resumed, n)) => outcome(
            same && resumed,
            format!("same-seed metrics.jsonl identical: {same}; {n} interrupted runs resumed bit-exact (state, log, final checkpoint): {resumed}"),
        ),
        Err(e) => outcome(false, format!("run error: {e}")),
    }
}

// ---------------------------------------------------------------- criterion 11

fn criterion_11(root: &Path) -> Outcome {
    let bin = env!("CARGO_BIN_EXE_euda");
    let start = Instant::now();
    let steps: [&[&str]; 4] = [
        &["gen", "--out", "bench"],
        &["train", "--bench", "bench", "--out", "run"],
        &["ssl", "--bench", "bench", "--resume", "run/checkpoints/final.ckpt", "--out", "run"],
        &["eval", "--bench", "bench", "--resume", "run/checkpoints/final.ckpt", "--split", "target-val"],
    ];
    let mut eval_json = Vec::new();
    for args in steps {
        let out = Command::new(bin).args(args).current_dir(root).env("RUST_LOG", "warn").output();
        match out {
            Ok(o) if o.status.success() => eval_json = o.stdout,
            Ok(o) => {
                return outcome(false, format!("`euda {}` exited {:?}: {}", args.join(" "), o.status.code(), String::from_utf8_lossy(&o.stderr)))
            }
            Err(e) => return outcome(false, format!("cannot run euda: {e}")),
        }
    }
    let mins = start.elapsed().as_secs_f64() / 60.0;
    let cm = serde_json::from_slice::<serde_json::Value>(&eval_json)
        .ok()
        .and_then(|v| v["meta"]["miou"].as_f64());
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    outcome(
        mins < 30.0 && cm.is_some(),
        format!(
            "gen + train + ssl + eval at defaults: {mins:.1} min on {cores} core(s) (limit 30 min on 4 cores); final C_m target-val {}",
            cm.map_or("missing".into(), pts)
        ),
    )
}

// ----------------------------------------------------------------

fn workdir() -> (PathBuf, Option<tempfile::TempDir>) {
    match std::env::var_os("EUDA_ACCEPTANCE_DIR") {
        Some(d) => {
            let p = PathBuf::from(d);
            std::fs::create_dir_all(&p).expect("acceptance dir");
            (p, None)
        }
        None => {
            let t = tempfile::tempdir().expect("temp dir");
            (t.path().to_path_buf(), Some(t))
        }
    }
}

fn main() {
    // `cargo test` passes harness flags such as `--list`; nothing to list here
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let only: Option<Vec<u32>> = std::env::var("EUDA_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let want = |n: u32| only.as_ref().is_none_or(|o| o.contains(&n));
    let (root, _guard) = workdir();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n: u32, name: &'static str, o: Outcome| {
        println!("criterion {n:>2} [{name}]: {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    if want(1) {
        report(1, "gradient checks", criterion_1());
    }
    if want(2) {
        report(2, "meta-learner properties", criterion_2());
    }
    if want(3) {
        report(3, "entropy loss", criterion_3());
    }
    if want(4) {
        report(4, "pseudo-label thresholding", criterion_4());
    }
    if want(10) {
        report(10, "determinism and resume", criterion_10(&root.join("determinism")));
    }

    if (5..=9).any(&want) {
        let suite = run_suite(&root.join("comparison"));
        report(5, "ensemble advantage", criterion_5(&suite));
        report(6, "self-training gain", criterion_6(&suite));
        report(7, "entropy ablation", criterion_7(&suite));
        report(8, "wild-domain generalization", criterion_8(&suite));
        report(9, "translation during self-training", criterion_9(&suite));
    }

    if want(11) {
        let e2e = root.join("end_to_end");
        std::fs::create_dir_all(&e2e).expect("end-to-end dir");
        report(11, "default end-to-end budget", criterion_11(&e2e));
    }

    results.sort_by_key(|r| r.0);
    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!("acceptance: {}/{} criteria pass", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failing: {failed:?}");
        if std::env::var_os("EUDA_ACCEPTANCE_STRICT").is_some() {
            std::process::exit(1);
        }
    }
}
