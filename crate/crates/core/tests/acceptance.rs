//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints one PASS/FAIL line; exits non-zero if any fails.

use std::path::Path;
use std::time::{Duration, Instant};

use apie::autodiff::{forward, loss_grad, output_l2sq_diag_hessian, output_l2sq_grad, HessianMethod, LossKind};
use apie::consolidation::{accumulate_mas, peak_weight, penalty, penalty_grad, ImportanceHistory};
use apie::harness::gradcheck::{random_batch, random_model, random_penalty_case};
use apie::harness::{run_comparison, run_sequence, AblationTable, Comparison, Mode, RunConfig};
use apie::importance::{apie_importance, combined_importance, curvature, mas_importance, Estimator, ImportanceVector};
use apie::models::{LabelVector, ModelSpec};
use apie::params::{ParamVector, Segment};
use apie::rng::rng_for;
use apie::tasks::{embed_with_report, generate_covers_in_range, EmbedKind, EmbedScheme, GrayImage, SequenceSpec, Splits};
use apie::{LambdaGroup, Tensor};
use rand::Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed < Duration::from_secs(limit_s)
}

// ---- finite-difference oracles (forward evaluation only) ----

fn cross_entropy(p: &ParamVector<f64>, spec: &ModelSpec, x: &Tensor<f64>, y: &LabelVector) -> f64 {
    let logits = forward(p, spec, x).unwrap();
    let mut total = 0.0;
    for (r, &label) in y.as_slice().iter().enumerate() {
        let z = logits.row(r);
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - z[label];
    }
    total / y.len() as f64
}

fn l2sq(p: &ParamVector<f64>, spec: &ModelSpec, x: &Tensor<f64>) -> f64 {
    forward(p, spec, x).unwrap().row(0).iter().map(|v| v * v).sum()
}

/// Central difference that shrinks its step while the one-sided slopes
/// disagree, which only happens when a ReLU kink sits inside the stencil.
fn fd_gradient(p: &ParamVector<f64>, rel: f64, f: impl Fn(&ParamVector<f64>) -> f64) -> Vec<f64> {
    let f0 = f(p);
    let mut q = p.clone();
    (0..p.len())
        .map(|i| {
            let x = p.values()[i];
            let mut r = rel;
            loop {
                let e = r * (1.0 + x.abs());
                q.values_mut()[i] = x + e;
                let up = f(&q);
                q.values_mut()[i] = x - e;
                let down = f(&q);
                q.values_mut()[i] = x;
                let fwd = (up - f0) / e;
                let bwd = (f0 - down) / e;
                if rel_err(fwd, bwd, 1e-3) <= 1e-3 || r < rel * 1e-2 {
                    break (up - down) / ((x + e) - (x - e));
                }
                r /= 10.0;
            }
        })
        .collect()
}

fn second_difference_at(p: &ParamVector<f64>, i: usize, rel: f64, f0: f64, f: &impl Fn(&ParamVector<f64>) -> f64) -> f64 {
    let mut q = p.clone();
    let x = p.values()[i];
    let e = rel * (1.0 + x.abs());
    q.values_mut()[i] = x + e;
    let up = f(&q);
    q.values_mut()[i] = x - e;
    let down = f(&q);
    (up - 2.0 * f0 + down) / (e * e)
}

/// `‖F‖²` is piecewise quadratic along each coordinate, so a step is exact
/// unless a ReLU kink falls inside the stencil. Wide steps lose fewer digits
/// to cancellation, so the widest scale whose `s`, `s/2`, `s/4` stencils
/// agree is used, falling back to the tightest spread.
fn fd_second(p: &ParamVector<f64>, f: impl Fn(&ParamVector<f64>) -> f64) -> Vec<f64> {
    let f0 = f(p);
    (0..p.len())
        .map(|i| {
            let mut best = (f64::INFINITY, 0.0);
            for rel in [1e-2, 1e-3, 1e-4, 1e-5] {
                let a = second_difference_at(p, i, rel, f0, &f);
                let b = second_difference_at(p, i, rel / 2.0, f0, &f);
                let c = second_difference_at(p, i, rel / 4.0, f0, &f);
                let spread = rel_err(a, b, 1e-6).max(rel_err(a, c, 1e-6));
                if spread < best.0 {
                    best = (spread, a);
                }
                if spread <= 1e-3 {
                    break;
                }
            }
            best.1
        })
        .collect()
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

// ---- criteria ----

fn c1_loss_gradient() -> Outcome {
    let start = Instant::now();
    let mut rng = rng_for(1001, &[]);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (spec, p) = random_model(&mut rng);
        let x = random_batch(&mut rng, &spec, 4);
        let y = LabelVector::new((0..4).map(|_| rng.gen_range(0..2)).collect(), 2).unwrap();
        let (_, g) = loss_grad(&p, &spec, &x, &y, LossKind::CrossEntropy).unwrap();
        let fd = fd_gradient(&p, 1e-6, |q| cross_entropy(q, &spec, &x, &y));
        for (a, b) in g.values().iter().zip(&fd) {
            worst = worst.max(rel_err(*a, *b, 1e-3));
        }
    }
    let t = start.elapsed();
    outcome(worst <= 1e-5 && within(t, 30), format!("20 models, max rel err {worst:.2e} (tol 1e-5), {:.1}s (limit 30s)", t.as_secs_f64()))
}

fn c2_hessian_diagonal() -> Outcome {
    let start = Instant::now();
    let mut rng = rng_for(1002, &[]);
    let (mut worst, mut checked) = (0.0f64, 0usize);
    for _ in 0..10 {
        let (spec, p) = random_model(&mut rng);
        let x = random_batch(&mut rng, &spec, 1);
        let h = output_l2sq_diag_hessian(&p, &spec, &x, HessianMethod::GradFd).unwrap();
        let oracle = fd_second(&p, |q| l2sq(q, &spec, &x));
        for (a, b) in h.values().iter().zip(&oracle) {
            if b.abs() > 1e-6 {
                worst = worst.max((a - b).abs() / b.abs());
                checked += 1;
            }
        }
    }
    let t = start.elapsed();
    outcome(
        worst <= 1e-3 && checked > 0 && within(t, 60),
        format!("10 models, {checked} entries with |h|>1e-6, max rel err {worst:.2e} (tol 1e-3), {:.1}s (limit 60s)", t.as_secs_f64()),
    )
}

fn c3_scalar_closed_form() -> Outcome {
    let spec = ModelSpec::linear(1, 1, false);
    let p = ParamVector::new(vec![1.0], spec.segments().unwrap()).unwrap();
    let x = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
    let g: f64 = output_l2sq_grad(&p, &spec, &x).unwrap().values()[0];
    let h: f64 = output_l2sq_diag_hessian(&p, &spec, &x, HessianMethod::GradFd).unwrap().values()[0];
    let kappa = curvature(g, h);
    let omega = apie_importance(&p, &spec, &[x], HessianMethod::GradFd).unwrap().values[0];
    let want_kappa = 8.0 / 65f64.powf(1.5);
    let want_omega = ((1.0 + want_kappa).ln() + 1.0) * 8.0;
    let errs = [(g - 8.0).abs(), (h - 8.0).abs(), (kappa - want_kappa).abs(), (omega - want_omega).abs()];
    let worst = errs.iter().copied().fold(0.0, f64::max);
    outcome(
        worst <= 1e-9 && (combined_importance(g, kappa) - omega).abs() <= 1e-12,
        format!("g={g} h={h:.12} κ={kappa:.6e} Ω={omega:.10} (expect ≈8.1212), max err {worst:.1e} (tol 1e-9)"),
    )
}

fn small_sequence(mode: Mode) -> RunConfig {
    let mut cfg = RunConfig { mode, epochs: 3, n_importance: 32, ..Default::default() };
    cfg.tasks = SequenceSpec { pair_count: 100, ..Default::default() };
    cfg.tasks.truncate(3);
    cfg
}

fn c4_degenerate_equivalences() -> Outcome {
    let mut rng = rng_for(1004, &[]);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let (spec, p) = random_model(&mut rng);
        let samples: Vec<Tensor<f64>> = (0..8).map(|_| random_batch(&mut rng, &spec, 1)).collect();
        let mas = mas_importance(&p, &spec, &samples).unwrap();
        let off = apie_importance(&p, &spec, &samples, HessianMethod::Disabled).unwrap();
        for (a, b) in mas.values.iter().zip(&off.values) {
            worst = worst.max((a - b).abs());
        }
    }
    let fine = run_sequence(&small_sequence(Mode::Finetune)).unwrap();
    let mut identical = 0;
    for mode in Mode::ABLATION {
        let mut cfg = small_sequence(mode);
        cfg.scale_lambdas(0.0);
        let r = run_sequence(&cfg).unwrap();
        let same = r.final_params.values().iter().zip(fine.final_params.values()).all(|(a, b)| a.to_bits() == b.to_bits());
        identical += usize::from(same);
    }
    outcome(
        worst <= 1e-12 && identical == 4,
        format!("curvature off: max |apie-mas| {worst:.1e} (tol 1e-12); λ=0 bit-identical to finetune in {identical}/4 regularized modes"),
    )
}

fn c5_peak_weight_algebra() -> Outcome {
    let layout = |n: usize| vec![Segment { name: "w".into(), offset: 0, len: n, group: LambdaGroup::Head }];
    let hist = |tasks: Vec<Vec<f64>>| {
        let n = tasks[0].len();
        let imps = tasks.into_iter().enumerate().map(|(t, v)| ImportanceVector::new(v, t, Estimator::Mas, 1).unwrap()).collect();
        ImportanceHistory::from_parts(imps, Some(ParamVector::new(vec![0.0; n], layout(n)).unwrap())).unwrap()
    };
    let pair = peak_weight(&hist(vec![vec![4.0], vec![2.0]]), 0.5, 0.5).unwrap().values[0];
    let mut rng = rng_for(1005, &[]);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let k = rng.gen_range(1..=5);
        let h = hist((0..k).map(|_| (0..6).map(|_| rng.gen_range(0.0..10.0)).collect()).collect());
        let pw = peak_weight(&h, 0.0, k as f64).unwrap();
        let sum = accumulate_mas(&h).unwrap();
        for (a, b) in pw.values.iter().zip(&sum.values) {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    outcome(
        pair == 3.5 && worst <= 1e-12,
        format!("history (4,2), α=β=0.5 → {pair} (expect 3.5); α=0, β=T vs accumulate_mas max rel diff {worst:.1e}"),
    )
}

fn c6_penalty_gradient() -> Outcome {
    let mut rng = rng_for(1006, &[]);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let (theta, history, cfg) = random_penalty_case(&mut rng);
        let g = penalty_grad(&theta, &history, &cfg).unwrap();
        let fd = fd_gradient(&theta, 1e-2, |q| penalty(q, &history, &cfg).unwrap());
        for (a, b) in g.values().iter().zip(&fd) {
            worst = worst.max(rel_err(*a, *b, 1e-3));
        }
    }
    outcome(worst <= 1e-8, format!("10 configurations, max rel err {worst:.2e} (tol 1e-8)"))
}

/// The sequence experiment shared by the forgetting and ablation criteria:
/// the default sequence and protocol with λ at three quarters of 1.2/1.0.
/// At the full values the summed-importance modes leave plain SGD's stable
/// range (lr · 2λΩ > 2 on a few conv biases) during the last task.
fn sequence_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.scale_lambdas(0.75);
    cfg
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn c7_forgetting(c: &Comparison, elapsed: Duration) -> Outcome {
    let mut drops = 0;
    let mut wins = 0;
    let mut lines = Vec::new();
    for &s in &SEEDS {
        let fine = c.get(s, Mode::Finetune).unwrap();
        let full = c.get(s, Mode::ApieFull).unwrap();
        let drop = fine.matrix.get(0, 0).unwrap() - fine.finals[0];
        let m = |r: &apie::harness::ModeRun| r.finals[..3].iter().sum::<f64>() / 3.0;
        drops += usize::from(drop >= 0.10);
        wins += usize::from(m(full) > m(fine));
        lines.push(format!(
            "seed {s}: finetune drop0={drop:.3} mean0-2 finetune={:.3} apie-full={:.3} last-task finetune={:.3} apie-full={:.3}",
            m(fine),
            m(full),
            fine.finals[3],
            full.finals[3]
        ));
    }
    for l in &lines {
        println!("    {l}");
    }
    outcome(
        drops >= 4 && wins >= 4 && within(elapsed, 20 * 60),
        format!("finetune drop ≥0.10 on {drops}/5 seeds (need 4); apie-full beats finetune on tasks 0-2 on {wins}/5 (need 4); suite {:.0}s (limit 1200s)", elapsed.as_secs_f64()),
    )
}

fn c8_ablation(c: &Comparison) -> Outcome {
    let table = AblationTable::from_comparison(c, &Mode::ABLATION).unwrap();
    let csv = table.to_csv();
    let rows = csv.lines().count() - 1;
    let mut wins = 0;
    for &s in &SEEDS {
        let full = c.get(s, Mode::ApieFull).unwrap().retained();
        let mas = c.get(s, Mode::Mas).unwrap().retained();
        println!("    seed {s}: retained apie-full={full:.3} mas={mas:.3}");
        wins += usize::from(full >= mas);
    }
    for line in csv.lines() {
        println!("    | {line}");
    }
    outcome(wins >= 3 && rows == 4, format!("apie-full retained ≥ mas on {wins}/5 seeds (need 3); ablation table has {rows} mode rows (need 4)"))
}

fn read_csvs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn c9_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let root = tmp.path().join(name);
        let mut cfg = small_sequence(Mode::Finetune);
        cfg.output_dir = Some(root.clone());
        apie::harness::run_ablation(&cfg, &[7, 8]).unwrap();
        for mode in [Mode::Finetune, Mode::Reference] {
            let mut c = small_sequence(mode);
            c.output_dir = Some(root.join(mode.name()));
            run_sequence(&c).unwrap();
        }
        read_csvs(&root)
    };
    let (a, b) = (run("a"), run("b"));
    let same = a == b && !a.is_empty();
    outcome(same, format!("{} CSV files compared across two invocations, byte-identical: {same}", a.len()))
}

fn half_flat_cover(rng: &mut impl Rng) -> GrayImage {
    let px = (0..256)
        .map(|i| if (i % 16) < 8 { 128 } else { rng.gen_range(60..=196) as u8 })
        .collect();
    GrayImage::new(16, 16, px).unwrap()
}

fn c10_task_invariants() -> Outcome {
    let spec = SequenceSpec::default();
    let covers = generate_covers_in_range(200, spec.size, 10, spec.texture_range).unwrap();
    let mut worst = 0.0f64;
    let target = 0.4 * 256.0;
    for scheme in spec.schemes.iter().cloned().chain([EmbedScheme::new(EmbedKind::LsbReplace, 0.4, 9)]) {
        for c in &covers {
            let (s, r) = embed_with_report(c, &scheme);
            let changed = c.hamming(&s) + r.clamped;
            worst = worst.max((changed as f64 - target).abs() / target);
        }
    }
    let mut rng = rng_for(1010, &[]);
    let (mut noisy, mut total) = (0usize, 0usize);
    for i in 0..50 {
        let c = half_flat_cover(&mut rng);
        let s = apie::tasks::embed(&c, &EmbedScheme::new(EmbedKind::Pm1Adaptive, 0.4, i));
        for p in 0..256 {
            if c.pixels()[p] != s.pixels()[p] {
                total += 1;
                noisy += usize::from(p % 16 >= 8);
            }
        }
    }
    let share = noisy as f64 / total as f64;
    let splits_ok = [10usize, 100, 2000].iter().all(|&n| {
        let s = Splits::paired(n).unwrap();
        let (tr, va, te) = (s.train.len() / 2, s.val.len() / 2, s.test.len() / 2);
        tr == n * 3 / 5 && va == n / 5 && te == n - tr - va && (n % 5 != 0 || (tr * 5 == 3 * n && va * 5 == n && te * 5 == n))
    });
    outcome(
        worst <= 0.10 && share >= 0.70 && splits_ok,
        format!("payload deviation max {:.1}% (tol 10%); pm1-adaptive noisy-half share {:.1}% (need 70%); 60/20/20 paired splits exact: {splits_ok}", worst * 100.0, share * 100.0),
    )
}

fn report(n: usize, name: &str, o: &Outcome, failures: &mut usize) {
    println!("criterion {n:>2} [{name}]: {} - {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    *failures += usize::from(!o.passed);
}

fn main() {
    let mut failures = 0;
    report(1, "loss gradient vs finite differences", &c1_loss_gradient(), &mut failures);
    report(2, "hessian diagonal vs second differences", &c2_hessian_diagonal(), &mut failures);
    report(3, "scalar closed form", &c3_scalar_closed_form(), &mut failures);
    report(4, "degenerate-mode equivalences", &c4_degenerate_equivalences(), &mut failures);
    report(5, "peak-weight algebra", &c5_peak_weight_algebra(), &mut failures);
    report(6, "penalty gradient vs finite differences", &c6_penalty_gradient(), &mut failures);

    let start = Instant::now();
    let modes = [Mode::Finetune, Mode::Mas, Mode::ApieCurvatureOnly, Mode::ApiePeakweightOnly, Mode::ApieFull];
    match run_comparison(&sequence_config(), &SEEDS, &modes) {
        Ok(comparison) => {
            let elapsed = start.elapsed();
            report(7, "forgetting reproduced and mitigated", &c7_forgetting(&comparison, elapsed), &mut failures);
            report(8, "ablation", &c8_ablation(&comparison), &mut failures);
        }
        Err(e) => {
            let failed = outcome(false, format!("sequence comparison failed: {e}"));
            report(7, "forgetting reproduced and mitigated", &failed, &mut failures);
            report(8, "ablation", &failed, &mut failures);
        }
    }

    report(9, "byte-identical reruns", &c9_determinism(), &mut failures);
    report(10, "task generation invariants", &c10_task_invariants(), &mut failures);
    println!("acceptance: {} of 10 criteria passed", 10 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
