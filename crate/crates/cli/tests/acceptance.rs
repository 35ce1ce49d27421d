//! Acceptance suite: one PASS/FAIL line per criterion, written straight to
//! stdout so it shows up without `--nocapture`. The test fails if any
//! criterion fails.

use std::io::Write;
use std::time::Instant;

use bundleforge::corpus::{Dataset, InteractionMatrix, Scenario, SplitRole};
use bundleforge::diet::{
    logits_distill_loss, student_gradcheck, student_step_loss, teacher_batch, validation_cases, DistillMode,
    FusionVariant, KdDirection, StudentInputs, StudentState, TeacherTargets, TrainConfig,
};
use bundleforge::eval::{ndcg_at_k, recall_at_k, Scorer};
use bundleforge::feedback::FeedbackTable;
use bundleforge::numerics::gradcheck::op_suite;
use bundleforge::numerics::{SplitMix64, Tape, Tensor};
use bundleforge_cli::{pipeline, run, Command, ExperimentConfig};

const SEEDS: [u64; 5] = [2024, 2025, 2026, 2027, 2028];
const K: usize = 20;

struct Outcome {
    pass: bool,
    detail: String,
}

fn emit(n: usize, name: &str, o: &Outcome, secs: f64) {
    let line = format!(
        "criterion {n} [{name}]: {} ({secs:.1}s) {}\n",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b) / b
}

// ---------------------------------------------------------------- 1

fn gradients() -> Outcome {
    let ops = op_suite(20, 11).unwrap();
    let worst_op = ops
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .unwrap();
    let ops_ok = ops.iter().all(|o| o.instances >= 20 && o.max_rel_error < 1e-3);
    let student = student_gradcheck(20, 12).unwrap();
    Outcome {
        pass: ops_ok && student.max_rel_error < 1e-3,
        detail: format!(
            "{} ops x 20 instances, worst {} {:.2e}; fused student x 20, {} entries, worst {:.2e}",
            ops.len(),
            worst_op.op,
            worst_op.max_rel_error,
            student.checked,
            student.max_rel_error
        ),
    }
}

// ---------------------------------------------------------------- 2

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn brute_dcg(ranking: &[usize], targets: &[usize], k: usize) -> f64 {
    let mut dcg = 0.0;
    for &t in targets {
        if let Some(p) = ranking.iter().position(|&i| i == t) {
            if p < k {
                dcg += 1.0 / ((p + 2) as f64).log2();
            }
        }
    }
    dcg
}

fn metrics() -> Outcome {
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    for n in 1..=6usize {
        let perms = permutations(n);
        for mask in 1u32..(1 << n) {
            let targets: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            for k in 1..=n + 1 {
                // Ideal DCG as the best DCG over every possible ranking.
                let ideal = perms.iter().map(|p| brute_dcg(p, &targets, k)).fold(0.0, f64::max);
                for p in &perms {
                    let hits = targets.iter().filter(|t| p.iter().position(|i| i == *t).unwrap() < k).count();
                    let want_recall = hits as f64 / targets.len() as f64;
                    let want_ndcg = brute_dcg(p, &targets, k) / ideal;
                    let r = recall_at_k(p, &targets, k).unwrap();
                    let g = ndcg_at_k(p, &targets, k).unwrap();
                    worst = worst.max((r - want_recall).abs()).max((g - want_ndcg).abs());
                    checked += 1;
                }
            }
        }
    }
    Outcome {
        pass: worst < 1e-12,
        detail: format!("{checked} (ranking, targets, K) triples, max deviation {worst:.1e}"),
    }
}

// ---------------------------------------------------------------- 3

fn plain_kl(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    let soft = |l: &[f64]| {
        let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect::<Vec<_>>()
    };
    let (p, q) = (soft(p_logits), soft(q_logits));
    p.iter().zip(&q).map(|(a, b)| if *a > 0.0 { a * (a / b).ln() } else { 0.0 }).sum()
}

fn tiny_world(seed: u64) -> (ExperimentConfig, Dataset, FeedbackTable) {
    let mut cfg = ExperimentConfig::default();
    cfg.set("seed", &seed.to_string()).unwrap();
    for (k, v) in [
        ("n_items", "120"),
        ("n_users", "300"),
        ("n_bundles", "240"),
        ("feedback_dim", "8"),
        ("feedback_epochs", "2"),
        ("dim", "12"),
        ("epochs", "3"),
        ("teacher_epochs", "3"),
        ("batch_size", "32"),
    ] {
        cfg.set(k, v).unwrap();
    }
    let data = pipeline::synth(&cfg).unwrap();
    let fb = pipeline::feedback(&cfg, &data).unwrap();
    (cfg, data, fb)
}

fn distillation() -> Outcome {
    let mut rng = SplitMix64::new(3);
    let mut zero_worst = 0.0f64;
    let mut kl_worst = 0.0f64;
    for _ in 0..20 {
        let (rows, cols) = (1 + rng.below(4), 2 + rng.below(30));
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.uniform(-6.0, 6.0)).collect();
        let other: Vec<f64> = (0..rows * cols).map(|_| rng.uniform(-6.0, 6.0)).collect();
        let t = Tensor::new(rows, cols, data.clone()).unwrap();
        for temp in [1.0, 2.0, 3.0] {
            for dir in [KdDirection::TeacherToStudent, KdDirection::StudentToTeacher] {
                let tape = Tape::new();
                let s = tape.leaf(t.clone());
                let l = logits_distill_loss(&s, &t, temp, dir).unwrap().item().unwrap();
                zero_worst = zero_worst.max(l.abs());
            }
        }
        let tape = Tape::new();
        let s = tape.leaf(Tensor::new(rows, cols, other.clone()).unwrap());
        let got = logits_distill_loss(&s, &t, 1.0, KdDirection::TeacherToStudent)
            .unwrap()
            .item()
            .unwrap();
        let want: f64 = (0..rows)
            .map(|r| plain_kl(&data[r * cols..(r + 1) * cols], &other[r * cols..(r + 1) * cols]))
            .sum::<f64>()
            / rows as f64;
        kl_worst = kl_worst.max((got - want).abs());
    }

    // Teacher bound as trainable on the student's tape still gets nothing.
    let (cfg, data, fb) = tiny_world(5);
    let inputs = StudentInputs::new(&data.corpus, &fb).unwrap();
    let split = pipeline::split(&cfg, &data).unwrap();
    let (teacher, _) = pipeline::teacher(&cfg, &data, &split).unwrap();
    let cases: Vec<_> = validation_cases(&data.bundles, &split, 1).into_iter().take(16).collect();
    let queries: Vec<&[usize]> = cases.iter().map(|c| c.query.as_slice()).collect();
    let mut teacher_grad_max = 0.0f32;
    let mut student_grads = usize::MAX;
    for mode in [DistillMode::Logits, DistillMode::Feature, DistillMode::Both] {
        let tcfg = TrainConfig { distill: mode, ..cfg.train.clone() };
        let student = StudentState::init(
            data.n_items(),
            inputs.text.cols(),
            inputs.media.cols(),
            inputs.feedback.cols(),
            &tcfg,
            &mut SplitMix64::new(9),
        )
        .unwrap();
        let tape = Tape::new();
        let t = teacher_batch(&tape, &teacher.spec, &teacher.params, &queries, true).unwrap();
        let targets = TeacherTargets {
            logits: t.logits.value(),
            bundles: t.bundles.value(),
        };
        let step =
            student_step_loss(&tape, &student.spec, &student.params, &inputs, &cases, Some(&targets), &tcfg).unwrap();
        tape.backward(step.total).unwrap();
        let grads = tape.param_grads();
        for (name, g) in &grads {
            if name.starts_with("teacher.") {
                teacher_grad_max = g.iter().fold(teacher_grad_max, |m, x| m.max(x.abs()));
            }
        }
        student_grads = student_grads.min(grads.iter().filter(|(n, _)| n.starts_with("student.")).count());
    }
    // End to end: distilled training leaves the teacher bit-for-bit intact.
    let before = teacher.params.clone();
    let inputs32 = StudentInputs::new(&data.corpus, &fb).unwrap();
    pipeline::student(&cfg, &data, &inputs32, &split, Some(&teacher), DistillMode::Both, FusionVariant::Full).unwrap();
    let untouched = teacher.params == before;

    Outcome {
        pass: zero_worst == 0.0 && kl_worst < 1e-6 && teacher_grad_max == 0.0 && student_grads > 0 && untouched,
        detail: format!(
            "identical logits max |L_d| {zero_worst:.1e} over T in 1..3; T=1 vs plain KL {kl_worst:.1e}; \
             max teacher grad {teacher_grad_max:e}, teacher unchanged by training: {untouched}"
        ),
    }
}

// ---------------------------------------------------------------- 4

fn logits_bits(scorer: &dyn Scorer, queries: &[Vec<usize>]) -> Vec<u32> {
    queries
        .iter()
        .flat_map(|q| scorer.score(q).unwrap().into_iter().map(f32::to_bits))
        .collect()
}

fn popularity_free() -> Outcome {
    let (cfg, data, fb) = tiny_world(6);
    let split = pipeline::split(&cfg, &data).unwrap();
    let queries: Vec<Vec<usize>> = split
        .indices(SplitRole::Test)
        .iter()
        .map(|&b| data.bundles.get(b).items[..1].to_vec())
        .collect();

    // Teacher trained against a corpus whose user-item matrix is replaced.
    let mut rng = SplitMix64::new(77);
    let pairs: Vec<(usize, usize)> = (0..4000).map(|_| (rng.below(50), rng.below(data.n_items()))).collect();
    let swapped = Dataset {
        interactions: InteractionMatrix::from_pairs(50, data.n_items(), &pairs).unwrap(),
        ..data.clone()
    };
    let (t_a, _) = pipeline::teacher(&cfg, &data, &split).unwrap();
    let (t_b, _) = pipeline::teacher(&cfg, &swapped, &split).unwrap();
    let teacher_same = logits_bits(&t_a.scorer().unwrap(), &queries) == logits_bits(&t_b.scorer().unwrap(), &queries);

    // Student content path under an arbitrary feedback table.
    let inputs = StudentInputs::new(&data.corpus, &fb).unwrap();
    let (student, _) =
        pipeline::student(&cfg, &data, &inputs, &split, Some(&t_a), DistillMode::Logits, FusionVariant::Full).unwrap();
    let table = fb.table();
    let noise: Vec<f32> = (0..table.len()).map(|_| rng.uniform(-50.0, 50.0) as f32).collect();
    let other = FeedbackTable::new(Tensor::new(table.rows(), table.cols(), noise).unwrap());
    let other_inputs = StudentInputs::new(&data.corpus, &other).unwrap();
    let (main_a, content_a) = student.scorers(&inputs).unwrap();
    let (main_b, content_b) = student.scorers(&other_inputs).unwrap();
    let content_same = logits_bits(&content_a, &queries) == logits_bits(&content_b, &queries);
    // Sanity: the fused path does read feedback.
    let main_differs = logits_bits(&main_a, &queries) != logits_bits(&main_b, &queries);

    Outcome {
        pass: teacher_same && content_same && main_differs,
        detail: format!(
            "{} queries: teacher bitwise equal {teacher_same}, content path bitwise equal {content_same}, \
             fused path changes {main_differs}",
            queries.len()
        ),
    }
}

// ---------------------------------------------------------------- 5-7

struct SeedRun {
    overall: [f64; 2],
    pop2lt: [f64; 2],
    /// Pop-to-LT recall of WO_BI, WO_MM, WO_UI.
    ablation: [f64; 3],
    /// (backbone, diet) Pop-to-LT recall and case count per sweep ratio.
    sweep: Vec<(f64, f64, usize)>,
}

fn recall_of(cfg: &ExperimentConfig, data: &Dataset, split: &bundleforge::corpus::SplitAssignment, s: &dyn Scorer, sc: Scenario) -> f64 {
    let r = pipeline::evaluate(cfg, data, split, s, &[sc]).unwrap();
    r[0].recall(K).unwrap_or(f64::NAN)
}

fn seed_run(seed: u64) -> SeedRun {
    let mut cfg = ExperimentConfig::default();
    cfg.set("seed", &seed.to_string()).unwrap();
    let data = pipeline::synth(&cfg).unwrap();
    let fb = pipeline::feedback(&cfg, &data).unwrap();
    let inputs = StudentInputs::new(&data.corpus, &fb).unwrap();
    let split = pipeline::split(&cfg, &data).unwrap();
    let (teacher, _) = pipeline::teacher(&cfg, &data, &split).unwrap();
    let train = |distill, fusion| {
        let t = (distill != DistillMode::None).then_some(&teacher);
        let (s, _) = pipeline::student(&cfg, &data, &inputs, &split, t, distill, fusion).unwrap();
        s.scorers(&inputs).unwrap().0
    };
    let backbone = train(DistillMode::None, FusionVariant::Full);
    let diet = train(DistillMode::Logits, FusionVariant::Full);
    let ablation = [FusionVariant::WoBi, FusionVariant::WoMm, FusionVariant::WoUi]
        .map(|f| recall_of(&cfg, &data, &split, &train(DistillMode::None, f), Scenario::PopToLt));
    let sweep = pipeline::sweep(&cfg, &data, &split, &backbone, &diet)
        .unwrap()
        .into_iter()
        .map(|p| (p.backbone.recall(K).unwrap_or(f64::NAN), p.diet.recall(K).unwrap_or(f64::NAN), p.backbone.count))
        .collect();
    SeedRun {
        overall: [&backbone, &diet].map(|s| recall_of(&cfg, &data, &split, s, Scenario::Overall)),
        pop2lt: [&backbone, &diet].map(|s| recall_of(&cfg, &data, &split, s, Scenario::PopToLt)),
        ablation,
        sweep,
    }
}

fn pop_to_lt(runs: &[SeedRun]) -> Outcome {
    let none = median(runs.iter().map(|r| r.pop2lt[0]).collect());
    let logits = median(runs.iter().map(|r| r.pop2lt[1]).collect());
    let o_none = median(runs.iter().map(|r| r.overall[0]).collect());
    let o_logits = median(runs.iter().map(|r| r.overall[1]).collect());
    let (gain, drift) = (rel(logits, none), rel(o_logits, o_none));
    Outcome {
        pass: gain >= 0.05 && drift > -0.02,
        detail: format!(
            "median pop2lt R@20 none {none:.4} -> logits {logits:.4} ({:+.1}%), overall {o_none:.4} -> {o_logits:.4} ({:+.1}%)",
            gain * 100.0,
            drift * 100.0
        ),
    }
}

fn ablation(runs: &[SeedRun]) -> Outcome {
    let full: Vec<f64> = runs.iter().map(|r| r.pop2lt[0]).collect();
    let below = |i: usize| runs.iter().zip(&full).filter(|(r, f)| r.ablation[i] < **f).count();
    let (bi, mm) = (below(0), below(1));
    let ui = median(runs.iter().zip(&full).map(|(r, f)| rel(r.ablation[2], *f)).collect());
    Outcome {
        pass: bi >= 4 && mm >= 4 && ui >= -0.02,
        detail: format!(
            "seeds with lower pop2lt R@20 than full: wo_bi {bi}/5, wo_mm {mm}/5; wo_ui median change {:+.1}%",
            ui * 100.0
        ),
    }
}

fn sweep(cfg: &ExperimentConfig, runs: &[SeedRun]) -> Outcome {
    let ratios = &cfg.sweep_ratios;
    let med = |i: usize, j: usize| median(runs.iter().map(|r| if j == 0 { r.sweep[i].0 } else { r.sweep[i].1 }).collect());
    let backbone: Vec<f64> = (0..ratios.len()).map(|i| med(i, 0)).collect();
    let diet: Vec<f64> = (0..ratios.len()).map(|i| med(i, 1)).collect();
    let monotone = backbone.windows(2).all(|w| w[1] <= w[0]);
    let improvement: Vec<f64> = backbone.iter().zip(&diet).map(|(b, d)| rel(*d, *b)).collect();
    let (first, last) = (improvement[0], improvement[ratios.len() - 1]);
    let cases: Vec<usize> = (0..ratios.len()).map(|i| runs.iter().map(|r| r.sweep[i].2).min().unwrap()).collect();
    let mut detail = String::from("ratio:backbone/diet/improvement(min cases)");
    for i in 0..ratios.len() {
        detail.push_str(&format!(
            " {}:{:.4}/{:.4}/{:+.1}%({})",
            ratios[i],
            backbone[i],
            diet[i],
            improvement[i] * 100.0,
            cases[i]
        ));
    }
    detail.push_str(&format!("; backbone non-increasing {monotone}, improvement at 0.1 >= at 0.5 {}", last >= first));
    Outcome {
        pass: monotone && last >= first,
        detail,
    }
}

// ---------------------------------------------------------------- 8

fn determinism() -> Outcome {
    let run_once = || {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.set("out", dir.path().to_str().unwrap()).unwrap();
        cfg.set("distill", "logits").unwrap();
        for cmd in [Command::Synth, Command::Feedback, Command::TrainTeacher, Command::Train, Command::Eval] {
            run(cmd, &cfg).unwrap();
        }
        std::fs::read(dir.path().join("eval_logits.json")).unwrap()
    };
    let (a, b) = (run_once(), run_once());
    Outcome {
        pass: a == b,
        detail: format!("two full pipeline runs, eval report {} bytes, identical {}", a.len(), a == b),
    }
}

#[test]
fn acceptance() {
    let mut failed = Vec::new();
    let mut check = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        emit(n, name, &o, t.elapsed().as_secs_f64());
        if !o.pass {
            failed.push(n);
        }
    };
    check(1, "gradient correctness", &mut gradients);
    check(2, "metric oracle", &mut metrics);
    check(3, "distillation identities", &mut distillation);
    check(4, "popularity-free paths", &mut popularity_free);

    let t = Instant::now();
    let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| seed_run(s)).collect();
    let shared = t.elapsed().as_secs_f64();
    let cfg = ExperimentConfig::default();
    check(5, "pop-to-lt improvement", &mut || pop_to_lt(&runs));
    check(6, "fusion ablation", &mut || ablation(&runs));
    check(7, "popularity sweep", &mut || sweep(&cfg, &runs));
    let _ = writeln!(std::io::stdout(), "criteria 5-7 share {} seed runs ({shared:.1}s)", SEEDS.len());
    check(8, "determinism", &mut determinism);

    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
