//! Acceptance suite. Every criterion runs even when an earlier one fails;
//! each prints one PASS/FAIL line and the test fails if any criterion does.

mod oracles;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vshadow::alignkit::{
    disfluency_profile, dtw, forward_sum, forward_sum_with_grad, mas, Metric, ScoreMatrix,
    ThresholdRule, DTW_MOVES, MAS_MOVES,
};
use vshadow::data::{
    feature_path, generate_synthetic_triplets, load_manifest, read_feature_container, FeatureKind,
    FeatureSequence, Role, Split, SyntheticConfig,
};
use vshadow::eval::{edit_counts, speech_bert_score};
use vshadow::features::EmbedderKind;
use vshadow::pipeline::{
    self, checkpoint_path, EvalFiles, EvalSource, PipelineConfig, TrainSummary, TrainTarget,
};
use vshadow::s2s::{load_checkpoint, smoothed, ParamGroup, Phase};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Written straight to stderr so the lines show up without `--nocapture`.
fn report(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

fn run_criterion(index: usize, name: &str, f: impl FnOnce() -> Check) -> bool {
    let started = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let secs = started.elapsed().as_secs_f64();
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d.as_str()),
        Err(d) => ("FAIL", d.as_str()),
    };
    report(&format!("acceptance {tag} [{index}] {name} ({secs:.1}s): {detail}"));
    outcome.is_ok()
}

fn dp_kernel_oracles() -> Check {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let n = 150;
    for k in 0..n {
        let (r, c) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
        let cost = oracles::random_matrix(&mut rng, r, c, 0.0, 3.0);
        let path = dtw(&ScoreMatrix::cost(cost.clone()).unwrap()).unwrap();
        let best = oracles::dtw_brute(&cost);
        ensure(path.total_score == best, || {
            format!("dtw instance {k} ({r}x{c}): {} vs exhaustive {best}", path.total_score)
        })?;
        ensure(path.is_valid(r, c, &DTW_MOVES), || format!("dtw instance {k}: invalid path"))?;
    }
    for k in 0..n {
        let src = rng.gen_range(1..=4);
        let tgt = rng.gen_range(src..=6);
        let ll = oracles::random_matrix(&mut rng, src, tgt, -6.0, 0.0);
        let path = mas(&ScoreMatrix::log_likelihood(ll.clone()).unwrap()).unwrap();
        let best = oracles::mas_brute(&ll);
        ensure(path.total_score == best, || {
            format!("mas instance {k} ({src}x{tgt}): {} vs exhaustive {best}", path.total_score)
        })?;
        ensure(path.is_valid(src, tgt, &MAS_MOVES), || format!("mas instance {k}: invalid path"))?;
    }
    let mut worst = 0f64;
    for k in 0..n {
        let src = rng.gen_range(1..=4);
        let tgt = rng.gen_range(src..=6);
        let raw = oracles::random_matrix(&mut rng, src, tgt, -4.0, 4.0);
        let got = forward_sum(&ScoreMatrix::log_likelihood(raw.clone()).unwrap()).unwrap();
        let want = oracles::forward_sum_brute(&raw);
        let err = (got - want).abs();
        worst = worst.max(err);
        ensure(err <= 1e-6, || format!("forward_sum instance {k}: {got} vs {want}"))?;
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "{n} dtw, {n} mas exact; {n} forward_sum max |err| {worst:.2e}"
    ))
}

fn forward_sum_gradient() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let h = 1e-5;
    let mut worst = 0f64;
    for k in 0..20 {
        let raw = oracles::random_matrix(&mut rng, 3, 5, -3.0, 3.0);
        let (_, grad) = forward_sum_with_grad(&ScoreMatrix::log_likelihood(raw.clone()).unwrap()).unwrap();
        let f = |m: &Array2<f64>| forward_sum(&ScoreMatrix::log_likelihood(m.clone()).unwrap()).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let mut plus = raw.clone();
                plus[[i, j]] += h;
                let mut minus = raw.clone();
                minus[[i, j]] -= h;
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                let g = grad[[i, j]];
                let rel = (g - fd).abs() / fd.abs().max(g.abs()).max(1e-8);
                worst = worst.max(rel);
                ensure(rel <= 1e-3, || {
                    format!("instance {k} entry ({i},{j}): analytic {g} vs central difference {fd}")
                })?;
            }
        }
    }
    Ok(format!("20 instances of 3x5, max relative error {worst:.2e}"))
}

fn metric_oracles() -> Check {
    const SYMBOLS: [&str; 3] = ["a", "b", "c"];
    let alphabet = [0u8, 1, 2];
    let strings = oracles::all_strings(&alphabet, 6);
    let tokens = |s: &[u8]| s.iter().map(|&c| SYMBOLS[c as usize]).collect::<Vec<_>>();
    let mut pairs = 0usize;
    for hyp in &strings {
        let dist = oracles::edit_distances_bfs(hyp, &alphabet, 6);
        let h = tokens(hyp);
        for reference in &strings {
            let counts = edit_counts(&h, &tokens(reference));
            ensure(counts.errors() == dist[reference], || {
                format!(
                    "edit_counts({hyp:?}, {reference:?}) = {} but the minimum is {}",
                    counts.errors(),
                    dist[reference]
                )
            })?;
            pairs += 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0f64;
    for k in 0..50 {
        let dim = rng.gen_range(1..=8);
        let mat = |rng: &mut ChaCha8Rng| {
            let rows = rng.gen_range(1..=9);
            Array2::from_shape_fn((rows, dim), |_| {
                if rng.gen_bool(0.1) {
                    0.0
                } else {
                    rng.gen_range(-2.0f32..2.0)
                }
            })
        };
        let (a, b) = (mat(&mut rng), mat(&mut rng));
        let seq = |m: &Array2<f32>| FeatureSequence::new(m.clone(), 20.0, FeatureKind::Other).unwrap();
        let got = speech_bert_score(&seq(&a), &seq(&b)).unwrap();
        let want = oracles::sbs_nested(&a, &b);
        worst = worst.max((got - want).abs());
        ensure((got - want).abs() <= 1e-6, || format!("pair {k}: {got} vs nested loop {want}"))?;
    }

    let mut self_worst = 0f64;
    for _ in 0..20 {
        let rows = rng.gen_range(1..=12);
        let x = Array2::from_shape_fn((rows, 16), |_| rng.gen_range(-3.0f32..3.0));
        let x = FeatureSequence::new(x, 20.0, FeatureKind::Other).unwrap();
        let s = speech_bert_score(&x, &x).unwrap();
        self_worst = self_worst.max((s - 1.0).abs());
    }
    ensure(self_worst <= 1e-6, || format!("SBS(x, x) off by {self_worst}"))?;
    Ok(format!(
        "{pairs} token-list pairs exact; 50 SBS pairs max |err| {worst:.2e}; |SBS(x,x) - 1| <= {self_worst:.2e}"
    ))
}

/// Everything one full pipeline run leaves behind that the criteria look at.
struct FullRun {
    cfg: PipelineConfig,
    secs: f64,
    trained: TrainSummary,
    trained_eval: EvalFiles,
    untrained_eval: EvalFiles,
    references: EvalFiles,
}

fn full_run(root: &Path) -> FullRun {
    let started = Instant::now();
    let cfg = PipelineConfig::desk(root, 7);
    pipeline::gen_synthetic(&cfg).unwrap();
    let kinds = [EmbedderKind::Mel, EmbedderKind::S3r, EmbedderKind::PpgBnf];
    pipeline::extract(&cfg, &Role::ALL, &kinds, false).unwrap();

    let trained = pipeline::train(&cfg, TrainTarget::Phase(Phase::OneStep)).unwrap();
    pipeline::convert(&cfg, &trained.checkpoint, "trained", Split::Test).unwrap();

    // same architecture and statistics, no gradient steps
    let mut blank = cfg.clone();
    blank.train.steps = 0;
    blank.paths.checkpoint_dir = root.join("checkpoints_untrained");
    let untrained = pipeline::train(&blank, TrainTarget::Phase(Phase::OneStep)).unwrap();
    pipeline::convert(&cfg, &untrained.checkpoint, "untrained", Split::Test).unwrap();

    let trained_eval = pipeline::evaluate(&cfg, &EvalSource::System("trained".into())).unwrap();
    let untrained_eval = pipeline::evaluate(&cfg, &EvalSource::System("untrained".into())).unwrap();
    let references = pipeline::evaluate(&cfg, &EvalSource::References).unwrap();
    FullRun {
        cfg,
        secs: started.elapsed().as_secs_f64(),
        trained,
        trained_eval,
        untrained_eval,
        references,
    }
}

fn self_evaluation(run: &FullRun) -> Check {
    let report = &run.references.report;
    ensure(!report.rows.is_empty(), || "no reference rows".into())?;
    ensure(!report.has_failures(), || format!("failures: {:?} {:?}", report.missing, report.failed))?;
    for row in &report.rows {
        ensure(row.s1_wer == 0.0 && row.s1_cer == 0.0, || {
            format!("{}: S1-WER {} S1-CER {}", row.id, row.s1_wer, row.s1_cer)
        })?;
    }
    Ok(format!("{} utterances, all S1-WER = S1-CER = 0", report.rows.len()))
}

fn freezing(run: &FullRun) -> Check {
    let mut cfg = run.cfg.clone();
    cfg.train.steps = 20;
    let fingerprints = |phase: Phase| {
        let path = pipeline::train(&cfg, TrainTarget::Phase(phase)).unwrap().checkpoint;
        let ckpt = load_checkpoint(&path).unwrap();
        ckpt.verify().unwrap();
        ckpt.fingerprints()
    };
    let mut lines = Vec::new();
    for (stage1, stage2, kept, moved) in [
        (Phase::DecFtStage1, Phase::DecFtStage2, ParamGroup::Encoder, ParamGroup::Decoder),
        (Phase::EncFtStage1, Phase::EncFtStage2, ParamGroup::Decoder, ParamGroup::Encoder),
    ] {
        let before = fingerprints(stage1);
        let after = fingerprints(stage2);
        ensure(before[&kept] == after[&kept], || {
            format!("{stage2} changed the {kept} ({} -> {})", &before[&kept][..12], &after[&kept][..12])
        })?;
        ensure(before[&moved] != after[&moved], || format!("{stage2} did not update the {moved}"))?;
        lines.push(format!("{stage2} keeps {kept} {}", &after[&kept][..12]));
    }
    assert!(checkpoint_path(&cfg, "enc_ft_stage2").is_file());
    Ok(lines.join("; "))
}

fn step_losses(log: &Path) -> Vec<f64> {
    std::fs::read_to_string(log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v["record"] == "step")
        .map(|v| v["recon"].as_f64().unwrap())
        .collect()
}

fn near_diagonal_mass(src: usize, tgt: usize, steps: &[(usize, usize)]) -> f64 {
    let inside = steps
        .iter()
        .filter(|&&(i, j)| (i as f64 * tgt as f64 / src as f64 - j as f64).abs() <= 3.0)
        .count();
    inside as f64 / steps.len() as f64
}

fn toy_training(run: &FullRun) -> Check {
    ensure(run.secs < 15.0 * 60.0, || format!("pipeline took {:.0}s", run.secs))?;
    let losses = step_losses(&run.trained.log);
    ensure(!losses.is_empty() && losses.len() <= 200, || format!("{} steps logged", losses.len()))?;
    let window = 10;
    let smooth = smoothed(&losses, window);
    let initial = smooth[window - 1];
    let last = *smooth.last().unwrap();
    let ratio = last / initial;
    ensure(ratio <= 0.5, || {
        format!("smoothed recon {initial:.4} -> {last:.4} ({:.0}% of initial)", ratio * 100.0)
    })?;

    let cfg = &run.cfg;
    let model = load_checkpoint(&run.trained.checkpoint).unwrap().to_model().unwrap();
    let manifest = load_manifest(&cfg.paths.manifest).unwrap();
    let phase = cfg.phase(Phase::OneStep);
    let mut masses = Vec::new();
    for r in manifest.split(Split::Train) {
        let read = |role, kind| {
            read_feature_container(feature_path(&cfg.paths.feature_dir, &r.utterance_id, role, kind)).unwrap()
        };
        let src = read(phase.source_role, phase.source_feature);
        let tgt = read(phase.target_role, phase.target_feature);
        let path = mas(&model.align(&src, &tgt).unwrap()).unwrap();
        masses.push(near_diagonal_mass(src.num_frames(), tgt.num_frames(), &path.steps));
    }
    let first = masses[0];
    let mean = masses.iter().sum::<f64>() / masses.len() as f64;
    ensure(first >= 0.6 && mean >= 0.6, || {
        format!("near-diagonal MAS mass: first pair {first:.2}, mean {mean:.2}")
    })?;
    Ok(format!(
        "{} steps, smoothed recon {initial:.4} -> {last:.4} ({:.0}%); MAS mass within 3 frames of the warped diagonal: first pair {first:.2}, mean over {} pairs {mean:.2}",
        losses.len(),
        ratio * 100.0,
        masses.len()
    ))
}

fn ordering(run: &FullRun) -> Check {
    let t = run.trained_eval.report.aggregates.clone().ok_or("trained report has no aggregates")?;
    let u = run.untrained_eval.report.aggregates.clone().ok_or("untrained report has no aggregates")?;
    let detail = format!(
        "S1-WER trained {:.3} vs untrained {:.3}; SpeechBERTScore trained {:.3} vs untrained {:.3}",
        t.s1_wer, u.s1_wer, t.speech_bert_score, u.speech_bert_score
    );
    ensure(t.s1_wer < u.s1_wer && t.speech_bert_score > u.speech_bert_score, || detail.clone())?;
    Ok(detail)
}

fn disfluency_recovery() -> Check {
    let corpus = generate_synthetic_triplets(&SyntheticConfig {
        corruption_rate: 0.3,
        ..SyntheticConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let metric = Metric::default();
    let profiles: Vec<_> = corpus
        .triplets
        .iter()
        .map(|t| disfluency_profile(&t.s1, &t.ss, metric, f64::INFINITY).unwrap())
        .collect();
    // the default rule, resolved on the pooled dev-split distances
    let dev: Vec<f64> = corpus
        .triplets
        .iter()
        .zip(&profiles)
        .filter(|(t, _)| t.record.split == Split::Dev)
        .flat_map(|(_, p)| p.per_step_distance.iter().copied())
        .collect();
    let threshold = ThresholdRule::default().resolve(&dev);

    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (t, p) in corpus.triplets.iter().zip(&profiles) {
        if t.record.split == Split::Dev {
            continue;
        }
        let truth = t.truth.corrupted_frames();
        for (&(i, _), d) in p.path.steps.iter().zip(&p.per_step_distance) {
            match (*d > threshold, truth[i]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let recall = tp as f64 / (tp + fn_).max(1) as f64;
    let precision = tp as f64 / (tp + fp).max(1) as f64;
    let detail = format!(
        "threshold {threshold:.4} ({metric:?}); recall {recall:.3}, precision {precision:.3} over {} steps",
        tp + fp + fn_
    );
    ensure(tp + fn_ > 0 && recall >= 0.7 && precision >= 0.5, || detail.clone())?;
    Ok(detail)
}

fn determinism(a: &FullRun, b: &FullRun) -> Check {
    let mut compared = 0;
    for (x, y) in [
        (&a.trained_eval, &b.trained_eval),
        (&a.untrained_eval, &b.untrained_eval),
        (&a.references, &b.references),
    ] {
        for (p, q) in [(&x.table, &y.table), (&x.records, &y.records)] {
            let (pa, qb) = (std::fs::read(p).unwrap(), std::fs::read(q).unwrap());
            ensure(pa == qb, || format!("{} and {} differ", p.display(), q.display()))?;
            compared += 1;
        }
    }
    for name in ["one_step.vsck"] {
        let p = a.cfg.paths.checkpoint_dir.join(name);
        let q = b.cfg.paths.checkpoint_dir.join(name);
        ensure(std::fs::read(&p).unwrap() == std::fs::read(&q).unwrap(), || {
            format!("{name} differs between runs")
        })?;
    }
    Ok(format!("{compared} report files and the checkpoint byte-identical across two runs"))
}

#[test]
fn acceptance() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let mut results = Vec::new();

    results.push(run_criterion(1, "dp-kernel oracle equivalence", dp_kernel_oracles));
    results.push(run_criterion(2, "forward-sum gradient vs finite differences", forward_sum_gradient));
    results.push(run_criterion(3, "metric oracles", metric_oracles));

    let run_a = catch_unwind(AssertUnwindSafe(|| full_run(dir_a.path())));
    let run_b = catch_unwind(AssertUnwindSafe(|| full_run(dir_b.path())));
    let needs = |run: &std::thread::Result<FullRun>| -> Result<(), String> {
        run.as_ref().map(|_| ()).map_err(|_| "pipeline run failed".to_string())
    };
    results.push(run_criterion(4, "reference self-evaluation", || {
        needs(&run_a)?;
        self_evaluation(run_a.as_ref().unwrap())
    }));
    results.push(run_criterion(5, "freezing invariants", || {
        needs(&run_a)?;
        freezing(run_a.as_ref().unwrap())
    }));
    results.push(run_criterion(6, "toy training and quasi-diagonal alignment", || {
        needs(&run_a)?;
        toy_training(run_a.as_ref().unwrap())
    }));
    results.push(run_criterion(7, "trained beats untrained", || {
        needs(&run_a)?;
        ordering(run_a.as_ref().unwrap())
    }));
    results.push(run_criterion(8, "disfluency recovery", disfluency_recovery));
    results.push(run_criterion(9, "end-to-end determinism", || {
        needs(&run_a)?;
        needs(&run_b)?;
        determinism(run_a.as_ref().unwrap(), run_b.as_ref().unwrap())
    }));

    let passed = results.iter().filter(|r| **r).count();
    report(&format!("acceptance summary: {passed}/{} criteria passed", results.len()));
    assert_eq!(passed, results.len(), "some acceptance criteria failed");
}
