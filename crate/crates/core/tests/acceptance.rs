//! Acceptance runner: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{all_variants, compare_gradients, micro_batch, micro_model};
use faceforge::corpus::{make_batches, TextPair};
use faceforge::frequency::{FreqMode, FrequencyTable};
use faceforge::harness::{
    build_vocab, dataset_from_text, evaluate, refine, synth_splits, train, Dataset, Evaluation, Phase, SplitSizes,
    TrainConfig,
};
use faceforge::loss::{self, LossConfig, PredictedDistribution};
use faceforge::metrics::{bleu, distinct_n, rank_table, RankMode};
use faceforge::seq2seq::Checkpoint;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    check(elapsed < limit, || format!("took {elapsed:.1?}, limit {limit:?}"))
}

fn random_dist(rng: &mut ChaCha8Rng) -> PredictedDistribution {
    let n = rng.random_range(2..40);
    let scale = rng.random_range(0.1..8.0);
    let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    PredictedDistribution::from_logits(&logits).unwrap()
}

fn entropy_of(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

fn loss_identities() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let floor = loss::DEFAULT_ENTROPY_FLOOR;
    let mut worst = 0.0f64;
    for _ in 0..2000 {
        let dist = random_dist(&mut rng);
        let target = rng.random_range(1..dist.len());
        let ce = loss::ce(&dist, target).unwrap();
        let h = entropy_of(dist.probs());

        let face = loss::face(&dist, target, 1.0).unwrap();
        check((face - ce).abs() <= 1e-12, || format!("face(w=1) {face} vs ce {ce}"))?;

        let extra = loss::cp_free(&dist, target, floor).unwrap() - ce;
        let want = 1.0 / h.max(floor);
        check((extra - want).abs() <= 1e-12 * want.max(1.0), || format!("cp_free - ce {extra} vs {want}"))?;

        let mut gap = f64::INFINITY;
        for beta in [1e-2, 1e-4, 1e-6, 1e-8, 1e-10] {
            let d = (loss::cp(&dist, target, beta).unwrap() - ce).abs();
            check(d < gap || d == 0.0, || format!("cp gap not shrinking at beta {beta}"))?;
            gap = d;
        }
        check(gap <= 1e-9, || format!("cp(beta=1e-10) differs from ce by {gap}"))?;

        let mut counts = vec![7u64; dist.len()];
        counts[0] = 0;
        let uniform = FrequencyTable::from_counts(counts, FreqMode::Gt).unwrap();
        let pre = uniform.pre_weight().unwrap();
        let face_cp: LossConfig = "face-cp".parse().unwrap();
        let via_face = loss::combined(&dist, target, &face_cp, Some(&uniform), Some(&pre)).unwrap();
        let cp = loss::cp(&dist, target, loss::DEFAULT_BETA).unwrap();
        check((via_face - cp).abs() <= 1e-12, || format!("face-cp(w=1) {via_face} vs cp {cp}"))?;
        worst = worst.max((face - ce).abs()).max((via_face - cp).abs());
    }
    within(start.elapsed(), Duration::from_secs(1))?;
    Ok(format!("2000 distributions, worst identity gap {worst:.1e}, {:.0?}", start.elapsed()))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let batch = micro_batch();
    let params = micro_model(11);
    let mut summary = Vec::new();
    let mut worst = 0.0f64;
    for config in all_variants().into_iter().filter(|c| c.name() != "ce") {
        let cmp = compare_gradients(&config, &params, &batch, 1e-5);
        let frac = cmp.fraction_below(1e-5);
        check(frac >= 0.99, || format!("{}: only {:.2}% below 1e-5", cmp.name, 100.0 * frac))?;
        check(cmp.worst() < 1e-4, || format!("{}: worst {:.2e}", cmp.name, cmp.worst()))?;
        worst = worst.max(cmp.worst());
        summary.push(cmp.name);
    }
    check(summary.len() == 8, || format!("expected 8 variants, got {}", summary.len()))?;
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!("{} variants, worst {worst:.1e}, {:.1?}", summary.len(), start.elapsed()))
}

fn oracle_pre_weight(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts[1..].iter().sum();
    let rf: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    let max_rf = rf[1..].iter().copied().fold(0.0, f64::max);
    let all_equal = counts[1..].iter().all(|&c| c == counts[1]);
    let mut raw = vec![0.0; counts.len()];
    for i in 1..counts.len() {
        raw[i] = if all_equal { 1.0 } else { -rf[i] / max_rf + 1.0 };
    }
    let mean = raw[1..].iter().sum::<f64>() / (counts.len() - 1) as f64;
    raw.iter().map(|w| w / mean).collect()
}

fn oracle_post_weight(counts: &[u64], out: usize, gt: usize) -> f64 {
    let total: u64 = counts.iter().sum();
    let diff = counts[out] as f64 - counts[gt] as f64;
    1.0 + diff.max(0.0) / total as f64
}

fn random_table(rng: &mut ChaCha8Rng) -> Vec<u64> {
    loop {
        let n = rng.random_range(3..60);
        let hi = rng.random_range(1..500);
        let sparsity = rng.random_range(0.0..0.6);
        let mut counts = vec![0u64; n];
        for c in counts.iter_mut().skip(1) {
            if !rng.random_bool(sparsity) {
                *c = rng.random_range(0..=hi);
            }
        }
        let distinct: BTreeSet<u64> = counts[1..].iter().copied().filter(|&c| c > 0).collect();
        if distinct.len() >= 2 {
            return counts;
        }
    }
}

fn weight_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for sample in 0..1000 {
        let counts = random_table(&mut rng);
        let table = FrequencyTable::from_counts(counts.clone(), FreqMode::Output).unwrap();
        let got = table.pre_weight().unwrap();
        let want = oracle_pre_weight(&counts);
        for (i, (&g, &w)) in got.weights().iter().zip(&want).enumerate() {
            let d = (g - w).abs();
            worst = worst.max(d);
            check(d <= 1e-12, || format!("table {sample} token {i}: pre {g} vs {w}"))?;
        }
        let n = counts.len();
        for _ in 0..20 {
            let (out, gt) = (rng.random_range(1..n), rng.random_range(1..n));
            let g = table.post_weight(out, gt).unwrap();
            let w = oracle_post_weight(&counts, out, gt);
            worst = worst.max((g - w).abs());
            check((g - w).abs() <= 1e-12, || format!("table {sample}: post({out},{gt}) {g} vs {w}"))?;
            check((1.0..=2.0).contains(&g), || format!("post weight {g} outside [1, 2]"))?;
        }
        for i in 1..n {
            for j in 1..n {
                let (wi, wj) = (got.get(i), got.get(j));
                if counts[i] == counts[j] {
                    check(wi == wj, || format!("table {sample}: equal counts, weights {wi} vs {wj}"))?;
                } else if counts[i] > counts[j] {
                    check(wi < wj, || format!("table {sample}: order not reversed at {i},{j}"))?;
                }
            }
        }
        let k = rng.random_range(2..9);
        let scaled = FrequencyTable::from_counts(counts.iter().map(|c| c * k).collect(), FreqMode::Output).unwrap();
        for (a, b) in scaled.pre_weight().unwrap().weights().iter().zip(got.weights()) {
            check((a - b).abs() <= 1e-12, || format!("table {sample}: scaling by {k} moved {b} to {a}"))?;
        }
    }
    within(start.elapsed(), Duration::from_secs(5))?;
    Ok(format!("1000 tables, worst deviation {worst:.1e}, {:.0?}", start.elapsed()))
}

fn random_corpus(rng: &mut ChaCha8Rng) -> Vec<Vec<u8>> {
    let alphabet = rng.random_range(1..12u8);
    let lines = rng.random_range(1..30);
    (0..lines)
        .map(|_| {
            let len = rng.random_range(0..12);
            (0..len).map(|_| rng.random_range(0..alphabet)).collect()
        })
        .collect()
}

fn brute_distinct(corpus: &[Vec<u8>], n: usize) -> f64 {
    let mut grams: Vec<Vec<u8>> = Vec::new();
    for line in corpus {
        let mut start = 0;
        while start + n <= line.len() {
            let gram = line[start..start + n].to_vec();
            if !grams.contains(&gram) {
                grams.push(gram);
            }
            start += 1;
        }
    }
    let total: usize = corpus.iter().map(Vec::len).sum();
    grams.len() as f64 / total as f64
}

fn metrics_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut done = 0;
    while done < 500 {
        let corpus = random_corpus(&mut rng);
        if corpus.iter().all(Vec::is_empty) {
            continue;
        }
        for n in 1..=3 {
            let got = distinct_n(&corpus, n).unwrap();
            let want = brute_distinct(&corpus, n);
            check(got == want, || format!("corpus {done}: distinct-{n} {got} vs {want}"))?;
        }
        let nonempty: Vec<Vec<u8>> = corpus.iter().filter(|l| !l.is_empty()).cloned().collect();
        let b = bleu(&nonempty, &nonempty).unwrap();
        check(b == 1.0, || format!("corpus {done}: bleu(h, h) = {b}"))?;

        let mut lead: BTreeMap<u8, usize> = BTreeMap::new();
        for line in &corpus {
            if let Some(&t) = line.first() {
                *lead.entry(t).or_default() += 1;
            }
        }
        compare_rank(&corpus, &RankMode::Leading, &lead).map_err(|e| format!("corpus {done}: {e}"))?;
        let pivot = corpus.iter().flatten().next().copied().unwrap();
        let mut after: BTreeMap<u8, usize> = BTreeMap::new();
        for line in &corpus {
            for i in 1..line.len() {
                if line[i - 1] == pivot {
                    *after.entry(line[i]).or_default() += 1;
                }
            }
        }
        compare_rank(&corpus, &RankMode::After(pivot), &after).map_err(|e| format!("corpus {done}: {e}"))?;
        done += 1;
    }
    within(start.elapsed(), Duration::from_secs(5))?;
    Ok(format!("500 corpora, {:.0?}", start.elapsed()))
}

fn compare_rank(corpus: &[Vec<u8>], mode: &RankMode<u8>, direct: &BTreeMap<u8, usize>) -> Result<(), String> {
    let table = rank_table(corpus, mode).unwrap();
    let total: usize = direct.values().sum();
    check(table.total == total, || format!("{}: total {} vs {total}", table.title, table.total))?;
    check(table.rows.len() == direct.len(), || format!("{}: row count", table.title))?;
    for (i, row) in table.rows.iter().enumerate() {
        check(row.rank == i + 1, || format!("{}: rank {}", table.title, row.rank))?;
        check(direct.get(&row.token) == Some(&row.count), || format!("{}: token {} count {}", table.title, row.token, row.count))?;
        let pct = 100.0 * row.count as f64 / total as f64;
        check(row.percentage == pct, || format!("{}: pct {}", table.title, row.percentage))?;
        if i > 0 {
            let prev = &table.rows[i - 1];
            check(
                prev.count > row.count || (prev.count == row.count && prev.token < row.token),
                || format!("{}: rows out of order at {i}", table.title),
            )?;
        }
    }
    Ok(())
}

fn frequency_consistency() -> Outcome {
    let [train_pairs, valid_pairs, _] = synth_splits(1.0, SplitSizes { train: 300, valid: 30, test: 0 }, 5).unwrap();
    let mut base_config = TrainConfig::new(Phase::Train);
    base_config.embed = 8;
    base_config.hidden = 16;
    base_config.max_epochs = 1;
    base_config.batch_size = 64;
    let vocab = build_vocab(&train_pairs, 1000).unwrap();
    let data = dataset_from_text(&base_config, vocab, &train_pairs, &valid_pairs).unwrap();
    let base = train(&base_config, &data, None).map_err(|e| e.to_string())?.last;

    let mut config = base_config.clone();
    config.phase = Phase::Refine;
    config.loss = "face-gpr".parse().unwrap();
    config.batch_size = 30;
    let table = refine(&config, &data, base, None).map_err(|e| e.to_string())?.gt_table.unwrap();

    let mut recount = vec![0u64; data.vocab.len()];
    for pair in &data.train {
        for &t in &pair.target {
            recount[t] += 1;
        }
    }
    check(table.counts() == recount.as_slice(), || "harness GT table differs from recount".into())?;

    let mut incremental = FrequencyTable::new(data.vocab.len(), FreqMode::Gt);
    for batch in make_batches(&data.train, 30, 9).unwrap() {
        incremental.update_gt(&batch).unwrap();
    }
    check(incremental.counts() == recount.as_slice(), || "batch-wise GT table differs from recount".into())?;
    Ok(format!("{} pairs, {} target tokens, integer-equal", data.train.len(), table.total()))
}

const REPRO_SIZES: SplitSizes = SplitSizes { train: 5000, valid: 500, test: 500 };
const REPRO_EPOCHS: usize = 10;

struct Repro {
    base: Checkpoint,
    data: Dataset,
    test: Vec<TextPair>,
    control: Evaluation,
    face: Evaluation,
    steps: (usize, usize),
    elapsed: Duration,
}

fn refine_arm(loss: &str, data: &Dataset, base: &Checkpoint, test: &[TextPair], dir: &Path) -> Result<(Evaluation, usize), String> {
    let mut config = TrainConfig::new(Phase::Refine);
    config.loss = loss.parse().map_err(|e: faceforge::Error| e.to_string())?;
    config.seed = 1;
    config.max_epochs = REPRO_EPOCHS;
    config.max_reductions = 1000;
    let outcome = refine(&config, data, base.clone(), Some(dir)).map_err(|e| e.to_string())?;
    let evaluation = evaluate(&outcome.best.params, &data.vocab, test, config.max_len).map_err(|e| e.to_string())?;
    evaluation.save(dir).map_err(|e| e.to_string())?;
    Ok((evaluation, outcome.steps))
}

fn reproduce(dir: &Path) -> Result<Repro, String> {
    let start = Instant::now();
    let [train_pairs, valid_pairs, test] = synth_splits(1.0, REPRO_SIZES, 1).unwrap();
    let config = TrainConfig::new(Phase::Train);
    let vocab = build_vocab(&train_pairs, config.max_vocab).unwrap();
    let data = dataset_from_text(&config, vocab, &train_pairs, &valid_pairs).map_err(|e| e.to_string())?;
    let base = train(&config, &data, Some(&dir.join("ce"))).map_err(|e| e.to_string())?.last;
    let (control, control_steps) = refine_arm("ce", &data, &base, &test, &dir.join("control"))?;
    let (face, face_steps) = refine_arm("face-opr", &data, &base, &test, &dir.join("face-opr"))?;
    Ok(Repro {
        base,
        data,
        test,
        control,
        face,
        steps: (control_steps, face_steps),
        elapsed: start.elapsed(),
    })
}

fn directional(repro: &Result<Repro, String>) -> Outcome {
    let r = repro.as_ref().map_err(Clone::clone)?;
    let (c, f) = (&r.control.report, &r.face.report);
    check(r.data.vocab.len() <= 500, || format!("vocabulary {} exceeds 500", r.data.vocab.len()))?;
    check(r.steps.0 == r.steps.1, || format!("step budgets differ: {:?}", r.steps))?;
    check(f.d1 > c.d1, || format!("d-1 {:.4} not above control {:.4}", f.d1, c.d1))?;
    check(f.d2 > c.d2, || format!("d-2 {:.4} not above control {:.4}", f.d2, c.d2))?;
    let gain = (f.d2 - c.d2) / c.d2;
    check(gain >= 0.10, || format!("d-2 gain {:.1}% below 10%", 100.0 * gain))?;
    within(r.elapsed, Duration::from_secs(600))?;
    Ok(format!(
        "d-1 {:.4} vs {:.4}, d-2 {:.4} vs {:.4} (+{:.0}%), {} steps each, {:.0?}",
        f.d1,
        c.d1,
        f.d2,
        c.d2,
        100.0 * gain,
        r.steps.0,
        r.elapsed
    ))
}

fn variant_grid(repro: &Result<Repro, String>, dir: &Path) -> Outcome {
    let start = Instant::now();
    let r = repro.as_ref().map_err(|e| format!("no base model: {e}"))?;
    let mut names = Vec::new();
    for variant in LossConfig::refinement_grid() {
        let name = variant.name();
        let mut config = TrainConfig::new(Phase::Refine);
        config.loss = variant;
        config.max_epochs = 1;
        let out = dir.join(&name);
        let outcome = refine(&config, &r.data, r.base.clone(), Some(&out)).map_err(|e| format!("{name}: {e}"))?;
        check(outcome.log.iter().all(|e| e.train_loss.is_finite()), || format!("{name}: non-finite loss"))?;
        let nan = outcome.last.params.tensors().iter().any(|m| m.data().iter().any(|x| !x.is_finite()));
        check(!nan, || format!("{name}: non-finite parameters"))?;
        let evaluation = evaluate(&outcome.last.params, &r.data.vocab, &r.test, config.max_len).map_err(|e| format!("{name}: {e}"))?;
        evaluation.save(&out).map_err(|e| e.to_string())?;
        let rep = &evaluation.report;
        let valid = [rep.d1, rep.d2, rep.bleu].iter().all(|x| x.is_finite() && (0.0..=1.0).contains(x))
            && rep.responses == r.test.len();
        check(valid, || format!("{name}: invalid report {rep:?}"))?;
        let text = std::fs::read_to_string(out.join("report.txt")).map_err(|e| e.to_string())?;
        let record = text.lines().last().unwrap_or_default();
        serde_json::from_str::<serde_json::Value>(record).map_err(|e| format!("{name}: report record: {e}"))?;
        names.push(name);
    }
    within(start.elapsed(), Duration::from_secs(300))?;
    Ok(format!("{}, {:.0?}", names.join(" "), start.elapsed()))
}

fn read_tree(root: &Path) -> HashMap<String, Vec<u8>> {
    let mut files = HashMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                files.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn determinism(first: &Result<Repro, String>, first_dir: &Path, second_dir: &Path) -> Outcome {
    first.as_ref().map_err(|e| format!("first run failed: {e}"))?;
    reproduce(second_dir)?;
    let a = read_tree(first_dir);
    let b = read_tree(second_dir);
    let mut names: Vec<&String> = a.keys().collect();
    names.sort();
    check(a.len() == b.len(), || format!("{} files vs {}", a.len(), b.len()))?;
    for name in &names {
        check(b.get(*name) == a.get(*name), || format!("{name} differs"))?;
    }
    let ckpts = names.iter().filter(|n| n.ends_with(".ckpt")).count();
    let reports = names.iter().filter(|n| n.ends_with("report.txt")).count();
    Ok(format!("{} files identical ({ckpts} checkpoints, {reports} reports)", names.len()))
}

fn main() -> ExitCode {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("error")).try_init();
    let scratch = tempfile::tempdir().unwrap();
    let first = scratch.path().join("repro-a");
    let second = scratch.path().join("repro-b");

    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, outcome: Outcome| {
        match &outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => println!("FAIL  {name}: {why}"),
        }
        results.push((name, outcome));
    };
    report("1 loss identities", loss_identities());
    report("2 gradient suite", gradient_suite());
    report("3 weight-formula oracle", weight_oracle());
    report("4 metrics oracle", metrics_oracle());
    report("5 frequency consistency", frequency_consistency());
    let repro = reproduce(&first);
    report("6 directional diversity", directional(&repro));
    report("7 variant grid", variant_grid(&repro, &scratch.path().join("grid")));
    report("8 determinism", determinism(&repro, &first, &second));

    let failed = results.iter().filter(|(_, o)| o.is_err()).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
