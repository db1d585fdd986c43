//! Acceptance suite: one PASS/FAIL line per criterion. Runs the smoke preset
//! twice and the desk preset once in temporary directories.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use advsig::advest::{dcl_adversarial_loss, default_resolutions, mrstft_loss, mrstft_terms};
use advsig::attacks::{
    cw_l2, fgsm, load_attack_database, pgd, pgd_observed, AttackLabel, CwL2Config, PgdConfig,
};
use advsig::corpus::load_corpus;
use advsig::eval::{compute_eer, AuditEntry, TaskReport, Trial, TrialSet};
use advsig::rng::rng_from_seed;
use advsig::signature::{ExperimentMode, InputKind};
use advsig::victim::SpeakerClassifier;
use advsig::{lp_norm, project_lp_ball, NormOrder, ThreatModel, Waveform, SAMPLE_RATE};
use advsig_cli::pipeline::{audit_path, evaluation_path, ATTACK_DIR, VICTIM_CHECKPOINT};
use advsig_cli::{ExperimentConfig, Preset, Run};
use rand::Rng as _;
use serde_json::Value;

type Outcome = Result<String, String>;

struct Suite {
    results: Vec<(String, bool)>,
}

impl Suite {
    fn record(&mut self, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) {
        let t = Instant::now();
        let out = f();
        let took = t.elapsed();
        let (ok, detail) = match out {
            Ok(d) if took <= budget => (true, d),
            Ok(d) => (false, format!("{d}; over budget {budget:?}")),
            Err(d) => (false, d),
        };
        println!("{} {name}: {detail} [{:.1}s]", if ok { "PASS" } else { "FAIL" }, took.as_secs_f64());
        self.results.push((name.to_string(), ok));
    }
}

fn ensure(ok: bool, msg: String) -> Outcome {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn pipeline(preset: Preset, dir: &Path) -> Result<Duration, String> {
    let config = ExperimentConfig::preset(preset);
    let run = Run {
        dir: dir.to_path_buf(),
        config_bytes: config.canonical_json(),
        config,
        data_root: dir.to_path_buf(),
        force: false,
    };
    let t = Instant::now();
    run.run_all().map_err(|e| e.to_string())?;
    Ok(t.elapsed())
}

fn read_json(path: PathBuf) -> Result<Value, String> {
    let bytes = fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_slice(&bytes).map_err(|e| e.to_string())
}

fn task_report(dir: &Path, mode: ExperimentMode) -> Result<TaskReport, String> {
    serde_json::from_value(read_json(dir.join(evaluation_path(mode)))?).map_err(|e| e.to_string())
}

// ---- projection oracle ----

fn soft(v: &[f64], t: f64) -> Vec<f64> {
    v.iter().map(|&x| x.signum() * (x.abs() - t).max(0.0)).collect()
}

fn bisect(mut lo: f64, mut hi: f64, too_big: impl Fn(f64) -> bool) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if too_big(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

fn norm64(v: &[f64], p: NormOrder) -> f64 {
    match p {
        NormOrder::L1 => v.iter().map(|x| x.abs()).sum(),
        NormOrder::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        _ => v.iter().fold(0.0, |m: f64, x| m.max(x.abs())),
    }
}

/// Multiplier bisection on the Lagrangian; Moreau identity for L∞.
fn projection_oracle(v: &[f64], p: NormOrder, eps: f64) -> Vec<f64> {
    if norm64(v, p) <= eps {
        return v.to_vec();
    }
    match p {
        NormOrder::Linf => v.iter().zip(soft(v, eps)).map(|(a, b)| a - b).collect(),
        NormOrder::L2 => {
            let mu = bisect(0.0, 1e12, |mu| norm64(v, p) / (1.0 + mu) > eps);
            v.iter().map(|x| x / (1.0 + mu)).collect()
        }
        _ => {
            let tau = bisect(0.0, norm64(v, NormOrder::Linf), |t| norm64(&soft(v, t), p) > eps);
            soft(v, tau)
        }
    }
}

fn dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt()
}

fn projection_suite() -> Outcome {
    let mut rng = rng_from_seed(100);
    let orders = [NormOrder::L1, NormOrder::L2, NormOrder::Linf];
    let mut worst = 0.0f64;
    for i in 0..200 {
        let n = rng.random_range(1..=32);
        let v: Vec<f32> = (0..n).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        let (p, eps) = (orders[i % 3], rng.random_range(0.01..3.0));
        let got = project_lp_ball(&v, &ThreatModel::new(p, eps).unwrap()).map_err(|e| e.to_string())?;
        let want = projection_oracle(&v.iter().map(|&x| x as f64).collect::<Vec<_>>(), p, eps);
        worst = got.iter().zip(&want).fold(worst, |m, (g, w)| m.max((*g as f64 - w).abs()));
    }
    let mut bad = 0;
    for i in 0..1000 {
        let n = rng.random_range(1..=32);
        let a: Vec<f32> = (0..n).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        let b: Vec<f32> = (0..n).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        let tm = ThreatModel::new(orders[i % 3], rng.random_range(0.01..3.0)).unwrap();
        let pa = project_lp_ball(&a, &tm).unwrap();
        let ppa = project_lp_ball(&pa, &tm).unwrap();
        let pb = project_lp_ball(&b, &tm).unwrap();
        if dist(&pa, &ppa) > 1e-6 || dist(&pa, &pb) > dist(&a, &b) + 1e-6 {
            bad += 1;
        }
    }
    ensure(worst < 1e-6 && bad == 0, format!("max oracle deviation {worst:.2e} on 200 vectors, {bad}/1000 idempotence or non-expansiveness violations"))
}

// ---- gradient check ----

fn gradient_check() -> Outcome {
    let model = SpeakerClassifier::new(advsig::victim::VictimConfig::small(5), 21).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let mut rng = rng_from_seed(1000 + seed);
        let n = 2048;
        let x: Vec<f32> = (0..n)
            .map(|t| 0.3 * (t as f32 * rng.random_range(0.01f32..0.2)).sin() + rng.random_range(-0.05f32..0.05))
            .collect();
        let y = rng.random_range(0..5);
        let (_, g) = model.loss_and_input_gradient(&Waveform::new(x.clone(), SAMPLE_RATE).unwrap(), y).unwrap();
        let unit = |v: Vec<f64>| {
            let s = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.into_iter().map(|a| a / s).collect::<Vec<f64>>()
        };
        // Half gradient, half random: a random direction alone carries too
        // little of the gradient to rise above f32 loss noise.
        let gu = unit(g.samples().iter().map(|&a| a as f64).collect());
        let r = unit((0..n).map(|_| rng.random_range(-1.0f64..1.0)).collect());
        let u = unit(gu.iter().zip(&r).map(|(a, b)| a + b).collect());
        let analytic: f64 = g.samples().iter().zip(&u).map(|(&a, &b)| a as f64 * b).sum();
        let h = 1e-3;
        let at = |s: f64| {
            let v: Vec<f32> = x.iter().zip(&u).map(|(&a, &b)| (a as f64 + s * b) as f32).collect();
            model.loss(&v, y).unwrap() as f64
        };
        let fd = (at(h) - at(-h)) / (2.0 * h);
        worst = worst.max((fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-3));
    }
    ensure(worst < 1e-2, format!("worst relative error {worst:.2e} over 20 (x, y, direction) triples"))
}

// ---- attack invariants ----

fn attack_invariants(dir: &Path) -> Outcome {
    let victim = SpeakerClassifier::load(dir.join(VICTIM_CHECKPOINT)).map_err(|e| e.to_string())?;
    let records = load_attack_database(&dir.join(ATTACK_DIR), SAMPLE_RATE).map_err(|e| e.to_string())?;
    let mut fgsm_bad = 0usize;
    let mut fgsm_checked = 0usize;
    for r in records.iter().filter(|r| r.label == AttackLabel::Fgsm) {
        let eps = r.threat.epsilon;
        for ((&x, &xa), &d) in r.benign.iter().zip(r.adversarial.iter()).zip(r.perturbation().iter()) {
            if xa.abs() < 1.0 && x.abs() < 1.0 {
                fgsm_checked += 1;
                let m = d.abs() as f64;
                if m != 0.0 && (m - eps).abs() > 1e-7 {
                    fgsm_bad += 1;
                }
            }
        }
    }
    let mut record_bad = 0usize;
    for r in &records {
        let flipped = victim.predict(&r.adversarial).map_err(|e| e.to_string())?.speaker != r.y;
        if r.check_invariants().is_err() || !r.success || !flipped {
            record_bad += 1;
        }
    }
    let utts = load_corpus(&dir.join("corpus")).map_err(|e| e.to_string())?;
    let mut iter_bad = 0usize;
    let mut iterates = 0usize;
    let mut rng = rng_from_seed(7);
    for (i, u) in utts.iter().step_by(9).take(6).enumerate() {
        let p = [NormOrder::L1, NormOrder::L2, NormOrder::Linf][i % 3];
        let eps = match p {
            NormOrder::Linf => 5e-3,
            NormOrder::L2 => 0.05 * lp_norm(&u.audio, NormOrder::L2),
            _ => 0.05 * lp_norm(&u.audio, NormOrder::L2) * (u.audio.len() as f64).sqrt(),
        };
        let cfg = PgdConfig { threat: ThreatModel::new(p, eps).unwrap(), steps: 8, step_size: 2.0 * eps / 8.0, random_init: true, topk_fraction: 0.01 };
        pgd_observed(&victim, &u.audio, u.speaker, &cfg, &mut rng, |d| {
            iterates += 1;
            if lp_norm(d, p) > eps * (1.0 + 1e-6) {
                iter_bad += 1;
            }
        })
        .map_err(|e| e.to_string())?;
    }
    let single = fgsm(&victim, &utts[0].audio, utts[0].speaker, 1e-3).map_err(|e| e.to_string())?;
    let one_step = pgd(
        &victim,
        &utts[0].audio,
        utts[0].speaker,
        &PgdConfig::iter_fgsm(1e-3, 1, 1e-3).map_err(|e| e.to_string())?,
        &mut rng,
    )
    .map_err(|e| e.to_string())?;
    let same = single == one_step;
    ensure(
        fgsm_bad == 0 && fgsm_checked > 0 && record_bad == 0 && iter_bad == 0 && same,
        format!(
            "FGSM off-clip samples outside {{0, eps}}: {fgsm_bad}/{fgsm_checked}; invalid stored records: {record_bad}/{}; infeasible PGD iterates: {iter_bad}/{iterates}; one-step PGD == FGSM: {same}",
            records.len()
        ),
    )
}

// ---- CW quality ----

fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some(v[v.len() / 2])
}

fn cw_quality(dir: &Path) -> Outcome {
    let victim = SpeakerClassifier::load(dir.join(VICTIM_CHECKPOINT)).map_err(|e| e.to_string())?;
    let utts = load_corpus(&dir.join("corpus")).map_err(|e| e.to_string())?;
    let pool: Vec<_> = utts.iter().filter(|u| victim.predict(&u.audio).map(|p| p.speaker == u.speaker).unwrap_or(false)).take(50).collect();
    if pool.len() < 50 {
        return Err(format!("only {} correctly classified utterances", pool.len()));
    }
    let mut cw = Vec::new();
    for u in &pool {
        let o = cw_l2(&victim, &u.audio, u.speaker, &CwL2Config::default()).map_err(|e| e.to_string())?;
        if o.success {
            cw.push(o.norm);
        }
    }
    let cw_rate = cw.len() as f64 / pool.len() as f64;
    // Lower the PGD-L2 SNR until its success rate reaches 0.8.
    let mut pgd_rate = 0.0;
    let mut pgd_norms = Vec::new();
    let mut snr_used = None;
    for snr in (10..=50).rev().step_by(5) {
        pgd_norms.clear();
        for u in &pool {
            let eps = lp_norm(&u.audio, NormOrder::L2) * 10f64.powf(-snr as f64 / 20.0);
            let cfg = PgdConfig { threat: ThreatModel::new(NormOrder::L2, eps).unwrap(), steps: 10, step_size: 2.5 * eps / 10.0, random_init: false, topk_fraction: 0.01 };
            let xa = pgd(&victim, &u.audio, u.speaker, &cfg, &mut rng_from_seed(0)).map_err(|e| e.to_string())?;
            if victim.predict(&xa).map_err(|e| e.to_string())?.speaker != u.speaker {
                pgd_norms.push(dist(xa.samples(), u.audio.samples()));
            }
        }
        pgd_rate = pgd_norms.len() as f64 / pool.len() as f64;
        if pgd_rate >= 0.8 {
            snr_used = Some(snr);
            break;
        }
    }
    let (mc, mp) = (median(&mut cw), median(&mut pgd_norms));
    let ok = cw_rate >= 0.8 && pgd_rate >= 0.8 && matches!((mc, mp), (Some(a), Some(b)) if a < b);
    ensure(
        ok,
        format!(
            "50 utterances: CW-L2 success {cw_rate:.2} median ||d||2 {mc:.4?}; PGD-L2 success {pgd_rate:.2} at {snr_used:?} dB median {mp:.4?}"
        ),
    )
}

// ---- loss identities ----

fn naive_dcl(real: &[f64], fake: &[f64]) -> f64 {
    let t1: f64 = real.iter().map(|&r| (1.0 + fake.iter().map(|&f| (f - r).exp()).sum::<f64>()).ln()).sum();
    let t2: f64 = fake.iter().map(|&f| (1.0 + real.iter().map(|&r| (f - r).exp()).sum::<f64>()).ln()).sum();
    -t1 / real.len() as f64 - t2 / fake.len() as f64
}

fn loss_identities() -> Outcome {
    let mut rng = rng_from_seed(55);
    let a = Waveform::new((0..4000).map(|_| rng.random_range(-0.5f32..0.5)).collect(), SAMPLE_RATE).unwrap();
    let res = default_resolutions();
    let self_loss = mrstft_loss(&a, &a, &res).map_err(|e| e.to_string())?;
    let sc = mrstft_terms(&a.scaled(2.0).unwrap(), &a, &res).map_err(|e| e.to_string())?;
    let sc_dev = sc.iter().map(|(s, _)| (s - 1.0).abs()).fold(0.0, f64::max);
    let mut closed = 0.0f64;
    for n in [1usize, 2, 4, 8, 32] {
        let v = dcl_adversarial_loss(&vec![0.0; n], &vec![0.0; n]).map_err(|e| e.to_string())?;
        closed = closed.max((v + 2.0 * (1.0 + n as f64).ln()).abs());
    }
    let mut naive = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..16);
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-6.0..6.0)).collect();
        let f: Vec<f64> = (0..n).map(|_| rng.random_range(-6.0..6.0)).collect();
        naive = naive.max((dcl_adversarial_loss(&r, &f).unwrap() - naive_dcl(&r, &f)).abs());
    }
    ensure(
        self_loss == 0.0 && sc_dev < 1e-9 && closed < 1e-9 && naive < 1e-6,
        format!("MRSTFT(a, a) = {self_loss}; |SC(2a, a) - 1| <= {sc_dev:.1e}; DCL zero-logit error {closed:.1e}; stabilised vs naive {naive:.1e}"),
    )
}

// ---- EER oracle ----

/// Operating points counted at every distinct threshold with binary search
/// over the sorted scores, then the FAR = FRR crossing interpolated.
fn eer_oracle(targets: &[f64], nontargets: &[f64]) -> f64 {
    let mut t = targets.to_vec();
    let mut n = nontargets.to_vec();
    t.sort_by(f64::total_cmp);
    n.sort_by(f64::total_cmp);
    let mut th: Vec<f64> = t.iter().chain(&n).copied().collect();
    th.push(f64::INFINITY);
    th.sort_by(|a, b| b.total_cmp(a));
    th.dedup();
    let pts: Vec<(f64, f64)> = th
        .iter()
        .map(|&x| {
            let fa = (n.len() - n.partition_point(|&s| s < x)) as f64 / n.len() as f64;
            let fr = t.partition_point(|&s| s < x) as f64 / t.len() as f64;
            (fa, fr)
        })
        .collect();
    for w in pts.windows(2) {
        let (d0, d1) = (w[0].1 - w[0].0, w[1].1 - w[1].0);
        if d0 > 0.0 && d1 <= 0.0 {
            return w[0].0 + d0 / (d0 - d1) * (w[1].0 - w[0].0);
        }
    }
    unreachable!()
}

fn eer_suite() -> Outcome {
    let mut rng = rng_from_seed(77);
    let (mut worst, mut mono) = (0.0f64, 0.0f64);
    for i in 0..100 {
        let size = if i % 4 == 0 { rng.random_range(5000..=10_000) } else { rng.random_range(10..2000) };
        let levels = if i % 2 == 0 { 50.0 } else { 1e6 };
        let mut trials = Vec::with_capacity(size);
        for k in 0..size {
            let is_target = k % 4 == 0 || k == 1;
            let base: f64 = rng.random_range(0.0..1.0) + if is_target { 0.3 } else { 0.0 };
            trials.push(Trial { score: (base * levels).round() / levels, is_target });
        }
        let set = TrialSet::new("eer", trials.clone());
        let got = compute_eer(&set).map_err(|e| e.to_string())?;
        let t: Vec<f64> = trials.iter().filter(|t| t.is_target).map(|t| t.score).collect();
        let n: Vec<f64> = trials.iter().filter(|t| !t.is_target).map(|t| t.score).collect();
        worst = worst.max((got - eer_oracle(&t, &n)).abs());
        let maps: [fn(f64) -> f64; 3] = [|x| 2.0 * x - 5.0, |x| x.exp(), |x| x.powi(3) + x];
        for f in maps {
            let mapped = TrialSet::new("eer", trials.iter().map(|t| Trial { score: f(t.score), ..*t }).collect());
            mono = mono.max((compute_eer(&mapped).unwrap() - got).abs());
        }
    }
    ensure(worst < 1e-9 && mono < 1e-9, format!("100 trial sets (10 to 10000 trials, with ties): max oracle deviation {worst:.1e}, monotone-map deviation {mono:.1e}"))
}

// ---- pipeline gates ----

fn advest_gate(dir: &Path, elapsed: Duration) -> Outcome {
    let m = read_json(dir.join("advest/leave-out-cw/metrics.json"))?;
    let get = |k: &str| m[k].as_f64().ok_or_else(|| format!("metrics lack {k}"));
    let (trained, init, trivial) = (get("trained_error")?, get("init_error")?, get("trivial_error")?);
    ensure(
        trained < init && trained < trivial && elapsed < Duration::from_secs(20 * 60),
        format!(
            "held-out mean ||d_hat - d||2 on {} records: trained {trained:.4}, initial {init:.4}, d_hat = x' {trivial:.4}",
            m["held_out_records"]
        ),
    )
}

fn desk_gate(desk: &Path, smoke: &Path, desk_time: Duration) -> Outcome {
    let victim = read_json(desk.join("victim/report.json"))?;
    let victim_acc = victim["test_accuracy"].as_f64().unwrap_or(0.0);
    let oracle = task_report(desk, ExperimentMode::Oracle)?;
    let k = &oracle.known_classification;
    let eer = oracle.detection.without_benign.eer;
    let smoke_oracle = task_report(smoke, ExperimentMode::Oracle)?;
    let sk = &smoke_oracle.known_classification;
    let margin = sk.accuracy - 1.0 / sk.classes.len() as f64;
    let ok = victim_acc >= 0.90
        && k.classes.len() == 4
        && k.accuracy >= 0.60
        && eer.is_some_and(|e| e < 0.45)
        && sk.classes.len() == 2
        && margin >= 0.15
        && desk_time <= Duration::from_secs(2 * 3600);
    ensure(
        ok,
        format!(
            "desk: victim accuracy {victim_acc:.3}, Oracle {}-class accuracy {:.3} on {}, Task 3 EER without benign (CW-L2 unknown) {eer:.3?}; smoke: {}-class accuracy {:.3}, margin over chance {margin:.3}",
            k.classes.len(),
            k.accuracy,
            k.evaluated,
            sk.classes.len(),
            sk.accuracy
        ),
    )
}

fn audit_gate(dir: &Path) -> Outcome {
    let mut summary = Vec::new();
    let mut ok = true;
    for mode in ExperimentMode::ALL {
        let text = fs::read_to_string(dir.join(audit_path(mode))).map_err(|e| e.to_string())?;
        let entries: Vec<AuditEntry> = text.lines().map(serde_json::from_str).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
        let attacks: Vec<&AuditEntry> = entries.iter().filter(|e| !e.label.is_benign()).collect();
        let matching = attacks.iter().filter(|e| e.input_kind == mode.test_input() && e.mode == mode).count();
        let benign_ok = entries.iter().filter(|e| e.label.is_benign()).all(|e| e.input_kind == InputKind::Benign);
        ok &= !attacks.is_empty() && matching == attacks.len() && benign_ok;
        summary.push(format!("{} {}/{} {}", mode.slug(), matching, attacks.len(), mode.test_input().as_str()));
    }
    ensure(ok, format!("attack trials carrying the declared test input: {}", summary.join(", ")))
}

fn determinism(a: &Path, b: &Path) -> Outcome {
    let ra = fs::read(a.join("report/report.json")).map_err(|e| e.to_string())?;
    let rb = fs::read(b.join("report/report.json")).map_err(|e| e.to_string())?;
    let ta = fs::read(a.join("report/tables.txt")).map_err(|e| e.to_string())?;
    let tb = fs::read(b.join("report/tables.txt")).map_err(|e| e.to_string())?;
    ensure(ra == rb && ta == tb, format!("report.json {} bytes, identical: {}; tables identical: {}", ra.len(), ra == rb, ta == tb))
}

fn main() -> ExitCode {
    rayon::ThreadPoolBuilder::new().num_threads(1).build_global().expect("thread pool");
    let root = tempfile::tempdir().expect("tempdir");
    let (smoke_a, smoke_b, desk) = (root.path().join("smoke-a"), root.path().join("smoke-b"), root.path().join("desk"));
    let mut suite = Suite { results: Vec::new() };
    let minute = Duration::from_secs(60);

    suite.record("projection oracle", minute, projection_suite);
    suite.record("gradient check", 2 * minute, gradient_check);
    suite.record("loss identities", minute, loss_identities);
    suite.record("EER oracle", minute, eer_suite);

    let runs = (|| -> Result<(Duration, Duration, Duration), String> {
        Ok((pipeline(Preset::Smoke, &smoke_a)?, pipeline(Preset::Smoke, &smoke_b)?, pipeline(Preset::Desk, &desk)?))
    })();
    match runs {
        Ok((ta, _, td)) => {
            println!("info: smoke pipeline {:.0}s, desk pipeline {:.0}s", ta.as_secs_f64(), td.as_secs_f64());
            suite.record("attack structural invariants", 5 * minute, || attack_invariants(&smoke_a));
            suite.record("CW quality", 15 * minute, || cw_quality(&desk));
            suite.record("AdvEst learning gate", 20 * minute, || advest_gate(&smoke_a, ta));
            suite.record("end-to-end desk gate", 2 * 60 * minute, || desk_gate(&desk, &smoke_a, td));
            suite.record("mode-wiring audit", minute, || audit_gate(&smoke_a));
            suite.record("determinism", minute, || determinism(&smoke_a, &smoke_b));
        }
        Err(e) => {
            for name in ["attack structural invariants", "CW quality", "AdvEst learning gate", "end-to-end desk gate", "mode-wiring audit", "determinism"] {
                suite.record(name, minute, || Err(format!("pipeline failed: {e}")));
            }
        }
    }

    let failed: Vec<&str> = suite.results.iter().filter(|(_, ok)| !ok).map(|(n, _)| n.as_str()).collect();
    println!("acceptance: {}/{} criteria passed", suite.results.len() - failed.len(), suite.results.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
