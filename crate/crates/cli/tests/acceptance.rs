//! End-to-end acceptance checks at default scale. Prints one line per
//! criterion and exits non-zero when a hard criterion fails.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use ctxdiff::bench::ablation::{evaluate_variant, finetune_variant, AblationRow, VariantRun};
use ctxdiff::bench::metrics::{acc_metrics, diversity, frechet_distance};
use ctxdiff::bench::{ablation_harness, generate_set, DiffusionGenerator, RasterOracle, FIDELITY_TASKS};
use ctxdiff::diffusion::{attach_adapters, ddim_step, Codec};
use ctxdiff::gradsuite::full_suite;
use ctxdiff::models::Models;
use ctxdiff::pipeline::{assemble, make_splits, train_diffusion, train_evaluator, Splits};
use ctxdiff::rewardft::{frozen_hash, FinetuneOutcome};
use ctxdiff::sceneworld::image::IMAGE_LEN;
use ctxdiff::sceneworld::{extract_attributes, render, sample_scene, Image, Scene, SceneConfig, Task};
use ctxdiff_cli::config::RunConfig;
use ctxdiff_cli::manifest::mask_timing_csv;
use numcore::{Stream, StreamKey};

const CONVERGENCE_WINDOW: usize = 20;

struct Line {
    id: usize,
    soft: bool,
    pass: bool,
    detail: String,
}

#[derive(Default)]
struct Suite {
    lines: Vec<Line>,
}

impl Suite {
    fn record(&mut self, id: usize, soft: bool, pass: bool, detail: String) {
        let status = match (pass, soft) {
            (true, _) => "PASS",
            (false, true) => "FLAGGED",
            (false, false) => "FAIL",
        };
        println!("criterion {id:>2}: {status:<7} {detail}");
        self.lines.push(Line { id, soft, pass, detail });
    }

    fn hard(&mut self, id: usize, pass: bool, detail: String) {
        self.record(id, false, pass, detail);
    }

    fn report(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            let status = if l.pass { "pass" } else if l.soft { "flagged" } else { "fail" };
            let _ = writeln!(out, "{}\t{}\t{}", l.id, status, l.detail);
        }
        out
    }
}

struct Fixture {
    cfg: RunConfig,
    root: StreamKey,
    splits: Splits,
    base: Models,
}

fn fixture(suite: &mut Suite) -> Fixture {
    let cfg = RunConfig::default();
    let root = StreamKey::root(cfg.seed);
    let d = &cfg.data;
    let splits = make_splits(root.child("data"), [d.train, d.heldout, d.eval], &cfg.scene, d.description_mode).unwrap();

    let started = Instant::now();
    let ev = train_evaluator(&splits, &cfg.evaluator, root.child("evaluator")).unwrap();
    let minutes = started.elapsed().as_secs_f64() / 60.0;
    let h = &ev.heldout;
    suite.hard(
        6,
        h.auc >= 0.90 && h.global_gap() >= 0.1 && minutes <= 30.0 && cfg.evaluator.heldout_pairs == 2000,
        format!(
            "evaluator: AUC {:.4} (>= 0.90), R_global gap {:.4} (>= 0.1) on {} pairs, {minutes:.1} min (<= 30)",
            h.auc,
            h.global_gap(),
            cfg.evaluator.heldout_pairs
        ),
    );

    let dm = train_diffusion(&ev.params, &splits, &cfg.diffusion, root.child("diffusion")).unwrap();
    let t = &dm.training;
    let ratio = t.final_val_loss / t.initial_val_loss;
    suite.hard(
        7,
        ratio < 0.5,
        format!(
            "diffusion validation loss {:.4} -> {:.4}, ratio {ratio:.3} (< 0.5)",
            t.initial_val_loss, t.final_val_loss
        ),
    );
    let base = assemble(ev.params, dm.params).unwrap();
    Fixture {
        cfg,
        root,
        splits,
        base,
    }
}

fn gradient_suite(suite: &mut Suite) {
    let started = Instant::now();
    let cases = full_suite(1).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let failed: Vec<&str> = cases.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    let worst = cases.iter().map(|c| c.report.max_rel_err / c.tol).fold(0.0, f64::max);
    suite.hard(
        1,
        failed.is_empty() && secs < 300.0,
        format!(
            "{} of {} FD cases pass, worst rel_err/tol {worst:.3}, {secs:.1} s (< 300){}",
            cases.len() - failed.len(),
            cases.len(),
            if failed.is_empty() { String::new() } else { format!("; failing: {}", failed.join(", ")) }
        ),
    );
}

fn codec(suite: &mut Suite) {
    let codec = Codec::standard().unwrap();
    let mut s = Stream::from_seed(2);
    let (mut inf, mut iso) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let img = Image::new((0..IMAGE_LEN).map(|_| s.uniform()).collect()).unwrap();
        let z = codec.encode(&img).unwrap();
        inf = inf.max(codec.decode(&z).unwrap().max_abs_diff(&img));
        let nx = img.pixels().iter().map(|v| v * v).sum::<f64>().sqrt();
        let nz = z.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        iso = iso.max((nx - nz).abs());
    }
    suite.hard(
        2,
        inf < 1e-6 && iso < 1e-6,
        format!("100 random images: max |D(E(x)) - x| {inf:.2e}, max norm gap {iso:.2e} (both < 1e-6)"),
    );
}

fn ddim_oracle(suite: &mut Suite) {
    let (z, eps, a_from, a_to) = (1.0f64, 0.5f64, 0.25f64, 0.64f64);
    let x0 = (z - (1.0 - a_from).sqrt() * eps) / a_from.sqrt();
    let oracle = a_to.sqrt() * x0 + (1.0 - a_to).sqrt() * eps;
    let got = ddim_step(z, eps, a_from, a_to);
    let identity = ddim_step(0.37, 0.9, 0.49, 0.49) == 0.37 && ddim_step(-2.5, 0.1, 1.0, 1.0) == -2.5;
    let literal = 1.20712;
    suite.hard(
        3,
        (got - oracle).abs() < 1e-5 && identity,
        format!(
            "ddim_step = {got:.7}, independent derivation {oracle:.7}, identity limit exact: {identity}; \
             stated literal {literal} differs from the derivation by {:.1e}",
            (oracle - literal).abs()
        ),
    );
}

fn raster_oracle(suite: &mut Suite) {
    let key = StreamKey::root(4).child("acceptance-scenes");
    let multiset = |s: &Scene| {
        let mut v: Vec<String> = s.objects.iter().map(|o| format!("{:?}/{:?}", o.color, o.shape)).collect();
        v.sort();
        v
    };
    let mut errors = 0;
    for i in 0..1000 {
        let scene = sample_scene(&mut key.index(i).stream(), &SceneConfig::default()).unwrap();
        let a = extract_attributes(&render(&scene));
        let mut got: Vec<String> = a.objects.iter().map(|o| format!("{:?}/{:?}", o.color, o.shape)).collect();
        got.sort();
        if a.count != scene.objects.len() || got != multiset(&scene) || a.background != scene.background {
            errors += 1;
        }
    }
    suite.hard(4, errors == 0, format!("attribute errors on 1000 rendered scenes: {errors}"));
}

fn metric_oracles(suite: &mut Suite) {
    let fixture = acc_metrics(&[(true, true), (true, false)]);
    let mut s = Stream::from_seed(10);
    let mut violations = 0;
    for _ in 0..1000 {
        let n = 1 + s.below(20);
        let pairs: Vec<(bool, bool)> = (0..n).map(|_| (s.uniform() < 0.5, s.uniform() < 0.5)).collect();
        let (acc, plus) = acc_metrics(&pairs);
        if plus > acc {
            violations += 1;
        }
    }
    let a: Vec<Vec<f64>> = (0..10).map(|_| vec![s.normal(), s.normal()]).collect();
    let self_fd = frechet_distance(&a, &a).unwrap();
    let one_d = frechet_distance(&[vec![-1.0], vec![1.0]], &[vec![0.0], vec![2.0]]).unwrap();
    let same = diversity(&[vec![0.3, 0.4]], &[vec![vec![0.3, 0.4]; 4]]).unwrap();
    let ok = fixture == (75.0, 50.0)
        && violations == 0
        && self_fd == 0.0
        && (one_d - 1.0).abs() < 1e-9
        && same.ref_vs_gen == 0.0
        && same.pairwise_gen == Some(0.0);
    suite.hard(
        10,
        ok,
        format!(
            "ACC/ACC+ fixture {fixture:?}, ACC+ > ACC in {violations}/1000 random sets, Frechet(A,A) {self_fd}, \
             1-D case {one_d}, identical-set diversity {:?}/{:?}",
            same.ref_vs_gen, same.pairwise_gen
        ),
    );
}

fn zero_adapters(suite: &mut Suite, fx: &Fixture, runs: &[(Models, FinetuneOutcome)]) {
    let mut adapted = fx.base.clone();
    attach_adapters(&mut adapted.denoiser, &fx.cfg.finetune.adapter, StreamKey::root(99)).unwrap();
    adapted.lora_scale = fx.cfg.finetune.adapter.scale;
    let steps = fx.cfg.bench.ddim_steps;
    let key = StreamKey::root(5);
    let mut identical = true;
    for c in &fx.splits.eval[..8] {
        let a = generate_set(c, &DiffusionGenerator { models: &fx.base, steps }, 2, key).unwrap();
        let b = generate_set(c, &DiffusionGenerator { models: &adapted, steps }, 2, key).unwrap();
        identical &= a == b;
    }
    let before = frozen_hash(&fx.base.denoiser);
    let kept = runs.iter().all(|(m, _)| frozen_hash(&m.denoiser) == before);
    suite.hard(
        5,
        identical && kept,
        format!(
            "zero-B images bit-identical on 8 contexts x 2 seeds: {identical}; frozen hash unchanged after {} fine-tunes: {kept}",
            runs.len()
        ),
    );
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

fn reward_gain(suite: &mut Suite, runs: &[(Models, FinetuneOutcome)]) {
    let gains: Vec<f64> = runs.iter().map(|(_, o)| o.gain()).collect();
    let windows: Vec<(f64, f64)> = runs
        .iter()
        .map(|(_, o)| o.log.fine_windows(CONVERGENCE_WINDOW).unwrap())
        .collect();
    let rising = windows.iter().all(|(first, last)| last >= first);
    let med = median(gains.clone());
    suite.hard(
        8,
        med >= 0.2 && rising,
        format!(
            "held-out objective gains {:?}, median {med:.4} (>= 0.2); r_fine first/last {CONVERGENCE_WINDOW}-step windows {:?}",
            gains.iter().map(|g| format!("{g:.4}")).collect::<Vec<_>>(),
            windows.iter().map(|(a, b)| format!("{a:.3}->{b:.3}")).collect::<Vec<_>>()
        ),
    );
}

fn ablation(suite: &mut Suite, fx: &Fixture, runs: &[(Models, FinetuneOutcome)]) {
    let cfg = &fx.cfg;
    let key = fx.root.child("ablation");
    let eval = &fx.splits.eval[..cfg.bench.eval_contexts];
    let heldout = &fx.splits.heldout[..cfg.finetune.heldout_contexts];
    let report = ablation_harness(
        &fx.base,
        &fx.splits.train,
        heldout,
        eval,
        &cfg.finetune,
        &cfg.bench,
        &RasterOracle,
        &cfg.ablation.seeds,
        key,
    )
    .unwrap();

    let base_metrics = evaluate_variant(&fx.base, eval, &RasterOracle, &cfg.bench, key.child("eval")).unwrap();
    let settings = ctxdiff::bench::ablation::standard_settings();
    let base_row = AblationRow::from_runs(
        settings.iter().find(|s| s.weights.is_none()).unwrap(),
        &[VariantRun {
            seed: None,
            metrics: base_metrics,
            reward_gain: None,
        }],
        eval,
    );
    let row = |name: &str| report.rows.iter().find(|r| r.setting == name).unwrap();
    let names: Vec<&str> = report.rows.iter().map(|r| r.setting.as_str()).collect();
    let both = row("both_rewards");
    let own_gains = median(runs.iter().map(|(_, o)| o.gain()).collect());
    let d = report.directional.as_ref().unwrap();
    suite.hard(
        11,
        report.rows.len() == 4 && row("no_finetune") == &base_row && both.reward_gain == Some(own_gains),
        format!(
            "rows {names:?}; no-finetune row equals base-model metrics: {}; directional both {:.2} vs none {:.2} ({})",
            row("no_finetune") == &base_row,
            d.both_rewards,
            d.no_finetune,
            if d.holds { "holds" } else { "does not hold" }
        ),
    );

    let none = row("no_finetune");
    let delta = both.fidelity - none.fidelity;
    let (pb, pa) = (none.pairwise_gen.unwrap_or(0.0), both.pairwise_gen.unwrap_or(0.0));
    let drop = if pb > 0.0 { (pb - pa) / pb } else { 0.0 };
    let per_task: Vec<String> = Task::ALL
        .iter()
        .map(|t| {
            let g = |r: &AblationRow| r.per_task.get(t).copied().unwrap_or(f64::NAN);
            format!("{t:?} {:.1}->{:.1}", g(none), g(both))
        })
        .collect();
    suite.record(
        9,
        true,
        delta >= 3.0 && drop <= 0.2,
        format!(
            "{:?} fidelity {:.2} -> {:.2} (delta {delta:+.2}, needs >= +3.0); pairwise_gen {pb:.3} -> {pa:.3} \
             (drop {:.1}%, allowed 20%); per task: {}",
            FIDELITY_TASKS,
            none.fidelity,
            both.fidelity,
            100.0 * drop,
            per_task.join(", ")
        ),
    );
}

const TINY: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/tiny.json");

const PIPELINE: &[&[&str]] = &[
    &["gen-data"],
    &["pretrain-evaluator"],
    &["pretrain-diffusion"],
    &["finetune"],
    &["generate", "--count", "2"],
    &["bench"],
    &["bench", "--baseline", "pixel-jitter"],
    &["sweep-seeds"],
    &["ablate"],
    &["gradcheck"],
];

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let bytes = std::fs::read(&p).unwrap();
            let text = std::str::from_utf8(&bytes).ok();
            let masked = if p.to_string_lossy().ends_with(".manifest.json") {
                let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
                v["wall_time_ms"] = serde_json::Value::Null;
                serde_json::to_vec(&v).unwrap()
            } else if let Some(m) = text.and_then(mask_timing_csv) {
                m.into_bytes()
            } else {
                bytes
            };
            out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), masked);
        }
    }
    out
}

fn rerun(suite: &mut Suite) {
    let dir = tempfile::tempdir().unwrap();
    let run_all = || {
        for args in PIPELINE {
            let status = Command::new(env!("CARGO_BIN_EXE_ctxdiff"))
                .current_dir(dir.path())
                .args(["--config", TINY])
                .args(*args)
                .env_remove("HB_THREADS")
                .output()
                .unwrap()
                .status;
            assert!(status.success(), "{args:?} failed");
        }
        snapshot(dir.path())
    };
    let first = run_all();
    let second = run_all();
    let differing: Vec<String> = first
        .iter()
        .filter(|(p, b)| second.get(*p) != Some(*b))
        .map(|(p, _)| p.display().to_string())
        .collect();
    suite.hard(
        12,
        differing.is_empty() && first.len() == second.len(),
        format!(
            "{} subcommands re-run in place: {} files, {} differ after masking wall-clock fields{}",
            PIPELINE.len(),
            first.len(),
            differing.len(),
            if differing.is_empty() { String::new() } else { format!(": {}", differing.join(", ")) }
        ),
    );
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut suite = Suite::default();
    gradient_suite(&mut suite);
    codec(&mut suite);
    ddim_oracle(&mut suite);
    raster_oracle(&mut suite);
    metric_oracles(&mut suite);
    rerun(&mut suite);

    let fx = fixture(&mut suite);
    let train = &fx.splits.train;
    let heldout = &fx.splits.heldout[..fx.cfg.finetune.heldout_contexts];
    let runs: Vec<(Models, FinetuneOutcome)> = fx
        .cfg
        .ablation
        .seeds
        .iter()
        .map(|&seed| finetune_variant(&fx.base, train, heldout, &fx.cfg.finetune, seed).unwrap())
        .collect();
    zero_adapters(&mut suite, &fx, &runs);
    reward_gain(&mut suite, &runs);
    ablation(&mut suite, &fx, &runs);

    suite.lines.sort_by_key(|l| l.id);
    let report = suite.report();
    let path = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance_report.tsv");
    std::fs::write(&path, &report).unwrap();
    println!("\nsummary (also in {}):\n{report}", path.display());
    let hard_failures = suite.lines.iter().filter(|l| !l.pass && !l.soft).count();
    if hard_failures > 0 {
        eprintln!("{hard_failures} hard criteria failed");
        std::process::exit(1);
    }
}
