use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use serde_json::json;

use ctxdiff::bench::{
    ablation_harness, evaluate, generate_set, seed_sweep, Answerer, ConstantGray, DiffusionGenerator,
    IdentityGenerator, ImageGenerator, NeuralAnswerer, PixelJitter, RasterOracle,
};
use ctxdiff::bench::ablation::finetune_variant;
use ctxdiff::gradsuite::full_suite;
use ctxdiff::models::Models;
use ctxdiff::nn::is_adapter;
use ctxdiff::pipeline::{assemble, make_splits, train_diffusion, train_evaluator, Splits};
use ctxdiff::rewardft::frozen_hash;
use ctxdiff::sceneworld::{ContextPair, SplitManifest};
use numcore::{ParamStore, StreamKey};

use crate::checkpoint::{load_kind, save_checkpoint, MANIFEST};
use crate::config::{AnswererKind, ConfigError, RunConfig};
use crate::manifest::Recorder;
use crate::{Baseline, Command, GradcheckFailed, MissingInput};

pub const SPLITS: [&str; 3] = ["train", "heldout", "eval"];
pub const EVALUATOR: &str = "evaluator";
pub const DIFFUSION: &str = "diffusion";
pub const ADAPTERS: &str = "adapters";

/// Codec round-trip images checked on every model load.
const CODEC_CHECK_IMAGES: usize = 4;

pub fn dispatch(command: &Command, cfg: &RunConfig) -> Result<()> {
    let rec = match command {
        Command::Generate { baseline: Some(b), .. }
        | Command::Bench { baseline: Some(b) }
        | Command::SweepSeeds { baseline: Some(b) } => Recorder::new(&format!("{}-{}", command.name(), b.label())),
        _ => Recorder::new(command.name()),
    };
    match command {
        Command::GenData => gen_data(cfg, rec)?,
        Command::PretrainEvaluator => pretrain_evaluator(cfg, rec)?,
        Command::PretrainDiffusion => pretrain_diffusion(cfg, rec)?,
        Command::Finetune => finetune(cfg, rec)?,
        Command::Generate { count, seeds, baseline } => generate(cfg, rec, *count, *seeds, *baseline)?,
        Command::Bench { baseline } => bench(cfg, rec, *baseline)?,
        Command::SweepSeeds { baseline } => sweep_seeds(cfg, rec, *baseline)?,
        Command::Ablate => ablate(cfg, rec)?,
        Command::Gradcheck => gradcheck(cfg, rec)?,
    }
    Ok(())
}

fn root(cfg: &RunConfig) -> StreamKey {
    StreamKey::root(cfg.seed)
}

fn checkpoint_dir(cfg: &RunConfig, kind: &str) -> PathBuf {
    cfg.paths.checkpoint_dir.join(kind)
}

fn report_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.paths.report_dir.join(name)
}

fn pretty(value: &impl serde::Serialize) -> Result<Vec<u8>> {
    Ok((serde_json::to_string_pretty(value)? + "\n").into_bytes())
}

fn finish(rec: Recorder, cfg: &RunConfig) -> Result<()> {
    let path = rec.finish(cfg).context("writing run manifest")?;
    println!("manifest: {}", path.display());
    Ok(())
}

fn load_split(cfg: &RunConfig, name: &str) -> Result<Vec<ContextPair>> {
    let path = cfg.paths.data_dir.join(format!("{name}.json"));
    if !path.is_file() {
        return Err(MissingInput {
            what: format!("{name} split"),
            path,
            hint: "run gen-data first".into(),
        }
        .into());
    }
    let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    let m: SplitManifest = serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))?;
    if m.seed != cfg.seed || m.split != name {
        return Err(ConfigError::Invalid(format!(
            "{} holds split {:?} for seed {}, config asks for {name:?} with seed {}",
            path.display(),
            m.split,
            m.seed,
            cfg.seed
        ))
        .into());
    }
    Ok(m.items)
}

fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    Ok(Splits {
        train: load_split(cfg, "train")?,
        heldout: load_split(cfg, "heldout")?,
        eval: load_split(cfg, "eval")?,
    })
}

fn load_store(cfg: &RunConfig, kind: &str) -> Result<ParamStore> {
    let dir = checkpoint_dir(cfg, kind);
    let (store, _) = load_kind(&dir, kind).with_context(|| format!("loading {kind} checkpoint"))?;
    Ok(store)
}

/// Evaluator and denoiser, plus fine-tuned adapters when `adapters` is set.
/// The codec is verified on every load.
pub fn load_models(cfg: &RunConfig, adapters: bool) -> Result<Models> {
    let evaluator = load_store(cfg, EVALUATOR)?;
    let denoiser = load_store(cfg, DIFFUSION)?;
    let mut models = assemble(evaluator, denoiser)?;
    models
        .codec
        .self_check(CODEC_CHECK_IMAGES, root(cfg).child("codec_check"))?;
    if adapters {
        models.denoiser.merge(load_store(cfg, ADAPTERS)?)?;
        models.lora_scale = cfg.finetune.adapter.scale;
    }
    Ok(models)
}

fn save(
    rec: &mut Recorder,
    cfg: &RunConfig,
    kind: &str,
    store: &ParamStore,
    config: serde_json::Value,
    step: u64,
) -> Result<PathBuf> {
    let dir = checkpoint_dir(cfg, kind);
    let manifest = save_checkpoint(&dir, kind, store, config, cfg.seed, step)?;
    for t in &manifest.tensors {
        rec.record_file(&dir.join(&t.file))?;
    }
    rec.record_file(&dir.join(MANIFEST))?;
    Ok(dir)
}

fn gen_data(cfg: &RunConfig, mut rec: Recorder) -> Result<()> {
    let d = &cfg.data;
    let splits = make_splits(
        root(cfg).child("data"),
        [d.train, d.heldout, d.eval],
        &cfg.scene,
        d.description_mode,
    )?;
    for (name, items) in SPLITS.iter().zip([splits.train, splits.heldout, splits.eval]) {
        let n = items.len();
        let m = SplitManifest {
            split: name.to_string(),
            seed: cfg.seed,
            items,
        };
        let path = cfg.paths.data_dir.join(format!("{name}.json"));
        rec.write(&path, &serde_json::to_vec(&m)?)?;
        println!("{name}: {n} contexts -> {}", path.display());
    }
    finish(rec, cfg)
}

fn pretrain_evaluator(cfg: &RunConfig, mut rec: Recorder) -> Result<()> {
    let splits = load_splits(cfg)?;
    let stage = train_evaluator(&splits, &cfg.evaluator, root(cfg).child("evaluator"))?;
    let dir = save(
        &mut rec,
        cfg,
        EVALUATOR,
        &stage.params,
        serde_json::to_value(&cfg.evaluator)?,
        cfg.evaluator.steps as u64,
    )?;
    rec.write(
        &report_path(cfg, "evaluator_curve.csv"),
        ctxdiff::evaluator::curve_csv(&stage.training.curve).as_bytes(),
    )?;
    let h = &stage.heldout;
    rec.write(
        &report_path(cfg, "evaluator_heldout.json"),
        &pretty(&json!({
            "pairs": cfg.evaluator.heldout_pairs,
            "stats": h,
            "global_gap": h.global_gap(),
            "fine_gap": h.r_fine_matched - h.r_fine_shuffled,
        }))?,
    )?;
    println!(
        "evaluator: AUC {:.4}, R_global matched {:.4} vs shuffled {:.4} -> {}",
        h.auc,
        h.r_global_matched,
        h.r_global_shuffled,
        dir.display()
    );
    finish(rec, cfg)
}

fn pretrain_diffusion(cfg: &RunConfig, mut rec: Recorder) -> Result<()> {
    let splits = load_splits(cfg)?;
    let evaluator = load_store(cfg, EVALUATOR)?;
    ctxdiff::diffusion::Codec::standard()?.self_check(CODEC_CHECK_IMAGES, root(cfg).child("codec_check"))?;
    let stage = train_diffusion(&evaluator, &splits, &cfg.diffusion, root(cfg).child("diffusion"))?;
    let dir = save(
        &mut rec,
        cfg,
        DIFFUSION,
        &stage.params,
        serde_json::to_value(&cfg.diffusion)?,
        cfg.diffusion.steps as u64,
    )?;
    let t = &stage.training;
    rec.write(
        &report_path(cfg, "diffusion_loss.csv"),
        ctxdiff::diffusion::pretrain::loss_csv(&t.curve).as_bytes(),
    )?;
    let ratio = t.final_val_loss / t.initial_val_loss;
    rec.write(
        &report_path(cfg, "diffusion_summary.json"),
        &pretty(&json!({
            "initial_val_loss": t.initial_val_loss,
            "final_val_loss": t.final_val_loss,
            "ratio": ratio,
        }))?,
    )?;
    println!(
        "diffusion: validation loss {:.4} -> {:.4} (ratio {:.3}) -> {}",
        t.initial_val_loss,
        t.final_val_loss,
        ratio,
        dir.display()
    );
    finish(rec, cfg)
}

fn finetune(cfg: &RunConfig, mut rec: Recorder) -> Result<()> {
    let splits = load_splits(cfg)?;
    let base = load_models(cfg, false)?;
    let before = frozen_hash(&base.denoiser);
    let heldout = &splits.heldout[..cfg.finetune.heldout_contexts];
    let (models, outcome) = finetune_variant(&base, &splits.train, heldout, &cfg.finetune, cfg.seed)?;
    let after = frozen_hash(&models.denoiser);
    if before != after {
        anyhow::bail!("frozen denoiser weights changed during fine-tuning");
    }
    let mut adapters = ParamStore::new();
    for p in models.denoiser.iter().filter(|p| is_adapter(&p.name)) {
        adapters.insert(p.name.clone(), p.value.clone())?;
    }
    let steps = outcome.log.rows().len() as u64;
    let dir = save(&mut rec, cfg, ADAPTERS, &adapters, serde_json::to_value(&cfg.finetune)?, steps)?;
    rec.write(&report_path(cfg, "finetune_convergence.csv"), outcome.log.to_csv().as_bytes())?;
    rec.write(
        &report_path(cfg, "finetune_heldout.json"),
        &pretty(&json!({
            "contexts": heldout.len(),
            "points": outcome.heldout,
            "initial": outcome.initial(),
            "last": outcome.last(),
            "gain": outcome.gain(),
            "stop": outcome.stop,
            "optimizer_steps": steps,
            "skipped_micro_steps": outcome.skipped,
            "frozen_hash_before": before,
            "frozen_hash_after": after,
        }))?,
    )?;
    println!(
        "finetune: {} steps ({:?}), held-out objective {:.4} -> {:.4} -> {}",
        steps,
        outcome.stop,
        outcome.initial().objective,
        outcome.last().objective,
        dir.display()
    );
    finish(rec, cfg)
}

/// Models needed by a generator choice; `None` for reference-only baselines.
fn generator_models(cfg: &RunConfig, baseline: Option<Baseline>) -> Result<Option<Models>> {
    match baseline {
        None => Ok(Some(load_models(cfg, true)?)),
        Some(Baseline::NoFinetune) => Ok(Some(load_models(cfg, false)?)),
        Some(_) => Ok(None),
    }
}

fn make_generator<'a>(
    cfg: &RunConfig,
    baseline: Option<Baseline>,
    models: Option<&'a Models>,
) -> Result<Box<dyn ImageGenerator + 'a>> {
    Ok(match baseline {
        Some(Baseline::PixelJitter) => Box::new(PixelJitter::default()),
        Some(Baseline::Identity) => Box::new(IdentityGenerator),
        Some(Baseline::Gray) => Box::new(ConstantGray::default()),
        None | Some(Baseline::NoFinetune) => Box::new(DiffusionGenerator {
            models: models.context("diffusion generator needs models")?,
            steps: cfg.bench.ddim_steps,
        }),
    })
}

fn label(baseline: Option<Baseline>) -> &'static str {
    baseline.map_or("finetuned", Baseline::label)
}

fn generate(
    cfg: &RunConfig,
    mut rec: Recorder,
    count: usize,
    seeds: Option<usize>,
    baseline: Option<Baseline>,
) -> Result<()> {
    let n_seeds = seeds.unwrap_or(cfg.bench.n_seeds);
    if count == 0 || n_seeds == 0 {
        return Err(ConfigError::Invalid("--count and --seeds must be positive".into()).into());
    }
    let eval = load_split(cfg, "eval")?;
    let models = generator_models(cfg, baseline)?;
    let generator = make_generator(cfg, baseline, models.as_ref())?;
    let dir = report_path(cfg, "generated").join(label(baseline));
    let key = root(cfg).child("generate");
    for context in eval.iter().take(count) {
        rec.write(&dir.join(format!("ctx{:05}_ref.ppm", context.id)), &context.image().to_ppm())?;
        for (s, img) in generate_set(context, generator.as_ref(), n_seeds, key)?.iter().enumerate() {
            rec.write(&dir.join(format!("ctx{:05}_s{s:02}.ppm", context.id)), &img.to_ppm())?;
        }
    }
    println!(
        "generate: {} contexts x {n_seeds} seeds -> {}",
        count.min(eval.len()),
        dir.display()
    );
    finish(rec, cfg)
}

fn featurizer_models(cfg: &RunConfig, models: Option<Models>) -> Result<Models> {
    match models {
        Some(m) => Ok(m),
        None => load_models(cfg, false),
    }
}

fn bench(cfg: &RunConfig, mut rec: Recorder, baseline: Option<Baseline>) -> Result<()> {
    let eval = load_split(cfg, "eval")?;
    let contexts = &eval[..cfg.bench.eval_contexts];
    let models = featurizer_models(cfg, generator_models(cfg, baseline)?)?;
    let generator = make_generator(cfg, baseline, Some(&models))?;
    let answerer: Box<dyn Answerer> = match cfg.answerer.kind {
        AnswererKind::RasterOracle => Box::new(RasterOracle),
        AnswererKind::Neural => {
            let train = load_split(cfg, "train")?;
            Box::new(NeuralAnswerer::train(&train, &cfg.answerer.neural, root(cfg).child("answerer"))?)
        }
    };
    let evaluation = evaluate(
        contexts,
        generator.as_ref(),
        answerer.as_ref(),
        &RasterOracle,
        &models,
        &cfg.bench,
        &cfg.hash(),
        root(cfg).child("bench"),
    )?;
    let report = &evaluation.report;
    let name = label(baseline);
    rec.write(&report_path(cfg, &format!("bench_{name}.json")), &pretty(report)?)?;
    rec.write(&report_path(cfg, &format!("bench_{name}.csv")), report.to_csv().as_bytes())?;
    println!(
        "bench {name}: ACC {:.2} ACC+ {:.2} consistency {:.2} pairwise {} frechet {:.4}",
        report.overall.acc,
        report.overall.acc_plus,
        report.overall.consistency,
        report
            .diversity
            .pairwise_gen
            .map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}")),
        report.frechet
    );
    finish(rec, cfg)
}

fn sweep_seeds(cfg: &RunConfig, mut rec: Recorder, baseline: Option<Baseline>) -> Result<()> {
    let eval = load_split(cfg, "eval")?;
    let contexts = &eval[..cfg.bench.sweep_contexts];
    let models = featurizer_models(cfg, generator_models(cfg, baseline)?)?;
    let generator = make_generator(cfg, baseline, Some(&models))?;
    let sweep = seed_sweep(
        contexts,
        generator.as_ref(),
        &models,
        &cfg.bench.seed_counts,
        root(cfg).child("sweep"),
    )?;
    let name = label(baseline);
    rec.write(&report_path(cfg, &format!("sweep_{name}.csv")), sweep.to_csv().as_bytes())?;
    rec.write(&report_path(cfg, &format!("sweep_{name}.json")), &pretty(&sweep.summaries)?)?;
    for s in &sweep.summaries {
        println!(
            "sweep {name}: n={} contexts={} median {}",
            s.n_seeds,
            s.count,
            s.median.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
        );
    }
    finish(rec, cfg)
}

fn ablate(cfg: &RunConfig, mut rec: Recorder) -> Result<()> {
    let splits = load_splits(cfg)?;
    let base = load_models(cfg, false)?;
    let report = ablation_harness(
        &base,
        &splits.train,
        &splits.heldout[..cfg.finetune.heldout_contexts],
        &splits.eval[..cfg.bench.eval_contexts],
        &cfg.finetune,
        &cfg.bench,
        &RasterOracle,
        &cfg.ablation.seeds,
        root(cfg).child("ablation"),
    )?;
    rec.write(&report_path(cfg, "ablation.csv"), report.to_csv().as_bytes())?;
    rec.write(&report_path(cfg, "ablation.json"), &pretty(&report)?)?;
    for r in &report.rows {
        println!("ablate {}: fidelity {:.2} frechet {:.4}", r.setting, r.fidelity, r.frechet);
    }
    if let Some(d) = &report.directional {
        println!(
            "ablate: both rewards {:.2} vs no fine-tuning {:.2} ({})",
            d.both_rewards,
            d.no_finetune,
            if d.holds { "holds" } else { "does not hold" }
        );
    }
    finish(rec, cfg)
}

fn gradcheck(cfg: &RunConfig, mut rec: Recorder) -> Result<()> {
    let cases = full_suite(cfg.seed)?;
    let mut csv = String::from("case,max_rel_err,max_abs_err,tol,passed\n");
    for c in &cases {
        csv.push_str(&format!(
            "{},{:e},{:e},{:e},{}\n",
            c.name.replace(',', ";"),
            c.report.max_rel_err,
            c.report.max_abs_err,
            c.tol,
            c.passed()
        ));
    }
    rec.write(&report_path(cfg, "gradcheck.csv"), csv.as_bytes())?;
    let failed = cases.iter().filter(|c| !c.passed()).count();
    for c in cases.iter().filter(|c| !c.passed()) {
        eprintln!("FAIL {}: rel {:.3e} > {:.0e}", c.name, c.report.max_rel_err, c.tol);
    }
    println!("gradcheck: {} of {} cases pass", cases.len() - failed, cases.len());
    finish(rec, cfg)?;
    if failed > 0 {
        return Err(GradcheckFailed {
            failed,
            total: cases.len(),
        }
        .into());
    }
    Ok(())
}
