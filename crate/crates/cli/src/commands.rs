//! Command implementations. Each returns the files it wrote and a JSON
//! summary for `run.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use dse_core::bridge::{make_step_schedule, EpsSource, StepSchedule};
use dse_core::despeckle::{train_blindspot, BiasCorrection, DenoiserModel, Despeckler, KernelBank};
use dse_core::latent::{self, LatentCodec};
use dse_core::metrics::{
    confusion, parse_report_csv, psnr, report_table, seg_metrics, ssim, train_segmenter, ConfusionCounts, ReportRow,
    SsimParams,
};
use dse_core::rng::derive_seed;
use dse_core::speckle::{self, estimate_looks, SpeckleParams};
use dse_core::synth::{gen_corpus, read_manifest, ManifestEntry};
use dse_core::tile::{export_png, normalize, read_tile, split_dataset, to_db, write_tile, Tile, TileKind, DB_FLOOR};
use dse_core::translator::{
    ensemble_translate, load_model, save_model, train_translator, translate_stack, Pipeline, SavedTranslator,
    TrainConfig, TrainPair, NORM_HI_PCT, NORM_LO_PCT,
};

use crate::config::{eps_source, CodecKind, DespeckleMethod, RunConfig};
use crate::{output, require, CliError, Ctx, Outcome};

// Labels for seeds derived from the command seed.
const SEED_SPLIT: u64 = 1;
const SEED_DENOISER: u64 = 2;
const SEED_SEGMENTER: u64 = 3;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SplitFile {
    train: Vec<String>,
    val: Vec<String>,
    test: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Subset {
    Train,
    Test,
}

struct Corpus {
    dir: PathBuf,
    entries: Vec<ManifestEntry>,
    split: Option<SplitFile>,
}

impl Corpus {
    fn open(dir: &Path) -> Result<Self, CliError> {
        let entries = read_manifest(dir)?;
        let split_path = dir.join("split.json");
        let split = if split_path.exists() {
            let text = fs::read_to_string(&split_path)?;
            Some(serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("split.json: {e}")))?)
        } else {
            None
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            entries,
            split,
        })
    }

    /// Entries of a split; without `split.json` every scene is used.
    fn subset(&self, which: Subset) -> Vec<&ManifestEntry> {
        let Some(split) = &self.split else {
            return self.entries.iter().collect();
        };
        let ids = match which {
            Subset::Train => &split.train,
            Subset::Test => &split.test,
        };
        self.entries.iter().filter(|e| ids.contains(&e.id)).collect()
    }

    fn tile(&self, rel: &str) -> Result<Tile, CliError> {
        Ok(read_tile(self.dir.join(rel))?)
    }

    fn sar_stack(&self, e: &ManifestEntry, n: usize) -> Result<Vec<Tile>, CliError> {
        if e.sar_noisy_paths.len() < n {
            return Err(CliError::Usage(format!(
                "scene {} has {} SAR acquisitions, {n} requested",
                e.id,
                e.sar_noisy_paths.len()
            )));
        }
        e.sar_noisy_paths[..n].iter().map(|p| self.tile(p)).collect()
    }
}

fn to_json<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Three-channel dB preview of a SAR tile for PNG export.
fn sar_preview(tile: &Tile) -> Result<Tile, CliError> {
    let comp = dse_core::tile::compose_sar3_pair(tile).or_else(|_| {
        if tile.channels() == 1 {
            Tile::stack(&[tile, tile, tile], tile.kind())
        } else {
            Err(dse_core::error::DseError::Shape("cannot preview this tile".into()))
        }
    })?;
    let db = to_db(&comp, DB_FLOOR)?;
    Ok(normalize(&db, 1.0, 99.0)?)
}

/// Variance map scaled to `[0, 1]` by its maximum for display.
fn variance_preview(var: &Tile) -> Result<Tile, CliError> {
    let max = var.data().iter().cloned().fold(0.0f32, f32::max);
    let data = var.data().iter().map(|&v| if max > 0.0 { v / max } else { 0.0 }).collect();
    Ok(Tile::new(var.width(), var.height(), 1, TileKind::Latent, data)?)
}

fn build_codec(cfg: &RunConfig) -> Result<LatentCodec, CliError> {
    Ok(match cfg.codec.kind {
        CodecKind::Identity => LatentCodec::identity(3),
        CodecKind::Pool => LatentCodec::pool(3, cfg.codec.factor)?,
        CodecKind::Learned => LatentCodec::from_bytes(&fs::read(require(&cfg.paths.codec, "codec")?)?)?,
    })
}

fn bias(cfg: &RunConfig) -> BiasCorrection {
    match cfg.despeckle.looks {
        Some(looks) => BiasCorrection::Analytic { looks },
        None => BiasCorrection::Empirical,
    }
}

fn load_denoiser(path: &Path) -> Result<DenoiserModel, CliError> {
    Ok(DenoiserModel::from_bytes(&fs::read(path)?)?)
}

/// The despeckler used inside the translation pipeline, if any.
fn pipeline_despeckler(cfg: &RunConfig) -> Result<Option<Despeckler>, CliError> {
    if !cfg.despeckle.in_pipeline {
        return Ok(None);
    }
    Ok(match cfg.despeckle.method {
        DespeckleMethod::None => None,
        DespeckleMethod::Kernel => Some(Despeckler::Kernel {
            bank: KernelBank::default_bank(cfg.despeckle.selection),
            bias: bias(cfg),
        }),
        DespeckleMethod::Blindspot => Some(Despeckler::Model(load_denoiser(require(&cfg.paths.denoiser, "denoiser")?)?)),
    })
}

fn load_translator(cfg: &RunConfig) -> Result<(SavedTranslator, Pipeline, StepSchedule), CliError> {
    let saved = load_model(require(&cfg.paths.model, "model")?)?;
    let mut pipeline = Pipeline::new(saved.codec.clone(), saved.schedule.clone());
    pipeline.despeckler = pipeline_despeckler(cfg)?;
    let steps = make_step_schedule(saved.schedule.total_steps(), cfg.steps)?;
    Ok((saved, pipeline, steps))
}

fn temporal_count(saved: &SavedTranslator) -> usize {
    let a = saved.predictor.arch();
    (a.context_channels / a.latent_channels).max(1)
}

/// Noise source; the empirical kind pools encoded EO values of the corpus.
fn noise(cfg: &RunConfig, codec: &LatentCodec) -> Result<EpsSource, CliError> {
    eps_source(&cfg.eps, || {
        let corpus = Corpus::open(require(&cfg.paths.data, "data")?)?;
        let mut pool = Vec::new();
        for e in corpus.subset(Subset::Train) {
            pool.extend(codec.encode(&corpus.tile(&e.eo_path)?)?.data);
        }
        Ok(pool)
    })
}

fn write_report(ctx: &Ctx, outputs: &mut Vec<String>, rows: &[ReportRow]) -> Result<(), CliError> {
    let report = report_table(rows).map_err(runtime)?;
    fs::write(output(ctx, outputs, "report.csv"), &report.csv)?;
    fs::write(output(ctx, outputs, "report.txt"), &report.text)?;
    Ok(())
}

fn rows_json(rows: &[ReportRow]) -> Value {
    Value::Object(
        rows.iter()
            .map(|(label, m)| (label.clone(), Value::Object(m.iter().map(|(k, v)| (k.clone(), json!(v))).collect())))
            .collect(),
    )
}

fn write_curve(path: &Path, curve: &[f64]) -> Result<(), CliError> {
    let mut text = String::from("epoch,loss\n");
    for (i, l) in curve.iter().enumerate() {
        text.push_str(&format!("{},{l}\n", i + 1));
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn gen_data(ctx: &Ctx) -> Result<Outcome, CliError> {
    let cfg = &ctx.config;
    let template = cfg.scene.spec(0);
    template.validate()?;
    let entries = gen_corpus(cfg.n_scenes, &template, cfg.seed, &ctx.out)?;
    let mut outputs = vec!["manifest.json".to_string(), "spec.json".to_string()];
    let mut water = Vec::with_capacity(entries.len());
    for e in &entries {
        outputs.extend([e.eo_path.clone(), e.sar_clean_path.clone(), e.mask_path.clone()]);
        outputs.extend(e.sar_noisy_paths.iter().cloned());
        water.push(read_tile(ctx.out.join(&e.mask_path))?.mean());
    }
    let ids: Vec<String> = entries.iter().map(|e| e.id.clone()).collect();
    let (train, val, test) = split_dataset(&ids, &cfg.split.spec(derive_seed(cfg.seed, SEED_SPLIT)))?;
    let split = SplitFile { train, val, test };
    fs::write(
        output(ctx, &mut outputs, "split.json"),
        serde_json::to_string_pretty(&split).map_err(runtime)? + "\n",
    )?;
    let mean_water = water.iter().sum::<f64>() / water.len() as f64;
    Ok(Outcome {
        outputs,
        results: json!({
            "n_scenes": entries.len(),
            "water_fraction_mean": mean_water,
            "split": {"train": split.train.len(), "val": split.val.len(), "test": split.test.len()},
        }),
    })
}

pub fn simulate_speckle(ctx: &Ctx) -> Result<Outcome, CliError> {
    let cfg = &ctx.config;
    let [input] = cfg.paths.input.as_slice() else {
        return Err(CliError::Usage("simulate-speckle needs exactly one --input".into()));
    };
    let clean = read_tile(input)?;
    let params = SpeckleParams::new(cfg.speckle.looks, cfg.seed)?;
    let noisy = speckle::simulate_speckle(&clean, &params)?;
    let mut outputs = Vec::new();
    write_tile(&noisy, output(ctx, &mut outputs, "noisy.dset"))?;
    export_png(&sar_preview(&noisy)?, output(ctx, &mut outputs, "noisy.png"), 1.0)?;
    let ratio: Vec<f32> = noisy
        .data()
        .iter()
        .zip(clean.data())
        .filter(|(_, &c)| c > 0.0)
        .map(|(&n, &c)| n / c)
        .collect();
    let looks_estimate = if ratio.len() >= 100 {
        let t = Tile::new(ratio.len(), 1, 1, TileKind::SarLinear, ratio)?;
        estimate_looks(&t)?.looks
    } else {
        f64::NAN
    };
    Ok(Outcome {
        outputs,
        results: json!({"looks": cfg.speckle.looks, "looks_estimate": looks_estimate}),
    })
}

pub fn despeckle(ctx: &Ctx) -> Result<Outcome, CliError> {
    let cfg = &ctx.config;
    if cfg.paths.input.is_empty() && cfg.paths.data.is_none() {
        return Err(CliError::Usage("despeckle needs --input or --data".into()));
    }
    let corpus = cfg.paths.data.as_deref().map(Corpus::open).transpose()?;
    let mut outputs = Vec::new();
    let mut results = serde_json::Map::new();
    let despeckler = match cfg.despeckle.method {
        DespeckleMethod::None => return Err(CliError::Usage("despeckle.method is none".into())),
        DespeckleMethod::Kernel => Despeckler::Kernel {
            bank: KernelBank::default_bank(cfg.despeckle.selection),
            bias: bias(cfg),
        },
        DespeckleMethod::Blindspot => match &cfg.paths.denoiser {
            Some(p) => Despeckler::Model(load_denoiser(p)?),
            None => {
                let corpus = corpus
                    .as_ref()
                    .ok_or_else(|| CliError::Usage("training a blind-spot model needs --data".into()))?;
                let tiles = corpus
                    .subset(Subset::Train)
                    .iter()
                    .map(|e| corpus.tile(&e.sar_noisy_paths[0]))
                    .collect::<Result<Vec<_>, _>>()?;
                let bs = cfg.blindspot.build(derive_seed(cfg.seed, SEED_DENOISER), cfg.despeckle.looks);
                let trained = train_blindspot(&tiles, &bs)?;
                fs::write(output(ctx, &mut outputs, "denoiser.dsem"), trained.model.to_bytes())?;
                write_curve(&output(ctx, &mut outputs, "denoiser_loss.csv"), &trained.loss_curve)?;
                results.insert("denoiser_loss_curve".into(), to_json(&trained.loss_curve));
                Despeckler::Model(trained.model)
            }
        },
    };
    for (i, p) in cfg.paths.input.iter().enumerate() {
        let out = despeckler.apply(&read_tile(p)?)?;
        write_tile(&out, output(ctx, &mut outputs, format!("despeckled_{i}.dset")))?;
        export_png(&sar_preview(&out)?, output(ctx, &mut outputs, format!("despeckled_{i}.png")), 1.0)?;
    }
    if let Some(corpus) = &corpus {
        let sp = SsimParams::default();
        let (mut pn, mut pd, mut sn, mut sd) = (0.0, 0.0, 0.0, 0.0);
        let scenes = corpus.subset(Subset::Test);
        for e in &scenes {
            let clean = corpus.tile(&e.sar_clean_path)?;
            let noisy = corpus.tile(&e.sar_noisy_paths[0])?;
            let den = despeckler.apply(&noisy)?;
            pn += psnr(&noisy, &clean, 1.0)?;
            pd += psnr(&den, &clean, 1.0)?;
            sn += ssim(&noisy, &clean, &sp)?;
            sd += ssim(&den, &clean, &sp)?;
        }
        let n = scenes.len().max(1) as f64;
        let rows: Vec<ReportRow> = vec![
            ("noisy".into(), vec![("psnr".into(), pn / n), ("ssim".into(), sn / n)]),
            ("despeckled".into(), vec![("psnr".into(), pd / n), ("ssim".into(), sd / n)]),
        ];
        write_report(ctx, &mut outputs, &rows)?;
        results.insert("metrics".into(), rows_json(&rows));
        results.insert("psnr_gain".into(), json!((pd - pn) / n));
    }
    Ok(Outcome {
        outputs,
        results: Value::Object(results),
    })
}

pub fn train_codec(ctx: &Ctx) -> Result<Outcome, CliError> {
    let cfg = &ctx.config;
    let corpus = Corpus::open(require(&cfg.paths.data, "data")?)?;
    let load = |which| {
        corpus
            .subset(which)
            .iter()
            .map(|e| corpus.tile(&e.eo_path))
            .collect::<Result<Vec<_>, _>>()
    };
    let train = load(Subset::Train)?;
    let trained = latent::train_codec(&train, &cfg.codec_train.build(cfg.seed))?;
    let mut outputs = Vec::new();
    fs::write(output(ctx, &mut outputs, "codec.dsem"), trained.codec.to_bytes())?;
    write_curve(&output(ctx, &mut outputs, "loss.csv"), &trained.loss_curve)?;
    let pool = LatentCodec::pool(3, cfg.codec_train.factor)?;
    let (mut learned_psnr, mut pool_psnr) = (0.0, 0.0);
    let test = load(Subset::Test)?;
    for t in &test {
        let rec = |c: &LatentCodec| -> Result<f64, CliError> {
            let r = c.decode(&c.encode(t)?, TileKind::Latent)?;
            let r = Tile::new(r.width(), r.height(), r.channels(), TileKind::EoRgb, r.data().to_vec())?;
            Ok(psnr(&r, t, 1.0)?)
        };
        learned_psnr += rec(&trained.codec)?;
        pool_psnr += rec(&pool)?;
    }
    let n = test.len().max(1) as f64;
    Ok(Outcome {
        outputs,
        results: json!({
            "loss_curve": trained.loss_curve,
            "test_psnr_learned": learned_psnr / n,
            "test_psnr_pool": pool_psnr / n,
        }),
    })
}

pub fn train(ctx: &Ctx) -> Result<Outcome, CliError> {
    let cfg = &ctx.config;
    let corpus = Corpus::open(require(&cfg.paths.data, "data")?)?;
    let codec = build_codec(cfg)?;
    let mut pipeline = Pipeline::new(codec.clone(), cfg.schedule.build()?);
    pipeline.despeckler = pipeline_despeckler(cfg)?;
    let pairs = corpus
        .subset(Subset::Train)
        .iter()
        .map(|e| Ok(TrainPair {
            sar: corpus.sar_stack(e, cfg.train.temporal)?,
            eo: corpus.tile(&e.eo_path)?,
        }))
        .collect::<Result<Vec<_>, CliError>>()?;
    let tc = TrainConfig {
        epochs: cfg.train.epochs,
        batch_size: cfg.train.batch_size,
        lr: cfg.train.lr,
        seed: cfg.seed,
        eps: noise(cfg, &codec)?.with_scale(1.0)?,
        width: cfg.train.width,
        time_dim: cfg.train.time_dim,
    };
    let trained = train_translator(&pairs, &pipeline, &tc)?;
    let mut outputs = Vec::new();
    save_model(output(ctx, &mut outputs, "model.dsem"), &trained.predictor, &codec, &pipeline.schedule)?;
    write_curve(&output(ctx, &mut outputs, "loss.csv"), &trained.loss_curve)?;
    Ok(Outcome {
        outputs,
        results: json!({
            "pairs": pairs.len(),
            "parameters": trained.predictor.params().num_scalars(),
            "loss_curve": trained.loss_curve,
        }),
    })
}

fn read_inputs(cfg: &RunConfig) -> Result<Vec<Tile>, CliError> {
    if cfg.paths.input.is_empty() {
        return Err(CliError::Usage("missing --input".into()));
    }
    cfg.paths.input.iter().map(|p| Ok(read_tile(p)?)).collect()
}

pub fn translate(ctx: &Ctx) -> Result<Outcome, CliError> {
    let cfg = &ctx.config;
    let (saved, pipeline, steps) = load_translator(cfg)?;
    let sar = read_inputs(cfg)?;
    let eps = noise(cfg, &saved.codec)?;
    let out = translate_stack(&sar, &saved.predictor, &pipeline, &steps, &eps, cfg.seed)?;
    let mut outputs = Vec::new();
    write_tile(&out, output(ctx, &mut outputs, "syneo.dset"))?;
    export_png(&out, output(ctx, &mut outputs, "syneo.png"), 1.0)?;
    Ok(Outcome {
        outputs,
        results: json!({"mean": out.mean(), "steps": steps.len() - 1}),
    })
}

pub fn ensemble(ctx: &Ctx) -> Result<Outcome, CliError> {
    let cfg = &ctx.config;
    let (saved, pipeline, steps) = load_translator(cfg)?;
    let sar = read_inputs(cfg)?;
    let eps = noise(cfg, &saved.codec)?;
    let res = ensemble_translate(&sar, &saved.predictor, &pipeline, &steps, &eps, cfg.ensemble.k, cfg.seed)?;
    let mut outputs = Vec::new();
    for (i, s) in res.samples.iter().enumerate() {
        write_tile(s, output(ctx, &mut outputs, format!("sample_{i:02}.dset")))?;
    }
    write_tile(&res.mean, output(ctx, &mut outputs, "mean.dset"))?;
    export_png(&res.mean, output(ctx, &mut outputs, "mean.png"), 1.0)?;
    write_tile(&res.variance, output(ctx, &mut outputs, "variance.dset"))?;
    export_png(&variance_preview(&res.variance)?, output(ctx, &mut outputs, "variance.png"), 1.0)?;
    let v = res.variance.data();
    Ok(Outcome {
        outputs,
        results: json!({
            "k": res.k(),
            "variance_mean": res.variance.mean(),
            "variance_max": v.iter().cloned().fold(0.0f32, f32::max),
        }),
    })
}

pub fn eval_translation(ctx: &Ctx) -> Result<Outcome, CliError> {
    let cfg = &ctx.config;
    let corpus = Corpus::open(require(&cfg.paths.data, "data")?)?;
    let (saved, pipeline, steps) = load_translator(cfg)?;
    let eps = noise(cfg, &saved.codec)?;
    let n_temporal = temporal_count(&saved);
    let sp = SsimParams::default();
    let mut outputs = Vec::new();
    fs::create_dir_all(ctx.out.join("syneo"))?;
    let scenes = corpus.subset(Subset::Test);
    let (mut ps, mut ss, mut pa, mut sa) = (0.0, 0.0, 0.0, 0.0);
    for (i, e) in scenes.iter().enumerate() {
        let sar = corpus.sar_stack(e, n_temporal)?;
        let eo = corpus.tile(&e.eo_path)?;
        let syn = translate_stack(&sar, &saved.predictor, &pipeline, &steps, &eps, cfg.seed.wrapping_add(i as u64))?;
        write_tile(&syn, output(ctx, &mut outputs, format!("syneo/{}_syneo.dset", e.id)))?;
        let comp = pipeline.prepare_sar(&sar[0])?.with_kind(TileKind::EoRgb)?;
        ps += psnr(&syn, &eo, 1.0)?;
        ss += ssim(&syn, &eo, &sp)?;
        pa += psnr(&comp, &eo, 1.0)?;
        sa += ssim(&comp, &eo, &sp)?;
    }
    let n = scenes.len().max(1) as f64;
    let rows: Vec<ReportRow> = vec![
        ("SAR".into(), vec![("psnr".into(), pa / n), ("ssim".into(), sa / n)]),
        ("SynEO".into(), vec![("psnr".into(), ps / n), ("ssim".into(), ss / n)]),
    ];
    write_report(ctx, &mut outputs, &rows)?;
    Ok(Outcome {
        outputs,
        results: json!({"scenes": scenes.len(), "metrics": rows_json(&rows)}),
    })
}

/// The SAR observation as a segmenter sees it: normalized composite, speckle kept.
fn raw_sar(noisy: &Tile) -> Result<Tile, CliError> {
    let comp = dse_core::tile::compose_sar3_pair(noisy)?;
    Ok(normalize(&comp, NORM_LO_PCT, NORM_HI_PCT)?.with_kind(TileKind::Latent)?)
}

/// Per-scene modality inputs for segmentation.
struct SegInputs {
    sar: Tile,
    eo: Tile,
    syn: Option<Tile>,
    mask: Tile,
}

fn seg_inputs(
    corpus: &Corpus,
    which: Subset,
    pipeline: &Pipeline,
    translator: Option<(&SavedTranslator, &StepSchedule, &EpsSource)>,
    seed: u64,
) -> Result<Vec<SegInputs>, CliError> {
    corpus
        .subset(which)
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let noisy = corpus.tile(&e.sar_noisy_paths[0])?;
            let syn = match translator {
                Some((saved, steps, eps)) => {
                    let sar = corpus.sar_stack(e, temporal_count(saved))?;
                    Some(translate_stack(&sar, &saved.predictor, pipeline, steps, eps, seed.wrapping_add(i as u64))?)
                }
                None => None,
            };
            Ok(SegInputs {
                sar: raw_sar(&noisy)?,
                eo: corpus.tile(&e.eo_path)?.with_kind(TileKind::Latent)?,
                syn: syn.map(|s| s.with_kind(TileKind::Latent)).transpose()?,
                mask: corpus.tile(&e.mask_path)?,
            })
        })
        .collect()
}

/// Channel stack for a named modality.
fn modality(s: &SegInputs, name: &str) -> Result<Tile, CliError> {
    let syn = || s.syn.as_ref().ok_or_else(|| CliError::Usage("SynEO modalities need --model".into()));
    Ok(match name {
        "SAR" => s.sar.clone(),
        "EO" => s.eo.clone(),
        "SAR+EO" => Tile::stack(&[&s.sar, &s.eo], TileKind::Latent)?,
        "SynEO" => syn()?.clone(),
        "SAR+SynEO" => Tile::stack(&[&s.sar, syn()?], TileKind::Latent)?,
        other => return Err(CliError::Usage(format!("unknown modality {other}"))),
    })
}

pub fn eval_seg(ctx: &Ctx) -> Result<Outcome, CliError> {
    let cfg = &ctx.config;
    let corpus = Corpus::open(require(&cfg.paths.data, "data")?)?;
    let mut outputs = Vec::new();
    let rows: Vec<ReportRow> = if let Some(pred_dir) = &cfg.paths.pred {
        let mut counts = ConfusionCounts::default();
        for e in corpus.subset(Subset::Test) {
            let pred = read_tile(pred_dir.join(&e.mask_path))?;
            counts = counts + confusion(&pred, &corpus.tile(&e.mask_path)?)?;
        }
        vec![("pred".into(), seg_metrics(&counts).to_row())]
    } else {
        let translator = cfg.paths.model.as_ref().map(|_| load_translator(cfg)).transpose()?;
        let (pipeline, eps) = match &translator {
            Some((saved, p, _)) => (p.clone(), Some(noise(cfg, &saved.codec)?)),
            None => {
                let mut p = Pipeline::new(build_codec(cfg)?, cfg.schedule.build()?);
                p.despeckler = pipeline_despeckler(cfg)?;
                (p, None)
            }
        };
        let tr = translator.as_ref().zip(eps.as_ref()).map(|((s, _, st), e)| (s, st, e));
        let train = seg_inputs(&corpus, Subset::Train, &pipeline, tr, cfg.seed)?;
        let test = seg_inputs(&corpus, Subset::Test, &pipeline, tr, cfg.seed.wrapping_add(1 << 32))?;
        let mut names = vec!["SAR", "EO", "SAR+EO"];
        if tr.is_some() {
            names.extend(["SynEO", "SAR+SynEO"]);
        }
        let seg_cfg = cfg.segmenter.build(derive_seed(cfg.seed, SEED_SEGMENTER));
        let mut rows = Vec::new();
        for name in names {
            let inputs = train.iter().map(|s| modality(s, name)).collect::<Result<Vec<_>, _>>()?;
            let masks: Vec<Tile> = train.iter().map(|s| s.mask.clone()).collect();
            let (model, _) = train_segmenter(&inputs, &masks, &seg_cfg)?;
            let mut counts = ConfusionCounts::default();
            for s in &test {
                counts = counts + confusion(&model.predict(&modality(s, name)?)?, &s.mask)?;
            }
            rows.push((name.to_string(), seg_metrics(&counts).to_row()));
        }
        rows
    };
    write_report(ctx, &mut outputs, &rows)?;
    Ok(Outcome {
        outputs,
        results: json!({"metrics": rows_json(&rows)}),
    })
}

pub fn report(ctx: &Ctx) -> Result<Outcome, CliError> {
    let cfg = &ctx.config;
    if cfg.paths.runs.is_empty() {
        return Err(CliError::Usage("report needs --runs".into()));
    }
    let mut rows = Vec::new();
    for dir in &cfg.paths.runs {
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let csv = fs::read_to_string(dir.join("report.csv"))?;
        for (label, m) in parse_report_csv(&csv)? {
            rows.push((format!("{name}/{label}"), m));
        }
    }
    let mut outputs = Vec::new();
    write_report(ctx, &mut outputs, &rows)?;
    Ok(Outcome {
        outputs,
        results: json!({"rows": rows.len()}),
    })
}
