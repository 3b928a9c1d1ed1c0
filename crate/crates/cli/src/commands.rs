//! Subcommand implementations.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use subitize::config::PipelineConfig;
use subitize::data::{self, DatasetManifest, ManifestEntry, SplitSpec};
use subitize::eval::{self, ClassAp};
use subitize::exec::Execution;
use subitize::nnet::gradcheck::{self, GradCheckConfig};
use subitize::nnet::train::TrainingSet;
use subitize::nnet::{self, model, train, ModelState, TrainConfig};
use subitize::retrieval::{self, EmbeddingIndex, IndexItem, Judgments, Method, NeighborTable, Query};
use subitize::synth::{self, procedural, CutoutLibrary};
use subitize::{detect, featviz, imaging, CountLabel, RasterImage};

use crate::failure::{CheckFailed, MissingFile};
use crate::{Cli, Command, Style};

/// Error for flag values that parse but make no sense (exit code 2).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct BadArgument(pub String);

struct Ctx<'a> {
    cli: &'a Cli,
    cfg: PipelineConfig,
    exec: Execution,
}

impl Ctx<'_> {
    fn out(&self) -> Result<&Path> {
        self.cli
            .out
            .as_deref()
            .ok_or_else(|| BadArgument("--out is required for this subcommand".into()).into())
    }

    /// Creates `--out` as a directory.
    fn out_dir(&self) -> Result<&Path> {
        let dir = self.out()?;
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    /// Treats `--out` as a file and creates its parent directory.
    fn out_file(&self) -> Result<&Path> {
        let file = self.out()?;
        if let Some(parent) = file.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        Ok(file)
    }

    /// Writes the resolved configuration next to the artifacts.
    fn record(&self, artifact_dir: &Path) -> Result<()> {
        self.cfg.write_resolved(artifact_dir)?;
        Ok(())
    }

    fn record_beside(&self, file: &Path) -> Result<()> {
        let dir = file.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        self.record(dir)
    }
}

fn require(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(MissingFile(path.display().to_string()).into());
    }
    Ok(())
}

fn resolve_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            require(p)?;
            PipelineConfig::load(p)?
        }
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    // one base seed drives every command
    cfg.train.seed = cfg.seed;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<ExitCode> {
    let mut ctx = Ctx {
        cli,
        cfg: resolve_config(cli)?,
        exec: if cli.sequential { Execution::Sequential } else { Execution::default() },
    };
    match &cli.command {
        Command::MakeLibrary {
            cutouts,
            backgrounds,
            style,
        } => make_library(&ctx, *cutouts, *backgrounds, *style),
        Command::Consolidate { annotations } => consolidate(&ctx, annotations),
        Command::Split { data, fraction } => {
            if let Some(f) = fraction {
                ctx.cfg.split.train_fraction = *f;
            }
            split(&ctx, data)
        }
        Command::Synth {
            lib,
            per_class,
            no_backgrounds,
        } => synth_corpus(&ctx, lib, *per_class, !no_backgrounds),
        Command::Train {
            data,
            iters,
            init,
            freeze_features,
        } => {
            if let Some(n) = iters {
                ctx.cfg.train.total_iters = *n;
            }
            ctx.cfg.train.freeze_features |= *freeze_features;
            train_model(&ctx, data, init.as_deref())
        }
        Command::TwoStage { synth, real, real_iters } => two_stage(&ctx, synth, real, *real_iters),
        Command::Evaluate { model, data, chance } => evaluate(&ctx, model, data, *chance),
        Command::Featviz { model, reference, data } => feature_novelty(&ctx, model, reference, data),
        Command::Cue { detections, counts } => cue(&ctx, detections, counts),
        Command::Detscore { detections } => detscore(&ctx, detections),
        Command::Index { items, model } => build_index(&ctx, items, model.as_deref()),
        Command::Retrieve {
            index,
            query,
            method,
            model,
            top,
        } => retrieve(&ctx, index, query, method, model.as_deref(), *top),
        Command::Retbench { index, judgments } => retbench(&ctx, index, judgments),
        Command::Gradcheck { tolerance, corrupt } => grad_check(&ctx, *tolerance, corrupt.clone()),
    }?;
    Ok(ExitCode::SUCCESS)
}

fn make_library(ctx: &Ctx, cutouts: usize, backgrounds: usize, style: Style) -> Result<()> {
    if cutouts == 0 || backgrounds == 0 {
        return Err(BadArgument("--cutouts and --backgrounds must be at least 1".into()).into());
    }
    let dir = ctx.out_dir()?;
    let style = match style {
        Style::Primary => procedural::LibraryStyle::primary(),
        Style::Shifted => procedural::LibraryStyle::shifted(),
    };
    let lib = procedural::generate_library(&style, cutouts, backgrounds, ctx.cfg.seed);
    let csv = lib.save(dir)?;
    ctx.record(dir)?;
    println!("library {} cutouts={cutouts} backgrounds={backgrounds}", csv.display());
    Ok(())
}

fn consolidate(ctx: &Ctx, annotations: &Path) -> Result<()> {
    require(annotations)?;
    let records = data::read_annotations(annotations)?;
    let c = data::consolidate_annotations(&records)?;
    let dir = ctx.out_dir()?;
    let manifest = DatasetManifest::new(
        c.kept
            .iter()
            .map(|(id, label)| ManifestEntry::new(id.clone(), *label))
            .collect(),
    )?;
    manifest.write_csv(dir.join("manifest.csv"))?;
    let mut excluded = String::new();
    for id in &c.excluded {
        excluded.push_str(id);
        excluded.push('\n');
    }
    std::fs::write(dir.join("excluded.txt"), excluded).context("writing excluded.txt")?;
    ctx.record(dir)?;
    println!("kept={} excluded={}", c.kept.len(), c.excluded.len());
    Ok(())
}

/// Reads a manifest and rewrites its image paths as absolute paths, so the
/// result can be written anywhere.
fn read_manifest_absolute(path: &Path) -> Result<DatasetManifest> {
    require(path)?;
    let m = DatasetManifest::read_csv(path)?;
    let entries = (0..m.len())
        .map(|i| {
            let p = m.resolve(i);
            let abs = std::path::absolute(&p).with_context(|| format!("resolving {}", p.display()))?;
            Ok(ManifestEntry {
                image_path: abs.display().to_string(),
                ..m.entries()[i].clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetManifest::new(entries)?)
}

fn split(ctx: &Ctx, data_path: &Path) -> Result<()> {
    let manifest = read_manifest_absolute(data_path)?;
    let spec = SplitSpec::new(ctx.cfg.split.train_fraction, ctx.cfg.seed)?;
    let (train, test) = data::split_dataset(&manifest, &spec)?;
    let dir = ctx.out_dir()?;
    data::write_split(dir, &spec, &train, &test)?;
    ctx.record(dir)?;
    println!("train={} test={}", train.len(), test.len());
    Ok(())
}

fn synth_corpus(ctx: &Ctx, lib: &Path, per_class: usize, backgrounds: bool) -> Result<()> {
    let csv = if lib.is_dir() { lib.join("library.csv") } else { lib.to_path_buf() };
    require(&csv)?;
    let library = CutoutLibrary::load(&csv)?;
    let filtered = synth::filter_library(&library, synth::FILTER_THRESHOLD);
    if let Some(w) = filtered.warning {
        return Err(BadArgument(format!("library unusable: {w}")).into());
    }
    let dir = ctx.out_dir()?;
    let (manifest, summary) = synth::write_corpus(
        &filtered.library,
        &ctx.cfg.synth,
        per_class,
        ctx.cfg.seed,
        backgrounds,
        ctx.exec,
        dir,
    )?;
    ctx.record(dir)?;
    println!(
        "images={} shortfalls={} manifest={}",
        manifest.len(),
        summary.shortfalls.len(),
        dir.join("manifest.csv").display()
    );
    Ok(())
}

fn load_training_set(ctx: &Ctx, data: &Path, spec: &nnet::SubitNetSpec) -> Result<TrainingSet> {
    require(data)?;
    let manifest = DatasetManifest::read_csv(data)?;
    let set = TrainingSet::load(&manifest, spec, ctx.exec)
        .with_context(|| format!("loading images of {}", data.display()))?;
    Ok(set)
}

fn load_model(path: &Path) -> Result<ModelState> {
    require(path)?;
    Ok(nnet::load_checkpoint(path)?)
}

fn train_model(ctx: &Ctx, data: &Path, init: Option<&Path>) -> Result<()> {
    let init = init.map(load_model).transpose()?;
    let spec = init.as_ref().map_or_else(|| ctx.cfg.model.clone(), |s| s.spec.clone());
    let set = load_training_set(ctx, data, &spec)?;
    let out = ctx.out_file()?;
    let report = train::train(&set, &spec, &ctx.cfg.train, init, ctx.exec)?;
    nnet::save_checkpoint(&report.state, out)?;
    let curve = out.with_extension("loss.csv");
    train::write_loss_curve(&curve, &report.loss_curve)?;
    ctx.record_beside(out)?;
    let last = report.loss_curve.last().map_or(f64::NAN, |p| p.loss);
    println!("model={} iterations={} final_loss={last:.4}", out.display(), report.state.iteration);
    Ok(())
}

fn two_stage(ctx: &Ctx, synth_data: &Path, real_data: &Path, real_iters: Option<u64>) -> Result<()> {
    let spec = &ctx.cfg.model;
    let synth_set = load_training_set(ctx, synth_data, spec)?;
    let real_set = load_training_set(ctx, real_data, spec)?;
    let cfg2 = TrainConfig {
        total_iters: real_iters.unwrap_or(ctx.cfg.train.total_iters),
        // distinct augmentation stream for the second stage
        seed: subitize::seed::derive(ctx.cfg.seed, &[2]),
        ..ctx.cfg.train.clone()
    };
    let dir = ctx.out_dir()?;
    let report = train::two_stage_finetune(&synth_set, &real_set, spec, &ctx.cfg.train, &cfg2, ctx.exec)?;
    nnet::save_checkpoint(report.final_state(), dir.join("model.subt"))?;
    train::write_loss_curve(dir.join("stage1_loss.csv"), &report.stage1.loss_curve)?;
    train::write_loss_curve(dir.join("stage2_loss.csv"), &report.stage2.loss_curve)?;
    ctx.record(dir)?;
    println!("model={}", dir.join("model.subt").display());
    Ok(())
}

fn load_images(ctx: &Ctx, manifest: &DatasetManifest) -> Result<Vec<RasterImage>> {
    let paths: Vec<PathBuf> = (0..manifest.len()).map(|i| manifest.resolve(i)).collect();
    ctx.exec
        .map(&paths, |p| imaging::load(p).with_context(|| format!("loading {}", p.display())))
        .into_iter()
        .collect()
}

#[derive(Serialize)]
struct PredictionLine<'a> {
    image: &'a str,
    label: CountLabel,
    predicted: CountLabel,
    scores: &'a [f32],
}

fn write_class_ap(ap: &ClassAp, path: &Path) -> Result<()> {
    let mut text = String::from("class,ap\n");
    for (c, v) in ap.per_class.iter().enumerate() {
        let v = v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
        text.push_str(&format!("{},{v}\n", CountLabel::ALL[c]));
    }
    text.push_str(&format!("mean,{:.6}\n", ap.mean));
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn evaluate(ctx: &Ctx, model_path: &Path, data: &Path, chance: bool) -> Result<()> {
    let state = load_model(model_path)?;
    require(data)?;
    let manifest = DatasetManifest::read_csv(data)?;
    let images = load_images(ctx, &manifest)?;
    let scores = model::predict_batch(&state, &images, ctx.exec)?;
    let labels = manifest.labels();
    let report = eval::evaluate_scores(&scores, &labels)?;
    let dir = ctx.out_dir()?;
    eval::write_report_csv(&report, dir.join("report.csv"))?;
    let mut lines = String::new();
    for ((e, s), l) in manifest.entries().iter().zip(&scores).zip(&labels) {
        let line = PredictionLine {
            image: &e.image_path,
            label: *l,
            predicted: CountLabel::ALL[eval::argmax(s)],
            scores: s,
        };
        lines.push_str(&serde_json::to_string(&line)?);
        lines.push('\n');
    }
    std::fs::write(dir.join("predictions.jsonl"), lines).context("writing predictions.jsonl")?;
    if chance {
        let c = eval::chance_baseline(&labels, ctx.cfg.eval.chance_trials, ctx.cfg.seed, ctx.exec)?;
        write_class_ap(&c, &dir.join("chance.csv"))?;
    }
    ctx.record(dir)?;
    println!("map={:.4} accuracy={:.4}", report.ap.mean, report.accuracy);
    Ok(())
}

fn feature_novelty(ctx: &Ctx, model_path: &Path, reference: &Path, data: &Path) -> Result<()> {
    let a = load_model(model_path)?;
    let b = load_model(reference)?;
    require(data)?;
    let manifest = DatasetManifest::read_csv(data)?;
    let images = load_images(ctx, &manifest)?;
    let ra = featviz::model_rankings(&a, &images, ctx.exec)?;
    let rb = featviz::model_rankings(&b, &images, ctx.exec)?;
    let scores = featviz::novelty_scores(&ra, &rb, ctx.exec)?;
    let opts = &ctx.cfg.eval;
    let novel = featviz::select_novel(&scores, opts.novelty_threshold);
    let dir = ctx.out_dir()?;
    featviz::write_scores_csv(&scores, dir.join("scores.csv"))?;
    featviz::write_histogram_csv(&featviz::score_histogram(&scores, 20), dir.join("histogram.csv"))?;
    for &ch in &novel {
        let patches = featviz::top_patches(&ra[ch], &images, opts.top_patches, opts.patch_fraction)?;
        let cols = (opts.top_patches as f64).sqrt().ceil() as usize;
        let m = featviz::montage(&patches, cols, 64)?;
        imaging::save(&m, dir.join(format!("channel_{ch:03}.png")))?;
    }
    ctx.record(dir)?;
    println!("channels={} novel={}", scores.len(), novel.len());
    Ok(())
}

fn cue(ctx: &Ctx, detections: &Path, counts: &Path) -> Result<()> {
    require(detections)?;
    require(counts)?;
    let images = detect::read_detections(detections)?;
    let counts = detect::read_counts(counts)?;
    let cued = detect::cue_all(&images, &counts)?;
    let out = ctx.out_file()?;
    detect::write_detections(&cued, out)?;
    ctx.record_beside(out)?;
    let kept: usize = cued.iter().map(|i| i.candidates.len()).sum();
    println!("images={} windows={kept}", cued.len());
    Ok(())
}

fn detscore(ctx: &Ctx, detections: &Path) -> Result<()> {
    require(detections)?;
    let images = detect::read_detections(detections)?;
    let thresholds = detect::candidate_thresholds(&images);
    let sweep = detect::sweep_threshold(&images, &thresholds, ctx.cfg.eval.iou_threshold)?;
    let out = ctx.out_file()?;
    detect::write_pr_csv(&sweep, out)?;
    ctx.record_beside(out)?;
    let b = sweep.best_point();
    println!(
        "best_threshold={} precision={:.4} recall={:.4} f_measure={:.4}",
        b.threshold, b.score.precision, b.score.recall, b.score.f_measure
    );
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ItemLine {
    id: String,
    vector: Vec<f32>,
    #[serde(default)]
    tags: Vec<String>,
}

fn sos_of(state: &ModelState, base: &Path, ids: &[String], exec: Execution) -> Result<Vec<[f32; 5]>> {
    let images = ids
        .iter()
        .map(|id| {
            let p = base.join(id);
            imaging::load(&p).with_context(|| format!("loading {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let scores = model::predict_batch(state, &images, exec)?;
    Ok(scores
        .into_iter()
        .map(|s| {
            let mut a = [0f32; 5];
            a.copy_from_slice(&s);
            a
        })
        .collect())
}

fn parent_of(p: &Path) -> PathBuf {
    p.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn build_index(ctx: &Ctx, items_path: &Path, model_path: Option<&Path>) -> Result<()> {
    require(items_path)?;
    let text = std::fs::read_to_string(items_path).with_context(|| format!("reading {}", items_path.display()))?;
    let mut lines = Vec::new();
    for (i, l) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let item: ItemLine = serde_json::from_str(l).map_err(|e| retrieval::RetrievalError::Parse {
            path: items_path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        lines.push(item);
    }
    let Some(first) = lines.first() else {
        return Err(BadArgument(format!("{} has no items", items_path.display())).into());
    };
    let dim = first.vector.len();
    let sos = match model_path {
        Some(p) => {
            let state = load_model(p)?;
            let ids: Vec<String> = lines.iter().map(|l| l.id.clone()).collect();
            Some(sos_of(&state, &parent_of(items_path), &ids, ctx.exec)?)
        }
        None => None,
    };
    let items = lines
        .into_iter()
        .enumerate()
        .map(|(i, l)| IndexItem {
            id: l.id,
            vector: l.vector,
            tags: l.tags.into_iter().collect::<BTreeSet<_>>(),
            sos: sos.as_ref().map(|s| s[i]),
        })
        .collect();
    let index = EmbeddingIndex::new(dim, items)?;
    let out = ctx.out_file()?;
    index.save(out)?;
    ctx.record_beside(out)?;
    println!("items={} dim={dim} sos={}", index.len(), sos.is_some());
    Ok(())
}

fn parse_query(text: &str) -> Result<Query> {
    Query::parse(text).map_err(|e| BadArgument(e.to_string()).into())
}

#[derive(Serialize)]
struct RetrievedLine<'a> {
    rank: usize,
    id: &'a str,
    score: f64,
}

fn retrieve(ctx: &Ctx, index_path: &Path, query: &str, method: &str, model_path: Option<&Path>, top: usize) -> Result<()> {
    let query = parse_query(query)?;
    let method: Method = method.parse().map_err(|e: retrieval::RetrievalError| BadArgument(e.to_string()))?;
    require(index_path)?;
    let mut index = EmbeddingIndex::load(index_path)?;
    if let Some(p) = model_path {
        let state = load_model(p)?;
        let ids: Vec<String> = index.items().iter().map(|it| it.id.clone()).collect();
        let sos = sos_of(&state, &parent_of(index_path), &ids, ctx.exec)?;
        let items = index
            .items()
            .iter()
            .zip(sos)
            .map(|(it, s)| IndexItem {
                sos: Some(s),
                ..it.clone()
            })
            .collect();
        index = EmbeddingIndex::new(index.dim(), items)?;
    }
    let table = NeighborTable::build(&index, ctx.cfg.eval.knn_k, ctx.exec)?;
    let ranked = retrieval::rank_items(&index, &table, &query, method)?;
    let mut out_text = String::new();
    let stdout = std::io::stdout();
    let mut so = stdout.lock();
    for (rank, &(i, score)) in ranked.iter().take(top).enumerate() {
        let id = &index.items()[i].id;
        writeln!(so, "{}\t{id}\t{score:.6}", rank + 1)?;
        let line = RetrievedLine { rank: rank + 1, id, score };
        out_text.push_str(&serde_json::to_string(&line)?);
        out_text.push('\n');
    }
    if ctx.cli.out.is_some() {
        let out = ctx.out_file()?;
        std::fs::write(out, out_text).with_context(|| format!("writing {}", out.display()))?;
        ctx.record_beside(out)?;
    }
    Ok(())
}

fn retbench(ctx: &Ctx, index_path: &Path, judgments_path: &Path) -> Result<()> {
    require(index_path)?;
    require(judgments_path)?;
    let index = EmbeddingIndex::load(index_path)?;
    let judgments = Judgments::read_csv(judgments_path)?;
    let table = NeighborTable::build(&index, ctx.cfg.eval.knn_k, ctx.exec)?;
    let methods: Vec<Method> = if index.items().iter().all(|it| it.sos.is_some()) {
        Method::ALL.to_vec()
    } else {
        log::warn!("index has no count scores; skipping the sos method");
        vec![Method::Baseline, Method::Text]
    };
    let report = retrieval::run_benchmark(&index, &table, &judgments.queries(), &methods, &judgments, ctx.cfg.eval.ndcg_h)?;
    let out = ctx.out_file()?;
    report.write_csv(out)?;
    ctx.record_beside(out)?;
    for m in methods {
        println!("{m} mean_ndcg={:.4}", report.overall_mean(m).unwrap_or(f64::NAN));
    }
    Ok(())
}

fn grad_check(ctx: &Ctx, tolerance: f64, corrupt: Option<String>) -> Result<()> {
    let cfg = GradCheckConfig {
        seed: ctx.cfg.seed,
        tolerance,
        corrupt,
        ..GradCheckConfig::default()
    };
    let report = gradcheck::gradient_check(&cfg)?;
    for p in &report.params {
        println!(
            "{} checked={} skipped_kinks={} rel_error={:.3e} worst_coordinate={:.3e}",
            p.name, p.checked, p.skipped_kinks, p.rel_error, p.worst_coordinate_error
        );
    }
    println!(
        "max_rel_error={:.3e} tolerance={:.1e} {}",
        report.max_rel_error,
        report.tolerance,
        if report.passed { "PASS" } else { "FAIL" }
    );
    if ctx.cli.out.is_some() {
        let dir = ctx.out_dir()?;
        let json = serde_json::to_string_pretty(&report)?;
        std::fs::write(dir.join("gradcheck.json"), json + "\n").context("writing gradcheck.json")?;
        ctx.record(dir)?;
    }
    if !report.passed {
        return Err(CheckFailed(format!("max relative error {:.3e} exceeds {tolerance:.1e}", report.max_rel_error)).into());
    }
    Ok(())
}
