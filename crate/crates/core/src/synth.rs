//! Cut-and-paste generation of labeled subitizing scenes.
//!
//! A composite pastes `N` copies of one cutout onto a background. Each copy is
//! independently flipped, mildly rescaled and rotated, and placed with its
//! center uniform over the canvas. A composite is rejected when any copy ends
//! up less than `1 - max_occlusion` visible. Pixels clipped by the canvas
//! border count as occluded.

pub mod procedural;

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{CountLabel, DatasetManifest, ManifestEntry};
use crate::exec::Execution;
use crate::imaging::{self, ImagingError, RasterImage};
use crate::seed;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("no cutout with id {0:?}")]
    MissingCutout(String),
    #[error("no background with id {0:?}")]
    MissingBackground(String),
    #[error("library has no cutouts or no backgrounds")]
    EmptyLibrary,
    #[error("invalid synthesis config: {0}")]
    InvalidConfig(String),
    #[error("invalid library entry {id:?}: {reason}")]
    InvalidEntry { id: String, reason: String },
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error("{path}: {reason}")]
    Io { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub canvas_size: usize,
    /// Largest dimension of the reference object, relative to the canvas.
    pub ref_scale_range: (f32, f32),
    pub jitter_scale_range: (f32, f32),
    pub rotation_range_deg: (f32, f32),
    pub hflip_prob: f64,
    /// Largest tolerated occluded fraction of any pasted copy.
    pub max_occlusion: f64,
    /// Placement attempts per recipe before a fresh cutout/background draw.
    pub max_attempts: usize,
    /// Fresh recipe draws per image before the image counts as a shortfall.
    pub max_recipes: usize,
    pub count_range: (usize, usize),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            canvas_size: 256,
            ref_scale_range: (0.4, 0.8),
            jitter_scale_range: (0.85, 1.15),
            rotation_range_deg: (-10.0, 10.0),
            hflip_prob: 0.5,
            max_occlusion: 0.5,
            max_attempts: 100,
            max_recipes: 20,
            count_range: (1, 4),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(SynthError::InvalidConfig(msg.to_string()));
        let scale_ok = |(lo, hi): (f32, f32)| lo > 0.0 && lo <= hi && hi <= 1.5;
        if self.canvas_size < 8 {
            return bad("canvas_size must be at least 8");
        }
        if !scale_ok(self.ref_scale_range) || !scale_ok(self.jitter_scale_range) {
            return bad("scale bounds must satisfy 0 < lo <= hi <= 1.5");
        }
        let (rlo, rhi) = self.rotation_range_deg;
        if !(rlo <= rhi && rlo >= -180.0 && rhi <= 180.0) {
            return bad("rotation range must lie in [-180, 180]");
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return bad("hflip_prob must be a probability");
        }
        if !(0.0..1.0).contains(&self.max_occlusion) {
            return bad("max_occlusion must be in [0, 1)");
        }
        if self.max_attempts == 0 || self.max_recipes == 0 {
            return bad("max_attempts and max_recipes must be at least 1");
        }
        let (clo, chi) = self.count_range;
        if !(clo >= 1 && clo <= chi) {
            return bad("count_range must be 1 <= lo <= hi");
        }
        Ok(())
    }

    pub fn min_visible_fraction(&self) -> f64 {
        1.0 - self.max_occlusion
    }
}

#[derive(Clone, Debug)]
pub struct Cutout {
    pub id: String,
    pub image: RasterImage,
    pub singleness: f64,
}

#[derive(Clone, Debug)]
pub struct Background {
    pub id: String,
    pub image: RasterImage,
    pub emptiness: f64,
}

#[derive(Clone, Debug, Default)]
pub struct CutoutLibrary {
    pub cutouts: Vec<Cutout>,
    pub backgrounds: Vec<Background>,
}

impl CutoutLibrary {
    pub fn new(cutouts: Vec<Cutout>, backgrounds: Vec<Background>) -> Result<Self> {
        for c in &cutouts {
            check_score(&c.id, c.singleness)?;
            if c.image.alpha_bounds(0.5).is_none() {
                return Err(SynthError::InvalidEntry {
                    id: c.id.clone(),
                    reason: "cutout has no pixel with alpha above 0.5".into(),
                });
            }
        }
        for b in &backgrounds {
            check_score(&b.id, b.emptiness)?;
        }
        Ok(Self {
            cutouts,
            backgrounds,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.cutouts.is_empty() || self.backgrounds.is_empty()
    }

    pub fn cutout(&self, id: &str) -> Result<&Cutout> {
        self.cutouts
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| SynthError::MissingCutout(id.to_string()))
    }

    pub fn background(&self, id: &str) -> Result<&Background> {
        self.backgrounds
            .iter()
            .find(|b| b.id == id)
            .ok_or_else(|| SynthError::MissingBackground(id.to_string()))
    }

    /// Reads a `kind,id,path,score` CSV (`kind` is `cutout` or `background`).
    /// Paths are relative to the CSV's directory.
    pub fn load(csv_path: impl AsRef<Path>) -> Result<Self> {
        let csv_path = csv_path.as_ref();
        let io_err = |e: &dyn std::fmt::Display| SynthError::Io {
            path: csv_path.to_owned(),
            reason: e.to_string(),
        };
        let base = csv_path.parent().unwrap_or(Path::new("."));
        let mut rdr = csv::Reader::from_path(csv_path).map_err(|e| io_err(&e))?;
        let (mut cutouts, mut backgrounds) = (Vec::new(), Vec::new());
        for row in rdr.deserialize::<LibraryRow>() {
            let row = row.map_err(|e| io_err(&e))?;
            let image = imaging::load(base.join(&row.path))?;
            match row.kind.as_str() {
                "cutout" => cutouts.push(Cutout {
                    id: row.id,
                    image,
                    singleness: row.score,
                }),
                "background" => backgrounds.push(Background {
                    id: row.id,
                    image,
                    emptiness: row.score,
                }),
                other => {
                    return Err(SynthError::InvalidEntry {
                        id: row.id,
                        reason: format!("unknown kind {other:?}"),
                    })
                }
            }
        }
        Self::new(cutouts, backgrounds)
    }

    /// Writes every image as PNG plus `library.csv` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        create_dir(dir)?;
        let csv_path = dir.join("library.csv");
        let io_err = |e: &dyn std::fmt::Display| SynthError::Io {
            path: csv_path.clone(),
            reason: e.to_string(),
        };
        let mut w = csv::Writer::from_path(&csv_path).map_err(|e| io_err(&e))?;
        let rows = self
            .cutouts
            .iter()
            .map(|c| ("cutout", &c.id, &c.image, c.singleness))
            .chain(
                self.backgrounds
                    .iter()
                    .map(|b| ("background", &b.id, &b.image, b.emptiness)),
            );
        for (kind, id, image, score) in rows {
            let path = format!("{kind}_{id}.png");
            imaging::save(image, dir.join(&path))?;
            w.serialize(LibraryRow {
                kind: kind.to_string(),
                id: id.clone(),
                path,
                score,
            })
            .map_err(|e| io_err(&e))?;
        }
        w.flush().map_err(|e| io_err(&e))?;
        Ok(csv_path)
    }
}

fn check_score(id: &str, s: f64) -> Result<()> {
    if (0.0..=1.0).contains(&s) {
        Ok(())
    } else {
        Err(SynthError::InvalidEntry {
            id: id.to_string(),
            reason: format!("score {s} outside [0, 1]"),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct LibraryRow {
    kind: String,
    id: String,
    path: String,
    score: f64,
}

#[derive(Debug)]
pub struct FilteredLibrary {
    pub library: CutoutLibrary,
    pub warning: Option<String>,
}

/// Default confidence needed to keep a cutout (one object) or background
/// (no object).
pub const FILTER_THRESHOLD: f64 = 0.95;

/// Keeps cutouts with `singleness >= threshold` and backgrounds with
/// `emptiness >= threshold`. An empty side yields a warning, not an error.
pub fn filter_library(lib: &CutoutLibrary, threshold: f64) -> FilteredLibrary {
    let library = CutoutLibrary {
        cutouts: lib
            .cutouts
            .iter()
            .filter(|c| c.singleness >= threshold)
            .cloned()
            .collect(),
        backgrounds: lib
            .backgrounds
            .iter()
            .filter(|b| b.emptiness >= threshold)
            .cloned()
            .collect(),
    };
    let warning = library.is_empty().then(|| {
        format!(
            "filter at {threshold} left {} cutouts and {} backgrounds",
            library.cutouts.len(),
            library.backgrounds.len()
        )
    });
    if let Some(w) = &warning {
        warn!("{w}");
    }
    FilteredLibrary { library, warning }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthRecipe {
    pub seed: u64,
    pub n_objects: usize,
    pub cutout_id: String,
    pub background_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    /// Top-left corner of the transformed copy on the canvas.
    pub x: i64,
    pub y: i64,
    pub width: usize,
    pub height: usize,
    /// Jitter scale applied on top of the reference object.
    pub scale: f32,
    pub rotation_deg: f32,
    pub hflip: bool,
    /// Alpha-weighted visible fraction after all later pastes and clipping.
    pub visible_fraction: f64,
    /// Same fraction counted over pixels with alpha above 0.5.
    pub visible_fraction_binary: f64,
}

impl Placement {
    pub fn bounding_box(&self) -> imaging::BoundingBox {
        imaging::BoundingBox {
            x: self.x as f64,
            y: self.y as f64,
            w: self.width as f64,
            h: self.height as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementLog {
    /// Sampled reference size relative to the canvas.
    pub reference_scale: f32,
    pub reference_width: usize,
    pub reference_height: usize,
    pub instances: Vec<Placement>,
}

impl PlacementLog {
    pub fn min_visible_fraction(&self) -> f64 {
        self.instances
            .iter()
            .map(|p| p.visible_fraction.min(p.visible_fraction_binary))
            .fold(1.0, f64::min)
    }
}

#[derive(Clone, Debug)]
pub struct Composite {
    pub image: RasterImage,
    pub label: CountLabel,
    pub log: PlacementLog,
}

#[derive(Clone, Debug)]
pub enum SynthOutcome {
    Accepted(Composite),
    Rejected(PlacementLog),
}

/// Canvas-sized copy of a background.
pub fn prepare_background(bg: &Background, canvas: usize) -> Result<RasterImage> {
    let mut img = imaging::resize_bilinear(&bg.image, canvas, canvas)?;
    // backgrounds are opaque scenes; drop any stray transparency
    let data = img
        .data()
        .chunks_exact(4)
        .flat_map(|p| [p[0], p[1], p[2], 1.0])
        .collect();
    img = RasterImage::from_raw(canvas, canvas, data)?;
    Ok(img)
}

/// Reference object: the cutout resized so its largest dimension equals
/// `scale * canvas`.
pub fn reference_object(cutout: &RasterImage, scale: f32, canvas: usize) -> Result<RasterImage> {
    let target = (scale * canvas as f32).round().max(1.0);
    let largest = cutout.width().max(cutout.height()) as f32;
    let w = ((cutout.width() as f32 * target / largest).round() as usize).max(1);
    let h = ((cutout.height() as f32 * target / largest).round() as usize).max(1);
    Ok(imaging::resize_bilinear(cutout, w, h)?)
}

/// Generates one composite from a recipe. Deterministic in `(lib, cfg,
/// recipe)`. Rejection is a value, not an error.
pub fn generate_image(
    lib: &CutoutLibrary,
    cfg: &SynthConfig,
    recipe: &SynthRecipe,
) -> Result<SynthOutcome> {
    cfg.validate()?;
    if lib.is_empty() {
        return Err(SynthError::EmptyLibrary);
    }
    let (clo, chi) = cfg.count_range;
    if !(clo..=chi).contains(&recipe.n_objects) {
        return Err(SynthError::InvalidConfig(format!(
            "n_objects {} outside count range {clo}..={chi}",
            recipe.n_objects
        )));
    }
    let cutout = lib.cutout(&recipe.cutout_id)?;
    let background = lib.background(&recipe.background_id)?;
    let canvas_size = cfg.canvas_size;
    let mut rng = seed::rng(recipe.seed);

    let ref_scale = sample(&mut rng, cfg.ref_scale_range);
    let reference = reference_object(&cutout.image, ref_scale, canvas_size)?;

    let mut copies = Vec::with_capacity(recipe.n_objects);
    for _ in 0..recipe.n_objects {
        let hflip = rng.gen_bool(cfg.hflip_prob);
        let scale = sample(&mut rng, cfg.jitter_scale_range);
        let rotation_deg = sample(&mut rng, cfg.rotation_range_deg);
        let cx: f64 = rng.gen_range(0.0..canvas_size as f64);
        let cy: f64 = rng.gen_range(0.0..canvas_size as f64);
        let img = imaging::transform_cutout(&reference, scale, rotation_deg, hflip)?;
        let x = (cx - img.width() as f64 / 2.0).round() as i64;
        let y = (cy - img.height() as f64 / 2.0).round() as i64;
        copies.push((
            Placement {
                x,
                y,
                width: img.width(),
                height: img.height(),
                scale,
                rotation_deg,
                hflip,
                visible_fraction: 0.0,
                visible_fraction_binary: 0.0,
            },
            img,
        ));
    }

    let fractions = visible_fractions(canvas_size, &copies);
    for ((p, _), (soft, binary)) in copies.iter_mut().zip(fractions) {
        p.visible_fraction = soft;
        p.visible_fraction_binary = binary;
    }
    let log = PlacementLog {
        reference_scale: ref_scale,
        reference_width: reference.width(),
        reference_height: reference.height(),
        instances: copies.iter().map(|(p, _)| p.clone()).collect(),
    };
    if log.min_visible_fraction() < cfg.min_visible_fraction() {
        return Ok(SynthOutcome::Rejected(log));
    }

    let mut image = prepare_background(background, canvas_size)?;
    for (p, img) in &copies {
        imaging::composite_in_place(&mut image, img, (p.x, p.y));
    }
    Ok(SynthOutcome::Accepted(Composite {
        image,
        label: CountLabel::from_count(recipe.n_objects),
        log,
    }))
}

fn sample(rng: &mut impl Rng, (lo, hi): (f32, f32)) -> f32 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Visible fraction of each copy, in paint order, as `(soft, binary)`.
///
/// Soft: the copy's contribution to the final composite, `a_i * prod_{j>i}
/// (1 - a_j)` summed over on-canvas pixels, divided by the copy's total alpha.
/// Binary: pixels with `a_i > 0.5` that are on canvas and not under any later
/// copy with alpha above 0.5, divided by all pixels with `a_i > 0.5`.
fn visible_fractions(canvas: usize, copies: &[(Placement, RasterImage)]) -> Vec<(f64, f64)> {
    let mut transmit = vec![1.0f32; canvas * canvas];
    let mut covered = vec![false; canvas * canvas];
    let mut out = vec![(0.0, 0.0); copies.len()];
    for (k, (p, img)) in copies.iter().enumerate().rev() {
        let (mut total, mut seen) = (0.0f64, 0.0f64);
        let (mut total_bin, mut seen_bin) = (0usize, 0usize);
        for sy in 0..img.height() {
            let ty = p.y + sy as i64;
            for sx in 0..img.width() {
                let a = img.alpha(sx, sy);
                if a <= 0.0 {
                    continue;
                }
                let solid = a > 0.5;
                total += a as f64;
                total_bin += solid as usize;
                let tx = p.x + sx as i64;
                if tx < 0 || ty < 0 || tx >= canvas as i64 || ty >= canvas as i64 {
                    continue;
                }
                let i = ty as usize * canvas + tx as usize;
                seen += (a * transmit[i]) as f64;
                transmit[i] *= 1.0 - a;
                if solid {
                    seen_bin += !covered[i] as usize;
                    covered[i] = true;
                }
            }
        }
        let soft = if total > 0.0 { seen / total } else { 0.0 };
        let bin = if total_bin > 0 {
            seen_bin as f64 / total_bin as f64
        } else {
            0.0
        };
        out[k] = (soft, bin);
    }
    out
}

// ---------------------------------------------------------------------------
// Corpus generation

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub image: String,
    pub label: CountLabel,
    pub index: usize,
    pub seed: u64,
    /// `composite` or `background`.
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recipe: Option<SynthRecipe>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub placements: Option<PlacementLog>,
    pub accepted: bool,
    /// Rejected placement attempts before acceptance (or giving up).
    pub rejected_attempts: usize,
    /// Border clipping is counted as occlusion.
    pub clipping_counts_as_occlusion: bool,
}

#[derive(Clone, Debug)]
pub struct CorpusItem {
    pub file_name: String,
    pub label: CountLabel,
    pub image: RasterImage,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shortfall {
    pub label: CountLabel,
    pub requested: usize,
    pub produced: usize,
}

#[derive(Clone, Debug, Default)]
pub struct CorpusSummary {
    pub produced: usize,
    pub shortfalls: Vec<Shortfall>,
}

/// Seed of image `index` in class `class`. Independent of generation order.
pub fn item_seed(base_seed: u64, class: CountLabel, index: usize) -> u64 {
    seed::derive(base_seed, &[class.index() as u64, index as u64])
}

/// Generates image `index` of class `class`. `Ok(None)` means every recipe
/// exhausted its attempt budget.
pub fn generate_item(
    lib: &CutoutLibrary,
    cfg: &SynthConfig,
    base_seed: u64,
    class: CountLabel,
    index: usize,
) -> Result<Option<CorpusItem>> {
    if lib.is_empty() {
        return Err(SynthError::EmptyLibrary);
    }
    let item = item_seed(base_seed, class, index);
    let file_name = format!("c{}_{index:05}.png", class.index());
    if class == CountLabel::Zero {
        let bg = &lib.backgrounds[index % lib.backgrounds.len()];
        return Ok(Some(CorpusItem {
            image: prepare_background(bg, cfg.canvas_size)?,
            label: class,
            provenance: Provenance {
                image: file_name.clone(),
                label: class,
                index,
                seed: item,
                kind: "background".into(),
                recipe: Some(SynthRecipe {
                    seed: item,
                    n_objects: 0,
                    cutout_id: String::new(),
                    background_id: bg.id.clone(),
                }),
                placements: None,
                accepted: true,
                rejected_attempts: 0,
                clipping_counts_as_occlusion: true,
            },
            file_name,
        }));
    }
    let n_objects = class.index();
    let mut rejected = 0;
    for round in 0..cfg.max_recipes {
        let mut pick = seed::rng(seed::derive(item, &[round as u64]));
        let cutout = &lib.cutouts[pick.gen_range(0..lib.cutouts.len())];
        let background = &lib.backgrounds[pick.gen_range(0..lib.backgrounds.len())];
        for attempt in 0..cfg.max_attempts {
            let recipe = SynthRecipe {
                seed: seed::derive(item, &[round as u64, attempt as u64]),
                n_objects,
                cutout_id: cutout.id.clone(),
                background_id: background.id.clone(),
            };
            match generate_image(lib, cfg, &recipe)? {
                SynthOutcome::Accepted(c) => {
                    return Ok(Some(CorpusItem {
                        image: c.image,
                        label: c.label,
                        provenance: Provenance {
                            image: file_name.clone(),
                            label: c.label,
                            index,
                            seed: item,
                            kind: "composite".into(),
                            recipe: Some(recipe),
                            placements: Some(c.log),
                            accepted: true,
                            rejected_attempts: rejected,
                            clipping_counts_as_occlusion: true,
                        },
                        file_name,
                    }))
                }
                SynthOutcome::Rejected(_) => rejected += 1,
            }
        }
    }
    Ok(None)
}

/// Generates `per_class_count` images for every count in `cfg.count_range`
/// (plus class `0` from unmodified backgrounds when `include_backgrounds`)
/// and hands them to `sink` in a fixed order: class by class, index by index.
///
/// Images are produced in parallel chunks; `sink` always sees the same
/// sequence regardless of execution mode.
pub fn generate_corpus(
    lib: &CutoutLibrary,
    cfg: &SynthConfig,
    per_class_count: usize,
    base_seed: u64,
    include_backgrounds: bool,
    exec: Execution,
    mut sink: impl FnMut(CorpusItem) -> Result<()>,
) -> Result<CorpusSummary> {
    cfg.validate()?;
    if per_class_count == 0 {
        return Err(SynthError::InvalidConfig("per_class_count must be at least 1".into()));
    }
    if lib.is_empty() {
        return Err(SynthError::EmptyLibrary);
    }
    let mut classes = Vec::new();
    if include_backgrounds {
        classes.push(CountLabel::Zero);
    }
    let (lo, hi) = cfg.count_range;
    classes.extend((lo..=hi).map(CountLabel::from_count));
    // counts above 4 all map to 4+; keep each class once
    classes.dedup();

    const CHUNK: usize = 64;
    let mut summary = CorpusSummary::default();
    for &class in &classes {
        let mut produced = 0;
        for start in (0..per_class_count).step_by(CHUNK) {
            let end = (start + CHUNK).min(per_class_count);
            let batch = exec.map_range(end - start, |k| {
                generate_item(lib, cfg, base_seed, class, start + k)
            });
            for item in batch {
                if let Some(item) = item? {
                    produced += 1;
                    sink(item)?;
                }
            }
        }
        if produced < per_class_count {
            warn!("class {class}: produced {produced} of {per_class_count} images");
            summary.shortfalls.push(Shortfall {
                label: class,
                requested: per_class_count,
                produced,
            });
        }
        summary.produced += produced;
    }
    info!("generated {} images", summary.produced);
    Ok(summary)
}

/// Writes a corpus directory: one PNG per image, `manifest.csv`,
/// `provenance.jsonl` and, when anything fell short, `shortfall.json`.
pub fn write_corpus(
    lib: &CutoutLibrary,
    cfg: &SynthConfig,
    per_class_count: usize,
    base_seed: u64,
    include_backgrounds: bool,
    exec: Execution,
    out_dir: impl AsRef<Path>,
) -> Result<(DatasetManifest, CorpusSummary)> {
    let out_dir = out_dir.as_ref();
    create_dir(out_dir)?;
    let prov_path = out_dir.join("provenance.jsonl");
    let io_err = |path: &Path, e: &dyn std::fmt::Display| SynthError::Io {
        path: path.to_owned(),
        reason: e.to_string(),
    };
    let mut prov = BufWriter::new(File::create(&prov_path).map_err(|e| io_err(&prov_path, &e))?);
    let mut entries = Vec::new();
    let summary = generate_corpus(
        lib,
        cfg,
        per_class_count,
        base_seed,
        include_backgrounds,
        exec,
        |item| {
            imaging::save(&item.image, out_dir.join(&item.file_name))?;
            let line = serde_json::to_string(&item.provenance).expect("provenance serializes");
            writeln!(prov, "{line}").map_err(|e| io_err(&prov_path, &e))?;
            entries.push(ManifestEntry::new(item.file_name, item.label));
            Ok(())
        },
    )?;
    prov.flush().map_err(|e| io_err(&prov_path, &e))?;
    let manifest = DatasetManifest::new(entries)?.with_base_dir(out_dir);
    manifest.write_csv(out_dir.join("manifest.csv"))?;
    let shortfall_path = out_dir.join("shortfall.json");
    if summary.shortfalls.is_empty() {
        let _ = fs::remove_file(&shortfall_path);
    } else {
        let json = serde_json::to_string_pretty(&summary.shortfalls).expect("shortfall serializes");
        fs::write(&shortfall_path, json).map_err(|e| io_err(&shortfall_path, &e))?;
    }
    Ok((manifest, summary))
}

/// Reads `provenance.jsonl` back, keyed by image file name.
pub fn read_provenance(path: impl AsRef<Path>) -> Result<HashMap<String, Provenance>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| SynthError::Io {
        path: path.to_owned(),
        reason: e.to_string(),
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let p: Provenance = serde_json::from_str(l).map_err(|e| SynthError::Io {
                path: path.to_owned(),
                reason: e.to_string(),
            })?;
            Ok((p.image.clone(), p))
        })
        .collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| SynthError::Io {
        path: dir.to_owned(),
        reason: e.to_string(),
    })
}
