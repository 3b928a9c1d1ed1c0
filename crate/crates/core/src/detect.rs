//! Count-cued window selection and pooled detection precision / recall.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::CountLabel;
use crate::imaging::BoundingBox;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("{path}:{line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },
    #[error("non-finite score in image {0}")]
    NonFiniteScore(String),
    #[error("no count for image {0}")]
    MissingCount(String),
    #[error("thresholds must be sorted ascending")]
    UnsortedThresholds,
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DetectError>;

pub const IOU_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectionWindow {
    pub bbox: BoundingBox,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageDetections {
    pub image_id: String,
    pub candidates: Vec<DetectionWindow>,
    pub ground_truth: Vec<BoundingBox>,
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Candidate indices by descending score; ties keep input order.
fn score_order(windows: &[DetectionWindow]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..windows.len()).collect();
    idx.sort_by(|&a, &b| windows[b].score.total_cmp(&windows[a].score));
    idx
}

/// The `min(n, |candidates|)` highest-scoring windows, best first.
pub fn cue_by_count(candidates: &[DetectionWindow], n: usize) -> Vec<DetectionWindow> {
    score_order(candidates)
        .into_iter()
        .take(n)
        .map(|i| candidates[i])
        .collect()
}

/// Windows to request for a predicted count class; `4+` asks for four.
pub fn count_budget(label: CountLabel) -> usize {
    label.index()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MatchCounts {
    pub true_positives: usize,
    pub detections: usize,
    pub ground_truths: usize,
}

impl MatchCounts {
    fn add(&mut self, o: MatchCounts) {
        self.true_positives += o.true_positives;
        self.detections += o.detections;
        self.ground_truths += o.ground_truths;
    }
}

/// Greedy matching of one image: detections in descending score each take
/// the unmatched ground truth with the highest IoU, if it reaches the
/// threshold.
pub fn match_image(detections: &[DetectionWindow], ground_truth: &[BoundingBox], iou_threshold: f64) -> MatchCounts {
    let mut used = vec![false; ground_truth.len()];
    let mut tp = 0;
    for i in score_order(detections) {
        let d = &detections[i].bbox;
        let best = ground_truth
            .iter()
            .enumerate()
            .filter(|(g, _)| !used[*g])
            .map(|(g, gt)| (g, iou(d, gt)))
            .filter(|&(_, v)| v >= iou_threshold)
            .fold(None, |acc: Option<(usize, f64)>, cur| match acc {
                Some(a) if a.1 >= cur.1 => Some(a),
                _ => Some(cur),
            });
        if let Some((g, _)) = best {
            used[g] = true;
            tp += 1;
        }
    }
    MatchCounts {
        true_positives: tp,
        detections: detections.len(),
        ground_truths: ground_truth.len(),
    }
}

/// `2PR / (P + R)`, or 0 when both are 0.
pub fn f_measure(precision: f64, recall: f64) -> f64 {
    if precision + recall <= 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PrfScore {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub counts: MatchCounts,
}

impl PrfScore {
    /// Pooled scores. No detections gives precision 1; no ground truth gives
    /// recall 1.
    pub fn from_counts(counts: MatchCounts) -> Self {
        let precision = if counts.detections == 0 {
            1.0
        } else {
            counts.true_positives as f64 / counts.detections as f64
        };
        let recall = if counts.ground_truths == 0 {
            1.0
        } else {
            counts.true_positives as f64 / counts.ground_truths as f64
        };
        Self {
            precision,
            recall,
            f_measure: f_measure(precision, recall),
            counts,
        }
    }
}

/// Matches every image's `selected` windows against its ground truth and
/// pools the counts over the set.
pub fn match_and_score(images: &[(Vec<DetectionWindow>, &[BoundingBox])], iou_threshold: f64) -> PrfScore {
    let mut total = MatchCounts::default();
    for (dets, gt) in images {
        total.add(match_image(dets, gt, iou_threshold));
    }
    PrfScore::from_counts(total)
}

/// Scores an image set after applying `select` to each image's candidates.
pub fn score_selection(
    images: &[ImageDetections],
    iou_threshold: f64,
    mut select: impl FnMut(&ImageDetections) -> Vec<DetectionWindow>,
) -> PrfScore {
    let selected: Vec<(Vec<DetectionWindow>, &[BoundingBox])> =
        images.iter().map(|im| (select(im), im.ground_truth.as_slice())).collect();
    match_and_score(&selected, iou_threshold)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub score: PrfScore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdSweep {
    pub curve: Vec<PrPoint>,
    /// Index into `curve` of the highest F (first one on ties).
    pub best: usize,
}

impl ThresholdSweep {
    pub fn best_point(&self) -> &PrPoint {
        &self.curve[self.best]
    }
}

/// Fixed-threshold baseline: keeps windows with score `>= t` for every
/// threshold and reports pooled P / R / F per threshold.
pub fn sweep_threshold(images: &[ImageDetections], thresholds: &[f64], iou_threshold: f64) -> Result<ThresholdSweep> {
    if thresholds.windows(2).any(|w| w[0] > w[1]) || thresholds.iter().any(|t| t.is_nan()) {
        return Err(DetectError::UnsortedThresholds);
    }
    if thresholds.is_empty() {
        return Err(DetectError::UnsortedThresholds);
    }
    let curve: Vec<PrPoint> = thresholds
        .iter()
        .map(|&t| PrPoint {
            threshold: t,
            score: score_selection(images, iou_threshold, |im| {
                im.candidates.iter().filter(|c| c.score >= t).copied().collect()
            }),
        })
        .collect();
    let mut best = 0;
    for (i, p) in curve.iter().enumerate() {
        if p.score.f_measure > curve[best].score.f_measure {
            best = i;
        }
    }
    Ok(ThresholdSweep { curve, best })
}

/// Every distinct candidate score, ascending, plus one value above the
/// largest (the empty-selection point).
pub fn candidate_thresholds(images: &[ImageDetections]) -> Vec<f64> {
    let mut t: Vec<f64> = images.iter().flat_map(|im| im.candidates.iter().map(|c| c.score)).collect();
    t.sort_by(f64::total_cmp);
    t.dedup();
    let top = t.last().copied().unwrap_or(0.0);
    t.push(if top > 0.0 { top * 2.0 } else { top + 1.0 });
    t
}

// ---------------------------------------------------------------------------
// Files

#[derive(Serialize, Deserialize)]
struct DetectionLine {
    image_id: String,
    candidates: Vec<[f64; 5]>,
    #[serde(default)]
    ground_truth: Vec<BoundingBox>,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> DetectError + '_ {
    move |source| DetectError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads `detections.jsonl`: one JSON object per line with `image_id`,
/// `candidates` as `[x, y, w, h, score]` and `ground_truth` as `[x, y, w, h]`.
pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<ImageDetections>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |reason: String| DetectError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let d: DetectionLine = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        let candidates = d
            .candidates
            .iter()
            .map(|c| {
                if !c[4].is_finite() {
                    return Err(DetectError::NonFiniteScore(d.image_id.clone()));
                }
                Ok(DetectionWindow {
                    bbox: BoundingBox::new(c[0], c[1], c[2], c[3]).map_err(|e| parse(e.to_string()))?,
                    score: c[4],
                })
            })
            .collect::<Result<_>>()?;
        out.push(ImageDetections {
            image_id: d.image_id,
            candidates,
            ground_truth: d.ground_truth,
        });
    }
    Ok(out)
}

pub fn write_detections(images: &[ImageDetections], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err(path))?);
    for im in images {
        let line = DetectionLine {
            image_id: im.image_id.clone(),
            candidates: im
                .candidates
                .iter()
                .map(|c| [c.bbox.x, c.bbox.y, c.bbox.w, c.bbox.h, c.score])
                .collect(),
            ground_truth: im.ground_truth.clone(),
        };
        let json = serde_json::to_string(&line).expect("plain data serializes");
        writeln!(f, "{json}").map_err(io_err(path))?;
    }
    f.flush().map_err(io_err(path))
}

/// Reads `image_id,count` rows; counts are `0`..`4` or `4+`.
pub fn read_counts(path: impl AsRef<Path>) -> Result<HashMap<String, CountLabel>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| DetectError::Parse {
        path: path.to_path_buf(),
        line: 0,
        reason: e.to_string(),
    })?;
    let mut out = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let parse = |reason: String| DetectError::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            reason,
        };
        let rec = rec.map_err(|e| parse(e.to_string()))?;
        let (Some(id), Some(count)) = (rec.get(0), rec.get(1)) else {
            return Err(parse("expected image_id,count".into()));
        };
        let label: CountLabel = count.trim().parse().map_err(|e: crate::data::DataError| parse(e.to_string()))?;
        out.insert(id.to_string(), label);
    }
    Ok(out)
}

/// Applies count cueing to every image, keeping ground truth.
pub fn cue_all(images: &[ImageDetections], counts: &HashMap<String, CountLabel>) -> Result<Vec<ImageDetections>> {
    images
        .iter()
        .map(|im| {
            let n = counts
                .get(&im.image_id)
                .ok_or_else(|| DetectError::MissingCount(im.image_id.clone()))?;
            Ok(ImageDetections {
                image_id: im.image_id.clone(),
                candidates: cue_by_count(&im.candidates, count_budget(*n)),
                ground_truth: im.ground_truth.clone(),
            })
        })
        .collect()
}

/// `threshold,precision,recall,f_measure,tp,detections,ground_truths`.
pub fn write_pr_csv(sweep: &ThresholdSweep, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err(path))?);
    writeln!(f, "threshold,precision,recall,f_measure,tp,detections,ground_truths").map_err(io_err(path))?;
    for p in &sweep.curve {
        let s = &p.score;
        writeln!(
            f,
            "{},{:.6},{:.6},{:.6},{},{},{}",
            p.threshold, s.precision, s.recall, s.f_measure, s.counts.true_positives, s.counts.detections, s.counts.ground_truths
        )
        .map_err(io_err(path))?;
    }
    f.flush().map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bb(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(x, y, w, h).unwrap()
    }

    fn win(x: f64, y: f64, w: f64, h: f64, score: f64) -> DetectionWindow {
        DetectionWindow { bbox: bb(x, y, w, h), score }
    }

    #[test]
    fn iou_examples() {
        let a = bb(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bb(5.0, 5.0, 1.0, 1.0)), 0.0);
        assert_eq!(iou(&a, &bb(1.0, 1.0, 2.0, 2.0)), 1.0 / 7.0);
        // touching edges share no area
        assert_eq!(iou(&a, &bb(2.0, 0.0, 2.0, 2.0)), 0.0);
    }

    #[test]
    fn cue_examples() {
        let c = vec![win(0.0, 0.0, 1.0, 1.0, 0.9), win(1.0, 0.0, 1.0, 1.0, 0.8), win(2.0, 0.0, 1.0, 1.0, 0.3)];
        assert_eq!(cue_by_count(&c, 2), c[..2].to_vec());
        assert!(cue_by_count(&c, 0).is_empty());
        assert_eq!(cue_by_count(&c, 10).len(), 3);
        let tied = vec![win(0.0, 0.0, 1.0, 1.0, 0.5), win(1.0, 0.0, 1.0, 1.0, 0.5)];
        assert_eq!(cue_by_count(&tied, 1), vec![tied[0]]);
    }

    #[test]
    fn table_rows_f_measure() {
        assert!((100.0 * f_measure(0.775, 0.740) - 75.7).abs() <= 0.05);
        assert!((100.0 * f_measure(0.796, 0.795) - 79.5).abs() <= 0.05);
        assert!((100.0 * f_measure(0.839, 0.817) - 82.8).abs() <= 0.05);
        assert_eq!(f_measure(0.0, 0.0), 0.0);
    }

    #[test]
    fn perfect_and_double_detections() {
        let gt = [bb(0.0, 0.0, 10.0, 10.0), bb(20.0, 20.0, 10.0, 10.0)];
        let perfect = vec![win(0.0, 0.0, 10.0, 10.0, 0.9), win(20.0, 20.0, 10.0, 10.0, 0.8)];
        let s = match_and_score(&[(perfect, &gt)], IOU_THRESHOLD);
        assert_eq!((s.precision, s.recall, s.f_measure), (1.0, 1.0, 1.0));
        // Hand trace: the 0.9 window takes the first box; the 0.8 window
        // also overlaps only that box, which is already used.
        let double = vec![win(0.0, 0.0, 10.0, 10.0, 0.9), win(1.0, 0.0, 10.0, 10.0, 0.8)];
        let c = match_image(&double, &gt, IOU_THRESHOLD);
        assert_eq!(c.true_positives, 1);
        let s = match_and_score(&[(double, &gt)], IOU_THRESHOLD);
        assert_eq!((s.precision, s.recall), (0.5, 0.5));
    }

    #[test]
    fn greedy_prefers_best_overlap() {
        let gt = [bb(0.0, 0.0, 10.0, 10.0), bb(2.0, 0.0, 10.0, 10.0)];
        // overlaps both; the second box is the better match
        let d = vec![win(2.0, 0.0, 10.0, 10.0, 0.9), win(0.0, 0.0, 10.0, 10.0, 0.5)];
        assert_eq!(match_image(&d, &gt, 0.5).true_positives, 2);
    }

    fn toy_set() -> Vec<ImageDetections> {
        vec![
            ImageDetections {
                image_id: "a".into(),
                candidates: vec![win(0.0, 0.0, 10.0, 10.0, 0.9), win(50.0, 50.0, 10.0, 10.0, 0.4)],
                ground_truth: vec![bb(0.0, 0.0, 10.0, 10.0)],
            },
            ImageDetections {
                image_id: "b".into(),
                candidates: vec![win(0.0, 0.0, 10.0, 10.0, 0.6)],
                ground_truth: vec![],
            },
        ]
    }

    #[test]
    fn sweep_conventions() {
        let set = toy_set();
        let sw = sweep_threshold(&set, &[0.0, 0.5, 0.95], IOU_THRESHOLD).unwrap();
        let low = &sw.curve[0].score;
        assert_eq!((low.precision, low.recall), (1.0 / 3.0, 1.0));
        let high = &sw.curve[2].score;
        assert_eq!((high.precision, high.recall), (1.0, 0.0));
        assert_eq!(sw.best, 1);
        assert!(sweep_threshold(&set, &[0.5, 0.1], IOU_THRESHOLD).is_err());
        let th = candidate_thresholds(&set);
        assert_eq!(th, vec![0.4, 0.6, 0.9, 1.8]);
    }

    #[test]
    fn gt_count_cue_beats_threshold_on_toy() {
        let set = toy_set();
        let counts: HashMap<String, CountLabel> =
            [("a".to_string(), CountLabel::One), ("b".to_string(), CountLabel::Zero)].into();
        let cued = cue_all(&set, &counts).unwrap();
        let s = score_selection(&cued, IOU_THRESHOLD, |im| im.candidates.clone());
        let sw = sweep_threshold(&set, &candidate_thresholds(&set), IOU_THRESHOLD).unwrap();
        assert_eq!(s.f_measure, 1.0);
        assert!(s.f_measure >= sw.best_point().score.f_measure);
    }

    #[test]
    fn jsonl_and_counts_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let set = toy_set();
        write_detections(&set, &p).unwrap();
        assert_eq!(read_detections(&p).unwrap(), set);
        std::fs::write(dir.path().join("bad.jsonl"), "{\"image_id\":\"x\",\"candidates\":[[0,0,0,1,0.5]]}\n").unwrap();
        assert!(matches!(
            read_detections(dir.path().join("bad.jsonl")),
            Err(DetectError::Parse { line: 1, .. })
        ));
        let c = dir.path().join("c.csv");
        std::fs::write(&c, "image_id,count\na,1\nb,4+\n").unwrap();
        let counts = read_counts(&c).unwrap();
        assert_eq!(counts["b"], CountLabel::FourPlus);
        assert!(cue_all(&set, &HashMap::new()).is_err());
        let sw = sweep_threshold(&set, &[0.5], IOU_THRESHOLD).unwrap();
        let pr = dir.path().join("pr.csv");
        write_pr_csv(&sw, &pr).unwrap();
        assert!(std::fs::read_to_string(pr).unwrap().starts_with("threshold,precision"));
    }

    proptest! {
        #[test]
        fn cue_size_and_monotonicity(scores in prop::collection::vec(0.0f64..1.0, 0..20), n in 0usize..25) {
            let c: Vec<DetectionWindow> = scores.iter().enumerate().map(|(i, &s)| win(i as f64, 0.0, 1.0, 1.0, s)).collect();
            let a = cue_by_count(&c, n);
            prop_assert_eq!(a.len(), n.min(c.len()));
            prop_assert!(cue_by_count(&c, n + 1).len() >= a.len());
            prop_assert!(a.windows(2).all(|w| w[0].score >= w[1].score));
        }

        #[test]
        fn f_is_bounded(p in 0.0f64..=1.0, r in 0.0f64..=1.0) {
            let f = f_measure(p, r);
            prop_assert!(f <= p.max(r) + 1e-15);
            prop_assert!(f >= 0.0);
        }

        #[test]
        fn iou_symmetric_in_unit_range(
            a in (0.0f64..50.0, 0.0f64..50.0, 1.0f64..30.0, 1.0f64..30.0),
            b in (0.0f64..50.0, 0.0f64..50.0, 1.0f64..30.0, 1.0f64..30.0),
        ) {
            let (a, b) = (bb(a.0, a.1, a.2, a.3), bb(b.0, b.1, b.2, b.3));
            let v = iou(&a, &b);
            prop_assert_eq!(v, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
