//! Feature-channel novelty between two models and top-activation patches.
//!
//! Every channel ranks a shared image set by its maximum activation per
//! image. A channel's novelty score is its best Spearman correlation with
//! any reference channel; low scores mark channels whose ranking no
//! reference channel reproduces.

use std::io::Write;
use std::path::{Path, PathBuf};

use log::warn;
use serde::Serialize;
use thiserror::Error;

use crate::exec::Execution;
use crate::imaging::{self, ImagingError, RasterImage};
use crate::nnet::{model, ModelState, NnetError};

#[derive(Debug, Error)]
pub enum FeatvizError {
    #[error("rank correlation needs at least 2 items, got {0}")]
    TooShort(usize),
    #[error("rankings have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("ranking has zero variance (all values tied)")]
    ZeroVariance,
    #[error("feature maps disagree: {0}")]
    Shape(String),
    #[error("no channel rankings given")]
    Empty,
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Nnet(#[from] NnetError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, FeatvizError>;

/// Fractional ranks (1-based); tied values share their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && values[idx[j]] == values[idx[i]] {
            j += 1;
        }
        // positions i..j hold ranks i+1..=j
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(FeatvizError::ZeroVariance);
    }
    // sqrt of the product keeps identical rankings at exactly 1
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rank correlation of two equally long value lists, with
/// average ranks for ties.
pub fn spearman_rho(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(FeatvizError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(FeatvizError::TooShort(a.len()));
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

/// One channel's view of an image set.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRanking {
    pub channel: usize,
    /// Maximum activation on each image.
    pub max_activation: Vec<f64>,
    /// Feature-map position `(y, x)` of that maximum.
    pub argmax: Vec<(usize, usize)>,
    /// Feature-map size `(h, w)`.
    pub map_size: (usize, usize),
}

impl ChannelRanking {
    /// Image indices by descending max activation (ties in image order).
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.max_activation.len()).collect();
        idx.sort_by(|&a, &b| self.max_activation[b].total_cmp(&self.max_activation[a]));
        idx
    }
}

/// Builds per-channel rankings from per-image `(C, H, W)` activations given
/// as `(shape, data)` pairs. The first maximal position wins ties.
pub fn channel_rankings(maps: &[(Vec<usize>, Vec<f32>)]) -> Result<Vec<ChannelRanking>> {
    let Some((shape, _)) = maps.first() else {
        return Err(FeatvizError::Empty);
    };
    let &[c, h, w] = shape.as_slice() else {
        return Err(FeatvizError::Shape(format!("expected (C, H, W), got {shape:?}")));
    };
    for (i, (s, d)) in maps.iter().enumerate() {
        if s != shape || d.len() != c * h * w {
            return Err(FeatvizError::Shape(format!("image {i} has shape {s:?}, expected {shape:?}")));
        }
    }
    Ok((0..c)
        .map(|ch| {
            let (max_activation, argmax) = maps
                .iter()
                .map(|(_, d)| {
                    let plane = &d[ch * h * w..(ch + 1) * h * w];
                    let mut best = 0;
                    for (i, &v) in plane.iter().enumerate() {
                        if v > plane[best] {
                            best = i;
                        }
                    }
                    (plane[best] as f64, (best / w, best % w))
                })
                .unzip();
            ChannelRanking {
                channel: ch,
                max_activation,
                argmax,
                map_size: (h, w),
            }
        })
        .collect())
}

/// Rankings of every channel of `state`'s analysis layer (the last conv
/// block) over `images`.
pub fn model_rankings(state: &ModelState, images: &[RasterImage], exec: Execution) -> Result<Vec<ChannelRanking>> {
    let maps = exec
        .map(images, |img| model::feature_map(state, img).map(|t| (t.shape().to_vec(), t.into_data())))
        .into_iter()
        .collect::<std::result::Result<Vec<_>, _>>()?;
    channel_rankings(&maps)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NoveltyScore {
    pub channel: usize,
    /// Best correlation with a reference channel. A constant channel matches
    /// a constant reference channel with 1; `None` when nothing is comparable.
    pub score: Option<f64>,
    /// Reference channel achieving the score.
    pub best_match: Option<usize>,
}

/// `S_i = max_j rho(R_i, R_j_ref)` for every model channel. A varying and a
/// constant channel have no defined correlation and are never paired.
pub fn novelty_scores(
    model: &[ChannelRanking],
    reference: &[ChannelRanking],
    exec: Execution,
) -> Result<Vec<NoveltyScore>> {
    if model.is_empty() || reference.is_empty() {
        return Err(FeatvizError::Empty);
    }
    let n = model[0].max_activation.len();
    if let Some(bad) = model.iter().chain(reference).find(|r| r.max_activation.len() != n) {
        return Err(FeatvizError::LengthMismatch(n, bad.max_activation.len()));
    }
    if n < 2 {
        return Err(FeatvizError::TooShort(n));
    }
    let ref_ranks: Vec<(usize, Vec<f64>)> = reference
        .iter()
        .map(|r| (r.channel, average_ranks(&r.max_activation)))
        .collect();
    let is_constant = |r: &[f64]| r.iter().all(|&v| v == r[0]);
    Ok(exec.map(model, |m| {
        let ranks = average_ranks(&m.max_activation);
        let mut best: Option<(f64, usize)> = None;
        if is_constant(&ranks) {
            // two all-tied rankings are the same ranking
            best = ref_ranks.iter().find(|(_, r)| is_constant(r)).map(|(ch, _)| (1.0, *ch));
        } else {
            for (ch, r) in &ref_ranks {
                if let Ok(rho) = pearson(&ranks, r) {
                    if best.is_none_or(|(b, _)| rho > b) {
                        best = Some((rho, *ch));
                    }
                }
            }
        }
        if best.is_none() {
            warn!("channel {} has no comparable reference channel", m.channel);
        }
        NoveltyScore {
            channel: m.channel,
            score: best.map(|b| b.0),
            best_match: best.map(|b| b.1),
        }
    }))
}

pub const NOVELTY_THRESHOLD: f64 = 0.3;

/// Channels scoring strictly below `threshold`, lowest score first.
pub fn select_novel(scores: &[NoveltyScore], threshold: f64) -> Vec<usize> {
    let mut sel: Vec<(f64, usize)> = scores
        .iter()
        .filter_map(|s| s.score.filter(|&v| v < threshold).map(|v| (v, s.channel)))
        .collect();
    sel.sort_by(|a, b| a.0.total_cmp(&b.0));
    sel.into_iter().map(|s| s.1).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Equal-width bins over `[-1, 1]`; the last bin is closed on the right.
pub fn score_histogram(scores: &[NoveltyScore], bins: usize) -> Vec<HistogramBin> {
    let bins = bins.max(1);
    let width = 2.0 / bins as f64;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|b| HistogramBin {
            lo: -1.0 + b as f64 * width,
            hi: -1.0 + (b + 1) as f64 * width,
            count: 0,
        })
        .collect();
    for v in scores.iter().filter_map(|s| s.score) {
        let b = (((v + 1.0) / width).floor() as isize).clamp(0, bins as isize - 1);
        out[b as usize].count += 1;
    }
    out
}

#[derive(Clone, Debug)]
pub struct Patch {
    pub image_index: usize,
    pub activation: f64,
    /// Pixel rectangle `(x, y, w, h)` inside the source image.
    pub rect: (usize, usize, usize, usize),
    pub image: RasterImage,
}

/// Pixel rectangle of a `fraction`-sized patch centered on the center of
/// feature-map cell `(fy, fx)`, mapped linearly onto a `width x height`
/// image and shifted to lie inside it.
pub fn patch_rect(
    cell: (usize, usize),
    map_size: (usize, usize),
    width: usize,
    height: usize,
    fraction: f64,
) -> (usize, usize, usize, usize) {
    let pw = ((fraction * width as f64).round() as usize).clamp(1, width);
    let ph = ((fraction * height as f64).round() as usize).clamp(1, height);
    let cx = (cell.1 as f64 + 0.5) / map_size.1 as f64 * width as f64;
    let cy = (cell.0 as f64 + 0.5) / map_size.0 as f64 * height as f64;
    let x = (cx - pw as f64 / 2.0).round().clamp(0.0, (width - pw) as f64) as usize;
    let y = (cy - ph as f64 / 2.0).round().clamp(0.0, (height - ph) as f64) as usize;
    (x, y, pw, ph)
}

/// The `k` images with the highest maximum activation of `channel`, each
/// cropped around its strongest unit.
pub fn top_patches(channel: &ChannelRanking, images: &[RasterImage], k: usize, fraction: f64) -> Result<Vec<Patch>> {
    if images.len() != channel.max_activation.len() {
        return Err(FeatvizError::LengthMismatch(images.len(), channel.max_activation.len()));
    }
    if images.len() < k {
        warn!("only {} images for {k} patches", images.len());
    }
    channel
        .ranking()
        .into_iter()
        .take(k)
        .map(|i| {
            let img = &images[i];
            let rect = patch_rect(channel.argmax[i], channel.map_size, img.width(), img.height(), fraction);
            Ok(Patch {
                image_index: i,
                activation: channel.max_activation[i],
                rect,
                image: img.crop(rect.0, rect.1, rect.2, rect.3)?,
            })
        })
        .collect()
}

/// Square grid of patches, each resized to `tile` pixels, row-major.
pub fn montage(patches: &[Patch], cols: usize, tile: usize) -> Result<RasterImage> {
    let cols = cols.max(1);
    let rows = patches.len().div_ceil(cols).max(1);
    let mut out = RasterImage::filled(cols * tile, rows * tile, [0.0, 0.0, 0.0, 1.0])?;
    for (i, p) in patches.iter().enumerate() {
        let t = imaging::resize_bilinear(&p.image, tile, tile)?;
        imaging::composite_in_place(&mut out, &t, (((i % cols) * tile) as i64, ((i / cols) * tile) as i64));
    }
    Ok(out)
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> FeatvizError + '_ {
    move |source| FeatvizError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// `channel,score,best_match` rows; undefined scores are written as `NA`.
pub fn write_scores_csv(scores: &[NoveltyScore], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err(path))?);
    writeln!(f, "channel,score,best_match").map_err(io_err(path))?;
    for s in scores {
        let score = s.score.map(|v| format!("{v:.6}")).unwrap_or_else(|| "NA".into());
        let m = s.best_match.map(|v| v.to_string()).unwrap_or_else(|| "NA".into());
        writeln!(f, "{},{score},{m}", s.channel).map_err(io_err(path))?;
    }
    f.flush().map_err(io_err(path))
}

pub fn write_histogram_csv(hist: &[HistogramBin], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err(path))?);
    writeln!(f, "lo,hi,count").map_err(io_err(path))?;
    for b in hist {
        writeln!(f, "{:.4},{:.4},{}", b.lo, b.hi, b.count).map_err(io_err(path))?;
    }
    f.flush().map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    /// Pearson correlation of rank vectors computed independently: ranks by
    /// counting smaller and equal elements.
    fn oracle(a: &[f64], b: &[f64]) -> f64 {
        let rank = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .map(|&x| {
                    let less = v.iter().filter(|&&y| y < x).count() as f64;
                    let eq = v.iter().filter(|&&y| y == x).count() as f64;
                    less + (eq + 1.0) / 2.0
                })
                .collect()
        };
        let (ra, rb) = (rank(a), rank(b));
        let n = a.len() as f64;
        let ma = ra.iter().sum::<f64>() / n;
        let mb = rb.iter().sum::<f64>() / n;
        let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for i in 0..=p.len() {
                let mut q = p.clone();
                q.insert(i, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn rho_basic_cases() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman_rho(&a, &a).unwrap(), 1.0);
        assert_eq!(spearman_rho(&a, &[4.0, 3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!(matches!(spearman_rho(&[1.0], &[1.0]), Err(FeatvizError::TooShort(1))));
        assert!(matches!(spearman_rho(&a, &[1.0; 4]), Err(FeatvizError::ZeroVariance)));
        assert!(spearman_rho(&a, &[1.0, 2.0]).is_err());
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0, 3.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn rho_matches_oracle_on_all_permutations_of_five() {
        let perms = permutations(5);
        assert_eq!(perms.len(), 120);
        let base: Vec<f64> = (0..5).map(|i| i as f64).collect();
        for p in &perms {
            let b: Vec<f64> = p.iter().map(|&i| i as f64).collect();
            assert!((spearman_rho(&base, &b).unwrap() - oracle(&base, &b)).abs() <= 1e-12);
        }
    }

    fn ranking(channel: usize, acts: Vec<f64>) -> ChannelRanking {
        let n = acts.len();
        ChannelRanking {
            channel,
            max_activation: acts,
            argmax: vec![(0, 0); n],
            map_size: (1, 1),
        }
    }

    fn random_rankings(seed: u64, c: usize, n: usize) -> Vec<ChannelRanking> {
        let mut rng = crate::seed::rng(seed);
        (0..c)
            .map(|ch| ranking(ch, (0..n).map(|_| rng.gen_range(0..6) as f64).collect()))
            .collect()
    }

    #[test]
    fn self_reference_scores_one() {
        let m = random_rankings(1, 8, 30);
        let s = novelty_scores(&m, &m, Execution::Parallel).unwrap();
        assert!(s.iter().all(|s| (s.score.unwrap() - 1.0).abs() < 1e-12));
        assert!(select_novel(&s, NOVELTY_THRESHOLD).is_empty());
    }

    #[test]
    fn novelty_matches_nested_loop_oracle() {
        let m = random_rankings(2, 5, 12);
        let r = random_rankings(3, 7, 12);
        let s = novelty_scores(&m, &r, Execution::Sequential).unwrap();
        for (mi, si) in m.iter().zip(&s) {
            let best = r
                .iter()
                .map(|rj| oracle(&mi.max_activation, &rj.max_activation))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((si.score.unwrap() - best).abs() < 1e-12);
        }
        let single = novelty_scores(&m, &r[..1], Execution::Sequential).unwrap();
        for (mi, si) in m.iter().zip(&single) {
            let rho = spearman_rho(&mi.max_activation, &r[0].max_activation).unwrap();
            assert!((si.score.unwrap() - rho).abs() < 1e-15);
        }
        assert!(novelty_scores(&m, &random_rankings(3, 2, 11), Execution::Sequential).is_err());
    }

    #[test]
    fn constant_channels_only_match_constant_channels() {
        let m = vec![ranking(0, vec![0.0; 4]), ranking(1, vec![1.0, 2.0, 3.0, 4.0])];
        let s = novelty_scores(&m, &m, Execution::Sequential).unwrap();
        assert_eq!(s[0].score, Some(1.0));
        assert_eq!(s[0].best_match, Some(0));
        assert_eq!(s[1].score, Some(1.0));
        assert_eq!(s[1].best_match, Some(1));
        let s = novelty_scores(&m[..1], &m[1..], Execution::Sequential).unwrap();
        assert_eq!(s[0].score, None);
        let s = novelty_scores(&m[1..], &m[..1], Execution::Sequential).unwrap();
        assert_eq!(s[0].score, None);
    }

    fn scored(vals: &[f64]) -> Vec<NoveltyScore> {
        vals.iter()
            .enumerate()
            .map(|(i, &v)| NoveltyScore {
                channel: i,
                score: Some(v),
                best_match: Some(0),
            })
            .collect()
    }

    #[test]
    fn select_novel_boundary_and_order() {
        assert_eq!(select_novel(&scored(&[0.1, 0.29, 0.3]), 0.3), vec![0, 1]);
        assert_eq!(select_novel(&scored(&[0.25, -0.2, 0.9]), 0.3), vec![1, 0]);
        assert!(select_novel(&scored(&[1.0, 1.0]), 0.3).is_empty());
    }

    #[test]
    fn histogram_matches_recount() {
        let mut rng = crate::seed::rng(4);
        let vals: Vec<f64> = (0..500).map(|_| rng.gen_range(-1.0..=1.0)).chain([1.0, -1.0]).collect();
        let h = score_histogram(&scored(&vals), 20);
        assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), vals.len());
        for (i, b) in h.iter().enumerate() {
            let recount = vals
                .iter()
                .filter(|&&v| v >= b.lo - 1e-12 && (v < b.hi - 1e-12 || (i == 19 && v <= 1.0)))
                .count();
            assert_eq!(b.count, recount, "bin {i}");
        }
    }

    #[test]
    fn patch_examples() {
        assert_eq!(patch_rect((4, 4), (9, 9), 100, 50, 0.6), (20, 10, 60, 30));
        assert_eq!(patch_rect((0, 0), (8, 8), 100, 100, 0.6), (0, 0, 60, 60));
        assert_eq!(patch_rect((7, 7), (8, 8), 100, 100, 0.6), (40, 40, 60, 60));

        let imgs: Vec<RasterImage> = (0..4)
            .map(|i| RasterImage::filled(20, 10, [i as f32 / 4.0, 0.0, 0.0, 1.0]).unwrap())
            .collect();
        let ch = ranking(0, vec![0.1, 0.9, 0.2, 0.3]);
        let p = top_patches(&ch, &imgs, 1, 0.6).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].image_index, 1);
        assert_eq!((p[0].image.width(), p[0].image.height()), (12, 6));
        let all = top_patches(&ch, &imgs, 9, 0.6).unwrap();
        assert_eq!(all.iter().map(|p| p.image_index).collect::<Vec<_>>(), vec![1, 3, 2, 0]);
        let m = montage(&all, 3, 8).unwrap();
        assert_eq!((m.width(), m.height()), (24, 16));
    }

    #[test]
    fn channel_rankings_from_maps() {
        let maps = vec![
            (vec![2, 2, 2], vec![0.0, 3.0, 1.0, 3.0, 5.0, 0.0, 0.0, 0.0]),
            (vec![2, 2, 2], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 7.0]),
        ];
        let r = channel_rankings(&maps).unwrap();
        assert_eq!(r[0].max_activation, vec![3.0, 1.0]);
        assert_eq!(r[0].argmax, vec![(0, 1), (0, 0)]);
        assert_eq!(r[1].argmax, vec![(0, 0), (1, 1)]);
        assert_eq!(r[1].ranking(), vec![1, 0]);
    }

    proptest! {
        #[test]
        fn patches_stay_inside(
            fy in 0usize..16, fx in 0usize..16, mh in 1usize..16, mw in 1usize..16,
            w in 1usize..300, h in 1usize..300, frac in 0.05f64..1.0,
        ) {
            let (x, y, pw, ph) = patch_rect((fy.min(mh - 1), fx.min(mw - 1)), (mh, mw), w, h, frac);
            prop_assert!(pw >= 1 && ph >= 1);
            prop_assert!(x + pw <= w && y + ph <= h);
        }

        #[test]
        fn rho_symmetric_and_rank_invariant(
            pairs in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 3..25)
        ) {
            let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            if let (Ok(x), Ok(y)) = (spearman_rho(&a, &b), spearman_rho(&b, &a)) {
                prop_assert!((x - y).abs() < 1e-12);
                let ta: Vec<f64> = a.iter().map(|v| (v * 0.1).exp()).collect();
                prop_assert!((spearman_rho(&ta, &b).unwrap() - x).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(&x));
            }
        }

        #[test]
        fn selection_invariant_under_monotone_maps(seed in any::<u64>()) {
            let m = random_rankings(seed, 6, 15);
            let r = random_rankings(seed ^ 1, 6, 15);
            let warp = |v: &[ChannelRanking]| -> Vec<ChannelRanking> {
                v.iter().map(|c| ranking(c.channel, c.max_activation.iter().map(|x| x * x * x + 2.0).collect())).collect()
            };
            let a = novelty_scores(&m, &r, Execution::Sequential).unwrap();
            let b = novelty_scores(&warp(&m), &warp(&r), Execution::Sequential).unwrap();
            prop_assert_eq!(select_novel(&a, 0.3), select_novel(&b, 0.3));
        }
    }
}
