use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{self, batch_loss_and_grads, Gradients, ModelState, Sample, SubitNetSpec};
use super::tensor::Tensor;
use super::{NnetError, Result};
use crate::data::{CountLabel, DatasetManifest};
use crate::exec::Execution;
use crate::imaging::{self, RasterImage};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay: f64,
    pub step_iters: u64,
    pub total_iters: u64,
    pub momentum: f64,
    pub seed: u64,
    pub hflip_prob: f64,
    /// Update only the fully-connected output layer.
    pub freeze_features: bool,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            base_lr: 0.001,
            lr_decay: 0.1,
            step_iters: 2000,
            total_iters: 8000,
            momentum: 0.9,
            seed: 0,
            hflip_prob: 0.5,
            freeze_features: false,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NnetError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.step_iters == 0 {
            return bad("step_iters must be >= 1");
        }
        if self.log_every == 0 {
            return bad("log_every must be >= 1");
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return bad("base_lr must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must be in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return bad("hflip_prob must be in [0, 1]");
        }
        Ok(())
    }

    /// Step learning rate: `base_lr * lr_decay^floor(t / step_iters)`.
    pub fn lr_at(&self, t: u64) -> f64 {
        self.base_lr * self.lr_decay.powi((t / self.step_iters) as i32)
    }
}

/// `v <- mu v + g; w <- w - lr v` for every tensor with a gradient.
pub fn sgd_momentum_step(state: &mut ModelState, grads: &Gradients, lr: f64, momentum: f64) -> Result<()> {
    if grads.tensors.len() != state.params.len() {
        return Err(NnetError::Shape(format!(
            "{} gradient tensors for {} parameters",
            grads.tensors.len(),
            state.params.len()
        )));
    }
    for (p, g) in state.params.iter_mut().zip(&grads.tensors) {
        let Some(g) = g else { continue };
        g.expect_shape(p.value.shape(), &p.name)?;
        let (lr, mu) = (lr as f32, momentum as f32);
        for ((w, v), &gi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(p.momentum.data_mut().iter_mut())
            .zip(g.data())
        {
            *v = mu * *v + gi;
            *w -= lr * *v;
        }
    }
    Ok(())
}

/// Training images decoded once and stored at canvas resolution.
pub struct TrainingSet {
    canvas: usize,
    planes: Vec<Vec<f32>>,
    labels: Vec<usize>,
    skipped: Vec<String>,
}

impl TrainingSet {
    /// Loads and resizes every manifest image. Unreadable images are skipped
    /// with a warning; an empty result is an error.
    pub fn load(manifest: &DatasetManifest, spec: &SubitNetSpec, exec: Execution) -> Result<Self> {
        let canvas = spec.canvas_side();
        let idx: Vec<usize> = (0..manifest.len()).collect();
        let loaded = exec.map(&idx, |&i| {
            let path = manifest.resolve(i);
            imaging::load(&path)
                .and_then(|img| imaging::resize_bilinear(&img, canvas, canvas))
                .map(|img| img.to_planar_rgb())
                .map_err(|e| (path.display().to_string(), e.to_string()))
        });
        let mut set = Self {
            canvas,
            planes: Vec::new(),
            labels: Vec::new(),
            skipped: Vec::new(),
        };
        for (r, entry) in loaded.into_iter().zip(manifest.entries()) {
            match r {
                Ok(p) => {
                    set.planes.push(p);
                    set.labels.push(entry.label.index());
                }
                Err((path, e)) => {
                    log::warn!("skipping unloadable image {path}: {e}");
                    set.skipped.push(path);
                }
            }
        }
        if set.planes.is_empty() {
            let what = manifest
                .base_dir()
                .map(|d| d.display().to_string())
                .unwrap_or_else(|| format!("manifest of {} entries", manifest.len()));
            return Err(NnetError::NoLoadableImages(what));
        }
        Ok(set)
    }

    /// Builds a set from in-memory images.
    pub fn from_images(images: &[(RasterImage, CountLabel)], spec: &SubitNetSpec, exec: Execution) -> Result<Self> {
        if images.is_empty() {
            return Err(NnetError::NoLoadableImages("empty image list".into()));
        }
        let canvas = spec.canvas_side();
        let planes = exec
            .map(images, |(img, _)| {
                imaging::resize_bilinear(img, canvas, canvas).map(|r| r.to_planar_rgb())
            })
            .into_iter()
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self {
            canvas,
            planes,
            labels: images.iter().map(|(_, l)| l.index()).collect(),
            skipped: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.planes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.planes.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Paths that failed to load.
    pub fn skipped(&self) -> &[String] {
        &self.skipped
    }

    /// Center-cropped network input of item `i`.
    pub fn center_input(&self, spec: &SubitNetSpec, i: usize) -> Result<Tensor> {
        let off = (self.canvas - spec.input_side) / 2;
        model::crop_input(spec, &self.planes[i], self.canvas, off, off, false)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub iteration: u64,
    /// Mean batch loss since the previous point.
    pub loss: f64,
    pub lr: f64,
}

pub struct TrainReport {
    pub state: ModelState,
    pub loss_curve: Vec<LossPoint>,
}

/// Runs `cfg.total_iters` SGD steps from `init` (or a fresh model seeded
/// from `cfg.seed`).
///
/// Batches are drawn without replacement from a per-epoch shuffle. Each
/// sample gets a uniform crop offset and a horizontal flip with probability
/// `cfg.hflip_prob`. The learning-rate schedule starts from `cfg.base_lr`
/// on every call.
pub fn train(
    set: &TrainingSet,
    spec: &SubitNetSpec,
    cfg: &TrainConfig,
    init: Option<ModelState>,
    exec: Execution,
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut state = match init {
        Some(s) => {
            if &s.spec != spec {
                return Err(NnetError::Config("initial model has a different architecture".into()));
            }
            s.check_matches_spec()?;
            s
        }
        None => ModelState::fresh(spec, seed::derive(cfg.seed, &[0x1417]))?,
    };
    if spec.canvas_side() != set.canvas {
        return Err(NnetError::Config(format!(
            "training set canvas {} does not match architecture canvas {}",
            set.canvas,
            spec.canvas_side()
        )));
    }
    let max_off = set.canvas - spec.input_side;
    let n = set.len();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    let mut curve = Vec::new();
    let (mut window_loss, mut window_n) = (0.0, 0u64);

    for t in 0..cfg.total_iters {
        let mut rng = seed::rng(seed::derive(cfg.seed, &[1, t]));
        let mut inputs = Vec::with_capacity(cfg.batch_size);
        let mut labels = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order = (0..n).collect();
                order.shuffle(&mut seed::rng(seed::derive(cfg.seed, &[2, epoch])));
                epoch += 1;
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            let ox = rng.gen_range(0..=max_off);
            let oy = rng.gen_range(0..=max_off);
            let flip = rng.gen_bool(cfg.hflip_prob);
            inputs.push(model::crop_input(spec, &set.planes[i], set.canvas, ox, oy, flip)?);
            labels.push(set.labels[i]);
        }
        let batch: Vec<Sample> = inputs
            .iter()
            .zip(&labels)
            .map(|(input, &label)| Sample { input, label })
            .collect();
        let (loss, grads) = batch_loss_and_grads(&state, &batch, cfg.freeze_features, exec)?;
        let lr = cfg.lr_at(t);
        sgd_momentum_step(&mut state, &grads, lr, cfg.momentum)?;
        state.iteration += 1;
        window_loss += loss;
        window_n += 1;
        if (t + 1) % cfg.log_every == 0 || t + 1 == cfg.total_iters {
            let point = LossPoint {
                iteration: t + 1,
                loss: window_loss / window_n as f64,
                lr,
            };
            log::info!("iter {} loss {:.4} lr {:.2e}", point.iteration, point.loss, point.lr);
            curve.push(point);
            window_loss = 0.0;
            window_n = 0;
        }
    }
    Ok(TrainReport {
        state,
        loss_curve: curve,
    })
}

pub struct TwoStageReport {
    pub stage1: TrainReport,
    pub stage2: TrainReport,
}

impl TwoStageReport {
    pub fn final_state(&self) -> &ModelState {
        &self.stage2.state
    }
}

/// Trains from scratch on `synthetic`, then continues on `real` with every
/// layer kept (the output layer included). Momentum is cleared between
/// stages and the learning-rate schedule restarts.
pub fn two_stage_finetune(
    synthetic: &TrainingSet,
    real: &TrainingSet,
    spec: &SubitNetSpec,
    cfg1: &TrainConfig,
    cfg2: &TrainConfig,
    exec: Execution,
) -> Result<TwoStageReport> {
    let stage1 = train(synthetic, spec, cfg1, None, exec)?;
    let mut init = stage1.state.clone();
    init.reset_momentum();
    let stage2 = train(real, spec, cfg2, Some(init), exec)?;
    Ok(TwoStageReport { stage1, stage2 })
}

pub fn write_loss_curve(path: impl AsRef<Path>, curve: &[LossPoint]) -> Result<()> {
    let path = path.as_ref();
    let io = |source| NnetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(f, "iteration,loss,lr").map_err(io)?;
    for p in curve {
        writeln!(f, "{},{},{}", p.iteration, p.loss, p.lr).map_err(io)?;
    }
    f.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> SubitNetSpec {
        SubitNetSpec {
            input_side: 8,
            block_channels: vec![4, 6, 8],
            ..SubitNetSpec::default()
        }
    }

    fn param_state(w: f32) -> ModelState {
        let spec = tiny_spec();
        let mut s = ModelState::zeros(&spec).unwrap();
        for p in &mut s.params {
            p.value.data_mut().fill(w);
        }
        s
    }

    fn grads_like(s: &ModelState, g: f32) -> Gradients {
        Gradients {
            tensors: s
                .params
                .iter()
                .map(|p| Some(Tensor::filled(p.value.shape().to_vec(), g)))
                .collect(),
        }
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 0.001);
        assert_eq!(cfg.lr_at(1999), 0.001);
        assert!((cfg.lr_at(2000) - 0.0001).abs() < 1e-15);
        assert!((cfg.lr_at(7999) - 1e-6).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for t in 0..9000 {
            let lr = cfg.lr_at(t);
            assert!(lr <= prev);
            if t % 2000 != 0 {
                assert_eq!(lr, prev);
            }
            prev = lr;
        }
    }

    #[test]
    fn plain_sgd_without_momentum() {
        let mut s = param_state(1.0);
        let g = grads_like(&s, 0.5);
        sgd_momentum_step(&mut s, &g, 0.1, 0.0).unwrap();
        assert!(s.params.iter().all(|p| p.value.data().iter().all(|&w| (w - 0.95).abs() < 1e-7)));
    }

    #[test]
    fn momentum_keeps_moving() {
        let mut s = param_state(0.0);
        for p in &mut s.params {
            p.momentum.data_mut().fill(2.0);
        }
        let g = grads_like(&s, 0.0);
        sgd_momentum_step(&mut s, &g, 0.1, 0.9).unwrap();
        // w = 0 - 0.1 * 0.9 * 2
        assert!(s.params.iter().all(|p| p.value.data().iter().all(|&w| (w + 0.18).abs() < 1e-7)));
    }

    #[test]
    fn quadratic_two_steps_match_recurrence() {
        // f(w) = a/2 w^2, g = a w
        let (a, lr, mu) = (3.0f64, 0.05, 0.9);
        let (mut w, mut v) = (2.0f64, 0.0f64);
        let mut s = param_state(2.0);
        for _ in 0..2 {
            let gv = (a * s.params[0].value.data()[0] as f64) as f32;
            let g = grads_like(&s, gv);
            sgd_momentum_step(&mut s, &g, lr, mu).unwrap();
            v = mu * v + a * w;
            w -= lr * v;
        }
        assert!((s.params[0].value.data()[0] as f64 - w).abs() < 1e-6);
        // by hand: v1 = 6, w1 = 1.7; v2 = 5.4 + 5.1 = 10.5, w2 = 1.175
        assert!((w - 1.175).abs() < 1e-12);
    }

    #[test]
    fn step_rejects_shape_mismatch() {
        let mut s = param_state(0.0);
        let mut g = grads_like(&s, 1.0);
        g.tensors[0] = Some(Tensor::zeros(vec![1]));
        assert!(sgd_momentum_step(&mut s, &g, 0.1, 0.9).is_err());
    }

    fn toy_set(spec: &SubitNetSpec, n: usize) -> TrainingSet {
        let images: Vec<(RasterImage, CountLabel)> = (0..n)
            .map(|i| {
                let label = CountLabel::from_index(i % 5).unwrap();
                let v = (i % 5) as f32 / 4.0;
                let img = RasterImage::from_fn(12, 12, |x, y| {
                    let t = ((x + y + i) % 3) as f32 / 6.0;
                    [v, 1.0 - v, t, 1.0]
                })
                .unwrap();
                (img, label)
            })
            .collect();
        TrainingSet::from_images(&images, spec, Execution::Sequential).unwrap()
    }

    #[test]
    fn zero_iterations_return_init() {
        let spec = tiny_spec();
        let set = toy_set(&spec, 5);
        let init = ModelState::fresh(&spec, 4).unwrap();
        let cfg = TrainConfig {
            total_iters: 0,
            ..TrainConfig::default()
        };
        let r = train(&set, &spec, &cfg, Some(init.clone()), Execution::Sequential).unwrap();
        assert_eq!(r.state, init);
        assert!(r.loss_curve.is_empty());
    }

    #[test]
    fn training_is_reproducible_and_mode_independent() {
        let spec = tiny_spec();
        let set = toy_set(&spec, 7);
        let cfg = TrainConfig {
            batch_size: 4,
            total_iters: 12,
            log_every: 5,
            seed: 9,
            base_lr: 0.01,
            ..TrainConfig::default()
        };
        let a = train(&set, &spec, &cfg, None, Execution::Sequential).unwrap();
        let b = train(&set, &spec, &cfg, None, Execution::Parallel).unwrap();
        assert_eq!(a.state, b.state);
        assert_eq!(a.loss_curve, b.loss_curve);
        let its: Vec<u64> = a.loss_curve.iter().map(|p| p.iteration).collect();
        assert_eq!(its, vec![5, 10, 12]);
        assert_eq!(a.state.iteration, 12);
    }

    #[test]
    fn frozen_features_only_move_head() {
        let spec = tiny_spec();
        let set = toy_set(&spec, 5);
        let init = ModelState::fresh(&spec, 1).unwrap();
        let cfg = TrainConfig {
            batch_size: 5,
            total_iters: 3,
            freeze_features: true,
            base_lr: 0.05,
            ..TrainConfig::default()
        };
        let r = train(&set, &spec, &cfg, Some(init.clone()), Execution::Sequential).unwrap();
        for (a, b) in r.state.params.iter().zip(&init.params) {
            if a.is_head() {
                assert_ne!(a.value, b.value);
            } else {
                assert_eq!(a.value, b.value);
            }
        }
    }

    #[test]
    fn two_stage_keeps_stage_one_when_stage_two_is_empty() {
        let spec = tiny_spec();
        let set = toy_set(&spec, 5);
        let cfg1 = TrainConfig {
            batch_size: 5,
            total_iters: 4,
            base_lr: 0.05,
            ..TrainConfig::default()
        };
        let cfg2 = TrainConfig {
            total_iters: 0,
            ..cfg1.clone()
        };
        let r = two_stage_finetune(&set, &set, &spec, &cfg1, &cfg2, Execution::Sequential).unwrap();
        let fresh = ModelState::fresh(&spec, seed::derive(cfg1.seed, &[0x1417])).unwrap();
        assert!(r.stage1.state.weight_distance(&fresh) > 0.0);
        let mut expect = r.stage1.state.clone();
        expect.reset_momentum();
        assert_eq!(r.final_state(), &expect);
    }

    #[test]
    fn two_stage_is_training_then_momentum_reset_then_training() {
        let spec = tiny_spec();
        let synthetic = toy_set(&spec, 6);
        let real = toy_set(&spec, 4);
        let cfg1 = TrainConfig {
            batch_size: 3,
            total_iters: 3,
            base_lr: 0.05,
            ..TrainConfig::default()
        };
        let cfg2 = TrainConfig {
            total_iters: 2,
            seed: 5,
            ..cfg1.clone()
        };
        let r = two_stage_finetune(&synthetic, &real, &spec, &cfg1, &cfg2, Execution::Sequential).unwrap();
        let mut init = train(&synthetic, &spec, &cfg1, None, Execution::Sequential).unwrap().state;
        init.reset_momentum();
        let manual = train(&real, &spec, &cfg2, Some(init), Execution::Sequential).unwrap();
        assert_eq!(r.final_state(), &manual.state);
    }

    #[test]
    fn unloadable_images_are_skipped_or_fatal() {
        use crate::data::ManifestEntry;
        let dir = tempfile::tempdir().unwrap();
        let img = RasterImage::filled(10, 10, [0.3, 0.4, 0.5, 1.0]).unwrap();
        imaging::save(&img, dir.path().join("ok.png")).unwrap();
        let spec = tiny_spec();
        let m = DatasetManifest::new(vec![
            ManifestEntry::new("ok.png", CountLabel::One),
            ManifestEntry::new("missing.png", CountLabel::Two),
        ])
        .unwrap()
        .with_base_dir(dir.path());
        let set = TrainingSet::load(&m, &spec, Execution::Sequential).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.labels(), &[1]);
        assert_eq!(set.skipped().len(), 1);
        let bad = DatasetManifest::new(vec![ManifestEntry::new("missing.png", CountLabel::Two)])
            .unwrap()
            .with_base_dir(dir.path());
        assert!(matches!(
            TrainingSet::load(&bad, &spec, Execution::Sequential),
            Err(NnetError::NoLoadableImages(_))
        ));
    }

    #[test]
    fn loss_curve_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        write_loss_curve(
            &p,
            &[LossPoint {
                iteration: 50,
                loss: 1.5,
                lr: 0.001,
            }],
        )
        .unwrap();
        assert_eq!(std::fs::read_to_string(p).unwrap(), "iteration,loss,lr\n50,1.5,0.001\n");
    }
}
