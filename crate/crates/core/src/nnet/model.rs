use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{self, cross_entropy_row};
use super::tensor::Tensor;
use super::{NnetError, Result};
use crate::exec::Execution;
use crate::imaging::{self, RasterImage};
use crate::seed;

/// Shape of the counting network: `len(block_channels)` blocks of
/// conv3x3 + ReLU + maxpool2, global average pooling, then one
/// fully-connected layer to the class scores.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubitNetSpec {
    pub input_side: usize,
    pub in_channels: usize,
    pub block_channels: Vec<usize>,
    pub kernel: usize,
    pub num_classes: usize,
}

impl Default for SubitNetSpec {
    fn default() -> Self {
        Self {
            input_side: 64,
            in_channels: 3,
            block_channels: vec![16, 32, 64],
            kernel: 3,
            num_classes: 5,
        }
    }
}

impl SubitNetSpec {
    pub fn validate(&self) -> Result<()> {
        let blocks = self.block_channels.len() as u32;
        if blocks == 0 || self.block_channels.contains(&0) {
            return Err(NnetError::Config("at least one non-empty conv block required".into()));
        }
        if self.input_side == 0 || self.input_side % (1 << blocks) != 0 {
            return Err(NnetError::Config(format!(
                "input side {} must be divisible by 2^{blocks}",
                self.input_side
            )));
        }
        if self.kernel % 2 == 0 || self.in_channels == 0 || self.num_classes < 2 {
            return Err(NnetError::Config("odd kernel, >=1 input channel and >=2 classes required".into()));
        }
        Ok(())
    }

    /// Side of the train-time canvas that crops are taken from: 8/7 of the
    /// input side.
    pub fn canvas_side(&self) -> usize {
        (self.input_side as f64 * 8.0 / 7.0).round() as usize
    }

    pub fn feature_channels(&self) -> usize {
        *self.block_channels.last().expect("validated")
    }

    /// Spatial side of the last conv block's pooled output.
    pub fn feature_side(&self) -> usize {
        self.input_side >> self.block_channels.len()
    }

    /// Parameter names and shapes, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c_in = self.in_channels;
        for (i, &c) in self.block_channels.iter().enumerate() {
            out.push((format!("conv{}.weight", i + 1), vec![c, c_in, self.kernel, self.kernel]));
            out.push((format!("conv{}.bias", i + 1), vec![c]));
            c_in = c;
        }
        out.push(("fc.weight".into(), vec![self.num_classes, c_in]));
        out.push(("fc.bias".into(), vec![self.num_classes]));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub momentum: Tensor,
}

impl Param {
    pub fn is_head(&self) -> bool {
        self.name.starts_with("fc.")
    }
}

/// Weights, momentum buffers and iteration counter of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub spec: SubitNetSpec,
    pub params: Vec<Param>,
    pub iteration: u64,
}

impl ModelState {
    /// He-style initialization: weights ~ N(0, 2 / fan_in), biases 0,
    /// momentum 0.
    pub fn fresh(spec: &SubitNetSpec, init_seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seed::rng(init_seed);
        let params = spec
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let value = if shape.len() > 1 {
                    let fan_in: usize = shape[1..].iter().product();
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| normal.sample(&mut rng) as f32).collect();
                    Tensor::new(shape.clone(), data).expect("sized")
                } else {
                    Tensor::zeros(shape.clone())
                };
                Param {
                    name,
                    momentum: Tensor::zeros(shape),
                    value,
                }
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            params,
            iteration: 0,
        })
    }

    /// All weights and biases zero.
    pub fn zeros(spec: &SubitNetSpec) -> Result<Self> {
        spec.validate()?;
        let params = spec
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| Param {
                name,
                value: Tensor::zeros(shape.clone()),
                momentum: Tensor::zeros(shape),
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            params,
            iteration: 0,
        })
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn reset_momentum(&mut self) {
        for p in &mut self.params {
            p.momentum.data_mut().fill(0.0);
        }
    }

    /// Euclidean distance between two models' weights.
    pub fn weight_distance(&self, other: &ModelState) -> f64 {
        self.params
            .iter()
            .zip(&other.params)
            .flat_map(|(a, b)| a.value.data().iter().zip(b.value.data()))
            .map(|(&x, &y)| ((x - y) as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub(crate) fn check_matches_spec(&self) -> Result<()> {
        let shapes = self.spec.param_shapes();
        if shapes.len() != self.params.len() {
            return Err(NnetError::Shape(format!(
                "model has {} tensors, architecture needs {}",
                self.params.len(),
                shapes.len()
            )));
        }
        for ((name, shape), p) in shapes.iter().zip(&self.params) {
            if &p.name != name || p.value.shape() != shape.as_slice() || p.momentum.shape() != shape.as_slice() {
                return Err(NnetError::Shape(format!(
                    "tensor {} {:?} does not match architecture {name} {shape:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(())
    }

    fn block(&self, i: usize) -> (&Tensor, &Tensor) {
        (&self.params[2 * i].value, &self.params[2 * i + 1].value)
    }

    fn head(&self) -> (&Tensor, &Tensor) {
        let n = self.params.len();
        (&self.params[n - 2].value, &self.params[n - 1].value)
    }
}

/// Per-tensor gradients aligned with [`ModelState::params`]. `None` marks a
/// tensor whose gradient was not computed (frozen).
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Option<Tensor>>,
}

impl Gradients {
    fn zeros_like(state: &ModelState, head_only: bool) -> Self {
        Self {
            tensors: state
                .params
                .iter()
                .map(|p| (!head_only || p.is_head()).then(|| Tensor::zeros(p.value.shape().to_vec())))
                .collect(),
        }
    }

    fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            if let (Some(a), Some(b)) = (a, b) {
                for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                    *x += y;
                }
            }
        }
    }
}

struct BlockCache {
    input: Tensor,
    pre_relu: Tensor,
    pool_arg: Vec<u32>,
    pooled_shape: Vec<usize>,
}

/// Activations kept from a forward pass for the backward pass.
pub struct ForwardCache {
    blocks: Vec<BlockCache>,
    features: Tensor,
    pooled: Tensor,
}

impl ForwardCache {
    /// Output of the last conv block, `(C, H, W)`.
    pub fn feature_map(&self) -> &Tensor {
        &self.features
    }
}

/// Forward pass of one `(C, H, W)` input; returns logits and the cache.
pub fn forward(state: &ModelState, input: &Tensor) -> Result<(Tensor, ForwardCache)> {
    let spec = &state.spec;
    input.expect_shape(
        &[spec.in_channels, spec.input_side, spec.input_side],
        "network input",
    )?;
    let mut x = input.clone();
    let mut blocks = Vec::with_capacity(spec.block_channels.len());
    for i in 0..spec.block_channels.len() {
        let (w, b) = state.block(i);
        let pre = layers::conv2d_forward(&x, w, b)?;
        let act = layers::relu_forward(&pre);
        let (pooled, arg) = layers::maxpool2_forward(&act)?;
        blocks.push(BlockCache {
            input: x,
            pre_relu: pre,
            pool_arg: arg,
            pooled_shape: pooled.shape().to_vec(),
        });
        x = pooled;
    }
    let pooled = layers::global_avg_pool_forward(&x)?;
    let (w, b) = state.head();
    let logits = layers::fully_connected_forward(&pooled, w, b)?;
    Ok((
        logits,
        ForwardCache {
            blocks,
            features: x,
            pooled,
        },
    ))
}

/// Backward pass from `grad_logits`. With `head_only`, stops after the
/// fully-connected layer.
pub fn backward(
    state: &ModelState,
    cache: &ForwardCache,
    grad_logits: &Tensor,
    head_only: bool,
) -> Result<Gradients> {
    let mut grads = Gradients::zeros_like(state, head_only);
    let n = state.params.len();
    let (w, _) = state.head();
    let fc = layers::fully_connected_backward(&cache.pooled, w, grad_logits)?;
    grads.tensors[n - 2] = Some(fc.weights);
    grads.tensors[n - 1] = Some(fc.bias);
    if head_only {
        return Ok(grads);
    }
    let mut g = layers::global_avg_pool_backward(cache.features.shape(), &fc.input)?;
    for i in (0..cache.blocks.len()).rev() {
        let blk = &cache.blocks[i];
        debug_assert_eq!(g.shape(), blk.pooled_shape.as_slice());
        let g_act = layers::maxpool2_backward(blk.pre_relu.shape(), &blk.pool_arg, &g)?;
        let g_pre = layers::relu_backward(&blk.pre_relu, &g_act)?;
        let (w, _) = state.block(i);
        let conv = layers::conv2d_backward(&blk.input, w, &g_pre, i > 0)?;
        grads.tensors[2 * i] = Some(conv.weights);
        grads.tensors[2 * i + 1] = Some(conv.bias);
        if let Some(gi) = conv.input {
            g = gi;
        }
    }
    Ok(grads)
}

/// A labeled network input.
pub struct Sample<'a> {
    pub input: &'a Tensor,
    pub label: usize,
}

/// Mean cross-entropy over a batch and its gradients.
///
/// Samples are processed independently (optionally in parallel) and reduced
/// in batch order, so the result is identical in every execution mode.
pub fn batch_loss_and_grads(
    state: &ModelState,
    batch: &[Sample<'_>],
    head_only: bool,
    exec: Execution,
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(NnetError::Config("empty batch".into()));
    }
    let n = batch.len() as f64;
    let per_sample = exec.map(batch, |s| -> Result<(f64, Gradients)> {
        let (logits, cache) = forward(state, s.input)?;
        if s.label >= state.spec.num_classes {
            return Err(NnetError::Shape(format!("label {} out of range", s.label)));
        }
        let (loss, probs) = cross_entropy_row(logits.data(), s.label);
        let grad: Vec<f32> = probs
            .iter()
            .enumerate()
            .map(|(j, &p)| ((p - if j == s.label { 1.0 } else { 0.0 }) / n) as f32)
            .collect();
        let g = backward(state, &cache, &Tensor::new(vec![grad.len()], grad)?, head_only)?;
        Ok((loss, g))
    });
    let mut total = Gradients::zeros_like(state, head_only);
    let mut loss = 0.0;
    for r in per_sample {
        let (l, g) = r?;
        loss += l;
        total.add_assign(&g);
    }
    Ok((loss / n, total))
}

/// Test-time preprocessing: resize to the canvas side, center crop to the
/// input side, planar RGB mapped from `[0, 1]` to `[-2, 2]`.
pub fn preprocess(spec: &SubitNetSpec, image: &RasterImage) -> Result<Tensor> {
    let canvas = spec.canvas_side();
    let resized = imaging::resize_bilinear(image, canvas, canvas)?;
    let off = (canvas - spec.input_side) / 2;
    let planes = to_canvas_planes(&resized);
    crop_input(spec, &planes, canvas, off, off, false)
}

/// Centers intensities and scales them to roughly unit spread.
#[inline]
fn normalize(v: f32) -> f32 {
    (v - 0.5) * 4.0
}

/// Planar RGB of an already canvas-sized image.
pub(crate) fn to_canvas_planes(image: &RasterImage) -> Vec<f32> {
    image.to_planar_rgb()
}

/// Crops `(3, side, side)` from planar canvas data at `(ox, oy)`, optionally
/// mirrored, and centers intensities.
pub(crate) fn crop_input(
    spec: &SubitNetSpec,
    planes: &[f32],
    canvas: usize,
    ox: usize,
    oy: usize,
    hflip: bool,
) -> Result<Tensor> {
    let side = spec.input_side;
    if ox + side > canvas || oy + side > canvas || planes.len() != 3 * canvas * canvas {
        return Err(NnetError::Shape(format!(
            "crop {side} at ({ox},{oy}) outside canvas {canvas}"
        )));
    }
    let mut out = Vec::with_capacity(3 * side * side);
    for c in 0..3 {
        let plane = &planes[c * canvas * canvas..(c + 1) * canvas * canvas];
        for y in 0..side {
            let row = &plane[(oy + y) * canvas + ox..(oy + y) * canvas + ox + side];
            if hflip {
                out.extend(row.iter().rev().map(|&v| normalize(v)));
            } else {
                out.extend(row.iter().map(|&v| normalize(v)));
            }
        }
    }
    Tensor::new(vec![3, side, side], out)
}

/// Softmax class scores for one image.
pub fn predict(state: &ModelState, image: &RasterImage) -> Result<Vec<f32>> {
    let input = preprocess(&state.spec, image)?;
    predict_input(state, &input)
}

pub fn predict_input(state: &ModelState, input: &Tensor) -> Result<Vec<f32>> {
    let (logits, _) = forward(state, input)?;
    Ok(layers::softmax(logits.data()).into_iter().map(|p| p as f32).collect())
}

/// Last-conv-block activations `(C, H, W)` for one image.
pub fn feature_map(state: &ModelState, image: &RasterImage) -> Result<Tensor> {
    let input = preprocess(&state.spec, image)?;
    let (_, cache) = forward(state, &input)?;
    Ok(cache.features)
}

/// Scores for many images, in order.
pub fn predict_batch(state: &ModelState, images: &[RasterImage], exec: Execution) -> Result<Vec<Vec<f32>>> {
    exec.map(images, |img| predict(state, img)).into_iter().collect()
}
