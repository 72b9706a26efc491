//! The three-pathway fully convolutional network.
//!
//! Each pathway is a stack of valid 3^3 convolution blocks (conv, batch
//! norm, activation) with residual junctions at layers 4, 6 and 8. The
//! low-resolution pathways are upsampled by replication and center-cropped
//! to the native pathway's output, the three outputs are concatenated, and a
//! head of one 3^3 and two 1^3 blocks produces per-voxel class logits.

mod predict;

pub use predict::{predict_volume, predict_volume_with_order, ProbabilityMap};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::{PatchGeometry, TrainingSample, LOW_RES_SIDE};
use crate::tensor::{
    activation, activation_backward, batchnorm_backward, batchnorm_infer, batchnorm_train, center_crop,
    center_crop_backward, concat_channels, conv3d_valid, conv3d_valid_backward, residual_add,
    residual_backward_shallow, split_channels, upsample_repeat, upsample_repeat_backward, Activation, BnCache,
    Scalar, Tensor, BN_EPS,
};
use crate::volume::NUM_CLASSES;

/// 1-based pathway layers that receive a residual from two layers below.
pub const RESIDUAL_LAYERS: [usize; 3] = [4, 6, 8];

pub const PRELU_INIT: f64 = 0.25;

pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    /// Output channels of each pathway layer.
    pub widths: Vec<usize>,
    /// Head widths: one 3^3 layer then 1^3 layers; the last must equal the class count.
    pub head_widths: Vec<usize>,
    pub activation: Activation,
    /// Sampling stride of each pathway; the first must be 1.
    pub factors: Vec<usize>,
    pub out_block: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            widths: vec![30, 30, 40, 40, 40, 40, 50, 50],
            head_widths: vec![150, 150, NUM_CLASSES],
            activation: Activation::Prelu,
            factors: vec![1, 3, 5],
            out_block: 7,
        }
    }
}

impl NetConfig {
    /// Narrow variant used for desk-scale experiments.
    pub fn reduced(activation: Activation) -> Self {
        NetConfig {
            widths: vec![8, 8, 12, 12, 12, 12, 16, 16],
            head_widths: vec![32, 32, NUM_CLASSES],
            activation,
            ..NetConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("pathway widths must be non-empty and positive".into()));
        }
        if self.head_widths.len() < 2 || self.head_widths.contains(&0) {
            return Err(Error::Config("head needs at least two positive widths".into()));
        }
        if *self.head_widths.last().unwrap() != NUM_CLASSES {
            return Err(Error::Config(format!("last head width must be {NUM_CLASSES}")));
        }
        if self.factors.first() != Some(&1) {
            return Err(Error::Config("the first pathway must have stride 1".into()));
        }
        self.geometry().map(|_| ())
    }

    pub fn geometry(&self) -> Result<PatchGeometry> {
        PatchGeometry::for_network(self.widths.len(), self.out_block, &self.factors[1..])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Convolution followed (except for the logit layer) by batch norm and activation.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock<T> {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    /// Empty for the logit layer, which has no normalization or activation.
    pub bn_gamma: Vec<T>,
    pub bn_beta: Vec<T>,
    pub bn_running_mean: Vec<T>,
    pub bn_running_var: Vec<T>,
    pub act_slope: Vec<T>,
}

impl<T: Scalar> ConvBlock<T> {
    fn new(cin: usize, cout: usize, kernel: usize, norm_act: bool) -> Self {
        let per = |v: f64| if norm_act { vec![T::c(v); cout] } else { Vec::new() };
        ConvBlock {
            cin,
            cout,
            kernel,
            weight: vec![T::zero(); cout * cin * kernel.pow(3)],
            bias: vec![T::zero(); cout],
            bn_gamma: per(1.0),
            bn_beta: per(0.0),
            bn_running_mean: per(0.0),
            bn_running_var: per(1.0),
            act_slope: per(PRELU_INIT),
        }
    }

    pub fn has_norm(&self) -> bool {
        !self.bn_gamma.is_empty()
    }

    fn init_weights<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let fan_in = (self.cin * self.kernel.pow(3)) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        for w in &mut self.weight {
            *w = T::c(normal.sample(rng));
        }
    }

    fn cast<U: Scalar>(&self) -> ConvBlock<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::c(x.f64())).collect();
        ConvBlock {
            cin: self.cin,
            cout: self.cout,
            kernel: self.kernel,
            weight: c(&self.weight),
            bias: c(&self.bias),
            bn_gamma: c(&self.bn_gamma),
            bn_beta: c(&self.bn_beta),
            bn_running_mean: c(&self.bn_running_mean),
            bn_running_var: c(&self.bn_running_var),
            act_slope: c(&self.act_slope),
        }
    }
}

/// Gradients of one block, shaped like its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockGrads<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub bn_gamma: Vec<T>,
    pub bn_beta: Vec<T>,
    pub act_slope: Vec<T>,
}

/// Gradients for every trainable parameter of a [`Network`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub pathways: Vec<Vec<BlockGrads<T>>>,
    pub head: Vec<BlockGrads<T>>,
    activation: Activation,
}

/// Names a parameter tensor and tells the optimizer whether it trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Trainable,
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub config: NetConfig,
    pub pathways: Vec<Vec<ConvBlock<T>>>,
    pub head: Vec<ConvBlock<T>>,
}

/// Batched network input: one `(N, 1, s, s, s)` tensor per pathway.
#[derive(Clone, Debug)]
pub struct NetInput<T> {
    pub pathways: Vec<Tensor<T>>,
}

impl<T: Scalar> NetInput<T> {
    /// Stacks the patches of several samples.
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a TrainingSample>) -> Result<Self> {
        let samples: Vec<&TrainingSample> = samples.into_iter().collect();
        Self::from_patches(samples.iter().map(|s| s.patches.as_slice()))
    }

    pub fn from_patches<'a>(patches: impl IntoIterator<Item = &'a [crate::sampler::Cube<f32>]>) -> Result<Self> {
        let patches: Vec<&[crate::sampler::Cube<f32>]> = patches.into_iter().collect();
        let first = patches
            .first()
            .ok_or_else(|| Error::shape("input", "empty batch"))?;
        let mut pathways = Vec::with_capacity(first.len());
        for p in 0..first.len() {
            let side = first[p].side();
            let mut data = Vec::with_capacity(patches.len() * side.pow(3));
            for s in &patches {
                if s.len() != first.len() || s[p].side() != side {
                    return Err(Error::shape(format!("pathway {p} input"), "inconsistent patch sizes in batch"));
                }
                data.extend(s[p].data().iter().map(|&v| T::c(v as f64)));
            }
            pathways.push(Tensor::from_vec([patches.len(), 1, side, side, side], data)?);
        }
        Ok(NetInput { pathways })
    }

    pub fn batch(&self) -> usize {
        self.pathways.first().map_or(0, |t| t.batch())
    }
}

/// Flattened targets of a batch in `(N, D, H, W)` order.
pub fn batch_targets(samples: &[TrainingSample]) -> Vec<u8> {
    // Cube order is x fastest, which is W fastest in tensor terms.
    samples.iter().flat_map(|s| s.target.data().iter().copied()).collect()
}

struct BlockCache<T> {
    input: Tensor<T>,
    bn: Option<BnCache<T>>,
    pre_act: Option<Tensor<T>>,
}

struct PathwayCache<T> {
    blocks: Vec<BlockCache<T>>,
    /// Shapes of the pathway hidden states h_0..h_L.
    hidden_shapes: Vec<[usize; 5]>,
    out_spatial: [usize; 3],
    upsampled_spatial: [usize; 3],
}

/// Activations retained by a train-mode forward pass.
pub struct ForwardCache<T> {
    pathways: Vec<PathwayCache<T>>,
    head: Vec<BlockCache<T>>,
    concat_sizes: Vec<usize>,
}

impl<T> std::fmt::Debug for ForwardCache<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ForwardCache")
            .field("pathways", &self.pathways.len())
            .field("head_blocks", &self.head.len())
            .finish()
    }
}

impl<T: Scalar> ForwardCache<T> {
    /// Smallest magnitude among all activation inputs. Finite-difference checks
    /// use it to confirm a perturbation cannot cross the activation kink.
    pub fn min_abs_pre_activation(&self) -> f64 {
        self.pathways
            .iter()
            .flat_map(|p| &p.blocks)
            .chain(&self.head)
            .filter_map(|b| b.pre_act.as_ref())
            .flat_map(|t| t.data())
            .map(|v| v.f64().abs())
            .fold(f64::INFINITY, f64::min)
    }

    /// Spatial sizes seen by pathway `p`: its input and every layer output,
    /// then the upsampled block, then the cropped block entering the head.
    pub fn pathway_sizes(&self, p: usize) -> Vec<[usize; 3]> {
        let pc = &self.pathways[p];
        let mut out: Vec<[usize; 3]> = pc.hidden_shapes.iter().map(|s| [s[2], s[3], s[4]]).collect();
        out.push(pc.upsampled_spatial);
        if let Some(b) = self.head.first() {
            out.push(b.input.spatial());
        }
        out
    }
}

impl<T: Scalar> Network<T> {
    /// All weights zero; BN at identity statistics; PReLU slopes at their initial value.
    pub fn zeros(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut pathways = Vec::new();
        for _ in &config.factors {
            let mut blocks = Vec::new();
            let mut cin = 1;
            for &w in &config.widths {
                blocks.push(ConvBlock::new(cin, w, 3, true));
                cin = w;
            }
            pathways.push(blocks);
        }
        let mut head = Vec::new();
        let mut cin = config.widths.last().unwrap() * config.factors.len();
        let last = config.head_widths.len() - 1;
        for (i, &w) in config.head_widths.iter().enumerate() {
            head.push(ConvBlock::new(cin, w, if i == 0 { 3 } else { 1 }, i != last));
            cin = w;
        }
        Ok(Network { config, pathways, head })
    }

    /// He-normal weights (std `sqrt(2 / fan_in)`), zero biases.
    pub fn init<R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        for b in net.pathways.iter_mut().flatten().chain(net.head.iter_mut()) {
            b.init_weights(rng);
        }
        Ok(net)
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            pathways: self.pathways.iter().map(|p| p.iter().map(|b| b.cast()).collect()).collect(),
            head: self.head.iter().map(|b| b.cast()).collect(),
        }
    }

    pub fn geometry(&self) -> PatchGeometry {
        self.config.geometry().expect("validated at construction")
    }

    fn blocks_named(&self) -> Vec<(String, &ConvBlock<T>)> {
        let mut out = Vec::new();
        for (p, blocks) in self.pathways.iter().enumerate() {
            for (i, b) in blocks.iter().enumerate() {
                out.push((format!("pathway{}.conv{}", p, i + 1), b));
            }
        }
        for (i, b) in self.head.iter().enumerate() {
            out.push((format!("head.conv{}", i + 1), b));
        }
        out
    }

    /// Every parameter and buffer in canonical order with its name, role and shape.
    pub fn tensors(&self) -> Vec<(String, Role, Vec<usize>, &[T])> {
        let prelu = self.config.activation == Activation::Prelu;
        let mut out = Vec::new();
        for (name, b) in self.blocks_named() {
            let k = b.kernel;
            out.push((format!("{name}.weight"), Role::Trainable, vec![b.cout, b.cin, k, k, k], &b.weight[..]));
            out.push((format!("{name}.bias"), Role::Trainable, vec![b.cout], &b.bias[..]));
            if b.has_norm() {
                out.push((format!("{name}.bn_gamma"), Role::Trainable, vec![b.cout], &b.bn_gamma[..]));
                out.push((format!("{name}.bn_beta"), Role::Trainable, vec![b.cout], &b.bn_beta[..]));
                if prelu {
                    out.push((format!("{name}.act_slope"), Role::Trainable, vec![b.cout], &b.act_slope[..]));
                }
                out.push((format!("{name}.bn_running_mean"), Role::Buffer, vec![b.cout], &b.bn_running_mean[..]));
                out.push((format!("{name}.bn_running_var"), Role::Buffer, vec![b.cout], &b.bn_running_var[..]));
            }
        }
        out
    }

    /// Mutable view in the same order as [`Network::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, Role, &mut Vec<T>)> {
        let prelu = self.config.activation == Activation::Prelu;
        let mut out = Vec::new();
        for (p, blocks) in self.pathways.iter_mut().enumerate() {
            for (i, b) in blocks.iter_mut().enumerate() {
                push_block(format!("pathway{}.conv{}", p, i + 1), b, prelu, &mut out);
            }
        }
        for (i, b) in self.head.iter_mut().enumerate() {
            push_block(format!("head.conv{}", i + 1), b, prelu, &mut out);
        }
        out
    }

    /// Trainable parameters only, in canonical order.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        self.tensors_mut()
            .into_iter()
            .filter(|(_, r, _)| *r == Role::Trainable)
            .map(|(n, _, v)| (n, v))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors()
            .iter()
            .filter(|t| t.1 == Role::Trainable)
            .map(|t| t.3.len())
            .sum()
    }

    fn block_forward(&self, b: &ConvBlock<T>, x: Tensor<T>, mode: Mode, stage: &str) -> Result<(Tensor<T>, BlockCache<T>)> {
        let z = conv3d_valid(&x, &b.weight, &b.bias, b.cout, b.kernel).map_err(|e| restage(e, stage))?;
        if !b.has_norm() {
            return Ok((
                z,
                BlockCache {
                    input: x,
                    bn: None,
                    pre_act: None,
                },
            ));
        }
        let (u, bn) = match mode {
            Mode::Train => {
                let (u, c) = batchnorm_train(&z, &b.bn_gamma, &b.bn_beta, BN_EPS)?;
                (u, Some(c))
            }
            Mode::Infer => (
                batchnorm_infer(&z, &b.bn_gamma, &b.bn_beta, &b.bn_running_mean, &b.bn_running_var, BN_EPS)?,
                None,
            ),
        };
        let a = activation(&u, &b.act_slope, self.config.activation);
        let cache = BlockCache {
            input: x,
            bn,
            pre_act: Some(u),
        };
        Ok((a, cache))
    }

    fn block_backward(&self, b: &ConvBlock<T>, cache: &BlockCache<T>, da: Tensor<T>, need_dx: bool) -> Result<(Option<Tensor<T>>, BlockGrads<T>)> {
        let (dz, dgamma, dbeta, dslope) = if b.has_norm() {
            let u = cache.pre_act.as_ref().expect("train cache");
            let (du, dslope) = activation_backward(u, &da, &b.act_slope, self.config.activation);
            let bn = cache
                .bn
                .as_ref()
                .ok_or_else(|| Error::shape("backward", "forward was not run in train mode"))?;
            let (dz, dg, db) = batchnorm_backward(&du, bn, &b.bn_gamma);
            (dz, dg, db, dslope.unwrap_or_default())
        } else {
            (da, Vec::new(), Vec::new(), Vec::new())
        };
        let g = conv3d_valid_backward(&cache.input, &b.weight, b.cout, b.kernel, &dz, need_dx)?;
        Ok((
            g.dx,
            BlockGrads {
                weight: g.dw,
                bias: g.db,
                bn_gamma: dgamma,
                bn_beta: dbeta,
                act_slope: dslope,
            },
        ))
    }

    fn pathway_forward(&self, p: usize, x: Tensor<T>, mode: Mode) -> Result<(Tensor<T>, PathwayCache<T>)> {
        let blocks = &self.pathways[p];
        let mut hidden: Vec<Tensor<T>> = Vec::with_capacity(blocks.len() + 1);
        let mut hidden_shapes = vec![x.shape()];
        let mut caches = Vec::with_capacity(blocks.len());
        let mut h = x;
        for (i, b) in blocks.iter().enumerate() {
            let layer = i + 1;
            let stage = format!("pathway{p} layer{layer}");
            let (a, cache) = self.block_forward(b, h.clone(), mode, &stage)?;
            hidden.push(h);
            let out = if RESIDUAL_LAYERS.contains(&layer) && layer >= 3 {
                residual_add(&a, &hidden[layer - 2]).map_err(|e| restage(e, &format!("{stage} residual")))?
            } else {
                a
            };
            hidden_shapes.push(out.shape());
            if mode == Mode::Train {
                caches.push(cache);
            }
            h = out;
        }
        let out_spatial = h.spatial();
        let k = self.config.factors[p];
        let concat = self.geometry().concat_side();
        if k > 1 && out_spatial != [LOW_RES_SIDE; 3] {
            return Err(Error::shape(
                format!("pathway{p} output"),
                format!("expected {LOW_RES_SIDE}^3, got {out_spatial:?}"),
            ));
        }
        let up = upsample_repeat(&h, k).map_err(|e| restage(e, &format!("pathway{p} upsample")))?;
        let upsampled_spatial = up.spatial();
        let merged = center_crop(&up, concat).map_err(|e| restage(e, &format!("pathway{p} crop")))?;
        Ok((
            merged,
            PathwayCache {
                blocks: caches,
                hidden_shapes,
                out_spatial,
                upsampled_spatial,
            },
        ))
    }

    fn pathway_backward(&self, p: usize, cache: &PathwayCache<T>, dmerged: Tensor<T>) -> Result<Vec<BlockGrads<T>>> {
        let k = self.config.factors[p];
        let dup = center_crop_backward(&dmerged, cache.upsampled_spatial)?;
        let dh_last = upsample_repeat_backward(&dup, k)?;
        debug_assert_eq!(dh_last.spatial(), cache.out_spatial);
        let blocks = &self.pathways[p];
        let n = blocks.len();
        let mut dh: Vec<Option<Tensor<T>>> = (0..=n).map(|_| None).collect();
        dh[n] = Some(dh_last);
        let mut grads: Vec<Option<BlockGrads<T>>> = (0..n).map(|_| None).collect();
        for layer in (1..=n).rev() {
            let d = dh[layer].take().expect("gradient flows to every hidden state");
            if RESIDUAL_LAYERS.contains(&layer) && layer >= 3 {
                let ds = residual_backward_shallow(&d, cache.hidden_shapes[layer - 2])?;
                accumulate(&mut dh[layer - 2], ds);
            }
            let (dx, g) = self.block_backward(&blocks[layer - 1], &cache.blocks[layer - 1], d, layer > 1)?;
            if let Some(dx) = dx {
                accumulate(&mut dh[layer - 1], dx);
            }
            grads[layer - 1] = Some(g);
        }
        Ok(grads.into_iter().map(|g| g.expect("every block visited")).collect())
    }

    fn check_input(&self, input: &NetInput<T>) -> Result<()> {
        let geom = self.geometry();
        if input.pathways.len() != self.config.factors.len() {
            return Err(Error::shape(
                "input",
                format!("{} pathway inputs for {} pathways", input.pathways.len(), self.config.factors.len()),
            ));
        }
        let n = input.batch();
        for (p, (t, &k)) in input.pathways.iter().zip(&self.config.factors).enumerate() {
            let s = geom.side_for_stride(k);
            if t.shape() != [n, 1, s, s, s] {
                return Err(Error::shape(
                    format!("pathway{p} input"),
                    format!("expected [{n}, 1, {s}, {s}, {s}], got {:?}", t.shape()),
                ));
            }
        }
        Ok(())
    }

    /// Logits `(N, 3, out, out, out)`. In train mode the returned cache
    /// enables [`Network::backward`] and carries the batch statistics.
    pub fn forward(&self, input: &NetInput<T>, mode: Mode) -> Result<(Tensor<T>, Option<ForwardCache<T>>)> {
        self.check_input(input)?;
        let mut merged = Vec::with_capacity(input.pathways.len());
        let mut pcaches = Vec::with_capacity(input.pathways.len());
        for (p, x) in input.pathways.iter().enumerate() {
            let (m, c) = self.pathway_forward(p, x.clone(), mode)?;
            merged.push(m);
            pcaches.push(c);
        }
        let concat_sizes = merged.iter().map(|t| t.channels()).collect();
        let refs: Vec<&Tensor<T>> = merged.iter().collect();
        let mut h = concat_channels(&refs).map_err(|e| restage(e, "concat"))?;
        drop(merged);
        let mut hcaches = Vec::with_capacity(self.head.len());
        for (i, b) in self.head.iter().enumerate() {
            let (a, c) = self.block_forward(b, h, mode, &format!("head layer{}", i + 1))?;
            if mode == Mode::Train {
                hcaches.push(c);
            }
            h = a;
        }
        let out = self.config.out_block;
        if h.shape() != [input.batch(), NUM_CLASSES, out, out, out] {
            return Err(Error::shape("logits", format!("unexpected logit shape {:?}", h.shape())));
        }
        let cache = (mode == Mode::Train).then_some(ForwardCache {
            pathways: pcaches,
            head: hcaches,
            concat_sizes,
        });
        Ok((h, cache))
    }

    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: &Tensor<T>) -> Result<Gradients<T>> {
        if cache.head.len() != self.head.len() {
            return Err(Error::shape("backward", "missing cache"));
        }
        let mut d = dlogits.clone();
        let mut head_grads = Vec::with_capacity(self.head.len());
        for i in (0..self.head.len()).rev() {
            let (dx, g) = self.block_backward(&self.head[i], &cache.head[i], d, true)?;
            d = dx.expect("head blocks propagate to their input");
            head_grads.push(g);
        }
        head_grads.reverse();
        let parts = split_channels(&d, &cache.concat_sizes)?;
        let mut pathways = Vec::with_capacity(parts.len());
        for (p, dp) in parts.into_iter().enumerate() {
            pathways.push(self.pathway_backward(p, &cache.pathways[p], dp)?);
        }
        Ok(Gradients {
            pathways,
            head: head_grads,
            activation: self.config.activation,
        })
    }

    /// Moves BN running statistics toward the batch statistics of a train-mode pass.
    pub fn update_running_stats(&mut self, cache: &ForwardCache<T>, momentum: f64) {
        let m = T::c(momentum);
        let one_m = T::c(1.0 - momentum);
        let update = |b: &mut ConvBlock<T>, c: &BlockCache<T>| {
            if let Some(bn) = &c.bn {
                for (r, &v) in b.bn_running_mean.iter_mut().zip(&bn.mean) {
                    *r = m * *r + one_m * v;
                }
                for (r, &v) in b.bn_running_var.iter_mut().zip(&bn.var) {
                    *r = m * *r + one_m * v;
                }
            }
        };
        for (blocks, pc) in self.pathways.iter_mut().zip(&cache.pathways) {
            for (b, c) in blocks.iter_mut().zip(&pc.blocks) {
                update(b, c);
            }
        }
        for (b, c) in self.head.iter_mut().zip(&cache.head) {
            update(b, c);
        }
    }
}

fn push_block<'a, T: Scalar>(name: String, b: &'a mut ConvBlock<T>, prelu: bool, out: &mut Vec<(String, Role, &'a mut Vec<T>)>) {
    let norm = b.has_norm();
    let ConvBlock {
        weight,
        bias,
        bn_gamma,
        bn_beta,
        bn_running_mean,
        bn_running_var,
        act_slope,
        ..
    } = b;
    out.push((format!("{name}.weight"), Role::Trainable, weight));
    out.push((format!("{name}.bias"), Role::Trainable, bias));
    if norm {
        out.push((format!("{name}.bn_gamma"), Role::Trainable, bn_gamma));
        out.push((format!("{name}.bn_beta"), Role::Trainable, bn_beta));
        if prelu {
            out.push((format!("{name}.act_slope"), Role::Trainable, act_slope));
        }
        out.push((format!("{name}.bn_running_mean"), Role::Buffer, bn_running_mean));
        out.push((format!("{name}.bn_running_var"), Role::Buffer, bn_running_var));
    }
}

fn restage(e: Error, stage: &str) -> Error {
    match e {
        Error::Shape { message, .. } => Error::shape(stage, message),
        other => other,
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Gradients<T> {
    /// Trainable gradients in the order of [`Network::params_mut`].
    pub fn entries(&self) -> Vec<&[T]> {
        let prelu = self.activation == Activation::Prelu;
        let mut out: Vec<&[T]> = Vec::new();
        for g in self.pathways.iter().flatten().chain(&self.head) {
            out.push(&g.weight);
            out.push(&g.bias);
            if !g.bn_gamma.is_empty() {
                out.push(&g.bn_gamma);
                out.push(&g.bn_beta);
                if prelu {
                    out.push(&g.act_slope);
                }
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.entries()
            .iter()
            .flat_map(|e| e.iter())
            .map(|v| v.f64().abs())
            .fold(0.0, f64::max)
    }
}
