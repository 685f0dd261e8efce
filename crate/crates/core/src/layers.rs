//! Attention condensers, the double-condensing attention condenser block,
//! anti-aliased downsampling, and the conv/norm/ReLU block.
//!
//! A condenser branch maps `V: [N, C, H, W]` to a projection of the same shape:
//!
//! 1. condense: 2×2 max-pool, stride 2, keeping strong activations that sit next
//!    to other strong activations;
//! 2. embed: one or more (depthwise 3×3 → pointwise 1×1) layers, the first of
//!    which maps `C` to `Cmid = max(1, C / r)` channels, with a ReLU between
//!    stacked layers;
//! 3. expand: nearest-neighbour ×2 upsample, then pointwise `Cmid → C`.
//!
//! A DC-AC block runs two branches over the same input, one with a single
//! embedding layer and one with two, and gates the input by the fused map:
//! `V' = V ⊙ sigmoid(P_a + P_b)`.
//!
//! Parameter containers are generic over the leaf type so the same layout
//! holds owned [`Tensor`]s at rest and tape [`Var`]s during a forward pass.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Conv2dParams, Tape, Tensor, Var};

pub const DEFAULT_REDUCTION: usize = 4;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Binomial blur `outer([1,2,1], [1,2,1]) / 16`.
pub const AADS_KERNEL: [f64; 9] = [
    1.0 / 16.0,
    2.0 / 16.0,
    1.0 / 16.0,
    2.0 / 16.0,
    4.0 / 16.0,
    2.0 / 16.0,
    1.0 / 16.0,
    2.0 / 16.0,
    1.0 / 16.0,
];

pub fn reduced_channels(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(1)
}

/// Kaiming-uniform initialization for a weight with the given fan-in.
pub fn kaiming_uniform<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedLayer<T> {
    /// `[Cin, 1, 3, 3]`, applied with `groups = Cin`.
    pub depthwise: T,
    /// `[Cout, Cin, 1, 1]`.
    pub pointwise_w: T,
    pub pointwise_b: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CondenserBranch<T> {
    pub embed: Vec<EmbedLayer<T>>,
    /// `[C, Cmid, 1, 1]`.
    pub expand_w: T,
    pub expand_b: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DcacBlock<T> {
    pub branch_a: CondenserBranch<T>,
    pub branch_b: CondenserBranch<T>,
}

pub type CondenserBranchParams = CondenserBranch<Tensor>;
pub type DcacModuleParams = DcacBlock<Tensor>;

impl<T> CondenserBranch<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> CondenserBranch<U> {
        CondenserBranch {
            embed: self
                .embed
                .iter()
                .map(|e| EmbedLayer {
                    depthwise: f(&e.depthwise),
                    pointwise_w: f(&e.pointwise_w),
                    pointwise_b: f(&e.pointwise_b),
                })
                .collect(),
            expand_w: f(&self.expand_w),
            expand_b: f(&self.expand_b),
        }
    }

    /// Leaves in declaration order, with their local names.
    pub fn leaves(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        for (i, e) in self.embed.iter().enumerate() {
            out.push((format!("embed{i}.depthwise"), &e.depthwise));
            out.push((format!("embed{i}.pointwise.weight"), &e.pointwise_w));
            out.push((format!("embed{i}.pointwise.bias"), &e.pointwise_b));
        }
        out.push(("expand.weight".into(), &self.expand_w));
        out.push(("expand.bias".into(), &self.expand_b));
        out
    }
}

impl CondenserBranch<Tensor> {
    pub fn init<R: Rng>(channels: usize, reduction: usize, embed_layers: usize, rng: &mut R) -> Self {
        let mid = reduced_channels(channels, reduction);
        let embed = (0..embed_layers)
            .map(|i| {
                let cin = if i == 0 { channels } else { mid };
                EmbedLayer {
                    depthwise: kaiming_uniform(&[cin, 1, 3, 3], 9, rng),
                    pointwise_w: kaiming_uniform(&[mid, cin, 1, 1], cin, rng),
                    pointwise_b: Tensor::zeros(&[mid]),
                }
            })
            .collect();
        CondenserBranch {
            embed,
            expand_w: kaiming_uniform(&[channels, mid, 1, 1], mid, rng),
            expand_b: Tensor::zeros(&[channels]),
        }
    }

    pub fn param_count(&self) -> usize {
        self.leaves().iter().map(|(_, t)| t.numel()).sum()
    }
}

impl<T> DcacBlock<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> DcacBlock<U> {
        DcacBlock {
            branch_a: self.branch_a.map(f),
            branch_b: self.branch_b.map(f),
        }
    }

    pub fn leaves(&self) -> Vec<(String, &T)> {
        let a = self.branch_a.leaves().into_iter().map(|(n, t)| (format!("branch_a.{n}"), t));
        let b = self.branch_b.leaves().into_iter().map(|(n, t)| (format!("branch_b.{n}"), t));
        a.chain(b).collect()
    }
}

impl DcacBlock<Tensor> {
    /// Branch A gets one embedding layer, branch B two.
    pub fn init<R: Rng>(channels: usize, reduction: usize, rng: &mut R) -> Self {
        DcacBlock {
            branch_a: CondenserBranch::init(channels, reduction, 1, rng),
            branch_b: CondenserBranch::init(channels, reduction, 2, rng),
        }
    }

    /// Registers every tensor as a tape leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> DcacBlock<Var> {
        self.map(&mut |t| tape.leaf(t.clone(), requires_grad))
    }
}

impl CondenserBranch<Tensor> {
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> CondenserBranch<Var> {
        self.map(&mut |t| tape.leaf(t.clone(), requires_grad))
    }
}

/// Computes the pre-activation projection `P` of one condenser branch.
pub fn condenser_branch_forward(tape: &mut Tape, v: Var, params: &CondenserBranch<Var>) -> Result<Var> {
    let [_, _, h, w] = tape.value(v).dims4("condenser_branch")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "condenser_branch",
            "spatial",
            format!("{h}x{w} input has an odd extent; pad to even height and width before condensing"),
        ));
    }
    let mut x = tape.maxpool2d(v, 2, 2)?;
    for (i, layer) in params.embed.iter().enumerate() {
        if i > 0 {
            x = tape.relu(x);
        }
        let cin = tape.value(x).shape()[1];
        x = tape.conv2d(x, layer.depthwise, None, Conv2dParams::new(1, 1, cin))?;
        x = tape.conv2d(x, layer.pointwise_w, Some(layer.pointwise_b), Conv2dParams::default())?;
    }
    let up = tape.upsample_nearest(x, 2)?;
    tape.conv2d(up, params.expand_w, Some(params.expand_b), Conv2dParams::default())
}

/// `V ⊙ sigmoid(P_a + P_b)`.
pub fn dcac_forward(tape: &mut Tape, v: Var, params: &DcacBlock<Var>) -> Result<Var> {
    let pa = condenser_branch_forward(tape, v, &params.branch_a)?;
    let pb = condenser_branch_forward(tape, v, &params.branch_b)?;
    let input_shape = tape.value(v).shape().to_vec();
    for (name, p) in [("branch A", pa), ("branch B", pb)] {
        if tape.value(p).shape() != input_shape.as_slice() {
            return Err(Error::shape(
                "dcac",
                "branch output channels",
                format!("{name} produced {:?} for input {input_shape:?}", tape.value(p).shape()),
            ));
        }
    }
    let fused = tape.add(pa, pb)?;
    let gate = tape.sigmoid(fused);
    tape.mul(v, gate)
}

/// The fixed blur kernel laid out as a depthwise `[C, 1, 3, 3]` weight.
pub fn aads_weight(channels: usize) -> Tensor {
    Tensor::from_fn(&[channels, 1, 3, 3], |i| AADS_KERNEL[i % 9])
}

/// Blur with the binomial kernel over a 1-pixel reflection border, then keep
/// every second row and column starting at index 0.
pub fn aads_forward(tape: &mut Tape, v: Var) -> Result<Var> {
    let c = tape.value(v).dims4("aads")?[1];
    let kernel = tape.constant(aads_weight(c));
    aads_forward_with(tape, v, kernel)
}

/// [`aads_forward`] with a caller-held `[C, 1, 3, 3]` kernel.
pub fn aads_forward_with(tape: &mut Tape, v: Var, kernel: Var) -> Result<Var> {
    let [_, c, h, w] = tape.value(v).dims4("aads")?;
    if h < 2 || w < 2 {
        return Err(Error::shape("aads", "spatial", format!("{h}x{w} is smaller than 2x2")));
    }
    if tape.value(kernel).shape() != [c, 1, 3, 3] {
        return Err(Error::shape("aads", "kernel", format!("{:?} for {c} channels", tape.value(kernel).shape())));
    }
    let padded = tape.reflect_pad(v, 1)?;
    tape.conv2d(padded, kernel, None, Conv2dParams::new(2, 0, c))
}

/// Batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Exponential update with unbiased batch variance.
    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64], count: usize, momentum: f64) {
        let unbias = count as f64 / (count as f64 - 1.0);
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - momentum) * self.mean[c] + momentum * batch_mean[c];
            self.var[c] = (1.0 - momentum) * self.var[c] + momentum * batch_var[c] * unbias;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams<T> {
    pub gamma: T,
    pub beta: T,
}

/// Convolution, optional batch norm, optional ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock<T> {
    pub weight: T,
    pub bias: Option<T>,
    pub norm: Option<NormParams<T>>,
    pub conv: Conv2dParams,
    pub relu: bool,
}

impl<T> ConvBlock<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ConvBlock<U> {
        ConvBlock {
            weight: f(&self.weight),
            bias: self.bias.as_ref().map(&mut *f),
            norm: self.norm.as_ref().map(|n| NormParams {
                gamma: f(&n.gamma),
                beta: f(&n.beta),
            }),
            conv: self.conv,
            relu: self.relu,
        }
    }

    pub fn leaves(&self) -> Vec<(String, &T)> {
        let mut out = vec![("conv.weight".to_string(), &self.weight)];
        if let Some(b) = &self.bias {
            out.push(("conv.bias".into(), b));
        }
        if let Some(n) = &self.norm {
            out.push(("norm.gamma".into(), &n.gamma));
            out.push(("norm.beta".into(), &n.beta));
        }
        out
    }
}

impl ConvBlock<Tensor> {
    /// conv (no bias) → batch norm → ReLU, with "same" padding for odd kernels.
    pub fn init<R: Rng>(cin: usize, cout: usize, kernel: usize, rng: &mut R) -> Self {
        ConvBlock {
            weight: kaiming_uniform(&[cout, cin, kernel, kernel], cin * kernel * kernel, rng),
            bias: None,
            norm: Some(NormParams {
                gamma: Tensor::ones(&[cout]),
                beta: Tensor::zeros(&[cout]),
            }),
            conv: Conv2dParams::new(1, kernel / 2, 1),
            relu: true,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> ConvBlock<Var> {
        self.map(&mut |t| tape.leaf(t.clone(), requires_grad))
    }
}

/// How a conv block's batch norm treats statistics.
pub enum NormMode<'a> {
    /// Normalize with batch statistics and fold them into the running stats.
    Train(&'a mut RunningStats),
    /// Normalize with the running statistics.
    Eval(&'a RunningStats),
    /// Normalize with batch statistics and overwrite the running stats with them.
    Calibrate(&'a mut RunningStats),
}

pub fn conv_block_forward(tape: &mut Tape, v: Var, block: &ConvBlock<Var>, mode: NormMode<'_>) -> Result<Var> {
    let mut x = tape.conv2d(v, block.weight, block.bias, block.conv)?;
    let momentum = if matches!(mode, NormMode::Calibrate(_)) { 1.0 } else { BN_MOMENTUM };
    if let Some(norm) = &block.norm {
        x = match mode {
            NormMode::Train(stats) | NormMode::Calibrate(stats) => {
                let [n, _, h, w] = tape.value(x).dims4("conv_block")?;
                let (y, batch) = tape.batch_norm_train(x, norm.gamma, norm.beta, BN_EPS)?;
                stats.update(&batch.mean, &batch.var, n * h * w, momentum);
                y
            }
            NormMode::Eval(stats) => tape.batch_norm_eval(x, norm.gamma, norm.beta, &stats.mean, &stats.var, BN_EPS)?,
        };
    }
    if block.relu {
        x = tape.relu(x);
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn aads_kernel_sums_to_one() {
        assert_eq!(AADS_KERNEL.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn branch_b_has_more_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for c in [4, 16, 48] {
            let block = DcacBlock::init(c, DEFAULT_REDUCTION, &mut rng);
            assert_eq!(block.branch_a.embed.len(), 1);
            assert_eq!(block.branch_b.embed.len(), 2);
            assert!(block.branch_b.param_count() > block.branch_a.param_count());
            assert_eq!(block.branch_a.expand_w.shape()[0], c);
            assert_eq!(block.branch_b.expand_w.shape()[0], c);
        }
    }

    #[test]
    fn odd_input_asks_for_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = CondenserBranch::init(2, 4, 1, &mut rng);
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let v = tape.constant(random(&[1, 2, 5, 4], 1));
        let err = condenser_branch_forward(&mut tape, v, &p).unwrap_err();
        assert!(err.to_string().contains("pad"), "{err}");
    }

    #[test]
    fn running_stats_update() {
        let mut s = RunningStats::new(1);
        s.update(&[2.0], &[3.0], 4, 0.5);
        assert_eq!(s.mean, [1.0]);
        assert_eq!(s.var, [0.5 + 0.5 * 4.0]);
    }
}
