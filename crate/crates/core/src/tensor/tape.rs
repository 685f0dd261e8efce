use super::kernels::{self, Conv2dParams, NormStats};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a user-defined op: given the output gradient, the input
/// values and the output value, return one gradient per input.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        p: Conv2dParams,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    ChannelScale {
        x: Var,
        s: Var,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats,
        training: bool,
    },
    Pad(Var),
    ReflectPad(Var, usize),
    Crop(Var),
    Concat(Vec<Var>),
    Sum(Var),
    BceWithLogits {
        z: Var,
        targets: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        backward: BackwardFn,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
    op: Op,
}

/// Records operations in execution order for reverse-mode differentiation.
///
/// A tape is confined to one thread. Gradients of leaves accumulate across
/// repeated [`Tape::backward`] calls until [`Tape::zero_grad`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Batch statistics produced by a training-mode batch norm.
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Multiply-accumulates performed by the recorded convolutions and linear
    /// layers, counting one per weight tap per output element.
    pub fn multiply_accumulates(&self) -> u64 {
        self.nodes
            .iter()
            .map(|node| match &node.op {
                Op::Conv2d { w, .. } => {
                    let ws = self.nodes[w.0].value.shape();
                    (node.value.numel() * ws[1] * ws[2] * ws[3]) as u64
                }
                Op::Linear { w, .. } => (node.value.numel() * self.nodes[w.0].value.shape()[1]) as u64,
                _ => 0,
            })
            .sum()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, "operands", format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, p: Conv2dParams) -> Result<Var> {
        let out = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), p)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, &inputs, Op::Conv2d { x, w, b, p }))
    }

    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = kernels::maxpool2d_forward(self.value(x), (kernel, kernel), (stride, stride))?;
        Ok(self.push(out, &[x], Op::MaxPool { x, argmax }))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = kernels::upsample_nearest_forward(self.value(x), factor)?;
        Ok(self.push(out, &[x], Op::Upsample { x, factor }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, &[a, b], Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(out, &[a, b], Op::Mul(a, b)))
    }

    pub fn mul_scalar(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).map(|v| v * k);
        self.push(out, &[x], Op::MulScalar(x, k))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, &[x], Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::sigmoid);
        self.push(out, &[x], Op::Sigmoid(x))
    }

    /// Multiplies each channel of `[N, C, H, W]` by the matching entry of a `[C]` vector.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = self.value(x).dims4("channel_scale")?[1];
        let zeros = Tensor::zeros(&[c]);
        let out = kernels::channel_affine(self.value(x), self.value(s), &zeros, "channel_scale")?;
        Ok(self.push(out, &[x, s], Op::ChannelScale { x, s }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = kernels::global_avg_pool_forward(self.value(x))?;
        Ok(self.push(out, &[x], Op::GlobalAvgPool(x)))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = kernels::linear_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(out, &[x, w, b], Op::Linear { x, w, b }))
    }

    /// Batch norm using the batch's own statistics (biased variance).
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let n = self.value(x).dims4("batch_norm")?[0];
        if n < 2 {
            return Err(Error::arg(
                "batch_norm",
                format!("training-mode batch norm needs a batch of at least 2, got {n}"),
            ));
        }
        let stats = kernels::batch_norm_stats(self.value(x), eps)?;
        let out = kernels::channel_affine(&stats.xhat, self.value(gamma), self.value(beta), "batch_norm")?;
        let batch = BatchStats {
            mean: stats.mean.clone(),
            var: stats.var.clone(),
        };
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            stats,
            training: true,
        };
        Ok((self.push(out, &[x, gamma, beta], op), batch))
    }

    /// Batch norm with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let c = self.value(x).dims4("batch_norm")?[1];
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm", "running statistics", format!("expected {c} channels")));
        }
        let stats = kernels::normalize(self.value(x), running_mean.to_vec(), running_var.to_vec(), eps);
        let out = kernels::channel_affine(&stats.xhat, self.value(gamma), self.value(beta), "batch_norm")?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            stats,
            training: false,
        };
        Ok(self.push(out, &[x, gamma, beta], op))
    }

    /// Zero-pads the bottom and right edges.
    pub fn pad_bottom_right(&mut self, x: Var, pad_h: usize, pad_w: usize) -> Result<Var> {
        let out = kernels::pad_bottom_right(self.value(x), pad_h, pad_w)?;
        Ok(self.push(out, &[x], Op::Pad(x)))
    }

    /// Mirror padding on all four sides without repeating the edge pixel.
    pub fn reflect_pad(&mut self, x: Var, pad: usize) -> Result<Var> {
        let out = kernels::reflect_pad(self.value(x), pad)?;
        Ok(self.push(out, &[x], Op::ReflectPad(x, pad)))
    }

    pub fn crop_top_left(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let out = kernels::crop_top_left(self.value(x), h, w)?;
        Ok(self.push(out, &[x], Op::Crop(x)))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = xs.iter().map(|v| self.value(*v)).collect();
        let out = kernels::concat_channels(&values)?;
        Ok(self.push(out, xs, Op::Concat(xs.to_vec())))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, &[x], Op::Sum(x))
    }

    /// Mean binary cross-entropy of `[N, 1]` (or `[N]`) logits against 0/1 targets.
    pub fn bce_with_logits(&mut self, z: Var, targets: &[f64]) -> Result<Var> {
        let logits = self.value(z);
        if logits.numel() != targets.len() {
            return Err(Error::shape(
                "bce_with_logits",
                "targets",
                format!("{} logits vs {} targets", logits.numel(), targets.len()),
            ));
        }
        let n = targets.len() as f64;
        let loss = logits
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| kernels::bce_with_logit(z, y))
            .sum::<f64>()
            / n;
        let op = Op::BceWithLogits {
            z,
            targets: targets.to_vec(),
        };
        Ok(self.push(Tensor::scalar(loss), &[z], op))
    }

    /// Records an op with a caller-supplied value and backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        let op = Op::Custom {
            inputs: inputs.to_vec(),
            backward,
        };
        self.push(value, inputs, op)
    }

    /// Propagates gradients from a scalar `loss` to every reachable leaf that
    /// requires a gradient, accumulating into existing leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                "loss",
                format!("loss must be a scalar, got shape {loss_shape:?}"),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(&loss_shape));
        let mut leaf_grads = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads.push((i, g));
                continue;
            }
            for (input, gi) in self.local_grads(&node.op, &g, &node.value)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                if gi.shape() != self.value(input).shape() {
                    return Err(Error::shape(
                        "backward",
                        "gradient",
                        format!(
                            "rule produced {:?} for input of shape {:?}",
                            gi.shape(),
                            self.value(input).shape()
                        ),
                    ));
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&gi),
                    slot => *slot = Some(gi),
                }
            }
        }

        for (i, g) in leaf_grads {
            match &mut self.nodes[i].grad {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, op: &Op, g: &Tensor, out: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let mut res = Vec::new();
        match op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, p } => {
                let need = [self.needs(*x), self.needs(*w), b.is_some_and(|b| self.needs(b))];
                let grads = kernels::conv2d_backward(g, self.value(*x), self.value(*w), b.is_some(), *p, need)?;
                res.extend(grads.input.map(|t| (*x, t)));
                res.extend(grads.weight.map(|t| (*w, t)));
                if let (Some(b), Some(t)) = (b, grads.bias) {
                    res.push((*b, t));
                }
            }
            Op::MaxPool { x, argmax } => {
                res.push((*x, kernels::maxpool2d_backward(g, self.value(*x).shape(), argmax)));
            }
            Op::Upsample { x, factor } => {
                res.push((*x, kernels::upsample_nearest_backward(g, self.value(*x).shape(), *factor)));
            }
            Op::Add(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.clone()));
            }
            Op::Mul(a, b) => {
                res.push((*a, g.zip_map(self.value(*b), |g, y| g * y)));
                res.push((*b, g.zip_map(self.value(*a), |g, x| g * x)));
            }
            Op::MulScalar(x, k) => res.push((*x, g.map(|v| v * k))),
            Op::Relu(x) => {
                res.push((*x, g.zip_map(self.value(*x), |g, x| if x > 0.0 { g } else { 0.0 })));
            }
            Op::Sigmoid(x) => res.push((*x, g.zip_map(out, |g, s| g * s * (1.0 - s)))),
            Op::ChannelScale { x, s } => {
                let xv = self.value(*x);
                let (c, hw) = (xv.shape()[1], xv.shape()[2] * xv.shape()[3]);
                let sv = self.value(*s).data();
                if self.needs(*x) {
                    res.push((*x, Tensor::from_fn(xv.shape(), |i| g.data()[i] * sv[(i / hw) % c])));
                }
                if self.needs(*s) {
                    res.push((*s, kernels::channel_sum(xv.shape(), |i| g.data()[i] * xv.data()[i])));
                }
            }
            Op::GlobalAvgPool(x) => {
                res.push((*x, kernels::global_avg_pool_backward(g, self.value(*x).shape())));
            }
            Op::Linear { x, w, b } => {
                let need = [self.needs(*x), self.needs(*w), self.needs(*b)];
                let (gx, gw, gb) = kernels::linear_backward(g, self.value(*x), self.value(*w), need);
                res.extend(gx.map(|t| (*x, t)));
                res.extend(gw.map(|t| (*w, t)));
                res.extend(gb.map(|t| (*b, t)));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                stats,
                training,
            } => {
                let shape = g.shape();
                let c = shape[1];
                let hw = shape[2] * shape[3];
                if self.needs(*x) {
                    let gx = if *training {
                        kernels::batch_norm_train_backward(g, self.value(*gamma), stats)
                    } else {
                        let gm = self.value(*gamma).data();
                        Tensor::from_fn(shape, |i| {
                            let ch = (i / hw) % c;
                            g.data()[i] * gm[ch] * stats.inv_std[ch]
                        })
                    };
                    res.push((*x, gx));
                }
                if self.needs(*gamma) {
                    let xh = stats.xhat.data();
                    res.push((*gamma, kernels::channel_sum(shape, |i| g.data()[i] * xh[i])));
                }
                if self.needs(*beta) {
                    res.push((*beta, kernels::channel_sum(shape, |i| g.data()[i])));
                }
            }
            Op::Pad(x) => {
                let s = self.value(*x).shape();
                res.push((*x, kernels::crop_top_left(g, s[2], s[3])?));
            }
            Op::ReflectPad(x, pad) => {
                res.push((*x, kernels::reflect_pad_backward(g, self.value(*x).shape(), *pad)));
            }
            Op::Crop(x) => {
                let s = self.value(*x).shape();
                let (gh, gw) = (g.shape()[2], g.shape()[3]);
                res.push((*x, kernels::pad_bottom_right(g, s[2] - gh, s[3] - gw)?));
            }
            Op::Concat(xs) => {
                let channels: Vec<usize> = xs.iter().map(|v| self.value(*v).shape()[1]).collect();
                res.extend(xs.iter().copied().zip(kernels::split_channels(g, &channels)));
            }
            Op::Sum(x) => {
                let gv = g.item();
                res.push((*x, Tensor::full(self.value(*x).shape(), gv)));
            }
            Op::BceWithLogits { z, targets } => {
                let scale = g.item() / targets.len() as f64;
                let zv = self.value(*z);
                let grad = Tensor::from_fn(zv.shape(), |i| (kernels::sigmoid(zv.data()[i]) - targets[i]) * scale);
                res.push((*z, grad));
            }
            Op::Custom { inputs, backward } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let grads = backward(g, &values, out);
                if grads.len() != inputs.len() {
                    return Err(Error::arg(
                        "backward",
                        format!("custom rule returned {} gradients for {} inputs", grads.len(), inputs.len()),
                    ));
                }
                res.extend(inputs.iter().copied().zip(grads));
            }
        }
        Ok(res)
    }
}
