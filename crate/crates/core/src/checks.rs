//! Finite-difference verification of every differentiable layer on seeded
//! random shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::layers::{
    aads_forward, condenser_branch_forward, conv_block_forward, dcac_forward, CondenserBranch, ConvBlock, DcacBlock, NormMode,
    RunningStats,
};
use crate::tensor::{grad_check, sigmoid, Conv2dParams, GradCheckReport, Tape, Tensor, Var};

pub const SUITE_EPSILON: f64 = 1e-5;
pub const SUITE_TOLERANCE: f64 = 1e-4;
/// Largest input drawn, `[N, C, H, W]`.
pub const MAX_SHAPE: [usize; 4] = [2, 8, 16, 16];

#[derive(Clone, Debug, Serialize)]
pub struct LayerCheck {
    pub layer: String,
    pub input_shape: Vec<usize>,
    pub report: GradCheckReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub epsilon: f64,
    pub tolerance: f64,
    pub checks: Vec<LayerCheck>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.report.passed())
    }

    pub fn worst(&self) -> f64 {
        self.checks.iter().fold(0.0, |m, c| m.max(c.report.worst()))
    }
}

impl std::fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<22} {:<16} {:>12}  result", "layer", "input", "rel error")?;
        for c in &self.checks {
            let shape = c.input_shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
            let verdict = if c.report.passed() { "pass" } else { "FAIL" };
            writeln!(f, "{:<22} {:<16} {:>12.3e}  {verdict}", c.layer, shape, c.report.worst())?;
        }
        write!(
            f,
            "{} of {} layers pass at tolerance {:e}",
            self.checks.iter().filter(|c| c.report.passed()).count(),
            self.checks.len(),
            self.tolerance
        )
    }
}

struct Draw(ChaCha8Rng);

impl Draw {
    fn shape(&mut self, even: bool) -> [usize; 4] {
        let [n, c, h, w] = MAX_SHAPE;
        let mut side = |max: usize| {
            if even {
                2 * self.0.random_range(2..=max / 2)
            } else {
                self.0.random_range(3..=max)
            }
        };
        let (h, w) = (side(h), side(w));
        [n, self.0.random_range(2..=c), h, w]
    }

    fn tensor(&mut self, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| self.0.random_range(-1.0..1.0))
    }

    /// Distinct values at least 0.01 apart, so no ±ε probe flips an argmax
    /// or crosses a ReLU kink.
    fn spaced(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, self.0.random_range(0..=i));
        }
        Tensor::from_fn(shape, |i| (order[i] as f64 - n as f64 / 2.0 + 0.5) * 0.01)
    }
}

fn named<'a>(input: Tensor, leaves: Vec<(String, &'a Tensor)>) -> Vec<(String, Tensor)> {
    let mut out = vec![("input".to_string(), input)];
    out.extend(leaves.into_iter().map(|(n, t)| (n, t.clone())));
    out
}

fn check<F>(layer: &str, inputs: Vec<(String, Tensor)>, f: F) -> Result<LayerCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let input_shape = inputs[0].1.shape().to_vec();
    let refs: Vec<(&str, Tensor)> = inputs.iter().map(|(n, t)| (n.as_str(), t.clone())).collect();
    Ok(LayerCheck {
        layer: layer.to_string(),
        input_shape,
        report: grad_check(&refs, SUITE_EPSILON, SUITE_TOLERANCE, f)?,
    })
}

fn s(name: &str, t: Tensor) -> (String, Tensor) {
    (name.to_string(), t)
}

/// Runs the suite. With `inject_fault` the sigmoid check uses a backward rule
/// scaled by 1.1, which the suite must flag.
pub fn layer_gradcheck_suite(seed: u64, inject_fault: bool) -> Result<SuiteReport> {
    let mut d = Draw(ChaCha8Rng::seed_from_u64(seed));
    let mut checks = Vec::new();

    let [n, c, h, w] = d.shape(false);
    let cout = d.0.random_range(1..=MAX_SHAPE[1]);
    let (stride, pad) = (d.0.random_range(1..=2), d.0.random_range(0..=1));
    checks.push(check(
        "conv2d",
        vec![s("input", d.tensor(&[n, c, h, w])), s("weight", d.tensor(&[cout, c, 3, 3])), s("bias", d.tensor(&[cout]))],
        |t, v| t.conv2d(v[0], v[1], Some(v[2]), Conv2dParams::new(stride, pad, 1)),
    )?);

    let [n, c, h, w] = d.shape(false);
    checks.push(check(
        "depthwise conv2d",
        vec![s("input", d.tensor(&[n, c, h, w])), s("weight", d.tensor(&[c, 1, 3, 3]))],
        move |t, v| t.conv2d(v[0], v[1], None, Conv2dParams::new(1, 1, c)),
    )?);

    let shape = d.shape(true);
    checks.push(check("maxpool2d", vec![s("input", d.spaced(&shape))], |t, v| t.maxpool2d(v[0], 2, 2))?);

    let [n, c, h, w] = d.shape(true);
    checks.push(check("upsample nearest", vec![s("input", d.tensor(&[n, c, h / 2, w / 2]))], |t, v| {
        t.upsample_nearest(v[0], 2)
    })?);

    let shape = d.shape(false);
    checks.push(check("relu", vec![s("input", d.spaced(&shape))], |t, v| Ok(t.relu(v[0])))?);

    let shape = d.shape(false);
    let x = d.tensor(&shape);
    checks.push(if inject_fault {
        check("sigmoid (faulty rule)", vec![s("input", x)], |t, v| {
            let value = t.value(v[0]).map(sigmoid);
            Ok(t.custom(
                &[v[0]],
                value,
                Box::new(|g, _inputs, out| {
                    vec![Tensor::from_fn(out.shape(), |i| 1.1 * g.data()[i] * out.data()[i] * (1.0 - out.data()[i]))]
                }),
            ))
        })?
    } else {
        check("sigmoid", vec![s("input", x)], |t, v| Ok(t.sigmoid(v[0])))?
    });

    let shape = d.shape(false);
    checks.push(check(
        "add, mul, scale",
        vec![s("a", d.tensor(&shape)), s("b", d.tensor(&shape)), s("channel scale", d.tensor(&[shape[1]]))],
        |t, v| {
            let sum = t.add(v[0], v[1])?;
            let prod = t.mul(sum, v[1])?;
            let k = t.mul_scalar(prod, -1.5);
            t.channel_scale(k, v[2])
        },
    )?);

    let shape = d.shape(false);
    checks.push(check("global avg pool", vec![s("input", d.tensor(&shape))], |t, v| t.global_avg_pool(v[0]))?);

    let [n, c, _, _] = d.shape(false);
    let out = d.0.random_range(1..=4);
    checks.push(check(
        "linear",
        vec![s("input", d.tensor(&[n, c])), s("weight", d.tensor(&[out, c])), s("bias", d.tensor(&[out]))],
        |t, v| t.linear(v[0], v[1], v[2]),
    )?);

    let [n, c, h, w] = d.shape(false);
    checks.push(check(
        "pad, crop, concat",
        vec![s("a", d.tensor(&[n, c, h, w])), s("b", d.tensor(&[n, 2, h, w]))],
        move |t, v| {
            let r = t.reflect_pad(v[0], 1)?;
            let p = t.pad_bottom_right(r, 1, 1)?;
            let cropped = t.crop_top_left(p, h, w)?;
            t.concat_channels(&[cropped, v[1]])
        },
    )?);

    let shape = d.shape(false);
    let c = shape[1];
    checks.push(check(
        "batch norm (train)",
        vec![s("input", d.tensor(&shape)), s("gamma", d.tensor(&[c])), s("beta", d.tensor(&[c]))],
        |t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0),
    )?);

    let shape = d.shape(false);
    let c = shape[1];
    let mean: Vec<f64> = (0..c).map(|_| d.0.random_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..c).map(|_| d.0.random_range(0.5..2.0)).collect();
    checks.push(check(
        "batch norm (eval)",
        vec![s("input", d.tensor(&shape)), s("gamma", d.tensor(&[c])), s("beta", d.tensor(&[c]))],
        move |t, v| t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5),
    )?);

    let n = MAX_SHAPE[0];
    let targets: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
    checks.push(check("bce with logits", vec![s("logits", d.tensor(&[n, 1]))], move |t, v| {
        t.bce_with_logits(v[0], &targets)
    })?);

    let shape = d.shape(false);
    checks.push(check("aads", vec![s("input", d.tensor(&shape))], |t, v| aads_forward(t, v[0]))?);

    let shape = d.shape(false);
    let block = ConvBlock::init(shape[1], d.0.random_range(1..=MAX_SHAPE[1]), 3, &mut d.0);
    let cout = block.out_channels();
    checks.push(check("conv block", named(d.tensor(&shape), block.leaves()), |t, v| {
        let mut it = v[1..].iter().copied();
        let b = block.map(&mut |_| it.next().expect("leaf"));
        let mut stats = RunningStats::new(cout);
        conv_block_forward(t, v[0], &b, NormMode::Train(&mut stats))
    })?);

    let shape = d.shape(true);
    let branch = CondenserBranch::init(shape[1], 4, 2, &mut d.0);
    checks.push(check("condenser branch", named(d.tensor(&shape), branch.leaves()), |t, v| {
        let mut it = v[1..].iter().copied();
        let b = branch.map(&mut |_| it.next().expect("leaf"));
        condenser_branch_forward(t, v[0], &b)
    })?);

    let shape = d.shape(true);
    let block = DcacBlock::init(shape[1], 4, &mut d.0);
    checks.push(check("dc-ac block", named(d.tensor(&shape), block.leaves()), |t, v| {
        let mut it = v[1..].iter().copied();
        let b = block.map(&mut |_| it.next().expect("leaf"));
        dcac_forward(t, v[0], &b)
    })?);

    Ok(SuiteReport {
        seed,
        epsilon: SUITE_EPSILON,
        tolerance: SUITE_TOLERANCE,
        checks,
    })
}
