use std::fmt;

use serde::{Deserialize, Serialize};

use super::config::{NetworkConfig, StageSpec};
use crate::error::Result;
use crate::layers::reduced_channels;

/// Parameters and compute of one layer, for a single input sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerFootprint {
    pub name: String,
    pub kind: String,
    /// `[C, H, W]` of the layer output.
    pub output_shape: [usize; 3],
    pub params: u64,
    pub macs: u64,
}

/// Static footprint of a network configuration at a given input size.
///
/// `flops` follows the common convention of one FLOP per multiply-accumulate,
/// so it equals `macs`; `flops_two_per_mac` doubles it. Convolutions, the
/// blur of anti-aliased downsampling and the head count; pooling, upsampling,
/// normalization and elementwise ops do not.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FootprintReport {
    pub input_size: [usize; 3],
    pub layers: Vec<LayerFootprint>,
    pub total_params: u64,
    pub macs: u64,
    pub flops: u64,
    pub flops_two_per_mac: u64,
    /// Largest layer output in elements.
    pub peak_activation: u64,
    pub downsample_factor: usize,
}

struct Walker {
    reduction: usize,
    layers: Vec<LayerFootprint>,
}

impl Walker {
    fn push(&mut self, name: String, kind: &str, out: [usize; 3], params: usize, macs: usize) {
        self.layers.push(LayerFootprint {
            name,
            kind: kind.to_string(),
            output_shape: out,
            params: params as u64,
            macs: macs as u64,
        });
    }

    fn conv_block(&mut self, name: String, [cin, h, w]: [usize; 3], cout: usize, k: usize) -> [usize; 3] {
        let out = [cout, h, w];
        self.push(name, "conv_block", out, cout * cin * k * k + 2 * cout, cout * cin * k * k * h * w);
        out
    }

    fn aads(&mut self, name: String, [c, h, w]: [usize; 3]) -> [usize; 3] {
        let out = [c, h.div_ceil(2), w.div_ceil(2)];
        self.push(name, "aads", out, 0, c * 9 * out[1] * out[2]);
        out
    }

    fn dcac(&mut self, prefix: String, shape: [usize; 3]) {
        let [c, h, w] = shape;
        let (he, we) = (h + h % 2, w + w % 2);
        let (hp, wp) = (he / 2, we / 2);
        let mid = reduced_channels(c, self.reduction);
        for (branch, embeds) in [("branch_a", 1), ("branch_b", 2)] {
            let p = format!("{prefix}.{branch}");
            for e in 0..embeds {
                let cin = if e == 0 { c } else { mid };
                self.push(format!("{p}.embed{e}.depthwise"), "depthwise", [cin, hp, wp], cin * 9, cin * 9 * hp * wp);
                self.push(format!("{p}.embed{e}.pointwise"), "pointwise", [mid, hp, wp], mid * cin + mid, mid * cin * hp * wp);
            }
            self.push(format!("{p}.expand"), "pointwise", [c, he, we], c * mid + c, c * mid * he * we);
        }
    }

    fn stages(&mut self, prefix: &str, mut shape: [usize; 3], stages: &[StageSpec]) -> [usize; 3] {
        for (s, spec) in stages.iter().enumerate() {
            let p = format!("{prefix}.stage{s}");
            shape = self.conv_block(p.clone(), shape, spec.conv_channels, spec.kernel);
            for d in 0..spec.dcac_count {
                self.dcac(format!("{p}.dcac{d}"), shape);
            }
            if spec.downsample {
                shape = self.aads(format!("{p}.aads"), shape);
            }
        }
        shape
    }
}

/// Walks `config` at the given `[C, H, W]` input size without building it.
pub fn analyze(config: &NetworkConfig, input_size: [usize; 3]) -> Result<FootprintReport> {
    config.validate()?;
    let mut wk = Walker {
        reduction: config.reduction,
        layers: Vec::new(),
    };
    let mut x = wk.conv_block("stem".into(), input_size, config.stem.channels, 3);
    if config.stem.stride == 2 {
        x = wk.aads("stem.aads".into(), x);
    }
    let mut streams: Vec<[usize; 3]> = config
        .branches
        .iter()
        .enumerate()
        .map(|(i, b)| wk.stages(&format!("branch{i}"), x, &b.stages))
        .collect();
    for (k, step) in config.merge_plan.iter().enumerate() {
        let mut next = Vec::new();
        for (g, group) in step.groups.iter().enumerate() {
            let prefix = format!("merge{k}.group{g}");
            let first = streams[group.inputs[0]];
            let cin = group.inputs.iter().map(|&i| streams[i][0]).sum();
            let mixed = wk.conv_block(format!("{prefix}.mix"), [cin, first[1], first[2]], group.mix_channels, 1);
            next.push(wk.stages(&prefix, mixed, &group.stages));
        }
        streams = next;
    }
    let t = wk.conv_block("tail".into(), streams[0], config.tail_channels, 1);
    wk.push("head".into(), "linear", [1, 1, 1], t[0] + 1, t[0]);

    let total_params = wk.layers.iter().map(|l| l.params).sum();
    let macs: u64 = wk.layers.iter().map(|l| l.macs).sum();
    let peak_activation = wk
        .layers
        .iter()
        .map(|l| l.output_shape.iter().product::<usize>() as u64)
        .max()
        .unwrap_or(0);
    Ok(FootprintReport {
        input_size,
        layers: wk.layers,
        total_params,
        macs,
        flops: macs,
        flops_two_per_mac: 2 * macs,
        peak_activation,
        downsample_factor: config.downsample_factor(),
    })
}

impl fmt::Display for FootprintReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [c, h, w] = self.input_size;
        writeln!(f, "input {c}x{h}x{w}, downsampling x{}", self.downsample_factor)?;
        writeln!(f, "{:<52} {:<11} {:>16} {:>10} {:>14}", "layer", "kind", "output", "params", "MACs")?;
        for l in &self.layers {
            let [c, h, w] = l.output_shape;
            writeln!(f, "{:<52} {:<11} {:>16} {:>10} {:>14}", l.name, l.kind, format!("{c}x{h}x{w}"), l.params, l.macs)?;
        }
        writeln!(f, "total parameters: {} ({:.3}M)", self.total_params, self.total_params as f64 / 1e6)?;
        writeln!(f, "MACs (= FLOPs): {} ({:.3}G)", self.macs, self.macs as f64 / 1e9)?;
        writeln!(f, "FLOPs at 2 per MAC: {:.3}G", self.flops_two_per_mac as f64 / 1e9)?;
        write!(f, "peak activation: {} elements", self.peak_activation)
    }
}
