//! The four-column DC-AC network: a shared stem, four computation branches,
//! pairwise merges, a 1×1 tail and a single-logit head.

mod analyze;
mod config;

pub use analyze::{analyze, FootprintReport, LayerFootprint};
pub use config::{BranchSpec, HeadSpec, MergeGroup, MergeStep, NetworkConfig, StageSpec, StemSpec, NETWORK_FORMAT_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{aads_forward_with, aads_weight, conv_block_forward, dcac_forward, ConvBlock, DcacBlock, NormMode, RunningStats};
use crate::tensor::{Tape, Tensor, Var};

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
}

/// Which parameters stop receiving updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeScope {
    None,
    AllButHead,
}

#[derive(Clone, Debug)]
struct ConvUnit {
    block: ConvBlock<usize>,
    norm: usize,
}

#[derive(Clone, Debug)]
struct Stage {
    conv: ConvUnit,
    dcac: Vec<DcacBlock<usize>>,
    downsample: Option<usize>,
}

#[derive(Clone, Debug)]
struct Merge {
    inputs: Vec<usize>,
    mix: ConvUnit,
    stages: Vec<Stage>,
}

#[derive(Clone, Debug)]
struct Layout {
    stem: ConvUnit,
    stem_downsample: Option<usize>,
    branches: Vec<Vec<Stage>>,
    merges: Vec<Vec<Merge>>,
    tail: ConvUnit,
    head_w: usize,
    head_b: usize,
}

struct Builder<'a> {
    rng: ChaCha8Rng,
    reduction: usize,
    params: &'a mut Vec<Param>,
    norms: &'a mut Vec<(String, RunningStats)>,
    aads: &'a mut Vec<(String, Tensor)>,
}

impl Builder<'_> {
    fn aads(&mut self, name: String, channels: usize) -> usize {
        self.aads.push((name, aads_weight(channels)));
        self.aads.len() - 1
    }

    fn push(&mut self, value: &Tensor) -> usize {
        self.params.push(Param {
            name: String::new(),
            value: value.clone(),
            frozen: false,
        });
        self.params.len() - 1
    }

    fn name(&mut self, prefix: &str, leaves: Vec<(String, &usize)>) {
        for (local, &i) in leaves {
            self.params[i].name = format!("{prefix}.{local}");
        }
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, kernel: usize) -> ConvUnit {
        let init = ConvBlock::init(cin, cout, kernel, &mut self.rng);
        let block = init.map(&mut |t| self.push(t));
        self.name(prefix, block.leaves());
        self.norms.push((format!("{prefix}.norm"), RunningStats::new(cout)));
        ConvUnit {
            block,
            norm: self.norms.len() - 1,
        }
    }

    fn dcac(&mut self, prefix: &str, channels: usize) -> DcacBlock<usize> {
        let init = DcacBlock::init(channels, self.reduction, &mut self.rng);
        let block = init.map(&mut |t| self.push(t));
        self.name(prefix, block.leaves());
        block
    }

    fn stages(&mut self, prefix: &str, mut cin: usize, specs: &[StageSpec]) -> (Vec<Stage>, usize) {
        let mut out = Vec::new();
        for (s, spec) in specs.iter().enumerate() {
            let p = format!("{prefix}.stage{s}");
            let conv = self.conv(&p, cin, spec.conv_channels, spec.kernel);
            let dcac = (0..spec.dcac_count)
                .map(|d| self.dcac(&format!("{p}.dcac{d}"), spec.conv_channels))
                .collect();
            let downsample = spec.downsample.then(|| self.aads(format!("{p}.aads"), spec.conv_channels));
            out.push(Stage { conv, dcac, downsample });
            cin = spec.conv_channels;
        }
        (out, cin)
    }
}

/// Parameters, batch-norm statistics and wiring of one network instance.
#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    params: Vec<Param>,
    norms: Vec<(String, RunningStats)>,
    aads: Vec<(String, Tensor)>,
    layout: Layout,
}

impl Network {
    /// Builds and initializes a network. The same config and seed always give
    /// bit-identical parameters.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::new();
        let mut norms = Vec::new();
        let mut aads = Vec::new();
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            reduction: config.reduction,
            params: &mut params,
            norms: &mut norms,
            aads: &mut aads,
        };

        let stem = b.conv("stem", config.input_size[0], config.stem.channels, 3);
        let stem_downsample = (config.stem.stride == 2).then(|| b.aads("stem.aads".into(), config.stem.channels));
        let mut streams = Vec::new();
        let mut widths = Vec::new();
        for (i, spec) in config.branches.iter().enumerate() {
            let (stages, out) = b.stages(&format!("branch{i}"), config.stem.channels, &spec.stages);
            streams.push(stages);
            widths.push(out);
        }
        let mut merges = Vec::new();
        for (k, step) in config.merge_plan.iter().enumerate() {
            let mut built = Vec::new();
            let mut next = Vec::new();
            for (g, group) in step.groups.iter().enumerate() {
                let prefix = format!("merge{k}.group{g}");
                let cin = group.inputs.iter().map(|&i| widths[i]).sum();
                let mix = b.conv(&format!("{prefix}.mix"), cin, group.mix_channels, 1);
                let (stages, out) = b.stages(&prefix, group.mix_channels, &group.stages);
                built.push(Merge {
                    inputs: group.inputs.clone(),
                    mix,
                    stages,
                });
                next.push(out);
            }
            merges.push(built);
            widths = next;
        }
        let tail = b.conv("tail", widths[0], config.tail_channels, 1);
        let bound = 1.0 / (config.tail_channels as f64).sqrt();
        let w = Tensor::from_fn(&[1, config.tail_channels], |_| b.rng.random_range(-bound..bound));
        let head_w = b.push(&w);
        let head_b = b.push(&Tensor::zeros(&[1]));
        params[head_w].name = "head.weight".into();
        params[head_b].name = "head.bias".into();

        let layout = Layout {
            stem,
            stem_downsample,
            branches: streams,
            merges,
            tail,
            head_w,
            head_b,
        };
        Ok(Network {
            config,
            params,
            norms,
            aads,
            layout,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen).map(|p| p.value.numel()).sum()
    }

    /// Batch-norm running statistics, one entry per conv block.
    pub fn norm_stats(&self) -> &[(String, RunningStats)] {
        &self.norms
    }

    pub fn norm_stats_mut(&mut self) -> &mut [(String, RunningStats)] {
        &mut self.norms
    }

    /// The fixed blur kernels of every anti-aliased downsampling layer.
    pub fn aads_kernels(&self) -> &[(String, Tensor)] {
        &self.aads
    }

    pub fn aads_kernels_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.aads
    }

    pub fn is_head(&self, index: usize) -> bool {
        index == self.layout.head_w || index == self.layout.head_b
    }

    pub fn set_frozen(&mut self, scope: FreezeScope) {
        for i in 0..self.params.len() {
            self.params[i].frozen = scope == FreezeScope::AllButHead && !self.is_head(i);
        }
    }

    /// Copies every non-head parameter and all running statistics from
    /// `other`, which must share this network's layout.
    pub fn load_backbone_from(&mut self, other: &Network) -> Result<()> {
        if other.params.len() != self.params.len() || other.norms.len() != self.norms.len() {
            return Err(Error::arg("load_backbone_from", "networks have different layouts"));
        }
        for i in 0..self.params.len() {
            let (dst, src) = (&self.params[i], &other.params[i]);
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::arg(
                    "load_backbone_from",
                    format!("parameter {} {:?} does not match {} {:?}", dst.name, dst.value.shape(), src.name, src.value.shape()),
                ));
            }
        }
        for i in 0..self.params.len() {
            if !self.is_head(i) {
                self.params[i].value = other.params[i].value.clone();
            }
        }
        self.norms = other.norms.clone();
        Ok(())
    }

    /// Registers every parameter as a leaf on `tape`. On a fresh tape the
    /// returned vars are `Var` indices `0..params.len()` in declaration order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.clone(), !p.frozen)).collect()
    }

    /// Smallest accepted input height and width.
    pub fn min_input_extent(&self) -> usize {
        self.config.downsample_factor()
    }

    /// Records the forward pass for a `[N, 3, H, W]` input and returns `[N, 1]`
    /// logits. With `train` set, unfrozen conv blocks normalize with batch
    /// statistics and update their running statistics; frozen ones, and every
    /// block when `train` is false, use the running statistics.
    pub fn forward(&mut self, tape: &mut Tape, vars: &[Var], input: Var, train: bool) -> Result<Var> {
        let mut norms = std::mem::take(&mut self.norms);
        let out = self.run(tape, vars, input, &mut norms, train);
        self.norms = norms;
        out
    }

    /// Replaces every running statistic with the batch statistics seen on
    /// `batch`, layer by layer, frozen blocks included. Parameters are not
    /// touched. Gives a randomly initialized backbone statistics that match
    /// the data before it is frozen.
    pub fn calibrate_norm_stats(&mut self, batch: &Tensor) -> Result<()> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.value.clone(), false)).collect();
        let x = tape.constant(batch.clone());
        let mut norms = self.norms.clone();
        self.run_mode(&mut tape, &vars, x, &mut norms, Mode::Calibrate)?;
        self.norms = norms;
        Ok(())
    }

    /// Inference-mode logits for a batch, one per sample.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.value.clone(), false)).collect();
        let x = tape.constant(batch.clone());
        let mut norms = self.norms.clone();
        let z = self.run(&mut tape, &vars, x, &mut norms, false)?;
        Ok(tape.value(z).data().to_vec())
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.config.input_size[0] {
            return Err(Error::shape(
                "network",
                "input",
                format!("expected [N, {}, H, W], got {shape:?}", self.config.input_size[0]),
            ));
        }
        let min = self.min_input_extent();
        if shape[2] < min || shape[3] < min {
            return Err(Error::shape(
                "network",
                "spatial",
                format!("{}x{} input is below the minimum size {min}x{min}", shape[2], shape[3]),
            ));
        }
        Ok(())
    }

    fn run(&self, tape: &mut Tape, vars: &[Var], input: Var, norms: &mut [(String, RunningStats)], train: bool) -> Result<Var> {
        self.run_mode(tape, vars, input, norms, if train { Mode::Train } else { Mode::Eval })
    }

    fn run_mode(&self, tape: &mut Tape, vars: &[Var], input: Var, norms: &mut [(String, RunningStats)], mode: Mode) -> Result<Var> {
        if vars.len() != self.params.len() {
            return Err(Error::arg(
                "network",
                format!("{} parameter vars bound, expected {}", vars.len(), self.params.len()),
            ));
        }
        self.check_input(tape.value(input).shape())?;
        let mut ctx = Ctx {
            tape,
            vars,
            params: &self.params,
            norms,
            aads: &self.aads,
            mode,
        };
        let l = &self.layout;
        let mut x = ctx.conv(&l.stem, input)?;
        if let Some(k) = l.stem_downsample {
            x = ctx.downsample(k, x)?;
        }
        let mut streams = Vec::new();
        for stages in &l.branches {
            streams.push(ctx.stages(stages, x)?);
        }
        for step in &l.merges {
            let mut next = Vec::new();
            for m in step {
                let parts: Vec<Var> = m.inputs.iter().map(|&i| streams[i]).collect();
                let joined = ctx.tape.concat_channels(&parts)?;
                let mixed = ctx.conv(&m.mix, joined)?;
                next.push(ctx.stages(&m.stages, mixed)?);
            }
            streams = next;
        }
        let t = ctx.conv(&l.tail, streams[0])?;
        let pooled = ctx.tape.global_avg_pool(t)?;
        ctx.tape.linear(pooled, vars[l.head_w], vars[l.head_b])
    }
}

struct Ctx<'a> {
    tape: &'a mut Tape,
    vars: &'a [Var],
    params: &'a [Param],
    norms: &'a mut [(String, RunningStats)],
    aads: &'a [(String, Tensor)],
    mode: Mode,
}

#[derive(Clone, Copy, PartialEq)]
enum Mode {
    Train,
    Eval,
    Calibrate,
}

impl Ctx<'_> {
    fn downsample(&mut self, k: usize, x: Var) -> Result<Var> {
        let kernel = self.tape.constant(self.aads[k].1.clone());
        aads_forward_with(self.tape, x, kernel)
    }

    fn conv(&mut self, unit: &ConvUnit, x: Var) -> Result<Var> {
        let block = unit.block.map(&mut |&i| self.vars[i]);
        let frozen = unit.block.leaves().iter().all(|(_, &i)| self.params[i].frozen);
        let stats = &mut self.norms[unit.norm].1;
        let mode = match self.mode {
            Mode::Calibrate => NormMode::Calibrate(stats),
            Mode::Train if !frozen => NormMode::Train(stats),
            _ => NormMode::Eval(stats),
        };
        conv_block_forward(self.tape, x, &block, mode)
    }

    fn stages(&mut self, stages: &[Stage], mut x: Var) -> Result<Var> {
        for stage in stages {
            x = self.conv(&stage.conv, x)?;
            for block in &stage.dcac {
                let block = block.map(&mut |&i| self.vars[i]);
                x = dcac_padded(self.tape, x, &block)?;
            }
            if let Some(k) = stage.downsample {
                x = self.downsample(k, x)?;
            }
        }
        Ok(x)
    }
}

/// Runs a DC-AC block on a map of any size by zero-padding odd extents on the
/// bottom/right and cropping the result back.
fn dcac_padded(tape: &mut Tape, x: Var, block: &DcacBlock<Var>) -> Result<Var> {
    let [_, _, h, w] = tape.value(x).dims4("dcac")?;
    let (ph, pw) = (h % 2, w % 2);
    if ph == 0 && pw == 0 {
        return dcac_forward(tape, x, block);
    }
    let padded = tape.pad_bottom_right(x, ph, pw)?;
    let y = dcac_forward(tape, padded, block)?;
    tape.crop_top_left(y, h, w)
}
