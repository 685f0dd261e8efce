use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::DEFAULT_REDUCTION;

pub const NETWORK_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemSpec {
    pub channels: usize,
    /// 1, or 2 to follow the stem conv with anti-aliased downsampling.
    pub stride: usize,
}

/// One stage: a conv block, `dcac_count` DC-AC blocks, then optional AADS.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub conv_channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    pub dcac_count: usize,
    pub downsample: bool,
}

fn default_kernel() -> usize {
    3
}

fn default_reduction() -> usize {
    DEFAULT_REDUCTION
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchSpec {
    pub stages: Vec<StageSpec>,
}

/// Concatenates the listed streams along channels, mixes them with a 1×1
/// conv block, then runs `stages` on the merged stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeGroup {
    pub inputs: Vec<usize>,
    pub mix_channels: usize,
    #[serde(default)]
    pub stages: Vec<StageSpec>,
}

/// One round of merges. Its groups partition the streams alive before it;
/// group `g` becomes stream `g` afterwards.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeStep {
    pub groups: Vec<MergeGroup>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub outputs: usize,
}

/// Declarative description of the four-column network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub format_version: u32,
    /// `[channels, height, width]`.
    pub input_size: [usize; 3],
    pub stem: StemSpec,
    pub branches: Vec<BranchSpec>,
    pub merge_plan: Vec<MergeStep>,
    pub tail_channels: usize,
    pub head: HeadSpec,
    #[serde(default = "default_reduction")]
    pub reduction: usize,
}

fn stage(conv_channels: usize, dcac_count: usize, downsample: bool) -> StageSpec {
    StageSpec {
        conv_channels,
        kernel: 3,
        dcac_count,
        downsample,
    }
}

impl NetworkConfig {
    /// The full-size preset: about 1.66M parameters and 0.34 GMACs at
    /// 3×160×160.
    pub fn paper_scale() -> Self {
        let widths = [(12, 24), (16, 32), (20, 40), (24, 48)];
        let dcac = [(1, 1), (1, 2), (2, 1), (2, 2)];
        let branches = widths
            .iter()
            .zip(dcac)
            .map(|(&(w1, w2), (d1, d2))| BranchSpec {
                stages: vec![stage(w1, d1, true), stage(w2, d2, true)],
            })
            .collect();
        NetworkConfig {
            format_version: NETWORK_FORMAT_VERSION,
            input_size: [3, 160, 160],
            stem: StemSpec { channels: 12, stride: 2 },
            branches,
            merge_plan: vec![
                MergeStep {
                    groups: vec![
                        MergeGroup {
                            inputs: vec![0, 1],
                            mix_channels: 96,
                            stages: vec![stage(112, 2, true)],
                        },
                        MergeGroup {
                            inputs: vec![2, 3],
                            mix_channels: 112,
                            stages: vec![stage(128, 2, true)],
                        },
                    ],
                },
                MergeStep {
                    groups: vec![MergeGroup {
                        inputs: vec![0, 1],
                        mix_channels: 224,
                        stages: vec![stage(368, 2, true)],
                    }],
                },
            ],
            tail_channels: 512,
            head: HeadSpec { outputs: 1 },
            reduction: DEFAULT_REDUCTION,
        }
    }

    /// The paper-scale topology with every width divided by 8, at 32×32 input.
    pub fn tiny() -> Self {
        let mut cfg = Self::paper_scale();
        let shrink = |c: &mut usize| *c = c.div_ceil(8);
        shrink(&mut cfg.stem.channels);
        for b in &mut cfg.branches {
            b.stages.iter_mut().for_each(|s| shrink(&mut s.conv_channels));
        }
        for step in &mut cfg.merge_plan {
            for g in &mut step.groups {
                shrink(&mut g.mix_channels);
                g.stages.iter_mut().for_each(|s| shrink(&mut s.conv_channels));
            }
        }
        shrink(&mut cfg.tail_channels);
        cfg.input_size = [3, 32, 32];
        cfg
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "paper" | "paper-scale" | "paper_scale" => Some(Self::paper_scale()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: NetworkConfig = serde_json::from_str(text).map_err(|e| Error::config("<document>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Product of all stride-2 reductions between input and tail.
    pub fn downsample_factor(&self) -> usize {
        // every path crosses the stem, one branch and one group per merge
        // step; validate() guarantees the paths agree, so follow branch 0
        let mut factor = if self.stem.stride == 2 { 2 } else { 1 };
        let count = |stages: &[StageSpec]| stages.iter().filter(|s| s.downsample).count() as u32;
        factor *= 2usize.pow(count(&self.branches[0].stages));
        let mut stream = 0;
        for step in &self.merge_plan {
            let g = step.groups.iter().position(|g| g.inputs.contains(&stream)).unwrap_or(0);
            factor *= 2usize.pow(count(&step.groups[g].stages));
            stream = g;
        }
        factor
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != NETWORK_FORMAT_VERSION {
            return Err(Error::config(
                "format_version",
                format!("unsupported version {}, expected {NETWORK_FORMAT_VERSION}", self.format_version),
            ));
        }
        let [c, h, w] = self.input_size;
        if c != 3 || h == 0 || w == 0 {
            return Err(Error::config("input_size", format!("expected [3, H, W] with H, W > 0, got {:?}", self.input_size)));
        }
        if self.stem.channels == 0 {
            return Err(Error::config("stem.channels", "must be positive"));
        }
        if !matches!(self.stem.stride, 1 | 2) {
            return Err(Error::config("stem.stride", "must be 1 or 2"));
        }
        if self.branches.len() != 4 {
            return Err(Error::config(
                "branches",
                format!("exactly 4 computation branches required, got {}", self.branches.len()),
            ));
        }
        if self.reduction == 0 {
            return Err(Error::config("reduction", "must be positive"));
        }
        if self.tail_channels == 0 {
            return Err(Error::config("tail_channels", "must be positive"));
        }
        if self.head.outputs != 1 {
            return Err(Error::config("head.outputs", "binary classification needs exactly one output"));
        }

        let check_stages = |field: String, stages: &[StageSpec]| -> Result<u32> {
            for (i, s) in stages.iter().enumerate() {
                if s.conv_channels == 0 {
                    return Err(Error::config(format!("{field}[{i}].conv_channels"), "must be positive"));
                }
                if s.kernel == 0 || s.kernel % 2 == 0 {
                    return Err(Error::config(format!("{field}[{i}].kernel"), "must be odd"));
                }
            }
            Ok(stages.iter().filter(|s| s.downsample).count() as u32)
        };

        // downsampling depth of each live stream, used to check merge alignment
        let mut depths = Vec::new();
        for (b, branch) in self.branches.iter().enumerate() {
            if branch.stages.is_empty() {
                return Err(Error::config(
                    format!("branches[{b}].stages"),
                    "each branch needs at least one stage before any merge",
                ));
            }
            depths.push(check_stages(format!("branches[{b}].stages"), &branch.stages)?);
        }

        if self.merge_plan.is_empty() {
            return Err(Error::config("merge_plan", "at least one merge step is required"));
        }
        for (k, step) in self.merge_plan.iter().enumerate() {
            let field = format!("merge_plan[{k}]");
            let mut seen = vec![false; depths.len()];
            let mut next = Vec::new();
            if step.groups.is_empty() {
                return Err(Error::config(format!("{field}.groups"), "empty merge step"));
            }
            for (g, group) in step.groups.iter().enumerate() {
                let gfield = format!("{field}.groups[{g}]");
                if group.inputs.len() < 2 {
                    return Err(Error::config(format!("{gfield}.inputs"), "a merge needs at least two streams"));
                }
                if group.mix_channels == 0 {
                    return Err(Error::config(format!("{gfield}.mix_channels"), "must be positive"));
                }
                for &i in &group.inputs {
                    if i >= seen.len() || seen[i] {
                        return Err(Error::config(
                            format!("{gfield}.inputs"),
                            format!("stream {i} is out of range or used twice"),
                        ));
                    }
                    seen[i] = true;
                }
                let d = depths[group.inputs[0]];
                if group.inputs.iter().any(|&i| depths[i] != d) {
                    return Err(Error::config(
                        format!("{gfield}.inputs"),
                        "merged streams have different downsampling depths",
                    ));
                }
                next.push(d + check_stages(format!("{gfield}.stages"), &group.stages)?);
            }
            if let Some(i) = seen.iter().position(|s| !s) {
                return Err(Error::config(format!("{field}.groups"), format!("stream {i} is never merged")));
            }
            depths = next;
        }
        if depths.len() != 1 {
            return Err(Error::config(
                "merge_plan",
                format!("the last step must merge everything into one stream, {} remain", depths.len()),
            ));
        }
        Ok(())
    }
}
