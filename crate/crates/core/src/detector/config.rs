use crate::blocks::GateOrder;

/// Per-stage feature block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum ConvBlockKind {
    /// Depthwise-separable conv with attention gates.
    #[default]
    EaConv,
    /// Plain dense 3x3 CBS.
    Dense,
}

/// Stage-entry downsampler.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum DownBlockKind {
    /// Max/avg pooling fused by a 1x1 CBS, with attention gates.
    #[default]
    EaDown,
    /// Strided dense 3x3 CBS.
    Strided,
}

pub const NUM_STAGES: usize = 4;

/// Everything that determines the detector graph and its initial weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub input_size: usize,
    pub width_mult: f64,
    pub depth_mult: f64,
    /// Stem width followed by the four stage widths, before `width_mult`.
    pub base_channels: Vec<usize>,
    /// EAConv repeats per stage, before `depth_mult`.
    pub blocks_per_stage: Vec<usize>,
    pub sppf_identity_branch: bool,
    pub conv_block: ConvBlockKind,
    pub down_block: DownBlockKind,
    pub gate_order: GateOrder,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 2,
            input_size: 640,
            width_mult: 1.0,
            depth_mult: 1.0,
            base_channels: vec![24, 40, 80, 192, 272],
            blocks_per_stage: vec![1, 2, 2, 1],
            sppf_identity_branch: false,
            conv_block: ConvBlockKind::EaConv,
            down_block: DownBlockKind::EaDown,
            gate_order: GateOrder::ChannelFirst,
            seed: 42,
        }
    }
}

/// A violated config invariant together with the fields it involves.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InvalidConfig {
    pub fields: &'static [&'static str],
    pub message: String,
}

impl std::fmt::Display for InvalidConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl ModelConfig {
    /// Small config used by the toy training path and fast tests.
    pub fn toy(input_size: usize, width_mult: f64) -> Self {
        ModelConfig {
            num_classes: 1,
            input_size,
            width_mult,
            ..Default::default()
        }
    }

    /// Derived widths: stem, then stages 1 to 4.
    ///
    /// Each is `max(8, round(base * width_mult))`, which must come out even.
    pub fn channels(&self) -> Result<Vec<usize>, InvalidConfig> {
        const FIELDS: &[&str] = &["base_channels", "width_mult"];
        if self.base_channels.len() != NUM_STAGES + 1 {
            return Err(InvalidConfig {
                fields: &["base_channels"],
                message: format!(
                    "base_channels needs {} entries (stem + {NUM_STAGES} stages), got {}",
                    NUM_STAGES + 1,
                    self.base_channels.len()
                ),
            });
        }
        let mut out = Vec::with_capacity(self.base_channels.len());
        for (i, &b) in self.base_channels.iter().enumerate() {
            let c = ((b as f64 * self.width_mult).round() as usize).max(8);
            if !c.is_multiple_of(2) {
                let stage = if i == 0 {
                    "stem".to_string()
                } else {
                    format!("stage {i}")
                };
                return Err(InvalidConfig {
                    fields: FIELDS,
                    message: format!(
                        "{stage}: derived channel count {c} (= round({b} * {})) is odd; channel counts must be even",
                        self.width_mult
                    ),
                });
            }
            out.push(c);
        }
        Ok(out)
    }

    /// Derived EAConv repeats per stage: `round(blocks * depth_mult)`.
    pub fn depths(&self) -> Vec<usize> {
        self.blocks_per_stage
            .iter()
            .map(|&b| (b as f64 * self.depth_mult).round() as usize)
            .collect()
    }

    pub fn validate(&self) -> Result<(), InvalidConfig> {
        let fail = |fields: &'static [&'static str], message: String| Err(InvalidConfig { fields, message });
        if self.num_classes == 0 {
            return fail(&["num_classes"], "num_classes must be at least 1".into());
        }
        if self.input_size < 64 || !self.input_size.is_multiple_of(32) {
            return fail(
                &["input_size"],
                format!(
                    "input_size must be a multiple of 32 and at least 64, got {}",
                    self.input_size
                ),
            );
        }
        if !(self.width_mult.is_finite() && self.width_mult > 0.0) {
            return fail(
                &["width_mult"],
                format!("width_mult must be positive, got {}", self.width_mult),
            );
        }
        if !(self.depth_mult.is_finite() && self.depth_mult > 0.0) {
            return fail(
                &["depth_mult"],
                format!("depth_mult must be positive, got {}", self.depth_mult),
            );
        }
        if self.blocks_per_stage.len() != NUM_STAGES {
            return fail(
                &["blocks_per_stage"],
                format!(
                    "blocks_per_stage needs {NUM_STAGES} entries, got {}",
                    self.blocks_per_stage.len()
                ),
            );
        }
        self.channels().map(|_| ())
    }
}
