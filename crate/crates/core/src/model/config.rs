//! Model architecture configuration.

use std::fmt;

use crate::error::{Error, Result};

/// Channel widths for the four inception paths. The 3x3 and 5x5 paths run
/// through 1x1 reductions first; the pool path projects a 3x3 max pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InceptionBlockSpec {
    pub p1: usize,
    pub p3_reduce: usize,
    pub p3: usize,
    pub p5_reduce: usize,
    pub p5: usize,
    pub pool_proj: usize,
}

impl InceptionBlockSpec {
    pub fn new(widths: [usize; 6]) -> Self {
        InceptionBlockSpec {
            p1: widths[0],
            p3_reduce: widths[1],
            p3: widths[2],
            p5_reduce: widths[3],
            p5: widths[4],
            pool_proj: widths[5],
        }
    }

    /// Concatenated output width: the four path outputs.
    pub fn out_channels(&self) -> usize {
        self.p1 + self.p3 + self.p5 + self.pool_proj
    }

    pub fn widths(&self) -> [usize; 6] {
        [self.p1, self.p3_reduce, self.p3, self.p5_reduce, self.p5, self.pool_proj]
    }
}

/// One residual stage: a block of two 3x3 convs with a shortcut.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResidualStageSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl ResidualStageSpec {
    /// The shortcut needs a 1x1 projection whenever shape changes.
    pub fn needs_projection(&self) -> bool {
        self.stride != 1 || self.in_channels != self.out_channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Inception,
    Residual,
    Ensemble,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "inception" => Ok(Variant::Inception),
            "residual" => Ok(Variant::Residual),
            "ensemble" => Ok(Variant::Ensemble),
            other => Err(Error::config(format!(
                "unknown variant `{other}`, expected inception|residual|ensemble"
            ))),
        }
    }

    pub fn uses_inception(&self) -> bool {
        matches!(self, Variant::Inception | Variant::Ensemble)
    }

    pub fn uses_residual(&self) -> bool {
        matches!(self, Variant::Residual | Variant::Ensemble)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Inception => "inception",
            Variant::Residual => "residual",
            Variant::Ensemble => "ensemble",
        })
    }
}

/// Attention squeeze ratio: the hidden layer has N / 8 units.
pub const ATTENTION_REDUCTION: usize = 8;
/// Batch-norm defaults used everywhere.
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Auxiliary losses join the total with this weight.
pub const AUX_LOSS_WEIGHT: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Square input resolution.
    pub input_size: usize,
    pub stem_channels: usize,
    pub inception_blocks: [InceptionBlockSpec; 3],
    pub residual_stages: [ResidualStageSpec; 3],
    pub aux_reduce_channels: usize,
    pub aux_hidden: usize,
    pub aux_dropout: f64,
    pub head_dropout: f64,
    pub variant: Variant,
}

impl ModelConfig {
    /// Desk-scale defaults: both branches end at 64 channels on an 8x8 map.
    pub fn new(num_classes: usize, variant: Variant) -> Self {
        ModelConfig {
            num_classes,
            input_size: 32,
            stem_channels: 16,
            inception_blocks: [
                InceptionBlockSpec::new([8, 8, 12, 4, 8, 4]),
                InceptionBlockSpec::new([8, 8, 12, 4, 8, 4]),
                InceptionBlockSpec::new([16, 16, 24, 8, 16, 8]),
            ],
            residual_stages: [
                ResidualStageSpec { in_channels: 16, out_channels: 16, stride: 2 },
                ResidualStageSpec { in_channels: 16, out_channels: 32, stride: 2 },
                ResidualStageSpec { in_channels: 32, out_channels: 64, stride: 1 },
            ],
            aux_reduce_channels: 32,
            aux_hidden: 128,
            aux_dropout: 0.7,
            head_dropout: 0.5,
            variant,
        }
    }

    /// Minimal configuration for the composed gradient check: 16 fused
    /// channels, 4 classes, 16x16 inputs.
    pub fn tiny() -> Self {
        ModelConfig {
            num_classes: 4,
            input_size: 16,
            stem_channels: 2,
            inception_blocks: [
                InceptionBlockSpec::new([2, 2, 2, 2, 2, 2]),
                InceptionBlockSpec::new([2, 2, 2, 2, 2, 2]),
                InceptionBlockSpec::new([2, 2, 2, 2, 2, 2]),
            ],
            residual_stages: [
                ResidualStageSpec { in_channels: 2, out_channels: 4, stride: 2 },
                ResidualStageSpec { in_channels: 4, out_channels: 8, stride: 2 },
                ResidualStageSpec { in_channels: 8, out_channels: 8, stride: 1 },
            ],
            aux_reduce_channels: 4,
            aux_hidden: 8,
            aux_dropout: 0.7,
            head_dropout: 0.5,
            variant: Variant::Ensemble,
        }
    }

    pub fn inception_out_channels(&self) -> usize {
        self.inception_blocks[2].out_channels()
    }

    pub fn residual_out_channels(&self) -> usize {
        self.residual_stages[2].out_channels
    }

    /// Channels entering attention and the head for the active variant.
    pub fn fused_channels(&self) -> usize {
        match self.variant {
            Variant::Inception => self.inception_out_channels(),
            Variant::Residual => self.residual_out_channels(),
            Variant::Ensemble => self.inception_out_channels() + self.residual_out_channels(),
        }
    }

    /// Spatial extent of both branch outputs (two 2x reductions).
    pub fn branch_spatial(&self) -> usize {
        self.input_size / 4
    }

    /// Spatial extent at the auxiliary tap (after one 2x reduction).
    pub fn aux_tap_spatial(&self) -> usize {
        self.input_size / 2
    }

    /// Aux pooling geometry: 5x5 stride 3, falling back to 3x3 stride 1
    /// when the tap map is smaller than 5x5.
    pub fn aux_pool(&self) -> (usize, usize) {
        if self.aux_tap_spatial() >= 5 {
            (5, 3)
        } else {
            (3, 1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.input_size % 4 != 0 || self.input_size < 8 {
            return Err(Error::config(format!(
                "input_size must be a multiple of 4 and at least 8, got {}",
                self.input_size
            )));
        }
        let stride_product: usize = self.residual_stages.iter().map(|s| s.stride).product();
        if stride_product != 4 {
            return Err(Error::config(format!(
                "residual stage strides must multiply to 4 so both branches \
                 emit the same spatial extent, got product {stride_product}"
            )));
        }
        if self.residual_stages[0].in_channels != self.stem_channels {
            return Err(Error::config(format!(
                "residual stage 1 expects {} input channels, stem emits {}",
                self.residual_stages[0].in_channels, self.stem_channels
            )));
        }
        for i in 1..self.residual_stages.len() {
            if self.residual_stages[i].in_channels != self.residual_stages[i - 1].out_channels {
                return Err(Error::config(format!(
                    "residual stage {} expects {} input channels, stage {} emits {}",
                    i + 1,
                    self.residual_stages[i].in_channels,
                    i,
                    self.residual_stages[i - 1].out_channels
                )));
            }
        }
        for (i, b) in self.inception_blocks.iter().enumerate() {
            for (w, name) in b.widths().iter().zip(["p1", "p3r", "p3", "p5r", "p5", "pp"]) {
                if *w == 0 {
                    return Err(Error::config(format!(
                        "inception block {} path {name} has zero channels",
                        i + 1
                    )));
                }
            }
        }
        let fused = self.fused_channels();
        if fused % ATTENTION_REDUCTION != 0 {
            return Err(Error::config(format!(
                "attention input channels must be divisible by {ATTENTION_REDUCTION}, \
                 got {fused} for variant {}",
                self.variant
            )));
        }
        if !(0.0..1.0).contains(&self.aux_dropout) || !(0.0..1.0).contains(&self.head_dropout) {
            return Err(Error::config(format!(
                "dropout rates must be in [0, 1): aux {}, head {}",
                self.aux_dropout, self.head_dropout
            )));
        }
        Ok(())
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }
}
