//! Multiply-accumulate and parameter accounting.
//!
//! The MAC arithmetic exists to reproduce the classic argument for 1x1
//! reduction convolutions: a 5x5 conv from 480 to 48 channels on a
//! 14x14 map costs 112,896,000 multiplies directly, but only 5,268,480
//! when squeezed through 16 channels first, a better than 21x saving.

use crate::error::Result;
use crate::model::config::ModelConfig;
use crate::tensor::ConvSpec;

/// Multiply-accumulate count for one convolution:
/// out_h * out_w * out_channels * kernel_h * kernel_w * in_channels.
pub fn count_macs(spec: &ConvSpec, input_h: usize, input_w: usize) -> Result<u64> {
    let (oh, ow) = spec.out_hw(input_h, input_w)?;
    Ok(oh as u64
        * ow as u64
        * spec.out_channels as u64
        * spec.kernel_h as u64
        * spec.kernel_w as u64
        * spec.in_channels as u64)
}

/// Render a MAC count the way cost tables round it: tenths of a million.
pub fn format_millions(macs: u64) -> String {
    format!("{:.1}M", macs as f64 / 1e6)
}

/// One row of the reduction comparison table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MacComparison {
    pub direct: u64,
    pub reduced: u64,
}

/// The reference comparison: direct 5x5 480->48 on a 14x14 map versus
/// the same effective layer squeezed through a 1x1 conv to 16 channels.
pub fn reference_reduction() -> Result<MacComparison> {
    let direct = count_macs(&ConvSpec::new(480, 48, 5, 1, 2), 14, 14)?;
    let squeeze = count_macs(&ConvSpec::new(480, 16, 1, 1, 0), 14, 14)?;
    let expand = count_macs(&ConvSpec::new(16, 48, 5, 1, 2), 14, 14)?;
    Ok(MacComparison { direct, reduced: squeeze + expand })
}

fn conv_scalars(cin: usize, cout: usize, k: usize) -> usize {
    cout * cin * k * k + cout
}

fn dense_scalars(input: usize, output: usize) -> usize {
    output * input + output
}

fn bn_scalars(channels: usize) -> usize {
    2 * channels
}

/// Closed-form trainable parameter count for a configuration, mirroring
/// the registration order in the model builders. Tested against an
/// enumeration walk over the actual parameter store.
pub fn expected_param_count(config: &ModelConfig) -> usize {
    let mut total = 0;
    if config.variant.uses_inception() {
        total += conv_scalars(1, config.stem_channels, 3);
        let mut in_ch = config.stem_channels;
        for block in &config.inception_blocks {
            total += conv_scalars(in_ch, block.p1, 1);
            total += conv_scalars(in_ch, block.p3_reduce, 1);
            total += conv_scalars(block.p3_reduce, block.p3, 3);
            total += conv_scalars(in_ch, block.p5_reduce, 1);
            total += conv_scalars(block.p5_reduce, block.p5, 5);
            total += conv_scalars(in_ch, block.pool_proj, 1);
            in_ch = block.out_channels();
        }
        let tap_channels = config.inception_blocks[1].out_channels();
        let (pool_kernel, pool_stride) = config.aux_pool();
        let pooled = (config.aux_tap_spatial() - pool_kernel) / pool_stride + 1;
        total += conv_scalars(tap_channels, config.aux_reduce_channels, 1);
        total += dense_scalars(config.aux_reduce_channels * pooled * pooled, config.aux_hidden);
        total += dense_scalars(config.aux_hidden, config.num_classes);
    }
    if config.variant.uses_residual() {
        total += conv_scalars(1, config.stem_channels, 3);
        total += bn_scalars(config.stem_channels);
        for stage in &config.residual_stages {
            total += conv_scalars(stage.in_channels, stage.out_channels, 3);
            total += bn_scalars(stage.out_channels);
            total += conv_scalars(stage.out_channels, stage.out_channels, 3);
            total += bn_scalars(stage.out_channels);
            if stage.needs_projection() {
                total += conv_scalars(stage.in_channels, stage.out_channels, 1);
                total += bn_scalars(stage.out_channels);
            }
        }
    }
    let fused = config.fused_channels();
    let hidden = fused / crate::model::config::ATTENTION_REDUCTION;
    total += dense_scalars(fused, hidden);
    total += bn_scalars(hidden);
    total += dense_scalars(hidden, fused);
    total += dense_scalars(fused, config.num_classes);
    total
}
