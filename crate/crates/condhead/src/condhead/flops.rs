//! FLOP accounting for the conditioned heads.
//!
//! Counting convention: 2·in·out per fully connected layer, 2·C_in·9·S² per
//! output channel of a 3×3 conv layer, 2·C_in·S² for a 1×1 conv, 4 per
//! softmax element, 2·H·P for aggregating H experts of P parameters, and 3
//! per blended output element (two scales and an add). Conditioning work is
//! per category and amortized over every ROI of that category; head work is
//! per ROI.

use serde::{Deserialize, Serialize};

use super::CondHeadConfig;

/// Input dimensions the heads run on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadDims {
    pub feat_dim: usize,
    pub mask_channels: usize,
    pub grid: usize,
}

/// Per-component FLOP report. Conditioning terms are independent of the ROI
/// count by construction; head terms scale with it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub n_rois: u64,
    pub n_categories: u64,
    /// Per-ROI cost of the class-agnostic box + mask head pair.
    pub per_roi_agnostic: u64,
    /// Per-ROI cost of the conditioned blended heads (aggregated head has
    /// the agnostic architecture; the light heads and the blend are extra).
    pub per_roi_condhead: u64,
    pub per_roi_added: u64,
    pub per_roi_overhead_ratio: f64,
    /// One-time conditioning cost per category: weight generation, softmax,
    /// parameter aggregation, and light-head parameter generation.
    pub conditioning_per_category: u64,
    pub conditioning_total: u64,
    pub total_agnostic: u64,
    pub total_condhead: u64,
    pub total_overhead_ratio: f64,
}

fn fc(input: usize, output: usize) -> u64 {
    2 * input as u64 * output as u64
}

fn conv3x3(c_in: usize, c_out: usize, s: usize) -> u64 {
    2 * c_in as u64 * 9 * (s * s) as u64 * c_out as u64
}

fn conv1x1(c_in: usize, s: usize) -> u64 {
    2 * c_in as u64 * (s * s) as u64
}

/// Count conditioning and head FLOPs for a configuration, reported per
/// category and per ROI.
pub fn flop_count(
    cfg: &CondHeadConfig,
    dims: &HeadDims,
    n_rois: u64,
    n_categories: u64,
) -> FlopReport {
    let h = cfg.experts;
    let s = dims.grid;

    // head architectures
    let box_head = fc(dims.feat_dim, cfg.fc_hidden) + fc(cfg.fc_hidden, 4);
    let mask_head = conv3x3(dims.mask_channels, cfg.conv_hidden, s)
        + conv3x3(cfg.conv_hidden, cfg.conv_hidden, s)
        + conv3x3(cfg.conv_hidden, 1, s);
    let light_box = fc(dims.feat_dim, 4);
    let light_mask = conv1x1(dims.mask_channels, s);
    let blend = 3 * (4 + (s * s) as u64);

    let per_roi_agnostic = box_head + mask_head;
    let per_roi_condhead = per_roi_agnostic + light_box + light_mask + blend;
    let per_roi_added = per_roi_condhead - per_roi_agnostic;

    // per-category conditioning: two weight generators, two softmaxes, two
    // aggregations, two parameter generators
    let box_params = (dims.feat_dim * cfg.fc_hidden
        + cfg.fc_hidden
        + cfg.fc_hidden * 4
        + 4) as u64;
    let mask_params = (cfg.conv_hidden * dims.mask_channels * 9
        + cfg.conv_hidden
        + cfg.conv_hidden * cfg.conv_hidden * 9
        + cfg.conv_hidden
        + cfg.conv_hidden * 9
        + 1) as u64;
    let weight_gen = fc(cfg.embed_dim, cfg.gen_hidden) + fc(cfg.gen_hidden, h) + 4 * h as u64;
    let aggregate = 2 * h as u64 * (box_params + mask_params);
    let param_gen = fc(cfg.embed_dim, cfg.gen_hidden)
        + fc(cfg.gen_hidden, dims.feat_dim * 4 + 4)
        + fc(cfg.embed_dim, cfg.gen_hidden)
        + fc(cfg.gen_hidden, dims.mask_channels + 1);
    let conditioning_per_category = 2 * weight_gen + aggregate + param_gen;
    let conditioning_total = conditioning_per_category * n_categories;

    let total_agnostic = per_roi_agnostic * n_rois;
    let total_condhead = per_roi_condhead * n_rois + conditioning_total;

    FlopReport {
        n_rois,
        n_categories,
        per_roi_agnostic,
        per_roi_condhead,
        per_roi_added,
        per_roi_overhead_ratio: per_roi_added as f64 / per_roi_agnostic as f64,
        conditioning_per_category,
        conditioning_total,
        total_agnostic,
        total_condhead,
        total_overhead_ratio: (total_condhead as f64 - total_agnostic as f64)
            / total_agnostic as f64,
    }
}

impl std::fmt::Display for FlopReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "FLOPs ({} rois, {} categories)", self.n_rois, self.n_categories)?;
        writeln!(f, "  per-roi agnostic      {:>14}", self.per_roi_agnostic)?;
        writeln!(f, "  per-roi condhead      {:>14}", self.per_roi_condhead)?;
        writeln!(
            f,
            "  per-roi added         {:>14}  ({:.3}%)",
            self.per_roi_added,
            100.0 * self.per_roi_overhead_ratio
        )?;
        writeln!(
            f,
            "  conditioning/category {:>14}",
            self.conditioning_per_category
        )?;
        writeln!(f, "  conditioning total    {:>14}", self.conditioning_total)?;
        writeln!(f, "  total agnostic        {:>14}", self.total_agnostic)?;
        writeln!(f, "  total condhead        {:>14}", self.total_condhead)?;
        write!(
            f,
            "  total overhead        {:>13.3}%",
            100.0 * self.total_overhead_ratio
        )
    }
}
