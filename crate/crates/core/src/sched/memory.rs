//! Analytic activation-memory model and the tile-size planner.
//!
//! Each formula is the exact peak the corresponding executor in
//! [`super::exec`] reaches in the arena, counted in int8 bytes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::MicroKernelShape;
use crate::model::EncoderConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Naive,
    Tiled,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StagePeaks {
    pub embedding: usize,
    pub mha: usize,
    pub layernorm: usize,
    pub mlp: usize,
    pub head: usize,
}

impl StagePeaks {
    pub fn max(&self) -> usize {
        self.iter().map(|(_, v)| v).max().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, usize)> {
        [
            ("embedding", self.embedding),
            ("mha", self.mha),
            ("layernorm", self.layernorm),
            ("mlp", self.mlp),
            ("head", self.head),
        ]
        .into_iter()
    }

    /// Stage with the highest peak (first on ties).
    pub fn bottleneck(&self) -> &'static str {
        let m = self.max();
        self.iter().find(|(_, v)| *v == m).map(|(n, _)| n).unwrap_or("embedding")
    }
}

/// Per-stage activation peaks for sequence length `s` and tile size `t`.
///
/// Tiled: embedding `s·d + t·d`, MHA `2·s·d + 2·s·dh + 2·t·dh + t·s`,
/// MLP `s·d + t·(d_ffn + d)` (= `s·d + 5·t·d` at `d_ffn = 4d`).
/// Naive: embedding `2·s·d`, MHA `5·s·d + h·s²`, MLP `2·s·d + s·d_ffn`
/// (= `6·s·d`). LayerNorm runs in place (`s·d`); the head adds the logits.
pub fn peak_memory_model(cfg: &EncoderConfig, s: usize, t: usize, mode: Mode) -> Result<StagePeaks> {
    if s == 0 {
        return Err(Error::InvalidSequence { s, s_max: cfg.max_seq });
    }
    if t == 0 || t > s {
        return Err(Error::InvalidTile { t, s });
    }
    let (d, h, f) = (cfg.d_model, cfg.heads, cfg.d_ffn);
    let dh = cfg.head_dim();
    let sd = s * d;
    let peaks = match mode {
        Mode::Tiled => StagePeaks {
            embedding: sd + t * d,
            mha: 2 * sd + 2 * s * dh + 2 * t * dh + t * s,
            layernorm: sd,
            mlp: sd + t * (f + d),
            head: sd + cfg.n_classes,
        },
        Mode::Naive => StagePeaks {
            embedding: 2 * sd,
            mha: 5 * sd + h * s * s,
            layernorm: sd,
            mlp: 2 * sd + s * f,
            head: sd + cfg.n_classes,
        },
    };
    Ok(peaks)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SchedulePlan {
    pub s: usize,
    pub t: usize,
    pub mode: Mode,
    pub stage_peaks: StagePeaks,
    pub kernel: MicroKernelShape,
}

impl SchedulePlan {
    pub fn tiled(cfg: &EncoderConfig, s: usize, t: usize) -> Result<Self> {
        Ok(Self {
            s,
            t,
            mode: Mode::Tiled,
            stage_peaks: peak_memory_model(cfg, s, t, Mode::Tiled)?,
            kernel: MicroKernelShape::default(),
        })
    }

    /// Untiled execution; `t` is reported as `s`.
    pub fn naive(cfg: &EncoderConfig, s: usize) -> Result<Self> {
        Ok(Self {
            s,
            t: s.max(1),
            mode: Mode::Naive,
            stage_peaks: peak_memory_model(cfg, s, s.max(1), Mode::Naive)?,
            kernel: MicroKernelShape::default(),
        })
    }

    pub fn with_kernel(mut self, kernel: MicroKernelShape) -> Self {
        self.kernel = kernel;
        self
    }

    pub fn predicted_peak(&self) -> usize {
        self.stage_peaks.max()
    }
}

/// Largest `t` in `[1, s]` whose predicted peak fits `sram_budget_bytes`.
pub fn plan_tile_size(cfg: &EncoderConfig, s: usize, sram_budget_bytes: usize) -> Result<SchedulePlan> {
    let fits = |t: usize| -> Result<bool> {
        Ok(peak_memory_model(cfg, s, t, Mode::Tiled)?.max() <= sram_budget_bytes)
    };
    if !fits(1)? {
        return Err(Error::InfeasibleBudget {
            min_required: peak_memory_model(cfg, s, 1, Mode::Tiled)?.max(),
            budget: sram_budget_bytes,
        });
    }
    // Every stage peak is non-decreasing in t.
    let (mut lo, mut hi) = (1, s);
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        if fits(mid)? {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    SchedulePlan::tiled(cfg, s, lo)
}
