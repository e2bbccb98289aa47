//! The mixed single/multi-view batch schedule.
//!
//! Training enforces a constant per-micro-step image budget `n_img`: a
//! micro-step with S views per sample holds B = floor(n_img / S) samples.
//! Micro-steps are grouped into accumulation spans (one weight update per
//! span); when both sources are configured they alternate single/multi within
//! every span.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Single,
    Multi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MicroStep {
    pub source: SourceKind,
    /// Views per sample in this micro-step.
    pub views: usize,
    /// Samples in this micro-step: floor(n_img / views).
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// Image budget per micro-step.
    pub n_img: usize,
    pub include_single: bool,
    pub include_multi: bool,
    /// View-count range for multi-view micro-steps.
    pub views_min: usize,
    pub views_max: usize,
    /// Micro-steps per weight update.
    pub accumulation: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            n_img: 16,
            include_single: true,
            include_multi: true,
            views_min: 2,
            views_max: 10,
            accumulation: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSchedule {
    /// One entry per weight update; each holds `accumulation` micro-steps.
    pub spans: Vec<Vec<MicroStep>>,
}

impl BatchSchedule {
    pub fn micro_step_count(&self) -> usize {
        self.spans.iter().map(|s| s.len()).sum()
    }
}

/// Build the deterministic schedule for `steps` weight updates.
pub fn build_schedule(cfg: &ScheduleConfig, steps: usize, seed: u64) -> Result<BatchSchedule> {
    if !cfg.include_single && !cfg.include_multi {
        return Err(Error::Config("schedule needs at least one source".into()));
    }
    if cfg.include_multi {
        if cfg.views_min < 2 || cfg.views_min > cfg.views_max {
            return Err(Error::Config(format!(
                "multi-view range {}..={} invalid",
                cfg.views_min, cfg.views_max
            )));
        }
        if cfg.n_img < cfg.views_max {
            return Err(Error::Config(format!(
                "image budget {} smaller than the largest view count {}",
                cfg.n_img, cfg.views_max
            )));
        }
    }
    if cfg.accumulation == 0 || cfg.n_img == 0 {
        return Err(Error::Config("accumulation and n_img must be positive".into()));
    }

    let mut rng = SeededRng::new(seed);
    let mut spans = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut span = Vec::with_capacity(cfg.accumulation);
        for k in 0..cfg.accumulation {
            let source = match (cfg.include_single, cfg.include_multi) {
                (true, false) => SourceKind::Single,
                (false, true) => SourceKind::Multi,
                // Alternate within the span, starting from single.
                _ => {
                    if k % 2 == 0 {
                        SourceKind::Single
                    } else {
                        SourceKind::Multi
                    }
                }
            };
            let views = match source {
                SourceKind::Single => 1,
                SourceKind::Multi => rng.uniform_usize(cfg.views_min, cfg.views_max),
            };
            span.push(MicroStep {
                source,
                views,
                batch: cfg.n_img / views,
            });
        }
        spans.push(span);
    }
    Ok(BatchSchedule { spans })
}
