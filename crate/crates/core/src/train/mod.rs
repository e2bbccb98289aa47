//! The optimization loop.
//!
//! Each weight update (span) accumulates gradients over `accumulation`
//! micro-steps. A micro-step draws either single-view or multi-view samples
//! under a constant image budget (B = floor(n_img / S)); the per-sample
//! forward/backward passes of a span run in parallel and their gradients are
//! reduced in a fixed order, so training is bit-deterministic for a fixed seed
//! regardless of thread count. The summed gradient is averaged, clipped to a
//! global L2 norm, and applied by a decoupled-weight-decay AdamW step; the
//! learning rate follows warmup + cosine over the micro-step budget and
//! advances once per span.
//!
//! `total_steps` counts micro-steps (accumulation iterations), mirroring how
//! the full-scale schedule is stated; the number of weight updates is
//! `total_steps / accumulation`.

pub mod checkpoint;
pub mod lr;
pub mod optim;

pub use checkpoint::{checkpoint_load, checkpoint_save, LoadedCheckpoint};
pub use lr::lr_at;
pub use optim::{clip_global_norm, global_grad_norm, AdamW};

use crate::data::{build_schedule, BatchSchedule, MultiViewSample, ScheduleConfig, SourceKind};
use crate::error::{Error, Result};
use crate::hand::HandTemplate;
use crate::losses::{total_loss, LossConfig, LossReport, SupervisionFlags};
use crate::network::Model;
use crate::par;
use crate::rng::SeededRng;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Micro-step budget (accumulation iterations).
    pub total_steps: usize,
    pub warmup_fraction: f64,
    pub lr_peak: f64,
    /// Floor learning rate as a fraction of the peak.
    pub lr_floor_factor: f64,
    pub weight_decay: f64,
    /// Global gradient L2 norm cap.
    pub clip_norm: f64,
    /// Micro-steps per weight update.
    pub accumulation: usize,
    /// Image budget per micro-step.
    pub n_img: usize,
    /// View-count range for multi-view micro-steps.
    pub views_min: usize,
    pub views_max: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Synthesize single-view micro-steps by truncating multi-view samples to
    /// their first view when no single-view dataset is supplied.
    pub single_from_multi: bool,
    /// Truncated single-view samples keep only 2D supervision.
    pub single_drop_3d: bool,
    /// Spans between periodic checkpoints (0 = final checkpoint only).
    pub checkpoint_every_spans: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 2000,
            warmup_fraction: 0.05,
            lr_peak: 1e-4,
            lr_floor_factor: 0.01,
            weight_decay: 0.05,
            clip_norm: 1.0,
            accumulation: 4,
            n_img: 16,
            views_min: 2,
            views_max: 10,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            single_from_multi: true,
            single_drop_3d: true,
            checkpoint_every_spans: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config("warmup_fraction must lie in (0, 1)".into()));
        }
        if self.clip_norm <= 0.0 || self.lr_peak <= 0.0 || self.accumulation == 0 {
            return Err(Error::Config(
                "clip_norm, lr_peak, and accumulation must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn spans(&self) -> usize {
        self.total_steps.div_ceil(self.accumulation)
    }
}

/// Training datasets. Single-view micro-steps fall back to truncated
/// multi-view samples when `single` is empty (and the config allows it).
#[derive(Default)]
pub struct TrainSources {
    pub single: Vec<MultiViewSample>,
    pub multi: Vec<MultiViewSample>,
}

impl TrainSources {
    pub fn max_multi_views(&self) -> usize {
        self.multi.iter().map(|s| s.view_count()).max().unwrap_or(0)
    }
}

/// One log record per weight update; serialized as one JSON line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpanLog {
    pub span: usize,
    /// Micro-steps completed after this span.
    pub step: usize,
    pub lr: f64,
    pub grad_norm: f64,
    /// Mean total loss over the span's passes.
    pub total: f64,
    /// Key-wise mean of the per-pass loss records.
    pub terms: serde_json::Map<String, serde_json::Value>,
}

struct Pass {
    sample: MultiViewSample,
    scale: f64,
    micro_index: usize,
    source: SourceKind,
}

pub struct Trainer {
    pub model: Model,
    pub template: HandTemplate,
    pub loss_cfg: LossConfig,
    pub cfg: TrainConfig,
    pub optimizer: AdamW,
    schedule: BatchSchedule,
    data_rng: SeededRng,
    span_idx: usize,
}

/// Passes per parallel wave; fixed so gradient reduction order (and therefore
/// every bit of the run) is independent of the worker count.
const PASS_CHUNK: usize = 4;

impl Trainer {
    pub fn new(
        model: Model,
        template: HandTemplate,
        loss_cfg: LossConfig,
        cfg: TrainConfig,
        sources: &TrainSources,
    ) -> Result<Self> {
        cfg.validate()?;
        loss_cfg.validate()?;
        let include_single = !sources.single.is_empty() || cfg.single_from_multi;
        let include_multi = !sources.multi.is_empty();
        if sources.single.is_empty() && sources.multi.is_empty() {
            return Err(Error::Config("no samples to draw from".into()));
        }
        let views_max = cfg.views_max.min(sources.max_multi_views().max(2));
        let views_min = cfg.views_min.min(views_max);
        let schedule_cfg = ScheduleConfig {
            n_img: cfg.n_img,
            include_single,
            include_multi,
            views_min,
            views_max,
            accumulation: cfg.accumulation,
        };
        let schedule = build_schedule(&schedule_cfg, cfg.spans(), cfg.seed ^ 0x5eed_5eed)?;
        let optimizer = AdamW::new(model.params(), cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
        let data_rng = SeededRng::new(cfg.seed);
        Ok(Self {
            model,
            template,
            loss_cfg,
            cfg,
            optimizer,
            schedule,
            data_rng,
            span_idx: 0,
        })
    }

    pub fn span_index(&self) -> usize {
        self.span_idx
    }

    pub fn completed_micro_steps(&self) -> usize {
        (self.span_idx * self.cfg.accumulation).min(self.cfg.total_steps)
    }

    pub fn is_finished(&self) -> bool {
        self.span_idx >= self.cfg.spans()
    }

    pub(crate) fn restore_state(
        &mut self,
        span_idx: usize,
        rng_state: crate::rng::RngState,
        adam_t: u64,
        adam_m: Vec<ArrayD<f64>>,
        adam_v: Vec<ArrayD<f64>>,
    ) {
        self.span_idx = span_idx;
        self.data_rng = SeededRng::restore(rng_state);
        self.optimizer.t = adam_t;
        self.optimizer.m = adam_m;
        self.optimizer.v = adam_v;
    }

    pub(crate) fn state_for_checkpoint(&self) -> (usize, crate::rng::RngState, &AdamW) {
        (self.span_idx, self.data_rng.state(), &self.optimizer)
    }

    /// Draw a single-view sample for a micro-step.
    fn draw_single(&mut self, sources: &TrainSources) -> Result<MultiViewSample> {
        if !sources.single.is_empty() {
            let i = self.data_rng.uniform_usize(0, sources.single.len() - 1);
            return Ok(sources.single[i].clone());
        }
        if !self.cfg.single_from_multi || sources.multi.is_empty() {
            return Err(Error::Config(
                "single-view micro-step without a single-view source".into(),
            ));
        }
        let i = self.data_rng.uniform_usize(0, sources.multi.len() - 1);
        let mut truncated = sources.multi[i].subset_views(&[0])?;
        truncated.flags = if self.cfg.single_drop_3d {
            SupervisionFlags::joints2d_only(false)
        } else {
            SupervisionFlags::full(false)
        };
        Ok(truncated)
    }

    /// Draw a multi-view sample with exactly `views` views (random subset,
    /// random reference view).
    fn draw_multi(&mut self, sources: &TrainSources, views: usize) -> Result<MultiViewSample> {
        let candidates: Vec<usize> = sources
            .multi
            .iter()
            .enumerate()
            .filter(|(_, s)| s.view_count() >= views)
            .map(|(i, _)| i)
            .collect();
        if candidates.is_empty() {
            return Err(Error::Config(format!(
                "no multi-view sample has {views} views"
            )));
        }
        let pick = candidates[self.data_rng.uniform_usize(0, candidates.len() - 1)];
        let sample = &sources.multi[pick];
        if sample.view_count() == views {
            return Ok(sample.clone());
        }
        // Partial Fisher-Yates draw of a random view subset.
        let mut indices: Vec<usize> = (0..sample.view_count()).collect();
        for k in 0..views {
            let j = self.data_rng.uniform_usize(k, indices.len() - 1);
            indices.swap(k, j);
        }
        sample.subset_views(&indices[..views])
    }

    /// Run one accumulation span: forward/backward over all of its passes,
    /// average, clip, and apply one optimizer update.
    pub fn step_span(&mut self, sources: &TrainSources) -> Result<SpanLog> {
        if self.is_finished() {
            return Err(Error::invalid("training already finished"));
        }
        let span = self.schedule.spans[self.span_idx].clone();
        let accum = span.len() as f64;

        // All randomness happens up front on one thread.
        let mut passes: Vec<Pass> = Vec::new();
        for (mi, micro) in span.iter().enumerate() {
            let scale = 1.0 / (accum * micro.batch as f64);
            for _ in 0..micro.batch {
                let sample = match micro.source {
                    SourceKind::Single => self.draw_single(sources)?,
                    SourceKind::Multi => self.draw_multi(sources, micro.views)?,
                };
                passes.push(Pass {
                    sample,
                    scale,
                    micro_index: mi,
                    source: micro.source,
                });
            }
        }

        let param_shapes: Vec<Vec<usize>> =
            self.model.params().iter().map(|p| p.shape()).collect();
        let mut grad_acc: Vec<ArrayD<f64>> = param_shapes
            .iter()
            .map(|s| ArrayD::zeros(IxDyn(s)))
            .collect();
        let mut reports: Vec<LossReport> = Vec::with_capacity(passes.len());

        let model = &self.model;
        let template = &self.template;
        let loss_cfg = &self.loss_cfg;
        for wave in passes.chunks(PASS_CHUNK) {
            let results: Vec<Result<(Vec<ArrayD<f64>>, LossReport)>> =
                par::map_ordered(wave, |pass| {
                    let images = pass.sample.images_f64();
                    let (out, tape) = model.forward_full(&images)?;
                    let (loss, report) = total_loss(&out, &pass.sample, template, loss_cfg)?;
                    loss.backward();
                    let mut buf: Vec<ArrayD<f64>> = param_shapes
                        .iter()
                        .map(|s| ArrayD::zeros(IxDyn(s)))
                        .collect();
                    tape.scaled_grads_into(pass.scale, &mut buf);
                    Ok((buf, report))
                });
            for (result, pass) in results.into_iter().zip(wave) {
                let (grads, report) = result.map_err(|e| match e {
                    Error::NonFinite(_) => Error::NonFiniteLoss {
                        step: self.span_idx * self.cfg.accumulation + pass.micro_index,
                        micro_step: pass.micro_index,
                        source_kind: format!("{:?}", pass.source),
                    },
                    other => other,
                })?;
                for (acc, g) in grad_acc.iter_mut().zip(grads) {
                    *acc += &g;
                }
                reports.push(report);
            }
        }

        let grad_norm = clip_global_norm(&mut grad_acc, self.cfg.clip_norm);
        let lr = lr_at(
            (self.span_idx * self.cfg.accumulation).min(self.cfg.total_steps),
            &self.cfg,
        )?;
        self.optimizer.step(self.model.params(), &grad_acc, lr);
        self.span_idx += 1;

        let total = reports.iter().map(|r| r.total).sum::<f64>() / reports.len() as f64;
        Ok(SpanLog {
            span: self.span_idx - 1,
            step: self.completed_micro_steps(),
            lr,
            grad_norm,
            total,
            terms: mean_records(&reports),
        })
    }

    /// Run the remaining spans, invoking `on_span` after each update.
    pub fn run(
        &mut self,
        sources: &TrainSources,
        mut on_span: impl FnMut(&SpanLog) -> Result<()>,
    ) -> Result<()> {
        while !self.is_finished() {
            let log = self.step_span(sources)?;
            on_span(&log)?;
        }
        Ok(())
    }
}

/// Key-wise mean over the flat loss records of a set of passes.
fn mean_records(reports: &[LossReport]) -> serde_json::Map<String, serde_json::Value> {
    let mut sums: std::collections::BTreeMap<String, (f64, usize)> = Default::default();
    for r in reports {
        for (k, v) in r.flat_record() {
            if let Some(x) = v.as_f64() {
                let e = sums.entry(k).or_insert((0.0, 0));
                e.0 += x;
                e.1 += 1;
            }
        }
    }
    sums.into_iter()
        .map(|(k, (sum, n))| {
            (
                k,
                serde_json::Value::Number(
                    serde_json::Number::from_f64(sum / n as f64).unwrap(),
                ),
            )
        })
        .collect()
}
