//! Subcommand implementations.

use crate::config::{resolve_out_dir, RunConfig};
use anyhow::{bail, Context, Result};
use mvhand_core::camera::project;
use mvhand_core::data::synth::overlay_joints;
use mvhand_core::data::{generate_batch, read_dataset, write_dataset, MultiViewSample};
use mvhand_core::hand::{build_toy_template, forward, HandParams, HandTemplate};
use mvhand_core::metrics::{evaluate_model, evaluate_pairs, EvalConfig, PredictedGeometry};
use mvhand_core::network::Model;
use mvhand_core::train::{checkpoint_load, checkpoint_save, Trainer, TrainSources};
use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::PathBuf;

fn template_from(cfg: &RunConfig) -> Result<HandTemplate> {
    match &cfg.template_asset {
        Some(path) => Ok(HandTemplate::load(path)?),
        None => Ok(build_toy_template(&cfg.generator.template)?),
    }
}

pub fn gen_data(
    out: PathBuf,
    num: usize,
    views_min: usize,
    views_max: usize,
    seed: u64,
    config: Option<PathBuf>,
) -> Result<()> {
    let out = resolve_out_dir(out);
    let mut cfg = RunConfig::load_or_default(config.as_deref())?;
    cfg.generator.views_min = views_min;
    cfg.generator.views_max = views_max;
    cfg.generator.validate()?;
    cfg.announce_and_echo(&out)?;

    let template = template_from(&cfg)?;
    let samples = generate_batch(num, seed, &cfg.generator, &template)?;
    write_dataset(&samples, &out, seed, &cfg.generator)?;
    println!(
        "wrote {num} samples ({views_min}..={views_max} views) to {}",
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn train(
    config: Option<PathBuf>,
    data_multi: Option<PathBuf>,
    data_single: Option<PathBuf>,
    out: PathBuf,
    steps: Option<usize>,
    seed: Option<u64>,
    resume: Option<PathBuf>,
) -> Result<()> {
    let out = resolve_out_dir(out);
    let mut cfg = RunConfig::load_or_default(config.as_deref())?;
    if let Some(steps) = steps {
        cfg.train.total_steps = steps;
    }
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    cfg.announce_and_echo(&out)?;

    let mut sources = TrainSources::default();
    if let Some(dir) = &data_multi {
        sources.multi = read_dataset(dir)?.1;
    }
    if let Some(dir) = &data_single {
        sources.single = read_dataset(dir)?.1;
    }
    if sources.multi.is_empty() && sources.single.is_empty() {
        bail!(mvhand_core::Error::Config(
            "train needs --data-multi and/or --data-single".into()
        ));
    }

    let mut trainer = match &resume {
        Some(ckpt_path) => {
            let loaded = checkpoint_load(ckpt_path)?;
            if config.is_some() {
                loaded.assert_model_config(&cfg.model)?;
            }
            loaded.into_trainer(&sources)?
        }
        None => {
            let model = Model::new(cfg.model.clone(), cfg.train.seed)?;
            let template = template_from(&cfg)?;
            let mut loss = cfg.loss.clone();
            loss.blocks = cfg.model.refine_blocks;
            Trainer::new(model, template, loss, cfg.train.clone(), &sources)?
        }
    };

    let log_path = out.join("train_log.jsonl");
    let mut log = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)?,
    );
    let ckpt_every = trainer.cfg.checkpoint_every_spans;
    while !trainer.is_finished() {
        let span_log = trainer.step_span(&sources)?;
        let mut record = serde_json::Map::new();
        record.insert("span".into(), span_log.span.into());
        record.insert("step".into(), span_log.step.into());
        record.insert("lr".into(), serde_json::json!(span_log.lr));
        record.insert("grad_norm".into(), serde_json::json!(span_log.grad_norm));
        for (k, v) in &span_log.terms {
            record.insert(k.clone(), v.clone());
        }
        writeln!(log, "{}", serde_json::Value::Object(record))?;
        if ckpt_every > 0 && (span_log.span + 1) % ckpt_every == 0 {
            checkpoint_save(&trainer, out.join(format!("ckpt_span{:06}.mvh", span_log.span)))?;
        }
    }
    log.flush()?;
    checkpoint_save(&trainer, out.join("ckpt_final.mvh"))?;
    println!(
        "trained {} micro-steps; final checkpoint at {}",
        trainer.completed_micro_steps(),
        out.join("ckpt_final.mvh").display()
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct PredictionRecord {
    sample_id: String,
    theta: Vec<f64>,
    beta: Vec<f64>,
    trans: [f64; 3],
}

pub fn eval(
    checkpoint: Option<PathBuf>,
    data: PathBuf,
    out: PathBuf,
    auc_threshold: f64,
    self_test: bool,
    predictions: Option<PathBuf>,
) -> Result<()> {
    let out = resolve_out_dir(out);
    let eval_cfg = EvalConfig {
        auc_threshold_mm: auc_threshold,
        ..Default::default()
    };
    println!(
        "resolved config:\n{}",
        serde_json::to_string_pretty(&eval_cfg)?
    );
    let (_, samples) = read_dataset(&data)?;

    let (report, template_note) = if self_test {
        // Ground truth evaluated as its own prediction.
        let template = build_toy_template(&Default::default())?;
        let preds = samples
            .iter()
            .map(|s| {
                let g = forward(&s.hand, &template)?;
                Ok(PredictedGeometry {
                    joints: g.joints,
                    vertices: g.vertices,
                })
            })
            .collect::<mvhand_core::Result<Vec<_>>>()?;
        let refs: Vec<&MultiViewSample> = samples.iter().collect();
        (evaluate_pairs(&preds, &refs, &template, &eval_cfg)?, "self-test")
    } else if let Some(pred_path) = predictions {
        let template = build_toy_template(&Default::default())?;
        let records: Vec<PredictionRecord> =
            serde_json::from_str(&std::fs::read_to_string(&pred_path)?)?;
        if records.len() != samples.len() {
            bail!(mvhand_core::Error::DatasetGlobal(format!(
                "{} predictions for {} samples",
                records.len(),
                samples.len()
            )));
        }
        let preds = records
            .iter()
            .map(|r| {
                let params = HandParams {
                    theta: r.theta.clone(),
                    beta: r.beta.clone(),
                    trans: r.trans,
                };
                let g = forward(&params, &template)?;
                Ok(PredictedGeometry {
                    joints: g.joints,
                    vertices: g.vertices,
                })
            })
            .collect::<mvhand_core::Result<Vec<_>>>()?;
        let refs: Vec<&MultiViewSample> = samples.iter().collect();
        (
            evaluate_pairs(&preds, &refs, &template, &eval_cfg)?,
            "external predictions",
        )
    } else {
        let ckpt = checkpoint.context("eval needs --checkpoint, --predictions, or --self-test")?;
        let loaded = checkpoint_load(&ckpt)?;
        (
            evaluate_model(&loaded.model, &loaded.template, &samples, &eval_cfg)?,
            "checkpoint",
        )
    };

    let mut doc = serde_json::to_value(&report)?;
    doc["mode"] = template_note.into();
    doc["auc_steps"] = eval_cfg.auc_steps.into();
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(&out, serde_json::to_string_pretty(&doc)?)?;
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(())
}

pub fn infer(checkpoint: PathBuf, images: PathBuf, out: PathBuf) -> Result<()> {
    let out = resolve_out_dir(out);
    let loaded = checkpoint_load(&checkpoint)?;
    let model = loaded.model;
    let template = loaded.template;
    println!(
        "resolved config:\n{}",
        serde_json::to_string_pretty(&model.config)?
    );
    std::fs::create_dir_all(&out)?;

    // Collect images sorted by filename; skip non-images with a warning.
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&images)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut views: Vec<Array3<u8>> = Vec::new();
    for path in &paths {
        match image::open(path) {
            Ok(img) => {
                let rgb = img.to_rgb8();
                views.push(Array3::from_shape_fn(
                    (rgb.height() as usize, rgb.width() as usize, 3),
                    |(y, x, c)| rgb.get_pixel(x as u32, y as u32).0[c],
                ));
            }
            Err(_) => eprintln!("warning: skipping non-image file {}", path.display()),
        }
    }
    if views.is_empty() {
        bail!(mvhand_core::Error::DatasetGlobal(format!(
            "no readable images in {}",
            images.display()
        )));
    }
    let (eh, ew) = model.config.image_size;
    for (i, v) in views.iter().enumerate() {
        if v.shape() != [eh, ew, 3] {
            bail!(mvhand_core::Error::DatasetGlobal(format!(
                "view {i} is {}x{}, model expects {eh}x{ew}",
                v.shape()[0],
                v.shape()[1]
            )));
        }
    }

    let s = views.len();
    let imgs = Array4::from_shape_fn((s, eh, ew, 3), |(v, y, x, c)| {
        views[v][[y, x, c]] as f64 / 255.0
    });
    let (output, _tape) = model.forward_full(&imgs)?;
    let (hand, cams) = output.final_values()?;
    let geo = forward(&hand, &template)?;

    let mut joints2d = Vec::with_capacity(s);
    for (v, cam) in cams.iter().enumerate() {
        let k = cam.intrinsics(ew, eh)?;
        let (px, z) = project(&geo.joints, &k, cam)?;
        let mut overlay = views[v].clone();
        overlay_joints(&mut overlay, &px, &z, 2.0);
        let path = out.join(format!("overlay_{v:03}.png"));
        let mut buf = image::RgbImage::new(ew as u32, eh as u32);
        for y in 0..eh {
            for x in 0..ew {
                buf.put_pixel(
                    x as u32,
                    y as u32,
                    image::Rgb([overlay[[y, x, 0]], overlay[[y, x, 1]], overlay[[y, x, 2]]]),
                );
            }
        }
        buf.save(&path).map_err(mvhand_core::Error::from)?;
        joints2d.push(
            (0..geo.joints.nrows())
                .map(|j| [px[[j, 0]], px[[j, 1]]])
                .collect::<Vec<_>>(),
        );
    }

    let doc = serde_json::json!({
        "hand": { "theta": hand.theta, "beta": hand.beta, "trans": hand.trans },
        "cameras": cams.iter().map(|c| c.to_vec9().to_vec()).collect::<Vec<_>>(),
        "joints3d": geo.joints.rows().into_iter()
            .map(|r| [r[0], r[1], r[2]]).collect::<Vec<_>>(),
        "joints2d": joints2d,
        "views": s,
    });
    std::fs::write(out.join("predictions.json"), serde_json::to_string_pretty(&doc)?)?;
    println!("wrote predictions and {s} overlays to {}", out.display());
    Ok(())
}
