//! Overfit convergence probe: train on a small fixed sample set and report
//! metrics. Knobs via env: STEPS, LR, ACCUM, NIMG, SEED, SAMPLES, VIEWS.
use mvhand_core::data::synth::{generate_batch, GenConfig};
use mvhand_core::hand::{build_toy_template, TemplateConfig};
use mvhand_core::losses::LossConfig;
use mvhand_core::metrics::{evaluate_model, EvalConfig};
use mvhand_core::network::{Model, ModelConfig};
use mvhand_core::train::{TrainConfig, Trainer, TrainSources};
use mvhand_core::camera::geodesic_distance;

fn env<T: std::str::FromStr>(k: &str, d: T) -> T {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}

fn main() {
    let steps: usize = env("STEPS", 300);
    let lr: f64 = env("LR", 1e-3);
    let accum: usize = env("ACCUM", 2);
    let n_img: usize = env("NIMG", 4);
    let seed: u64 = env("SEED", 42);
    let n_samples: usize = env("SAMPLES", 8);
    let views: usize = env("VIEWS", 4);
    let beta2: f64 = env("BETA2", 0.999);
    let zero_init: usize = env("ZEROINIT", 1);

    let template = build_toy_template(&TemplateConfig::default()).unwrap();
    let gen = GenConfig { views_min: views, views_max: views, ..Default::default() };
    let multi = generate_batch(n_samples, 1234, &gen, &template).unwrap();
    let sources = TrainSources { single: vec![], multi: multi.clone() };

    let model = Model::new(ModelConfig { zero_init_heads: zero_init == 1, ..Default::default() }, seed).unwrap();
    let cfg = TrainConfig {
        total_steps: steps,
        accumulation: accum,
        n_img,
        views_min: views,
        views_max: views,
        lr_peak: lr,
        seed,
        beta2,
        single_from_multi: false,
        ..Default::default()
    };
    let mut trainer = Trainer::new(model, template.clone(), LossConfig::default(), cfg, &sources).unwrap();

    let t0 = std::time::Instant::now();
    let mut first_loss = None;
    while !trainer.is_finished() {
        let log = trainer.step_span(&sources).unwrap();
        if first_loss.is_none() { first_loss = Some(log.total); }
        if log.span % 50 == 0 || trainer.is_finished() {
            let g = |k: &str| log.terms.get(k).and_then(|v| v.as_f64()).unwrap_or(-1.0);
            println!(
                "span {:4} step {:5} lr {:.2e} loss {:9.3} gnorm {:9.1} | pose {:.3} j3d {:.4} camT {:.3} camR {:.3} camF {:.4} reproj {:.1} neg {:.4} [{:.0}s]",
                log.span, log.step, log.lr, log.total, log.grad_norm,
                g("hand_pose_l4"), g("hand_j3d_l4"), g("cam_t_l4"), g("cam_r_l4"),
                g("cam_f_l4"), g("reproj"), g("neg_depth"),
                t0.elapsed().as_secs_f64()
            );
        }
    }
    let report = evaluate_model(&trainer.model, &template, &multi, &EvalConfig::default()).unwrap();
    // camera rotation errors on the training set
    let mut worst_rot: f64 = 0.0;
    for s in &multi {
        let (out, _) = trainer.model.forward_full(&s.images_f64()).unwrap();
        let (_, cams) = out.final_values().unwrap();
        for (p, g) in cams.iter().zip(&s.cams).skip(1) {
            let d = geodesic_distance(&p.rotation().unwrap(), &g.rotation().unwrap()).unwrap();
            worst_rot = worst_rot.max(d.to_degrees());
        }
    }
    println!(
        "FINAL rr_mpjpe {:.2}mm pa_mpjpe {:.2}mm rr_mpvpe {:.2} pa_mpvpe {:.2} auc_j {:.3} worst_rot {:.1}deg  wall {:.0}s",
        report.rr_mpjpe_mm, report.pa_mpjpe_mm, report.rr_mpvpe_mm, report.pa_mpvpe_mm,
        report.auc_j, worst_rot, t0.elapsed().as_secs_f64()
    );
}
