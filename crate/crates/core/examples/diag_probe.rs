//! Per-term gradient diagnostics at init.
use mvhand_core::data::synth::{generate_batch, GenConfig};
use mvhand_core::hand::{build_toy_template, forward_t, TemplateConfig};
use mvhand_core::losses::*;
use mvhand_core::network::{Model, ModelConfig};
use mvhand_core::tensor::Tensor;
use ndarray::{ArrayD, IxDyn};

fn main() {
    let template = build_toy_template(&TemplateConfig::default()).unwrap();
    let gen = GenConfig { views_min: 4, views_max: 4, ..Default::default() };
    let samples = generate_batch(8, 1234, &gen, &template).unwrap();
    let model = Model::new(ModelConfig::default(), 42).unwrap();
    let cfg = LossConfig::default();

    for (name, which) in [("hand", 0), ("cam", 1), ("reproj", 2), ("neg", 3), ("total", 4)] {
        for sample in &samples[..3] {
            let (out, tape) = model.forward_full(&sample.images_f64()).unwrap();
            let loss: Tensor = match which {
                0 => {
                    let b = out.final_block();
                    let (j, _) = forward_t(&b.hand, &template, false);
                    hand_loss(&b.hand, &j, &sample.hand, &sample.joints3d, &sample.flags, &cfg)
                        .unwrap().weighted
                }
                1 => camera_loss(&out.final_block().cams, &sample.cams, &cfg).unwrap().scaled,
                2 => {
                    let b = out.final_block();
                    let (j, _) = forward_t(&b.hand, &template, false);
                    reprojection_loss(&j, &b.cams, &sample.joints2d, &sample.flags, &cfg, sample.image_size())
                        .unwrap().weighted
                }
                3 => {
                    let b = out.final_block();
                    let (j, _) = forward_t(&b.hand, &template, false);
                    let r = reprojection_loss(&j, &b.cams, &sample.joints2d, &sample.flags, &cfg, sample.image_size()).unwrap();
                    negative_depth_penalty(&r.depths)
                }
                _ => total_loss(&out, sample, &template, &cfg).unwrap().0,
            };
            loss.backward();
            let mut buf: Vec<ArrayD<f64>> = model.params().iter()
                .map(|p| ArrayD::zeros(IxDyn(&p.shape()))).collect();
            tape.scaled_grads_into(1.0, &mut buf);
            let norm: f64 = buf.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
            print!("  {name}: loss {:10.3} gnorm {:12.1}", loss.scalar(), norm);
        }
        println!();
    }

    let (out, _) = model.forward_full(&samples[0].images_f64()).unwrap();
    let (_, cams) = out.final_values().unwrap();
    for (v, (p, g)) in cams.iter().zip(&samples[0].cams).enumerate() {
        let d = mvhand_core::camera::geodesic_distance(
            &p.rotation().unwrap(), &g.rotation().unwrap()).unwrap();
        println!("view {v}: init rotation error {:.1} deg", d.to_degrees());
    }
}
