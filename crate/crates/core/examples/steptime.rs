// Desk-scale step timing probe.
use boqsa_core::model::{ModelConfig, SceneModel};
use boqsa_core::rng::derive_rng;
use boqsa_core::scenegen::{generate, images_to_tensor, SceneConfig};
use boqsa_core::slot::RunMode;
use boqsa_core::tensor::backward;
use std::time::Instant;

fn time(label: &str, f: &mut dyn FnMut()) -> f64 {
    for _ in 0..2 { f(); }
    let t0 = Instant::now();
    let n = 25;
    for _ in 0..n { f(); }
    let ms = t0.elapsed().as_secs_f64() * 1000.0 / n as f64;
    println!("{label:<24} {ms:7.2} ms");
    ms
}

fn main() {
    let cfg = ModelConfig::desk(5, 32);
    let mut rng = derive_rng(1, "init", 0);
    let model = SceneModel::<f32>::new(cfg, &mut rng).unwrap();
    let params = model.params();
    println!("params: {} elements", params.total_elements());

    let samples = generate(&SceneConfig::sprites4(1), 16).unwrap();
    let refs: Vec<&_> = samples.iter().collect();
    let images = images_to_tensor::<f32>(&refs);
    let mut srng = derive_rng(1, "s", 0);

    time("encode fwd", &mut || { let _ = model.encoder.forward(&images).unwrap(); });
    let feats = model.encoder.forward(&images).unwrap();
    time("slot fwd (train)", &mut || {
        let _ = model.slot_attn.run(&feats, 0, &mut srng, RunMode::Train, None).unwrap();
    });
    let state = model.slot_attn.run(&feats, 0, &mut srng, RunMode::Train, None).unwrap();
    time("decode fwd", &mut || { let _ = model.decoder.forward(&state.slots).unwrap(); });
    time("full fwd", &mut || {
        let mut r = derive_rng(1, "s", 1);
        let _ = model.train_forward(&images, 0, &mut r).unwrap();
    });
    let step_ms = time("fwd+bwd", &mut || {
        let mut r = derive_rng(1, "s", 1);
        let out = model.train_forward(&images, 0, &mut r).unwrap();
        backward(&out.loss).unwrap();
        params.zero_grads();
    });
    println!("-> run (8k steps): {:.1} min | 18 runs: {:.1} min",
        step_ms * 8.0 / 60.0, step_ms * 8.0 * 18.0 / 60.0);
    let t0 = Instant::now();
    for i in 0..10u64 {
        let mut r = derive_rng(2, "eval", i);
        let _ = model.infer(&images, None, &mut r).unwrap();
    }
    println!("infer batch-16: {:.1} ms", t0.elapsed().as_secs_f64() * 100.0);
}
