// Per-op backward timing probe.
use boqsa_core::model::{ModelConfig, SceneModel};
use boqsa_core::rng::derive_rng;
use boqsa_core::scenegen::{generate, images_to_tensor, SceneConfig};
use boqsa_core::tensor::backward_profiled;

fn main() {
    let cfg = ModelConfig::desk(5, 32);
    let mut rng = derive_rng(1, "init", 0);
    let model = SceneModel::<f32>::new(cfg, &mut rng).unwrap();
    let params = model.params();
    let samples = generate(&SceneConfig::sprites4(1), 16).unwrap();
    let refs: Vec<&_> = samples.iter().collect();
    let images = images_to_tensor::<f32>(&refs);
    for _ in 0..2 {
        let mut r = derive_rng(1, "s", 0);
        let out = model.train_forward(&images, 0, &mut r).unwrap();
        backward_profiled(&out.loss).unwrap();
        params.zero_grads();
        println!("---");
    }
}
