// Single-cell training probe: desk preset on sprites4.
use boqsa_core::harness::{evaluate, train, TrainConfig};
use boqsa_core::model::SceneModel;
use boqsa_core::rng::derive_rng;
use boqsa_core::scenegen::{generate, SceneConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cell = args.get(1).map(|s| s.as_str()).unwrap_or("BO-QSA");
    let steps: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(8000);

    let train_data = generate(&SceneConfig::sprites4(100), 5000).unwrap();
    let eval_data = generate(&SceneConfig::sprites4(200), 500).unwrap();

    let mut cfg = TrainConfig::desk(5);
    cfg.apply_kv("model.cell", cell).unwrap();
    cfg.max_steps = steps;
    cfg.seed = 1000;

    // untrained baseline
    let mut rng = derive_rng(cfg.seed, "model-init", 0);
    let fresh = SceneModel::<f32>::new(cfg.model_config(), &mut rng).unwrap();
    let base = evaluate(&fresh, &eval_data, None, cfg.seed, "untrained").unwrap();
    println!("untrained: ari_fg {:.4}  msc {:.4}  miou {:.4}  mse_tot {:.3}",
        base.mean("ari_fg"), base.mean("msc_fg"), base.mean("miou"), base.mean("mse_slate"));

    let dir = std::env::temp_dir().join(format!("boqsa_learn_{cell}"));
    let _ = std::fs::remove_dir_all(&dir);
    let t0 = Instant::now();
    let out = train(&cfg, &train_data, &dir).unwrap();
    let mins = t0.elapsed().as_secs_f64() / 60.0;
    for l in out.log.iter().step_by(4) {
        println!("  step {:>5} loss {:.5} ms {:.0}", l.step, l.loss, l.millis);
    }
    let report = evaluate(&out.model, &eval_data, None, cfg.seed, cell).unwrap();
    println!("{cell} after {steps} steps ({mins:.1} min): ari_fg {:.4}  msc {:.4}  miou {:.4}  dice {:.4}  mse_tot {:.3}",
        report.mean("ari_fg"), report.mean("msc_fg"), report.mean("miou"), report.mean("dice"), report.mean("mse_slate"));
    // iteration sweep on the trained model
    for (t, r) in boqsa_core::harness::sweep_iters(&out.model, &eval_data, 1, 5, cfg.seed).unwrap() {
        println!("  T_test={t}: ari_fg {:.4}", r.mean("ari_fg"));
    }
    let _ = std::fs::remove_dir_all(&dir);
}
