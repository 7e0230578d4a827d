//! Evaluation over a dataset: per-image segmentation/reconstruction
//! metrics, zero-shot transfer, and the inference-iteration sweep.

use super::checkpoint::Checkpoint;
use super::train::model_from_checkpoint;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_image, MetricReport};
use crate::model::SceneModel;
use crate::rng::derive_rng;
use crate::scenegen::{images_to_tensor, SceneSample};
use std::path::Path;

pub const EVAL_BATCH: usize = 16;

/// Runs inference over the whole dataset and scores every image.
/// `t_override` replaces the configured refinement count.
pub fn evaluate(
    model: &SceneModel<f32>,
    dataset: &[SceneSample],
    t_override: Option<usize>,
    seed: u64,
    tag: &str,
) -> Result<MetricReport> {
    if dataset.is_empty() {
        return Err(Error::Config("empty evaluation dataset".into()));
    }
    if dataset[0].size != model.config.encoder.image_size {
        return Err(Error::Config(format!(
            "dataset is {}px but the checkpoint expects {}px",
            dataset[0].size, model.config.encoder.image_size
        )));
    }
    let k = model.config.slot.slots;
    let size = dataset[0].size;
    let hw = size * size;
    let mut report = MetricReport {
        rows: Vec::with_capacity(dataset.len()),
        tag: tag.to_string(),
    };
    for (bi, chunk) in dataset.chunks(EVAL_BATCH).enumerate() {
        let refs: Vec<&SceneSample> = chunk.iter().collect();
        let images = images_to_tensor::<f32>(&refs);
        let mut rng = derive_rng(seed, "eval-batch", bi as u64);
        let (_, decoded) = model.infer(&images, t_override, &mut rng)?;
        let masks = decoded.masks.data();
        let recon = decoded.recon.data();
        for (i, sample) in chunk.iter().enumerate() {
            let m = &masks[i * k * hw..(i + 1) * k * hw];
            let r = &recon[i * 3 * hw..(i + 1) * 3 * hw];
            report.rows.push(evaluate_image(m, k, r, sample));
        }
    }
    Ok(report)
}

pub fn evaluate_checkpoint(
    path: &Path,
    dataset: &[SceneSample],
    t_override: Option<usize>,
    seed: u64,
    tag: &str,
) -> Result<MetricReport> {
    let ck = Checkpoint::load(path)?;
    let (_, model) = model_from_checkpoint(&ck)?;
    evaluate(&model, dataset, t_override, seed, tag)
}

/// Zero-shot transfer: evaluation on a target dataset with no parameter
/// updates; the report is tagged "source->target".
pub fn transfer(
    model: &SceneModel<f32>,
    target: &[SceneSample],
    seed: u64,
    source_name: &str,
    target_name: &str,
) -> Result<MetricReport> {
    evaluate(
        model,
        target,
        None,
        seed,
        &format!("{source_name}->{target_name}"),
    )
}

/// Evaluates the same model under a range of inference iteration counts.
pub fn sweep_iters(
    model: &SceneModel<f32>,
    dataset: &[SceneSample],
    t_min: usize,
    t_max: usize,
    seed: u64,
) -> Result<Vec<(usize, MetricReport)>> {
    if t_min < 1 || t_min > t_max {
        return Err(Error::Config(format!(
            "bad iteration range {t_min}..={t_max}"
        )));
    }
    let mut out = Vec::new();
    for t in t_min..=t_max {
        let report = evaluate(model, dataset, Some(t), seed, &format!("t={t}"))?;
        out.push((t, report));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::TrainConfig;
    use crate::model::SceneModel;
    use crate::scenegen::{generate, SceneConfig};

    fn fresh_model(k: usize) -> SceneModel<f32> {
        let cfg = TrainConfig::desk(k);
        let mut rng = derive_rng(3, "model-init", 0);
        SceneModel::new(cfg.model_config(), &mut rng).unwrap()
    }

    #[test]
    fn report_has_row_per_image() {
        let data = generate(&SceneConfig::sprites4(1), 33).unwrap();
        let model = fresh_model(5);
        let report = evaluate(&model, &data, None, 0, "unit").unwrap();
        assert_eq!(report.rows.len(), 33);
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 1 + 33 + 3);
    }

    #[test]
    fn sweep_emits_identical_image_counts() {
        let data = generate(&SceneConfig::sprites4(2), 20).unwrap();
        let model = fresh_model(5);
        let sweep = sweep_iters(&model, &data, 1, 5, 0).unwrap();
        assert_eq!(sweep.len(), 5);
        for (t, report) in &sweep {
            assert!(*t >= 1 && *t <= 5);
            assert_eq!(report.rows.len(), 20);
        }
    }

    #[test]
    fn transfer_equals_direct_evaluation() {
        // degenerate transfer onto the training set is the same computation
        let data = generate(&SceneConfig::sprites2(3), 16).unwrap();
        let model = fresh_model(3);
        let a = evaluate(&model, &data, None, 7, "x").unwrap();
        let b = transfer(&model, &data, 7, "sprites2", "sprites2").unwrap();
        assert_eq!(b.tag, "sprites2->sprites2");
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.ari_fg, rb.ari_fg);
            assert_eq!(ra.mse_per_pixel, rb.mse_per_pixel);
        }
        // transfer across compatible presets stays in metric range
        let target = generate(&SceneConfig::sprites4(4), 12).unwrap();
        let t = transfer(&model, &target, 7, "sprites2", "sprites4").unwrap();
        let miou = t.mean("miou");
        assert!((0.0..=1.0).contains(&miou));
    }

    #[test]
    fn incompatible_geometry_is_config_error() {
        let model = fresh_model(3);
        let mut cfg = SceneConfig::sprites2(5);
        cfg.image_size = 16;
        cfg.min_radius = 2;
        cfg.max_radius = 4;
        let data = generate(&cfg, 4).unwrap();
        assert!(matches!(
            evaluate(&model, &data, None, 0, "bad"),
            Err(Error::Config(_))
        ));
    }
}
