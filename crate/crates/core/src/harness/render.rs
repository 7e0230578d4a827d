//! Visualization: one PNG per sample with input, reconstruction, and the
//! K slot masks side by side. The slot whose mask best covers the
//! ground-truth background is drawn in black; other slots get palette
//! colors; pixels outside a panel's own region stay white.

use super::eval::EVAL_BATCH;
use crate::error::{Error, Result};
use crate::metrics::{argmax_labels, background_slot};
use crate::model::SceneModel;
use crate::rng::derive_rng;
use crate::scenegen::{images_to_tensor, SceneSample, DEFAULT_PALETTE};
use std::path::Path;

fn put_pixel(buf: &mut [u8], width: usize, x: usize, y: usize, rgb: [u8; 3]) {
    let p = (y * width + x) * 3;
    buf[p..p + 3].copy_from_slice(&rgb);
}

/// Renders `count` samples (or the whole dataset) to
/// `out_dir/render_NNNNN.png`, each sized H x W*(K+2).
pub fn render(
    model: &SceneModel<f32>,
    dataset: &[SceneSample],
    out_dir: &Path,
    count: usize,
    seed: u64,
) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let k = model.config.slot.slots;
    let size = model.config.encoder.image_size;
    let hw = size * size;
    let n = count.min(dataset.len());

    for (bi, chunk) in dataset[..n].chunks(EVAL_BATCH).enumerate() {
        let refs: Vec<&SceneSample> = chunk.iter().collect();
        let images = images_to_tensor::<f32>(&refs);
        let mut rng = derive_rng(seed, "render", bi as u64);
        let (_, decoded) = model.infer(&images, None, &mut rng)?;
        let masks = decoded.masks.data();
        let recon = decoded.recon.data();

        for (i, sample) in chunk.iter().enumerate() {
            let idx = bi * EVAL_BATCH + i;
            let m = &masks[i * k * hw..(i + 1) * k * hw];
            let pred = argmax_labels(m, k, hw);
            let bg_slot = background_slot(&pred, k, &sample.background_mask());

            let width = size * (k + 2);
            let mut buf = vec![255u8; width * size * 3];
            // panel 0: input
            for y in 0..size {
                for x in 0..size {
                    let p = (y * size + x) * 3;
                    put_pixel(
                        &mut buf,
                        width,
                        x,
                        y,
                        [sample.rgb[p], sample.rgb[p + 1], sample.rgb[p + 2]],
                    );
                }
            }
            // panel 1: reconstruction
            let r = &recon[i * 3 * hw..(i + 1) * 3 * hw];
            for y in 0..size {
                for x in 0..size {
                    let p = y * size + x;
                    let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                    put_pixel(
                        &mut buf,
                        width,
                        size + x,
                        y,
                        [to_u8(r[p]), to_u8(r[hw + p]), to_u8(r[2 * hw + p])],
                    );
                }
            }
            // panels 2..K+2: per-slot argmax regions
            for ki in 0..k {
                let color = if ki == bg_slot {
                    [0u8, 0, 0]
                } else {
                    DEFAULT_PALETTE[ki % DEFAULT_PALETTE.len()]
                };
                for y in 0..size {
                    for x in 0..size {
                        if pred[y * size + x] as usize == ki {
                            put_pixel(&mut buf, width, (ki + 2) * size + x, y, color);
                        }
                    }
                }
            }

            let path = out_dir.join(format!("render_{idx:05}.png"));
            image::save_buffer(
                &path,
                &buf,
                width as u32,
                size as u32,
                image::ExtendedColorType::Rgb8,
            )
            .map_err(|e| Error::Image {
                path: path.clone(),
                source: e,
            })?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::TrainConfig;
    use crate::scenegen::{generate, SceneConfig};

    #[test]
    fn renders_expected_layout_and_partition() {
        let data = generate(&SceneConfig::sprites4(21), 3).unwrap();
        let cfg = TrainConfig::desk(5);
        let mut rng = derive_rng(2, "model-init", 0);
        let model = SceneModel::<f32>::new(cfg.model_config(), &mut rng).unwrap();
        let dir = std::env::temp_dir().join(format!("boqsa_render_{}", std::process::id()));
        render(&model, &data, &dir, 3, 0).unwrap();

        for idx in 0..3 {
            let path = dir.join(format!("render_{idx:05}.png"));
            let img = image::open(&path).unwrap().into_rgb8();
            assert_eq!(img.width(), 32 * 7, "input + recon + 5 slot panels");
            assert_eq!(img.height(), 32);

            // each pixel is claimed by exactly one slot panel (non-white)
            for y in 0..32u32 {
                for x in 0..32u32 {
                    let mut claimed = 0;
                    for ki in 0..5u32 {
                        let px = img.get_pixel((ki + 2) * 32 + x, y);
                        if px.0 != [255, 255, 255] {
                            claimed += 1;
                        }
                    }
                    assert_eq!(claimed, 1, "pixel ({x},{y}) claimed {claimed} times");
                }
            }
        }
        let _ = std::fs::remove_dir_all(&dir);
    }
}
