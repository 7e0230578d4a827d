//! Deterministic multi-sprite scene generator with exact instance masks.
//!
//! Rasterization is integer-only, colors are 8-bit, and every draw comes
//! from a per-sample derived stream, so a (config, seed) pair produces the
//! same bytes on every platform and in any generation order. Occlusion is
//! resolved by draw order (later sprites on top) and masks cover visible
//! pixels only; a placement that leaves any sprite fully hidden is retried
//! with a fresh derived stream.

use crate::error::{Error, Result};
use crate::rng::derive_rng;
use crate::tensor::{Element, Tensor};
use rand::Rng;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const DEFAULT_PALETTE: [[u8; 3]; 8] = [
    [230, 25, 25],   // red
    [25, 200, 25],   // green
    [40, 70, 245],   // blue
    [240, 230, 30],  // yellow
    [235, 45, 235],  // magenta
    [40, 230, 230],  // cyan
    [245, 140, 20],  // orange
    [150, 60, 240],  // purple
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpriteShape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub image_size: usize,
    pub min_sprites: usize,
    pub max_sprites: usize,
    pub min_radius: usize,
    pub max_radius: usize,
    pub palette: Vec<[u8; 3]>,
    pub allow_overlap: bool,
    pub seed: u64,
}

impl SceneConfig {
    /// Two sprites per scene; pairs with K=3 models (foreground-extraction
    /// style scenes).
    pub fn sprites2(seed: u64) -> Self {
        SceneConfig {
            image_size: 32,
            min_sprites: 2,
            max_sprites: 2,
            min_radius: 4,
            max_radius: 7,
            palette: DEFAULT_PALETTE.to_vec(),
            allow_overlap: true,
            seed,
        }
    }

    /// Two to four sprites per scene; pairs with K=5 models (multi-object
    /// segmentation style scenes).
    pub fn sprites4(seed: u64) -> Self {
        SceneConfig {
            min_sprites: 2,
            max_sprites: 4,
            ..Self::sprites2(seed)
        }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "sprites2" => Ok(Self::sprites2(seed)),
            "sprites4" => Ok(Self::sprites4(seed)),
            other => Err(Error::Config(format!(
                "unknown scene preset {other:?}; expected sprites2 or sprites4"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_sprites < 1
            || self.min_sprites > self.max_sprites
            || self.min_radius < 1
            || self.min_radius > self.max_radius
            || self.palette.len() < self.max_sprites
            || 2 * self.max_radius + 1 > self.image_size
        {
            return Err(Error::Config(format!(
                "invalid scene config: sprites [{}, {}], radius [{}, {}], palette {} on {}px",
                self.min_sprites,
                self.max_sprites,
                self.min_radius,
                self.max_radius,
                self.palette.len(),
                self.image_size
            )));
        }
        Ok(())
    }
}

/// One scene: interleaved RGB8 pixels plus a per-pixel instance label
/// (0 = background, i+1 = sprite i). Labels partition the pixel grid.
#[derive(Clone, PartialEq, Eq)]
pub struct SceneSample {
    pub size: usize,
    pub rgb: Vec<u8>,
    pub labels: Vec<u8>,
    pub n_sprites: usize,
}

impl std::fmt::Debug for SceneSample {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "SceneSample[{}x{}, {} sprites]",
            self.size, self.size, self.n_sprites
        )
    }
}

impl SceneSample {
    /// Image as a `[3, H, W]` tensor in [0, 1].
    pub fn image_tensor<E: Element>(&self) -> Tensor<E> {
        let hw = self.size * self.size;
        let mut data = vec![E::zero(); 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                data[c * hw + p] = E::from_f64(self.rgb[p * 3 + c] as f64 / 255.0);
            }
        }
        Tensor::from_vec(data, [3, self.size, self.size]).unwrap()
    }

    pub fn background_mask(&self) -> Vec<bool> {
        self.labels.iter().map(|l| *l == 0).collect()
    }

    pub fn instance_mask(&self, i: usize) -> Vec<bool> {
        let id = (i + 1) as u8;
        self.labels.iter().map(|l| *l == id).collect()
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|l| **l != 0).count()
    }
}

/// Batch of sample images as `[B, 3, H, W]`.
pub fn images_to_tensor<E: Element>(samples: &[&SceneSample]) -> Tensor<E> {
    assert!(!samples.is_empty());
    let size = samples[0].size;
    let hw = size * size;
    let mut data = vec![E::zero(); samples.len() * 3 * hw];
    for (b, s) in samples.iter().enumerate() {
        let base = b * 3 * hw;
        for p in 0..hw {
            for c in 0..3 {
                data[base + c * hw + p] = E::from_f64(s.rgb[p * 3 + c] as f64 / 255.0);
            }
        }
    }
    Tensor::from_vec(data, [samples.len(), 3, size, size]).unwrap()
}

struct Sprite {
    shape: SpriteShape,
    cx: i64,
    cy: i64,
    r: i64,
    color: [u8; 3],
}

impl Sprite {
    fn covers(&self, x: i64, y: i64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        match self.shape {
            SpriteShape::Circle => dx * dx + dy * dy <= self.r * self.r,
            SpriteShape::Square => dx.abs() <= self.r && dy.abs() <= self.r,
            SpriteShape::Triangle => {
                // apex (cx, cy-r), base corners (cx -/+ r, cy + r);
                // inclusive half-plane tests with integer cross products
                let (ax, ay) = (0i64, -self.r);
                let (bx, by) = (-self.r, self.r);
                let (cx, cy) = (self.r, self.r);
                let cross = |ox: i64, oy: i64, px: i64, py: i64| -> i64 {
                    (px - ox) * (dy - oy) - (py - oy) * (dx - ox)
                };
                let d1 = cross(ax, ay, bx, by);
                let d2 = cross(bx, by, cx, cy);
                let d3 = cross(cx, cy, ax, ay);
                (d1 >= 0 && d2 >= 0 && d3 >= 0) || (d1 <= 0 && d2 <= 0 && d3 <= 0)
            }
        }
    }
}

const PLACEMENT_ATTEMPTS: u64 = 64;

fn try_generate_sample(config: &SceneConfig, index: usize, attempt: u64) -> Option<SceneSample> {
    let mut rng = derive_rng(config.seed, "scene", (index as u64) << 8 | attempt);
    let size = config.image_size;
    let n = rng.gen_range(config.min_sprites..=config.max_sprites);

    // solid dark background keeps the saturated palette distinguishable
    let bg = [
        rng.gen_range(5..=60u8),
        rng.gen_range(5..=60u8),
        rng.gen_range(5..=60u8),
    ];

    // distinct palette colors per scene
    let mut color_order: Vec<usize> = (0..config.palette.len()).collect();
    for i in (1..color_order.len()).rev() {
        let j = rng.gen_range(0..=i);
        color_order.swap(i, j);
    }

    let mut sprites: Vec<Sprite> = Vec::with_capacity(n);
    for i in 0..n {
        let r = rng.gen_range(config.min_radius..=config.max_radius) as i64;
        let lo = r as usize;
        let hi = size - 1 - r as usize;
        let shape = match rng.gen_range(0..3u8) {
            0 => SpriteShape::Circle,
            1 => SpriteShape::Square,
            _ => SpriteShape::Triangle,
        };
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let cx = rng.gen_range(lo..=hi) as i64;
            let cy = rng.gen_range(lo..=hi) as i64;
            let clear = config.allow_overlap
                || sprites.iter().all(|s| {
                    let dx = s.cx - cx;
                    let dy = s.cy - cy;
                    let rr = s.r + r;
                    dx * dx + dy * dy > rr * rr
                });
            if clear {
                sprites.push(Sprite {
                    shape,
                    cx,
                    cy,
                    r,
                    color: config.palette[color_order[i]],
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }

    let hw = size * size;
    let mut rgb = Vec::with_capacity(3 * hw);
    for _ in 0..hw {
        rgb.extend_from_slice(&bg);
    }
    let mut labels = vec![0u8; hw];
    for (i, s) in sprites.iter().enumerate() {
        for y in 0..size as i64 {
            for x in 0..size as i64 {
                if s.covers(x, y) {
                    let p = (y as usize) * size + x as usize;
                    labels[p] = (i + 1) as u8;
                    rgb[p * 3..p * 3 + 3].copy_from_slice(&s.color);
                }
            }
        }
    }

    // occlusion may fully hide an earlier sprite; such scenes are retried
    for i in 0..n {
        let id = (i + 1) as u8;
        if !labels.iter().any(|l| *l == id) {
            return None;
        }
    }
    Some(SceneSample {
        size,
        rgb,
        labels,
        n_sprites: n,
    })
}

/// Generates `count` scenes. Fully deterministic given (config, seed).
pub fn generate(config: &SceneConfig, count: usize) -> Result<Vec<SceneSample>> {
    config.validate()?;
    let mut out = Vec::with_capacity(count);
    for index in 0..count {
        let sample = (0..PLACEMENT_ATTEMPTS)
            .find_map(|attempt| try_generate_sample(config, index, attempt))
            .ok_or_else(|| Error::Generation {
                index,
                reason: format!("no valid placement after {PLACEMENT_ATTEMPTS} attempts"),
            })?;
        out.push(sample);
    }
    Ok(out)
}

/// FNV-1a digest over every sample's pixels and labels; a pure function of
/// (config, seed).
pub fn dataset_hash(samples: &[SceneSample]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    let mut eat = |bytes: &[u8]| {
        for b in bytes {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    for s in samples {
        eat(&(s.size as u64).to_le_bytes());
        eat(&s.rgb);
        eat(&s.labels);
    }
    h
}

fn manifest_string(config: &SceneConfig, count: usize) -> String {
    let mut m = String::new();
    let _ = writeln!(m, "count={count}");
    let _ = writeln!(m, "image_size={}", config.image_size);
    let _ = writeln!(m, "seed={}", config.seed);
    let _ = writeln!(m, "min_sprites={}", config.min_sprites);
    let _ = writeln!(m, "max_sprites={}", config.max_sprites);
    let _ = writeln!(m, "min_radius={}", config.min_radius);
    let _ = writeln!(m, "max_radius={}", config.max_radius);
    let _ = writeln!(m, "allow_overlap={}", config.allow_overlap);
    let palette: Vec<String> = config
        .palette
        .iter()
        .map(|c| format!("{:02x}{:02x}{:02x}", c[0], c[1], c[2]))
        .collect();
    let _ = writeln!(m, "palette={}", palette.join(","));
    m
}

fn parse_manifest(text: &str, path: &Path) -> Result<(SceneConfig, usize)> {
    let mut kv = std::collections::HashMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("{}: bad manifest line {line:?}", path.display()))
        })?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| -> Result<String> {
        kv.get(k)
            .cloned()
            .ok_or_else(|| Error::Config(format!("{}: missing key {k}", path.display())))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Config(format!("{}: bad value for {k}", path.display())))
    };
    let palette = get("palette")?
        .split(',')
        .map(|hexs| {
            if hexs.len() != 6 {
                return Err(Error::Config(format!("bad palette entry {hexs:?}")));
            }
            let v = u32::from_str_radix(hexs, 16)
                .map_err(|_| Error::Config(format!("bad palette entry {hexs:?}")))?;
            Ok([(v >> 16) as u8, (v >> 8) as u8, v as u8])
        })
        .collect::<Result<Vec<_>>>()?;
    let config = SceneConfig {
        image_size: num("image_size")?,
        min_sprites: num("min_sprites")?,
        max_sprites: num("max_sprites")?,
        min_radius: num("min_radius")?,
        max_radius: num("max_radius")?,
        palette,
        allow_overlap: get("allow_overlap")? == "true",
        seed: get("seed")?
            .parse()
            .map_err(|_| Error::Config("bad seed in manifest".into()))?,
    };
    Ok((config, num("count")?))
}

fn sample_paths(dir: &Path, i: usize) -> (PathBuf, PathBuf) {
    (
        dir.join("images").join(format!("{i:05}.png")),
        dir.join("masks").join(format!("{i:05}.png")),
    )
}

/// Writes `manifest.txt`, `images/NNNNN.png` (RGB8) and `masks/NNNNN.png`
/// (single-channel, pixel value = instance id, 0 = background).
pub fn save_dataset(samples: &[SceneSample], config: &SceneConfig, dir: &Path) -> Result<()> {
    for sub in ["images", "masks"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    std::fs::write(dir.join("manifest.txt"), manifest_string(config, samples.len()))
        .map_err(|e| Error::io(dir.join("manifest.txt"), e))?;
    for (i, s) in samples.iter().enumerate() {
        let (img_path, mask_path) = sample_paths(dir, i);
        let side = s.size as u32;
        image::save_buffer(
            &img_path,
            &s.rgb,
            side,
            side,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::Image {
            path: img_path.clone(),
            source: e,
        })?;
        image::save_buffer(
            &mask_path,
            &s.labels,
            side,
            side,
            image::ExtendedColorType::L8,
        )
        .map_err(|e| Error::Image {
            path: mask_path.clone(),
            source: e,
        })?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<(Vec<SceneSample>, SceneConfig)> {
    let manifest_path = dir.join("manifest.txt");
    let text =
        std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let (config, count) = parse_manifest(&text, &manifest_path)?;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let (img_path, mask_path) = sample_paths(dir, i);
        let img = image::open(&img_path)
            .map_err(|e| Error::Image {
                path: img_path.clone(),
                source: e,
            })?
            .into_rgb8();
        let mask = image::open(&mask_path)
            .map_err(|e| Error::Image {
                path: mask_path.clone(),
                source: e,
            })?
            .into_luma8();
        if img.width() as usize != config.image_size || mask.width() != img.width() {
            return Err(Error::Config(format!(
                "{}: sample size disagrees with manifest",
                img_path.display()
            )));
        }
        let labels = mask.into_raw();
        let n_sprites = labels.iter().copied().max().unwrap_or(0) as usize;
        samples.push(SceneSample {
            size: config.image_size,
            rgb: img.into_raw(),
            labels,
            n_sprites,
        });
    }
    Ok((samples, config))
}
