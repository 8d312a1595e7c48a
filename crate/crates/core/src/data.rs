//! Labeled moving-shape videos: ground-truth semantic classes and instance
//! masks for training and quantitative evaluation, plus the on-disk dataset
//! schema (PNG frames, indexed-palette PNG masks, JSON manifest per video).

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{BackgroundMode, DataConfig};
use crate::encoder::Frame;
use crate::error::{Error, Result};
use crate::rng::RngState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
}

impl ShapeKind {
    pub fn for_class(class_id: usize) -> ShapeKind {
        match class_id % 3 {
            0 => ShapeKind::Disk,
            1 => ShapeKind::Square,
            _ => ShapeKind::Triangle,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub class_id: usize,
    pub shape: ShapeKind,
    /// Half-extent in pixels.
    pub size: f64,
    pub color: [f64; 3],
    /// Center position at frame 0.
    pub position: (f64, f64),
    /// Pixels per frame.
    pub velocity: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub canvas: usize,
    pub frames: usize,
    pub background: BackgroundMode,
    pub bg_color: [f64; 3],
    pub objects: Vec<ObjectSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoManifest {
    pub seed: u64,
    pub spec: SceneSpec,
    /// Class id per instance (instance k is mask id k+1).
    pub classes: Vec<usize>,
}

/// One generated or loaded video with per-frame ground truth.
#[derive(Debug, Clone)]
pub struct VideoSample {
    pub frames: Vec<Frame>,
    /// Per-frame instance id per pixel; 0 is background.
    pub gt_instance: Vec<Vec<u16>>,
    /// Class id per instance.
    pub gt_semantic: Vec<usize>,
    /// Visible pixels per frame per instance.
    pub visibility: Vec<Vec<usize>>,
    pub manifest: Option<VideoManifest>,
}

impl VideoSample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Base colors per class; instances jitter tightly around these so
/// appearance correlates with the semantic class.
const CLASS_COLORS: [[f64; 3]; 4] = [
    [0.90, 0.15, 0.12],
    [0.12, 0.25, 0.90],
    [0.95, 0.80, 0.15],
    [0.60, 0.15, 0.75],
];
const CLASS_JITTER: f64 = 0.04;

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Draws a random scene. With `require_duplicate_class` the scene is
/// guaranteed to contain at least two instances of one class, so instance
/// separation within a semantic is actually exercised.
pub fn sample_spec(
    cfg: &DataConfig,
    rng: &mut RngState,
    require_duplicate_class: bool,
) -> SceneSpec {
    let canvas = cfg.resolution;
    let count = cfg.min_objects + rng.below(cfg.max_objects - cfg.min_objects + 1);
    let mut classes: Vec<usize> = (0..count).map(|_| rng.below(cfg.classes)).collect();
    if require_duplicate_class && count >= 2 {
        let dup = rng.below(cfg.classes);
        classes[0] = dup;
        classes[1] = dup;
    }
    // Backgrounds vary widely across videos but stay inside a gray-green
    // band, away from the saturated class colors.
    let bg_color = [
        quantize(0.40 + rng.uniform_in(-cfg.tint_jitter, cfg.tint_jitter) * 0.6),
        quantize(0.50 + rng.uniform_in(-cfg.tint_jitter, cfg.tint_jitter)),
        quantize(0.40 + rng.uniform_in(-cfg.tint_jitter, cfg.tint_jitter) * 0.6),
    ];
    let objects = classes
        .iter()
        .map(|&class_id| {
            let size = rng.uniform_in(cfg.min_size, cfg.max_size);
            let base = CLASS_COLORS[class_id % CLASS_COLORS.len()];
            let color = [
                quantize(base[0] + rng.uniform_in(-CLASS_JITTER, CLASS_JITTER)),
                quantize(base[1] + rng.uniform_in(-CLASS_JITTER, CLASS_JITTER)),
                quantize(base[2] + rng.uniform_in(-CLASS_JITTER, CLASS_JITTER)),
            ];
            let lo = size;
            let hi = canvas as f64 - size;
            let position = (rng.uniform_in(lo, hi), rng.uniform_in(lo, hi));
            let speed = rng.uniform_in(0.4, cfg.max_speed);
            let angle = rng.uniform_in(0.0, std::f64::consts::TAU);
            ObjectSpec {
                class_id,
                shape: ShapeKind::for_class(class_id),
                size,
                color,
                position: (position.0, position.1),
                velocity: (speed * angle.cos(), speed * angle.sin()),
            }
        })
        .collect();
    SceneSpec { canvas, frames: cfg.frames, background: cfg.background, bg_color, objects }
}

/// Position after `t` frames of linear motion reflecting off the walls,
/// keeping the center inside [size, canvas - size].
fn reflected(p0: f64, v: f64, t: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return (lo + hi) / 2.0;
    }
    let span = hi - lo;
    let raw = (p0 - lo + v * t).rem_euclid(2.0 * span);
    lo + if raw <= span { raw } else { 2.0 * span - raw }
}

fn inside(shape: ShapeKind, cx: f64, cy: f64, size: f64, px: f64, py: f64) -> bool {
    let (dx, dy) = (px - cx, py - cy);
    match shape {
        ShapeKind::Disk => dx * dx + dy * dy <= size * size,
        ShapeKind::Square => dx.abs() <= size && dy.abs() <= size,
        ShapeKind::Triangle => {
            // Upward triangle: apex (0, -size), base corners (+-size, +size).
            if dy < -size || dy > size {
                return false;
            }
            let half_width = (dy + size) / 2.0;
            dx.abs() <= half_width
        }
    }
}

/// Renders the scene: linear motion with wall reflection, later-drawn objects
/// occlude earlier ones, masks follow the rendered pixels exactly
/// (no anti-aliasing). Deterministic in (spec, seed).
pub fn generate_video(spec: &SceneSpec, seed: u64) -> VideoSample {
    let canvas = spec.canvas;
    // Chromatic value-noise: one coarse grid per channel, bilinearly
    // upsampled. Background patches then vary in both brightness and hue,
    // which keeps their correspondence diffuse.
    let mut texture = Vec::new();
    if spec.background == BackgroundMode::Textured {
        let cells = 8usize;
        for channel in 0..3u64 {
            let mut rng = RngState::new(seed).substream(0xb6 + channel);
            let grid: Vec<f64> =
                (0..cells * cells).map(|_| rng.uniform_in(-0.15, 0.15)).collect();
            let plane: Vec<f64> = (0..canvas * canvas)
                .map(|i| {
                    let (y, x) = (i / canvas, i % canvas);
                    let fy = y as f64 / canvas as f64 * (cells - 1) as f64;
                    let fx = x as f64 / canvas as f64 * (cells - 1) as f64;
                    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                    let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
                    let g =
                        |yy: usize, xx: usize| grid[yy.min(cells - 1) * cells + xx.min(cells - 1)];
                    (1.0 - ty) * ((1.0 - tx) * g(y0, x0) + tx * g(y0, x0 + 1))
                        + ty * ((1.0 - tx) * g(y0 + 1, x0) + tx * g(y0 + 1, x0 + 1))
                })
                .collect();
            texture.push(plane);
        }
    }

    let mut frames = Vec::with_capacity(spec.frames);
    let mut gt_instance = Vec::with_capacity(spec.frames);
    let mut visibility = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let mut frame = Frame::filled(canvas, canvas, spec.bg_color);
        if !texture.is_empty() {
            for y in 0..canvas {
                for x in 0..canvas {
                    let p = frame.pixel(y, x);
                    frame.set_pixel(
                        y,
                        x,
                        [
                            quantize(p[0] + texture[0][y * canvas + x]),
                            quantize(p[1] + texture[1][y * canvas + x]),
                            quantize(p[2] + texture[2][y * canvas + x]),
                        ],
                    );
                }
            }
        }
        let mut mask = vec![0u16; canvas * canvas];
        let mut visible = vec![0usize; spec.objects.len()];
        for (k, obj) in spec.objects.iter().enumerate() {
            let lo = obj.size;
            let hi = canvas as f64 - obj.size;
            let cx = reflected(obj.position.0, obj.velocity.0, t as f64, lo, hi);
            let cy = reflected(obj.position.1, obj.velocity.1, t as f64, lo, hi);
            let y_min = ((cy - obj.size).floor().max(0.0)) as usize;
            let y_max = ((cy + obj.size).ceil().min(canvas as f64 - 1.0)) as usize;
            let x_min = ((cx - obj.size).floor().max(0.0)) as usize;
            let x_max = ((cx + obj.size).ceil().min(canvas as f64 - 1.0)) as usize;
            for y in y_min..=y_max {
                for x in x_min..=x_max {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    if inside(obj.shape, cx, cy, obj.size, px, py) {
                        let idx = y * canvas + x;
                        if mask[idx] != 0 {
                            visible[(mask[idx] - 1) as usize] -= 1;
                        }
                        mask[idx] = (k + 1) as u16;
                        visible[k] += 1;
                        frame.set_pixel(y, x, obj.color);
                    }
                }
            }
        }
        frames.push(frame);
        gt_instance.push(mask);
        visibility.push(visible);
    }
    let classes: Vec<usize> = spec.objects.iter().map(|o| o.class_id).collect();
    VideoSample {
        frames,
        gt_instance,
        gt_semantic: classes.clone(),
        visibility,
        manifest: Some(VideoManifest { seed, spec: clone_spec(spec), classes }),
    }
}

fn clone_spec(spec: &SceneSpec) -> SceneSpec {
    spec.clone()
}

/// Generates the default benchmark suite split.
pub fn generate_suite(cfg: &DataConfig, seed: u64, eval_split: bool) -> Vec<VideoSample> {
    let count = if eval_split { cfg.eval_videos } else { cfg.train_videos };
    let root = RngState::new(seed).substream(if eval_split { 2 } else { 1 });
    (0..count)
        .map(|i| {
            let mut rng = root.substream(i as u64);
            let spec = sample_spec(cfg, &mut rng, eval_split);
            generate_video(&spec, rng.seed() ^ i as u64)
        })
        .collect()
}

// ---- on-disk schema ----

fn video_dir_name(index: usize) -> String {
    format!("video_{index:04}")
}

fn frame_to_rgb8(frame: &Frame) -> Vec<u8> {
    frame.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

fn write_png_rgb(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer =
        enc.write_header().map_err(|e| Error::data(path.display().to_string(), e.to_string()))?;
    writer
        .write_image_data(rgb)
        .map_err(|e| Error::data(path.display().to_string(), e.to_string()))?;
    Ok(())
}

/// Palette for indexed masks: background black, then maximally-spread hues.
fn mask_palette(ids: usize) -> Vec<u8> {
    let mut pal = vec![0u8, 0, 0];
    for k in 0..ids.max(1) {
        let h = k as f64 / ids.max(1) as f64;
        let (r, g, b) = hsv_to_rgb(h, 0.85, 0.95);
        pal.extend_from_slice(&[r, g, b]);
    }
    pal
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (u8, u8, u8) {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    let (r, g, b) = match (i as i64).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    ((r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8)
}

fn write_png_indexed(path: &Path, width: usize, height: usize, ids: &[u16], max_id: usize) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(mask_palette(max_id));
    let mut writer =
        enc.write_header().map_err(|e| Error::data(path.display().to_string(), e.to_string()))?;
    let bytes: Vec<u8> = ids.iter().map(|&v| v as u8).collect();
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::data(path.display().to_string(), e.to_string()))?;
    Ok(())
}

struct DecodedPng {
    width: usize,
    height: usize,
    color: png::ColorType,
    data: Vec<u8>,
}

fn read_png(path: &Path) -> Result<DecodedPng> {
    let file = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    // Keep palette indices as stored; no RGB expansion.
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader =
        decoder.read_info().map_err(|e| Error::data(path.display().to_string(), e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::data(path.display().to_string(), e.to_string()))?;
    buf.truncate(info.buffer_size());
    Ok(DecodedPng {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        data: buf,
    })
}

/// Writes the dataset: one folder per video with zero-padded PNG frames,
/// indexed-palette PNG masks, and a JSON manifest.
pub fn write_dataset(samples: &[VideoSample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for (i, sample) in samples.iter().enumerate() {
        let vdir = dir.join(video_dir_name(i));
        let frames_dir = vdir.join("frames");
        let masks_dir = vdir.join("masks");
        fs::create_dir_all(&frames_dir)
            .map_err(|e| Error::io(frames_dir.display().to_string(), e))?;
        fs::create_dir_all(&masks_dir)
            .map_err(|e| Error::io(masks_dir.display().to_string(), e))?;
        let max_id = sample.gt_semantic.len();
        for (f, frame) in sample.frames.iter().enumerate() {
            let fp = frames_dir.join(format!("{f:05}.png"));
            write_png_rgb(&fp, frame.width, frame.height, &frame_to_rgb8(frame))?;
            let mp = masks_dir.join(format!("{f:05}.png"));
            write_png_indexed(&mp, frame.width, frame.height, &sample.gt_instance[f], max_id)?;
        }
        if let Some(manifest) = &sample.manifest {
            let path = vdir.join("manifest.json");
            let text = serde_json::to_string_pretty(manifest)
                .map_err(|e| Error::data(path.display().to_string(), e.to_string()))?;
            fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
        }
    }
    Ok(())
}

fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir.display().to_string(), e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == "png").unwrap_or(false))
        .collect();
    out.sort();
    Ok(out)
}

/// Loads one video folder. The manifest is required when
/// `require_manifest` (the synthetic schema) and optional otherwise
/// (externally produced frame+mask sequences).
pub fn load_video_dir(vdir: &Path, require_manifest: bool) -> Result<VideoSample> {
    let frames_dir = vdir.join("frames");
    let masks_dir = vdir.join("masks");
    if !frames_dir.is_dir() {
        return Err(Error::data(frames_dir.display().to_string(), "missing frames folder"));
    }
    if !masks_dir.is_dir() {
        return Err(Error::data(masks_dir.display().to_string(), "missing masks folder"));
    }
    let frame_paths = sorted_pngs(&frames_dir)?;
    let mask_paths = sorted_pngs(&masks_dir)?;
    if frame_paths.len() != mask_paths.len() {
        return Err(Error::data(
            vdir.display().to_string(),
            format!("{} frames but {} masks", frame_paths.len(), mask_paths.len()),
        ));
    }
    if frame_paths.is_empty() {
        return Err(Error::data(vdir.display().to_string(), "no frames"));
    }
    let mut frames = Vec::with_capacity(frame_paths.len());
    let mut gt_instance = Vec::with_capacity(mask_paths.len());
    let mut max_id = 0u16;
    for (fp, mp) in frame_paths.iter().zip(mask_paths.iter()) {
        let img = read_png(fp)?;
        if img.color != png::ColorType::Rgb {
            return Err(Error::data(fp.display().to_string(), "frames must be 8-bit RGB PNG"));
        }
        let data: Vec<f64> = img.data.iter().map(|&b| b as f64 / 255.0).collect();
        frames.push(Frame::new(img.height, img.width, data)?);

        let m = read_png(mp)?;
        let ids: Vec<u16> = match m.color {
            png::ColorType::Indexed | png::ColorType::Grayscale => {
                m.data.iter().map(|&b| b as u16).collect()
            }
            other => {
                return Err(Error::data(
                    mp.display().to_string(),
                    format!("masks must be indexed PNG, got {other:?}"),
                ))
            }
        };
        if ids.len() != m.width * m.height {
            return Err(Error::data(mp.display().to_string(), "mask size mismatch"));
        }
        max_id = max_id.max(ids.iter().copied().max().unwrap_or(0));
        gt_instance.push(ids);
    }

    let manifest_path = vdir.join("manifest.json");
    let manifest: Option<VideoManifest> = if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path)
            .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
        Some(
            serde_json::from_str(&text)
                .map_err(|e| Error::data(manifest_path.display().to_string(), e.to_string()))?,
        )
    } else if require_manifest {
        return Err(Error::data(manifest_path.display().to_string(), "missing manifest.json"));
    } else {
        None
    };

    let gt_semantic = manifest
        .as_ref()
        .map(|m| m.classes.clone())
        .unwrap_or_else(|| (0..max_id as usize).map(|_| 0).collect());
    let visibility = gt_instance
        .iter()
        .map(|mask| {
            let mut counts: BTreeMap<u16, usize> = BTreeMap::new();
            for &id in mask {
                if id > 0 {
                    *counts.entry(id).or_default() += 1;
                }
            }
            (1..=gt_semantic.len() as u16)
                .map(|id| counts.get(&id).copied().unwrap_or(0))
                .collect()
        })
        .collect();
    Ok(VideoSample { frames, gt_instance, gt_semantic, visibility, manifest })
}

/// Loads every `video_*` folder under `dir`, sorted by name. An empty or
/// absent listing yields an empty dataset.
pub fn read_dataset(dir: &Path) -> Result<Vec<VideoSample>> {
    load_dataset_impl(dir, true)
}

fn load_dataset_impl(dir: &Path, require_manifest: bool) -> Result<Vec<VideoSample>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir.display().to_string(), e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| load_video_dir(d, require_manifest)).collect()
}

/// External-dataset ingestion sharing the synthetic schema; manifests are
/// optional there.
pub fn load_external_dataset(dir: &Path) -> Result<Vec<VideoSample>> {
    load_dataset_impl(dir, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_spec(objects: Vec<ObjectSpec>, frames: usize) -> SceneSpec {
        SceneSpec {
            canvas: 64,
            frames,
            background: BackgroundMode::Flat,
            bg_color: [0.5, 0.5, 0.5],
            objects,
        }
    }

    #[test]
    fn empty_scene_is_all_background() {
        let spec = flat_spec(vec![], 3);
        let v = generate_video(&spec, 1);
        assert_eq!(v.frames.len(), 3);
        for mask in &v.gt_instance {
            assert!(mask.iter().all(|&id| id == 0));
        }
        for frame in &v.frames {
            assert!(frame.data.iter().all(|&p| (p - 0.5).abs() < 1e-2));
        }
    }

    #[test]
    fn static_disk_area_matches_analytic() {
        let r = 10.0;
        let spec = flat_spec(
            vec![ObjectSpec {
                class_id: 0,
                shape: ShapeKind::Disk,
                size: r,
                color: [0.9, 0.1, 0.1],
                position: (32.0, 32.0),
                velocity: (0.0, 0.0),
            }],
            4,
        );
        let v = generate_video(&spec, 2);
        let want = std::f64::consts::PI * r * r;
        for frame_vis in &v.visibility {
            let area = frame_vis[0] as f64;
            assert!(
                (area - want).abs() <= 0.05 * want,
                "area {area} vs analytic {want}"
            );
        }
    }

    #[test]
    fn unit_velocity_advances_centroid_by_one_pixel() {
        let spec = flat_spec(
            vec![ObjectSpec {
                class_id: 1,
                shape: ShapeKind::Square,
                size: 6.0,
                color: [0.1, 0.2, 0.9],
                position: (12.0, 32.0),
                velocity: (1.0, 0.0),
            }],
            10,
        );
        let v = generate_video(&spec, 3);
        let centroid_x = |mask: &Vec<u16>| {
            let mut sum = 0.0;
            let mut count = 0.0;
            for (i, &id) in mask.iter().enumerate() {
                if id == 1 {
                    sum += (i % 64) as f64;
                    count += 1.0;
                }
            }
            sum / count
        };
        for t in 1..10 {
            let dx = centroid_x(&v.gt_instance[t]) - centroid_x(&v.gt_instance[t - 1]);
            assert!((dx - 1.0).abs() <= 0.1, "frame {t}: dx {dx}");
        }
    }

    #[test]
    fn occlusion_respects_draw_order_and_masks_are_disjoint() {
        let mk = |pos: (f64, f64), class: usize| ObjectSpec {
            class_id: class,
            shape: ShapeKind::Square,
            size: 8.0,
            color: [0.2 + class as f64 * 0.3, 0.4, 0.6],
            position: pos,
            velocity: (0.0, 0.0),
        };
        let spec = flat_spec(vec![mk((30.0, 30.0), 0), mk((34.0, 30.0), 1)], 1);
        let v = generate_video(&spec, 4);
        let mask = &v.gt_instance[0];
        // Overlap belongs to the later-drawn object (id 2).
        let idx = 30 * 64 + 32;
        assert_eq!(mask[idx], 2);
        // Both visible but the first lost the overlap.
        assert!(v.visibility[0][0] < v.visibility[0][1]);
        // Visible mask of object 1 is a subset of its silhouette.
        for (i, &id) in mask.iter().enumerate() {
            if id == 1 {
                let (y, x) = ((i / 64) as f64 + 0.5, (i % 64) as f64 + 0.5);
                assert!(inside(ShapeKind::Square, 30.0, 30.0, 8.0, x, y));
            }
        }
    }

    #[test]
    fn reflection_keeps_objects_inside() {
        let spec = flat_spec(
            vec![ObjectSpec {
                class_id: 0,
                shape: ShapeKind::Disk,
                size: 9.0,
                color: [0.8, 0.3, 0.2],
                position: (12.0, 50.0),
                velocity: (2.4, -1.7),
            }],
            60,
        );
        let v = generate_video(&spec, 5);
        for vis in &v.visibility {
            let area = vis[0] as f64;
            let want = std::f64::consts::PI * 81.0;
            assert!((area - want).abs() <= 0.05 * want, "object clipped: area {area}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = DataConfig::default();
        let mut r1 = RngState::new(5);
        let mut r2 = RngState::new(5);
        let s1 = sample_spec(&cfg, &mut r1, true);
        let s2 = sample_spec(&cfg, &mut r2, true);
        assert_eq!(s1, s2);
        let v1 = generate_video(&s1, 9);
        let v2 = generate_video(&s2, 9);
        assert_eq!(v1.frames[0].data, v2.frames[0].data);
        assert_eq!(v1.gt_instance, v2.gt_instance);
    }

    #[test]
    fn class_frequencies_are_roughly_uniform() {
        let cfg = DataConfig::default();
        let mut rng = RngState::new(42);
        let mut counts = vec![0usize; cfg.classes];
        let mut total = 0usize;
        for _ in 0..300 {
            let spec = sample_spec(&cfg, &mut rng, false);
            for obj in &spec.objects {
                counts[obj.class_id] += 1;
                total += 1;
            }
        }
        let p = 1.0 / cfg.classes as f64;
        let sigma = (total as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts {
            let dev = (c as f64 - total as f64 * p).abs();
            assert!(dev <= 3.0 * sigma, "class count {c} deviates {dev} > 3 sigma {sigma}");
        }
    }

    #[test]
    fn dataset_round_trip_is_bit_identical() {
        let cfg = DataConfig { frames: 4, ..DataConfig::default() };
        let mut rng = RngState::new(8);
        let samples: Vec<VideoSample> = (0..3)
            .map(|i| {
                let spec = sample_spec(&cfg, &mut rng, i == 0);
                generate_video(&spec, 100 + i as u64)
            })
            .collect();
        let dir = std::env::temp_dir().join(format!("slotseg_ds_{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        write_dataset(&samples, &dir).unwrap();
        let loaded = read_dataset(&dir).unwrap();
        assert_eq!(loaded.len(), samples.len());
        for (a, b) in samples.iter().zip(loaded.iter()) {
            assert_eq!(a.frames.len(), b.frames.len());
            for (fa, fb) in a.frames.iter().zip(b.frames.iter()) {
                assert_eq!(frame_to_rgb8(fa), frame_to_rgb8(fb));
                assert_eq!(fa.data, fb.data);
            }
            assert_eq!(a.gt_instance, b.gt_instance);
            assert_eq!(a.gt_semantic, b.gt_semantic);
            assert_eq!(a.visibility, b.visibility);
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn manifest_regenerates_identical_sample() {
        let cfg = DataConfig { frames: 5, ..DataConfig::default() };
        let mut rng = RngState::new(9);
        let spec = sample_spec(&cfg, &mut rng, true);
        let sample = generate_video(&spec, 77);
        let manifest = sample.manifest.clone().unwrap();
        let regen = generate_video(&manifest.spec, manifest.seed);
        for (a, b) in sample.frames.iter().zip(regen.frames.iter()) {
            assert_eq!(a.data, b.data);
        }
        assert_eq!(sample.gt_instance, regen.gt_instance);
    }

    #[test]
    fn empty_directory_is_an_empty_dataset() {
        let dir = std::env::temp_dir().join(format!("slotseg_empty_{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        assert!(read_dataset(&dir).unwrap().is_empty());
        fs::remove_dir_all(&dir).unwrap();
        // Absent directory behaves the same.
        assert!(read_dataset(Path::new("/nonexistent/slotseg")).unwrap().is_empty());
    }

    #[test]
    fn missing_masks_folder_is_a_descriptive_error() {
        let dir = std::env::temp_dir().join(format!("slotseg_badds_{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        let vdir = dir.join("video_0000");
        fs::create_dir_all(vdir.join("frames")).unwrap();
        let err = load_video_dir(&vdir, true).unwrap_err().to_string();
        assert!(err.contains("masks"), "{err}");
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn mismatched_frame_mask_counts_error_with_counts() {
        let cfg = DataConfig { frames: 3, ..DataConfig::default() };
        let mut rng = RngState::new(10);
        let spec = sample_spec(&cfg, &mut rng, false);
        let sample = generate_video(&spec, 3);
        let dir = std::env::temp_dir().join(format!("slotseg_mm_{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        write_dataset(&[sample], &dir).unwrap();
        fs::remove_file(dir.join("video_0000/masks/00002.png")).unwrap();
        let err = read_dataset(&dir).unwrap_err().to_string();
        assert!(err.contains('3') && err.contains('2'), "{err}");
        fs::remove_dir_all(&dir).unwrap();
    }
}
