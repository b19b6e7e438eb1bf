//! Seeded synthetic audio-visual clips: colored shapes drifting over a
//! value-noise background, each class tied to a fixed audio signature. The
//! on-disk layout is one directory per clip holding CCTF tensors, next to a
//! `manifest.json` describing the split.

use anyhow::{anyhow, bail, Context, Result};
use ccformer_model::params::normal;
use ccformer_tensor::{cctf, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::config::Mode;

pub const D_AUDIO: usize = 16;
pub const SHAPE_CLASSES: usize = 3;
const MAX_COS: f64 = 0.3;
const BG_AMPLITUDE: f32 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub fn class(self) -> usize {
        match self {
            Shape::Circle => 0,
            Shape::Square => 1,
            Shape::Triangle => 2,
        }
    }

    pub fn of_class(class: usize) -> Shape {
        match class {
            0 => Shape::Circle,
            1 => Shape::Square,
            2 => Shape::Triangle,
            _ => panic!("class {class} out of range"),
        }
    }

    /// Point-inside test against a shape centered at `(cx, cy)` with size
    /// parameter `r` (radius, half-side, or circumradius).
    pub fn contains(self, cx: f64, cy: f64, r: f64, px: f64, py: f64) -> bool {
        match self {
            Shape::Circle => {
                let (dx, dy) = (px - cx, py - cy);
                dx * dx + dy * dy <= r * r
            }
            Shape::Square => (px - cx).abs() <= r && (py - cy).abs() <= r,
            Shape::Triangle => {
                let s = 3f64.sqrt() / 2.0;
                let v = [(cx, cy - r), (cx + r * s, cy + r / 2.0), (cx - r * s, cy + r / 2.0)];
                let edge = |a: (f64, f64), b: (f64, f64)| {
                    (b.0 - a.0) * (py - a.1) - (b.1 - a.1) * (px - a.0)
                };
                let e0 = edge(v[0], v[1]);
                let e1 = edge(v[1], v[2]);
                let e2 = edge(v[2], v[0]);
                (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0) || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub color: [f32; 3],
    pub start: (f64, f64),
    pub end: (f64, f64),
    pub radius: f64,
}

impl ObjectSpec {
    pub fn class(&self) -> usize {
        self.shape.class()
    }

    /// Center at frame `t` of a clip with `t_total` frames, linear in t.
    pub fn center(&self, t: usize, t_total: usize) -> (f64, f64) {
        if t_total <= 1 {
            return self.start;
        }
        let a = t as f64 / (t_total - 1) as f64;
        (
            self.start.0 + (self.end.0 - self.start.0) * a,
            self.start.1 + (self.end.1 - self.start.1) * a,
        )
    }
}

#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub canvas: usize,
    /// Real frames in the clip.
    pub t_true: usize,
    /// Stored length; frames past `t_true` are zero padding.
    pub t_pad: usize,
    pub objects: Vec<ObjectSpec>,
    /// Indices into `objects`, one set per real frame. Empty sets are
    /// silent frames.
    pub sounding: Vec<Vec<usize>>,
    pub sigma: f64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.t_true == 0 || self.t_true > self.t_pad {
            bail!("clip length {} incompatible with padded length {}", self.t_true, self.t_pad);
        }
        if self.sounding.len() != self.t_true {
            bail!("sounding schedule covers {} frames, clip has {}", self.sounding.len(), self.t_true);
        }
        if self.sounding.iter().all(|s| s.is_empty()) {
            bail!("sounding schedule is empty for the whole clip");
        }
        for (i, obj) in self.objects.iter().enumerate() {
            if obj.class() >= SHAPE_CLASSES {
                bail!("object {i} class {} out of range", obj.class());
            }
            if obj.radius <= 0.0 {
                bail!("object {i} has nonpositive radius");
            }
            for t in 0..self.t_true {
                let (cx, cy) = obj.center(t, self.t_true);
                let reach = obj.radius;
                let hi = self.canvas as f64;
                if cx - reach < 0.0 || cy - reach < 0.0 || cx + reach > hi || cy + reach > hi {
                    bail!("object {i} leaves the canvas at frame {t}");
                }
            }
        }
        for (t, set) in self.sounding.iter().enumerate() {
            for &k in set {
                if k >= self.objects.len() {
                    bail!("sounding index {k} at frame {t} out of range");
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub mode: String,
    pub seed: u64,
    pub n_class: usize,
    pub canvas: usize,
    pub t: usize,
    pub clips: usize,
    pub d_a: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    /// `[T, 3, H, W]` in `[0,1]`.
    pub frames: Tensor<f32>,
    /// `[T, d_a]`.
    pub audio: Tensor<f32>,
    /// `[T, H, W]` class ids, 0 = background.
    pub masks: Tensor<f32>,
    /// `[T]` 1.0 for real frames, 0.0 for padding; padding is a suffix.
    pub valid: Tensor<f32>,
}

impl Clip {
    pub fn t_total(&self) -> usize {
        self.frames.shape()[0]
    }

    /// Number of real (non-padding) leading frames.
    pub fn true_len(&self) -> usize {
        self.valid.data().iter().filter(|&&v| v > 0.5).count()
    }

    pub fn canvas(&self) -> usize {
        self.frames.shape()[3]
    }
}

/// Per-class unit vectors with pairwise |cosine| <= 0.3, drawn from the
/// dataset seed's stream 0 by rejection.
pub fn class_signatures(seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    loop {
        let mut sigs = Vec::with_capacity(SHAPE_CLASSES);
        for _ in 0..SHAPE_CLASSES {
            let raw: Tensor<f64> = normal(&mut rng, &[D_AUDIO], 1.0);
            let mut v = raw.data().to_vec();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in &mut v {
                *x /= norm;
            }
            sigs.push(v);
        }
        let mut ok = true;
        for i in 0..SHAPE_CLASSES {
            for j in i + 1..SHAPE_CLASSES {
                let cos: f64 = sigs[i].iter().zip(&sigs[j]).map(|(a, b)| a * b).sum();
                if cos.abs() > MAX_COS {
                    ok = false;
                }
            }
        }
        if ok {
            return sigs;
        }
    }
}

/// rng stream for one clip; streams are disjoint from the signature stream
/// so clips can be generated in any order.
pub fn clip_rng(seed: u64, clip_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(clip_index as u64 + 1);
    rng
}

/// Smooth per-channel background: a coarse uniform grid bilinearly
/// stretched to the canvas.
fn value_noise(rng: &mut ChaCha8Rng, canvas: usize) -> Vec<Vec<f32>> {
    let cells = 8usize;
    let grid = cells + 1;
    (0..3)
        .map(|_| {
            let coarse: Vec<f32> =
                (0..grid * grid).map(|_| rng.gen::<f32>() * BG_AMPLITUDE).collect();
            let mut out = vec![0f32; canvas * canvas];
            for y in 0..canvas {
                for x in 0..canvas {
                    let fy = y as f32 / canvas as f32 * cells as f32;
                    let fx = x as f32 / canvas as f32 * cells as f32;
                    let (y0, x0) = (fy as usize, fx as usize);
                    let (dy, dx) = (fy - y0 as f32, fx - x0 as f32);
                    let at = |yy: usize, xx: usize| coarse[yy.min(cells) * grid + xx.min(cells)];
                    let top = at(y0, x0) * (1.0 - dx) + at(y0, x0 + 1) * dx;
                    let bot = at(y0 + 1, x0) * (1.0 - dx) + at(y0 + 1, x0 + 1) * dx;
                    out[y * canvas + x] = top * (1.0 - dy) + bot * dy;
                }
            }
            out
        })
        .collect()
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Rasterizes the scene and synthesizes the audio track. `semantic` selects
/// class-id masks instead of the binary union.
pub fn generate_clip(
    spec: &SceneSpec,
    signatures: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
    semantic: bool,
) -> Result<Clip> {
    spec.validate()?;
    let c = spec.canvas;
    let bg = value_noise(rng, c);
    let t_pad = spec.t_pad;

    let mut frames = vec![0f32; t_pad * 3 * c * c];
    let mut masks = vec![0f32; t_pad * c * c];
    let mut audio = vec![0f32; t_pad * D_AUDIO];
    let mut valid = vec![0f32; t_pad];

    for t in 0..spec.t_true {
        valid[t] = 1.0;
        for ch in 0..3 {
            let dst = &mut frames[(t * 3 + ch) * c * c..(t * 3 + ch + 1) * c * c];
            dst.copy_from_slice(&bg[ch]);
        }
        let sounding = &spec.sounding[t];
        for (k, obj) in spec.objects.iter().enumerate() {
            let (cx, cy) = obj.center(t, spec.t_true);
            let sounds = sounding.contains(&k);
            for y in 0..c {
                for x in 0..c {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    if obj.shape.contains(cx, cy, obj.radius, px, py) {
                        for ch in 0..3 {
                            frames[((t * 3 + ch) * c + y) * c + x] = obj.color[ch];
                        }
                        if sounds {
                            masks[(t * c + y) * c + x] =
                                if semantic { (obj.class() + 1) as f32 } else { 1.0 };
                        }
                    }
                }
            }
        }
        for k in sounding {
            let sig = &signatures[spec.objects[*k].class()];
            for (i, s) in sig.iter().enumerate() {
                audio[t * D_AUDIO + i] += *s as f32;
            }
        }
        for i in 0..D_AUDIO {
            audio[t * D_AUDIO + i] += (spec.sigma * gaussian(rng)) as f32;
        }
    }

    Ok(Clip {
        frames: Tensor::from_vec(vec![t_pad, 3, c, c], frames)?,
        audio: Tensor::from_vec(vec![t_pad, D_AUDIO], audio)?,
        masks: Tensor::from_vec(vec![t_pad, c, c], masks)?,
        valid: Tensor::from_vec(vec![t_pad], valid)?,
    })
}

fn sample_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [0.45 + 0.55 * rng.gen::<f32>(), 0.45 + 0.55 * rng.gen::<f32>(), 0.45 + 0.55 * rng.gen::<f32>()]
}

fn radius_for(shape: Shape, rng: &mut ChaCha8Rng) -> f64 {
    match shape {
        Shape::Circle => 7.0 + 4.0 * rng.gen::<f64>(),
        Shape::Square => 7.0 + 3.0 * rng.gen::<f64>(),
        Shape::Triangle => 9.0 + 4.0 * rng.gen::<f64>(),
    }
}

/// Random scene for one clip of the given mode. Objects carry pairwise
/// distinct classes and never overlap in any frame, so every mask pixel is
/// attributable to exactly one object.
pub fn sample_scene(mode: Mode, canvas: usize, t_cfg: usize, sigma: f64, rng: &mut ChaCha8Rng) -> SceneSpec {
    let t_true = if mode.is_semantic() && t_cfg >= 10 {
        if rng.gen::<f64>() < 0.5 {
            5
        } else {
            10
        }
    } else {
        t_cfg
    };

    let count = 2 + rng.gen_range(0..2usize);
    let mut classes = [0usize, 1, 2];
    for i in (1..3).rev() {
        classes.swap(i, rng.gen_range(0..i + 1));
    }

    let mut attempt = 0usize;
    let objects = loop {
        attempt += 1;
        let slow = attempt > 200;
        let mut objs = Vec::with_capacity(count);
        for &class in classes.iter().take(count) {
            let shape = Shape::of_class(class);
            let r = radius_for(shape, rng) * if slow { 0.8 } else { 1.0 };
            let margin = r + 1.0;
            let span = canvas as f64 - 2.0 * margin;
            let start = (margin + span * rng.gen::<f64>(), margin + span * rng.gen::<f64>());
            let max_step = if slow { 4.0 } else { 10.0 };
            let end = (
                (start.0 + max_step * (2.0 * rng.gen::<f64>() - 1.0)).clamp(margin, canvas as f64 - margin),
                (start.1 + max_step * (2.0 * rng.gen::<f64>() - 1.0)).clamp(margin, canvas as f64 - margin),
            );
            objs.push(ObjectSpec { shape, color: sample_color(rng), start, end, radius: r });
        }
        let mut separated = true;
        'frames: for t in 0..t_true {
            for i in 0..objs.len() {
                for j in i + 1..objs.len() {
                    let a = objs[i].center(t, t_true);
                    let b = objs[j].center(t, t_true);
                    let need = objs[i].radius + objs[j].radius + 2.0;
                    let d2 = (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2);
                    if d2 < need * need {
                        separated = false;
                        break 'frames;
                    }
                }
            }
        }
        if separated {
            break objs;
        }
    };

    let sounding = match mode {
        Mode::Single => {
            let k = rng.gen_range(0..objects.len());
            vec![vec![k]; t_true]
        }
        Mode::Multi | Mode::Semantic => {
            let subset = |rng: &mut ChaCha8Rng| -> Vec<usize> {
                let size = 1 + rng.gen_range(0..objects.len().min(2));
                let mut idx: Vec<usize> = (0..objects.len()).collect();
                for i in (1..idx.len()).rev() {
                    idx.swap(i, rng.gen_range(0..i + 1));
                }
                let mut s: Vec<usize> = idx.into_iter().take(size).collect();
                s.sort_unstable();
                s
            };
            let first = subset(rng);
            let mut second = subset(rng);
            while second == first {
                second = subset(rng);
            }
            let switch = if t_true >= 4 { 2 + rng.gen_range(0..t_true - 3) } else { 1 };
            (0..t_true)
                .map(|t| if t < switch { first.clone() } else { second.clone() })
                .collect()
        }
    };

    SceneSpec { canvas, t_true, t_pad: t_cfg, objects, sounding, sigma }
}

pub fn clip_dir(root: &Path, idx: usize) -> PathBuf {
    root.join(format!("clip_{idx:04}"))
}

pub fn write_clip(root: &Path, idx: usize, clip: &Clip) -> Result<()> {
    let dir = clip_dir(root, idx);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    cctf::save(&dir.join("frames.cctf"), &clip.frames)?;
    cctf::save(&dir.join("audio.cctf"), &clip.audio)?;
    cctf::save(&dir.join("masks.cctf"), &clip.masks)?;
    cctf::save(&dir.join("valid.cctf"), &clip.valid)?;
    Ok(())
}

pub fn write_dataset(root: &Path, manifest: &Manifest, clips: &[Clip]) -> Result<()> {
    if manifest.clips != clips.len() {
        bail!("manifest says {} clips, got {}", manifest.clips, clips.len());
    }
    std::fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
    let json = serde_json::to_string_pretty(manifest)?;
    std::fs::write(root.join("manifest.json"), format!("{json}\n"))?;
    for (i, clip) in clips.iter().enumerate() {
        write_clip(root, i, clip)?;
    }
    Ok(())
}

pub fn load_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join("manifest.json");
    let text =
        std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let m: Manifest = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))?;
    Ok(m)
}

pub fn load_clip(root: &Path, idx: usize, manifest: &Manifest) -> Result<Clip> {
    let dir = clip_dir(root, idx);
    let name = dir.display().to_string();
    let frames: Tensor<f32> = cctf::load(&dir.join("frames.cctf"))?;
    let audio: Tensor<f32> = cctf::load(&dir.join("audio.cctf"))?;
    let masks: Tensor<f32> = cctf::load(&dir.join("masks.cctf"))?;
    let valid: Tensor<f32> = cctf::load(&dir.join("valid.cctf"))?;
    let (t, c) = (manifest.t, manifest.canvas);
    if frames.shape() != [t, 3, c, c] {
        bail!("{name}: frames shaped {:?}, manifest expects [{t},3,{c},{c}]", frames.shape());
    }
    if audio.shape() != [t, manifest.d_a] {
        bail!("{name}: audio shaped {:?}, manifest expects [{t},{}]", audio.shape(), manifest.d_a);
    }
    if masks.shape() != [t, c, c] {
        bail!("{name}: masks shaped {:?}, manifest expects [{t},{c},{c}]", masks.shape());
    }
    if valid.shape() != [t] {
        bail!("{name}: valid shaped {:?}, manifest expects [{t}]", valid.shape());
    }
    let id_cap = if manifest.n_class > 1 { manifest.n_class } else { 2 };
    for &m in masks.data() {
        if m.fract() != 0.0 || m < 0.0 || m as usize >= id_cap {
            bail!("{name}: mask id {m} outside 0..{id_cap}");
        }
    }
    let mut seen_pad = false;
    for &v in valid.data() {
        if v != 0.0 && v != 1.0 {
            bail!("{name}: validity flag {v} is not 0/1");
        }
        if v == 0.0 {
            seen_pad = true;
        } else if seen_pad {
            bail!("{name}: validity flags are not a prefix of ones");
        }
    }
    Ok(Clip { frames, audio, masks, valid })
}

pub fn load_dataset(root: &Path) -> Result<(Manifest, Vec<Clip>)> {
    let manifest = load_manifest(root)?;
    let clips = (0..manifest.clips)
        .map(|i| load_clip(root, i, &manifest))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, clips))
}

/// Generates a split in memory.
pub fn generate_dataset(
    mode: Mode,
    seed: u64,
    clips: usize,
    canvas: usize,
    t_cfg: usize,
    sigma: f64,
) -> Result<(Manifest, Vec<Clip>)> {
    let signatures = class_signatures(seed);
    let n_class = if mode.is_semantic() { SHAPE_CLASSES + 1 } else { 1 };
    let out: Vec<Clip> = (0..clips)
        .map(|i| {
            let mut rng = clip_rng(seed, i);
            let spec = sample_scene(mode, canvas, t_cfg, sigma, &mut rng);
            generate_clip(&spec, &signatures, &mut rng, mode.is_semantic())
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        mode: mode.label().to_string(),
        seed,
        n_class,
        canvas,
        t: t_cfg,
        clips,
        d_a: D_AUDIO,
    };
    Ok((manifest, out))
}

fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derived seed for the held-out split.
pub fn val_seed(seed: u64) -> u64 {
    mix64(seed ^ 0x5DEE_CE66_D667_ECC5)
}

/// Writes `root/train` and `root/val` splits.
pub fn generate_to_dir(
    root: &Path,
    mode: Mode,
    seed: u64,
    train_clips: usize,
    val_clips: usize,
    canvas: usize,
    t_cfg: usize,
    sigma: f64,
) -> Result<()> {
    let (m_train, c_train) = generate_dataset(mode, seed, train_clips, canvas, t_cfg, sigma)?;
    write_dataset(&root.join("train"), &m_train, &c_train)?;
    let (m_val, c_val) = generate_dataset(mode, val_seed(seed), val_clips, canvas, t_cfg, sigma)?;
    write_dataset(&root.join("val"), &m_val, &c_val)?;
    Ok(())
}

/// Clip-level horizontal flip with probability `p`; audio is untouched.
pub fn augment_flip(clip: &Clip, p: f64, rng: &mut ChaCha8Rng) -> Result<Clip> {
    if !(0.0..=1.0).contains(&p) {
        bail!("flip probability {p} outside [0,1]");
    }
    if rng.gen::<f64>() >= p {
        return Ok(clip.clone());
    }
    Ok(flip_clip(clip))
}

pub fn flip_clip(clip: &Clip) -> Clip {
    let fsh = clip.frames.shape().to_vec();
    let (t, c) = (fsh[0], fsh[3]);
    let mut frames = clip.frames.data().to_vec();
    for row in frames.chunks_exact_mut(c) {
        row.reverse();
    }
    let mut masks = clip.masks.data().to_vec();
    for row in masks.chunks_exact_mut(c) {
        row.reverse();
    }
    Clip {
        frames: Tensor::from_vec(fsh.clone(), frames).unwrap(),
        audio: clip.audio.clone(),
        masks: Tensor::from_vec(vec![t, c, c], masks).unwrap(),
        valid: clip.valid.clone(),
    }
}

/// Exported prediction: probabilities as CCTF plus one PGM per frame for
/// eyeballing.
pub fn write_prediction(dir: &Path, idx: usize, probs: &Tensor<f32>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let sh = probs.shape().to_vec();
    if sh.len() != 4 {
        bail!("prediction must be [T,n_class,H,W], got {sh:?}");
    }
    cctf::save(&dir.join(format!("pred_{idx:04}.cctf")), probs)?;
    let (t, n_class, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let data = probs.data();
    for f in 0..t {
        let mut gray = vec![0u8; h * w];
        if n_class == 1 {
            for p in 0..h * w {
                let v = data[f * h * w + p];
                gray[p] = if v >= 0.5 { 255 } else { 0 };
            }
        } else {
            let step = 255 / (n_class - 1);
            for p in 0..h * w {
                let mut best = 0usize;
                let mut best_v = f32::NEG_INFINITY;
                for cl in 0..n_class {
                    let v = data[(f * n_class + cl) * h * w + p];
                    if v > best_v {
                        best_v = v;
                        best = cl;
                    }
                }
                gray[p] = (best * step) as u8;
            }
        }
        let path = dir.join(format!("pred_{idx:04}_f{f:02}.pgm"));
        let mut out = Vec::with_capacity(gray.len() + 32);
        out.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
        out.extend_from_slice(&gray);
        std::fs::write(&path, out).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

/// Reads back an exported prediction tensor.
pub fn load_prediction(dir: &Path, idx: usize) -> Result<Tensor<f32>> {
    cctf::load(&dir.join(format!("pred_{idx:04}.cctf"))).map_err(|e| anyhow!(e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn spec_single_circle(canvas: usize, r: f64) -> SceneSpec {
        let c = canvas as f64 / 2.0;
        SceneSpec {
            canvas,
            t_true: 2,
            t_pad: 2,
            objects: vec![ObjectSpec {
                shape: Shape::Circle,
                color: [0.9, 0.5, 0.6],
                start: (c, c),
                end: (c, c),
                radius: r,
            }],
            sounding: vec![vec![0], vec![0]],
            sigma: 0.1,
        }
    }

    #[test]
    fn rasterized_circle_matches_per_pixel_oracle() {
        let spec = spec_single_circle(64, 8.0);
        let sigs = class_signatures(0);
        let mut rng = clip_rng(0, 0);
        let clip = generate_clip(&spec, &sigs, &mut rng, false).unwrap();
        let mask = clip.masks.data();
        let mut want = 0usize;
        for y in 0..64 {
            for x in 0..64 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let inside = (px - 32.0).powi(2) + (py - 32.0).powi(2) <= 64.0;
                assert_eq!(mask[y * 64 + x] > 0.0, inside, "pixel ({x},{y})");
                if inside {
                    want += 1;
                }
            }
        }
        let got = mask[..64 * 64].iter().filter(|&&m| m > 0.0).count();
        assert_eq!(got, want);
    }

    #[test]
    fn silent_frame_gives_pure_noise_and_empty_mask() {
        let mut spec = spec_single_circle(32, 6.0);
        spec.sounding = vec![vec![0], vec![]];
        let sigs = class_signatures(3);
        let mut rng = clip_rng(3, 0);
        let clip = generate_clip(&spec, &sigs, &mut rng, false).unwrap();
        let c = 32 * 32;
        assert!(clip.masks.data()[c..2 * c].iter().all(|&m| m == 0.0));
        assert!(clip.masks.data()[..c].iter().any(|&m| m > 0.0));
        let aud = &clip.audio.data()[D_AUDIO..2 * D_AUDIO];
        let norm: f32 = aud.iter().map(|a| a * a).sum::<f32>().sqrt();
        assert!(norm < 1.0, "silent frame audio norm {norm} looks like a signature");
    }

    #[test]
    fn label_soundness_every_mask_pixel_is_inside_a_sounding_object() {
        for (mode, seed) in [(Mode::Single, 5u64), (Mode::Multi, 6), (Mode::Semantic, 7)] {
            let t = if mode.is_semantic() { 10 } else { 5 };
            let (_, clips) = generate_dataset(mode, seed, 4, 64, t, 0.1).unwrap();
            for i in 0..clips.len() {
                let mut rng = clip_rng(seed, i);
                let spec = sample_scene(mode, 64, t, 0.1, &mut rng);
                let clip = &clips[i];
                for t_i in 0..spec.t_true {
                    for y in 0..64 {
                        for x in 0..64 {
                            let id = clip.masks.data()[(t_i * 64 + y) * 64 + x];
                            if id == 0.0 {
                                continue;
                            }
                            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                            let hit = spec.sounding[t_i].iter().any(|&k| {
                                let o = &spec.objects[k];
                                let (cx, cy) = o.center(t_i, spec.t_true);
                                let class_ok = !mode.is_semantic()
                                    || id as usize == o.class() + 1;
                                class_ok && o.shape.contains(cx, cy, o.radius, px, py)
                            });
                            assert!(hit, "mask pixel ({x},{y}) frame {t_i} clip {i} unexplained");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_byte_identical() {
        let a = TempDir::new().unwrap();
        let b = TempDir::new().unwrap();
        for root in [a.path(), b.path()] {
            generate_to_dir(root, Mode::Multi, 11, 3, 2, 64, 5, 0.1).unwrap();
        }
        let walk = |root: &Path| -> Vec<PathBuf> {
            let mut files = Vec::new();
            let mut stack = vec![root.to_path_buf()];
            while let Some(d) = stack.pop() {
                for e in std::fs::read_dir(&d).unwrap() {
                    let p = e.unwrap().path();
                    if p.is_dir() {
                        stack.push(p);
                    } else {
                        files.push(p);
                    }
                }
            }
            files.sort();
            files
        };
        let fa = walk(a.path());
        let fb = walk(b.path());
        assert_eq!(fa.len(), fb.len());
        for (pa, pb) in fa.iter().zip(&fb) {
            assert_eq!(
                pa.strip_prefix(a.path()).unwrap(),
                pb.strip_prefix(b.path()).unwrap()
            );
            assert_eq!(
                std::fs::read(pa).unwrap(),
                std::fs::read(pb).unwrap(),
                "bytes differ at {}",
                pa.display()
            );
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (manifest, clips) = generate_dataset(Mode::Semantic, 13, 3, 64, 10, 0.1).unwrap();
        let dir = TempDir::new().unwrap();
        write_dataset(dir.path(), &manifest, &clips).unwrap();
        let (m2, c2) = load_dataset(dir.path()).unwrap();
        assert_eq!(m2, manifest);
        assert_eq!(c2, clips);
    }

    #[test]
    fn corrupted_magic_is_an_error_naming_the_file() {
        let (manifest, clips) = generate_dataset(Mode::Single, 17, 1, 64, 5, 0.1).unwrap();
        let dir = TempDir::new().unwrap();
        write_dataset(dir.path(), &manifest, &clips).unwrap();
        let victim = clip_dir(dir.path(), 0).join("audio.cctf");
        let mut bytes = std::fs::read(&victim).unwrap();
        bytes[0] = b'X';
        std::fs::write(&victim, bytes).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("audio.cctf"), "error does not name the file: {err}");
    }

    #[test]
    fn dimension_mismatch_with_manifest_is_an_error() {
        let (mut manifest, clips) = generate_dataset(Mode::Single, 19, 1, 64, 5, 0.1).unwrap();
        let dir = TempDir::new().unwrap();
        write_dataset(dir.path(), &manifest, &clips).unwrap();
        manifest.t = 4;
        let json = serde_json::to_string_pretty(&manifest).unwrap();
        std::fs::write(dir.path().join("manifest.json"), json).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("frames"), "unexpected error: {err}");
    }

    #[test]
    fn flip_is_identity_at_p0_and_an_involution() {
        let (_, clips) = generate_dataset(Mode::Single, 23, 1, 64, 5, 0.1).unwrap();
        let clip = &clips[0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let same = augment_flip(clip, 0.0, &mut rng).unwrap();
        assert_eq!(&same, clip);
        let flipped = flip_clip(clip);
        assert_ne!(&flipped, clip);
        assert_eq!(flipped.audio, clip.audio);
        let count = |c: &Clip| c.masks.data().iter().filter(|&&m| m > 0.0).count();
        assert_eq!(count(&flipped), count(clip));
        assert_eq!(&flip_clip(&flipped), clip);
    }

    #[test]
    fn semantic_clips_are_five_or_ten_frames_with_suffix_padding() {
        let (manifest, clips) = generate_dataset(Mode::Semantic, 29, 12, 64, 10, 0.1).unwrap();
        assert_eq!(manifest.n_class, 4);
        let mut lens = std::collections::BTreeSet::new();
        for clip in &clips {
            let len = clip.true_len();
            lens.insert(len);
            assert!(len == 5 || len == 10, "clip length {len}");
            for t in len..clip.t_total() {
                let c = manifest.canvas;
                assert!(clip.frames.data()[t * 3 * c * c..(t + 1) * 3 * c * c]
                    .iter()
                    .all(|&v| v == 0.0));
                assert!(clip.masks.data()[t * c * c..(t + 1) * c * c].iter().all(|&v| v == 0.0));
            }
            for &id in clip.masks.data() {
                assert!((id as usize) < manifest.n_class);
            }
        }
        assert_eq!(lens.len(), 2, "expected both 5- and 10-frame clips in 12 draws");
    }

    #[test]
    fn signatures_are_unit_norm_and_nearly_orthogonal() {
        let sigs = class_signatures(31);
        for s in &sigs {
            let n: f64 = s.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        for i in 0..sigs.len() {
            for j in i + 1..sigs.len() {
                let cos: f64 = sigs[i].iter().zip(&sigs[j]).map(|(a, b)| a * b).sum();
                assert!(cos.abs() <= MAX_COS + 1e-12);
            }
        }
    }

    #[test]
    fn clip_generation_is_order_independent() {
        let (_, clips) = generate_dataset(Mode::Multi, 37, 4, 64, 5, 0.1).unwrap();
        let sigs = class_signatures(37);
        let mut rng = clip_rng(37, 2);
        let spec = sample_scene(Mode::Multi, 64, 5, 0.1, &mut rng);
        let alone = generate_clip(&spec, &sigs, &mut rng, false).unwrap();
        assert_eq!(alone, clips[2]);
    }

    fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, piv);
            b.swap(col, piv);
            let div = a[col][col];
            for x in a[col].iter_mut() {
                *x /= div;
            }
            b[col] /= div;
            for row in 0..n {
                if row != col && a[row][col] != 0.0 {
                    let f = a[row][col];
                    for k in 0..n {
                        a[row][k] -= f * a[col][k];
                    }
                    b[row] -= f * b[col];
                }
            }
        }
        b
    }

    #[test]
    fn linear_probe_recovers_sounding_classes() {
        let seed = 41;
        let (_, clips) = generate_dataset(Mode::Multi, seed, 40, 64, 5, 0.1).unwrap();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut labels: Vec<[f64; SHAPE_CLASSES]> = Vec::new();
        for (i, clip) in clips.iter().enumerate() {
            let mut rng = clip_rng(seed, i);
            let spec = sample_scene(Mode::Multi, 64, 5, 0.1, &mut rng);
            for t in 0..spec.t_true {
                let mut row: Vec<f64> =
                    clip.audio.data()[t * D_AUDIO..(t + 1) * D_AUDIO].iter().map(|&v| v as f64).collect();
                row.push(1.0);
                rows.push(row);
                let mut lab = [0.0; SHAPE_CLASSES];
                for &k in &spec.sounding[t] {
                    lab[spec.objects[k].class()] = 1.0;
                }
                labels.push(lab);
            }
        }
        let split = rows.len() * 7 / 10;
        let dim = D_AUDIO + 1;
        let mut weights = Vec::new();
        for class in 0..SHAPE_CLASSES {
            let mut ata = vec![vec![0.0; dim]; dim];
            let mut atb = vec![0.0; dim];
            for (row, lab) in rows[..split].iter().zip(&labels[..split]) {
                for i in 0..dim {
                    for j in 0..dim {
                        ata[i][j] += row[i] * row[j];
                    }
                    atb[i] += row[i] * lab[class];
                }
            }
            for i in 0..dim {
                ata[i][i] += 1e-3;
            }
            weights.push(solve(ata, atb));
        }
        let mut exact = 0usize;
        for (row, lab) in rows[split..].iter().zip(&labels[split..]) {
            let ok = (0..SHAPE_CLASSES).all(|class| {
                let score: f64 = weights[class].iter().zip(row).map(|(w, x)| w * x).sum();
                (score > 0.5) == (lab[class] > 0.5)
            });
            if ok {
                exact += 1;
            }
        }
        let acc = exact as f64 / (rows.len() - split) as f64;
        assert!(acc >= 0.95, "probe exact-match accuracy {acc:.3} below 0.95");
    }

    #[test]
    fn prediction_export_writes_cctf_and_pgm() {
        let dir = TempDir::new().unwrap();
        let probs =
            Tensor::from_vec(vec![2, 1, 4, 4], (0..32).map(|i| (i % 2) as f32).collect()).unwrap();
        write_prediction(dir.path(), 7, &probs).unwrap();
        let back = load_prediction(dir.path(), 7).unwrap();
        assert_eq!(back, probs);
        let pgm = std::fs::read(dir.path().join("pred_0007_f01.pgm")).unwrap();
        assert_eq!(&pgm[..2], b"P5");
        assert_eq!(pgm.len(), "P5\n4 4\n255\n".len() + 16);
    }
}
