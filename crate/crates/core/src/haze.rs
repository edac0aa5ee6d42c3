//! Synthetic haze from the atmospheric scattering model
//! `I = J * t + A * (1 - t)` with `t = exp(-beta * d)`.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{list_images, load_image, save_image, to_rgb};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Floor applied to the transmission when inverting the model.
pub const T_MIN: f64 = 1e-3;

/// `t(x) = exp(-beta * depth(x))`.
pub fn transmission_from_depth(depth: &Tensor, beta: f64) -> Result<Tensor> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::invalid(format!("beta must be finite and non-negative, got {beta}")));
    }
    if depth.data().iter().any(|&d| !(d >= 0.0) || !d.is_finite()) {
        return Err(Error::invalid("depth must be finite and non-negative"));
    }
    Ok(depth.map(|d| (-beta * d).exp()))
}

fn check_atmosphere(a: f64) -> Result<()> {
    if a > 0.0 && a <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("atmosphere light must lie in (0, 1], got {a}")))
    }
}

/// Broadcast `t` (one channel, or as many as `img`) against `img`.
fn per_pixel(img: &Tensor, t: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let (s, ts) = (img.shape(), t.shape());
    let ok = ts.n == s.n && ts.h == s.h && ts.w == s.w && (ts.c == 1 || ts.c == s.c);
    if !ok {
        return Err(Error::shape("transmission broadcast", s, ts));
    }
    Ok(Tensor::from_fn(s, |n, c, y, x| {
        let tc = if ts.c == 1 { 0 } else { c };
        f(img.at(n, c, y, x), t.at(n, tc, y, x))
    }))
}

/// Forward model. No clamping; values may leave `[0, 1]` only if `clear` does.
pub fn compose_haze(clear: &Tensor, t: &Tensor, a: f64) -> Result<Tensor> {
    check_atmosphere(a)?;
    per_pixel(clear, t, |j, t| j * t + a * (1.0 - t))
}

/// `J = (I - A) / max(t, T_MIN) + A`.
pub fn invert_asm(hazy: &Tensor, t: &Tensor, a: f64) -> Result<Tensor> {
    check_atmosphere(a)?;
    per_pixel(hazy, t, |i, t| (i - a) / t.max(T_MIN) + a)
}

/// Synthetic depth layouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DepthMode {
    /// Depth grows linearly along a random direction.
    LinearRamp,
    /// Depth grows with distance from a random centre.
    Radial,
    /// Smooth multi-octave value noise.
    Perlin,
    /// One of the three above, drawn per image.
    Mixed,
}

impl DepthMode {
    pub fn name(self) -> &'static str {
        match self {
            DepthMode::LinearRamp => "linear-ramp",
            DepthMode::Radial => "radial",
            DepthMode::Perlin => "perlin",
            DepthMode::Mixed => "mixed",
        }
    }
}

/// Depth map in `[0, 1]` of shape `(1, 1, h, w)`. `Mixed` draws a concrete
/// mode first; the mode actually used is returned.
pub fn depth_map(mode: DepthMode, h: usize, w: usize, rng: &mut impl Rng) -> (Tensor, DepthMode) {
    let mode = match mode {
        DepthMode::Mixed => [DepthMode::LinearRamp, DepthMode::Radial, DepthMode::Perlin][rng.random_range(0..3)],
        m => m,
    };
    let shape = Shape::new(1, 1, h, w);
    let (fh, fw) = ((h.max(2) - 1) as f64, (w.max(2) - 1) as f64);
    let raw = match mode {
        DepthMode::LinearRamp => {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (dy, dx) = theta.sin_cos();
            Tensor::from_fn(shape, |_, _, y, x| dy * y as f64 / fh + dx * x as f64 / fw)
        }
        DepthMode::Radial => {
            let (cy, cx) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
            Tensor::from_fn(shape, |_, _, y, x| {
                let (u, v) = (y as f64 / fh - cy, x as f64 / fw - cx);
                (u * u + v * v).sqrt()
            })
        }
        DepthMode::Perlin => value_noise(h, w, 4, rng),
        DepthMode::Mixed => unreachable!("resolved above"),
    };
    (normalize_unit(&raw), mode)
}

fn normalize_unit(t: &Tensor) -> Tensor {
    let (lo, hi) = (t.min(), t.max());
    if hi - lo < 1e-12 {
        return Tensor::zeros(t.shape());
    }
    t.map(|v| (v - lo) / (hi - lo))
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Sum of `octaves` layers of bilinearly smoothed lattice noise.
fn value_noise(h: usize, w: usize, octaves: u32, rng: &mut impl Rng) -> Tensor {
    let mut out = Tensor::zeros(Shape::new(1, 1, h, w));
    for o in 0..octaves {
        let cells = 2usize << o;
        let amp = 0.5f64.powi(o as i32);
        let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.random_range(0.0..1.0)).collect();
        let at = |i: usize, j: usize| lattice[i * (cells + 1) + j];
        let plane = out.plane_mut(0, 0);
        for y in 0..h {
            let fy = y as f64 / h as f64 * cells as f64;
            let (iy, ty) = (fy.floor() as usize, smoothstep(fy.fract()));
            for x in 0..w {
                let fx = x as f64 / w as f64 * cells as f64;
                let (ix, tx) = (fx.floor() as usize, smoothstep(fx.fract()));
                let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
                let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
                plane[y * w + x] += amp * (top * (1.0 - ty) + bot * ty);
            }
        }
    }
    out
}

/// A procedural clear scene: a vertical sky-to-ground gradient with a few
/// coloured boxes and discs and a little smooth texture.
pub fn procedural_scene(h: usize, w: usize, rng: &mut impl Rng) -> Tensor {
    let mut color = || [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)];
    let (top, bottom) = (color(), color());
    let mut img = Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, _| {
        let t = y as f64 / (h.max(2) - 1) as f64;
        top[c] * (1.0 - t) + bottom[c] * t
    });
    let shapes = rng.random_range(3..7);
    for _ in 0..shapes {
        let col = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
        let (cy, cx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        let (ry, rx) = (
            rng.random_range(0.08..0.35) * h as f64,
            rng.random_range(0.08..0.35) * w as f64,
        );
        let disc = rng.random_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                let inside = if disc { u * u + v * v <= 1.0 } else { u.abs() <= 1.0 && v.abs() <= 1.0 };
                if inside {
                    for (c, &cv) in col.iter().enumerate() {
                        img.set(0, c, y, x, cv);
                    }
                }
            }
        }
    }
    let texture = value_noise(h, w, 3, rng);
    for c in 0..3 {
        let plane = img.plane_mut(0, c);
        for (v, t) in plane.iter_mut().zip(texture.data()) {
            *v = (*v + 0.15 * (t - 0.5)).clamp(0.0, 1.0);
        }
    }
    img
}

/// Write `n` procedural clear scenes as `scene_{i:05}.png` under `dir`.
pub fn write_procedural_scenes(dir: &Path, n: usize, h: usize, w: usize, seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    (0..n)
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let img = procedural_scene(h, w, &mut rng);
            let path = dir.join(format!("scene_{i:05}.png"));
            save_image(&img, &path)?;
            Ok(path)
        })
        .collect()
}

/// Independent generator for item `index` of a run seeded with `seed`.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Haze synthesis parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub seed: u64,
    pub beta_range: [f64; 2],
    pub a_range: [f64; 2],
    pub depth_mode: DepthMode,
    /// Source of clear images; `None` means procedural scenes.
    pub clear_dir: Option<PathBuf>,
    /// Size of procedural scenes when no `clear_dir` is given.
    pub scene_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 16,
            seed: 0,
            beta_range: [0.5, 2.0],
            a_range: [0.7, 1.0],
            depth_mode: DepthMode::Mixed,
            clear_dir: None,
            scene_size: 64,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let [b0, b1] = self.beta_range;
        if !(0.0 <= b0 && b0 <= b1 && b1.is_finite()) {
            return Err(Error::Config(format!("synth.beta_range {:?} must satisfy 0 <= lo <= hi", self.beta_range)));
        }
        let [a0, a1] = self.a_range;
        if !(0.0 < a0 && a0 <= a1 && a1 <= 1.0) {
            return Err(Error::Config(format!("synth.a_range {:?} must lie in (0, 1] with lo <= hi", self.a_range)));
        }
        if self.clear_dir.is_none() && (self.scene_size == 0 || self.scene_size % 4 != 0) {
            return Err(Error::Config("synth.scene_size must be a positive multiple of 4".into()));
        }
        Ok(())
    }
}

/// One line of `manifest.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub name: String,
    pub beta: f64,
    #[serde(rename = "A")]
    pub a: f64,
    pub depth_mode: DepthMode,
    /// Seed of this pair's own generator, enough to regenerate it alone.
    pub seed: u64,
    pub source: String,
}

fn pair_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the run seed and index
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn draw(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Hazy image for one pair, given the pair's own seed.
pub fn synthesize_pair(clear: &Tensor, cfg: &SynthConfig, seed: u64) -> Result<(Tensor, f64, f64, DepthMode)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta = draw(&mut rng, cfg.beta_range);
    let a = draw(&mut rng, cfg.a_range);
    let s = clear.shape();
    let (depth, mode) = depth_map(cfg.depth_mode, s.h, s.w, &mut rng);
    let t = transmission_from_depth(&depth, beta)?;
    let hazy = compose_haze(clear, &t, a)?;
    Ok((hazy.clamp(0.0, 1.0), beta, a, mode))
}

/// Write `n` pairs to `out_dir/{hazy,clear}/{i:05}.png` and a JSON-lines
/// manifest. Pair `i` uses source image `i mod len` in name order.
pub fn synth_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<Vec<ManifestRecord>> {
    cfg.validate()?;
    let sources: Vec<(String, Option<PathBuf>)> = match &cfg.clear_dir {
        Some(dir) => {
            let found = list_images(dir)?;
            if found.is_empty() {
                return Err(Error::Config(format!("clear image directory {} is empty", dir.display())));
            }
            found.into_iter().map(|(n, p)| (n, Some(p))).collect()
        }
        None => vec![("procedural".to_string(), None)],
    };
    if cfg.n == 0 {
        return Ok(Vec::new());
    }
    for sub in ["hazy", "clear"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut records = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let seed = pair_seed(cfg.seed, i as u64);
        let (src_name, src_path) = &sources[i % sources.len()];
        let (clear, source) = match src_path {
            Some(p) => (to_rgb(load_image(p)?)?, p.display().to_string()),
            None => {
                let mut rng = stream_rng(seed, 1);
                let s = cfg.scene_size;
                (procedural_scene(s, s, &mut rng), format!("{src_name}:{seed}"))
            }
        };
        // score against what is actually stored on disk
        let clear = quantized(&clear);
        let (hazy, beta, a, mode) = synthesize_pair(&clear, cfg, seed)?;
        let name = format!("{i:05}");
        save_image(&hazy, &out_dir.join("hazy").join(format!("{name}.png")))?;
        save_image(&clear, &out_dir.join("clear").join(format!("{name}.png")))?;
        records.push(ManifestRecord {
            name,
            beta,
            a,
            depth_mode: mode,
            seed,
            source,
        });
    }
    let path = out_dir.join("manifest.jsonl");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
    for r in &records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    f.flush().map_err(|e| Error::io(&path, e))?;
    Ok(records)
}

fn quantized(img: &Tensor) -> Tensor {
    img.map(|v| crate::data::quantize(v, crate::data::BitDepth::Eight) as f64 / 255.0)
}
