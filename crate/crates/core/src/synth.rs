//! Procedural paired scenes: EO, clean SAR, speckled SAR draws and a water mask,
//! all derived from one smooth random elevation field.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DseError, Result};
use crate::rng;
use crate::speckle::{simulate_speckle, SpeckleParams};
use crate::tile::{write_tile, Tile, TileKind};

/// Clean SAR reflectivity of open water.
pub const WATER_REFLECTIVITY: f32 = 0.05;
/// Land reflectivity is `LAND_BASE + LAND_TEXTURE · elevation`.
pub const LAND_BASE: f32 = 0.3;
pub const LAND_TEXTURE: f32 = 0.4;
/// VH backscatter as a fraction of VV.
pub const CROSS_POL_RATIO: f32 = 0.5;

const MIN_WATER_FRACTION: f64 = 0.05;
const MAX_WATER_FRACTION: f64 = 0.6;
const MAX_ATTEMPTS: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub size: usize,
    /// Field values below this level are water. The field lies in `[0, 1)`.
    pub water_level: f64,
    /// Number of value-noise octaves.
    pub smoothness: usize,
    pub looks: f64,
    pub seed: u64,
    pub n_timesteps: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            size: 32,
            water_level: 0.45,
            smoothness: 3,
            looks: 4.0,
            seed: 0,
            n_timesteps: 1,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(DseError::config(format!("scene size must be >= 16, got {}", self.size)));
        }
        if self.smoothness == 0 {
            return Err(DseError::config("smoothness needs at least one octave"));
        }
        if self.n_timesteps == 0 {
            return Err(DseError::config("n_timesteps must be >= 1"));
        }
        SpeckleParams::new(self.looks, 0)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub eo: Tile,
    /// Two channels: VV, VH.
    pub sar_clean: Tile,
    pub sar_noisy: Vec<Tile>,
    pub mask: Tile,
    pub water_fraction: f64,
}

/// Seeded value noise: bilinear-interpolated random lattices, one per octave,
/// with halving amplitude. Output lies in `[0, 1)`.
pub fn value_noise(size: usize, octaves: usize, seed: u64) -> Vec<f64> {
    let mut field = vec![0.0; size * size];
    let mut total_amp = 0.0;
    for o in 0..octaves {
        let cells = 2usize << o;
        let n = cells + 1;
        let mut r = rng::seeded(rng::derive_seed(seed, o as u64));
        let lattice: Vec<f64> = (0..n * n).map(|_| r.random::<f64>()).collect();
        let amp = 0.5f64.powi(o as i32);
        total_amp += amp;
        for y in 0..size {
            let fy = y as f64 / size as f64 * cells as f64;
            let (y0, ty) = (fy.floor() as usize, smooth(fy.fract()));
            for x in 0..size {
                let fx = x as f64 / size as f64 * cells as f64;
                let (x0, tx) = (fx.floor() as usize, smooth(fx.fract()));
                let v00 = lattice[y0 * n + x0];
                let v01 = lattice[y0 * n + x0 + 1];
                let v10 = lattice[(y0 + 1) * n + x0];
                let v11 = lattice[(y0 + 1) * n + x0 + 1];
                let top = v00 + (v01 - v00) * tx;
                let bot = v10 + (v11 - v10) * tx;
                field[y * size + x] += amp * (top + (bot - top) * ty);
            }
        }
    }
    field.iter_mut().for_each(|v| *v /= total_amp);
    field
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn lerp3(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

/// EO colour for a field value.
fn eo_color(f: f64, water_level: f64) -> [f32; 3] {
    if f < water_level {
        let depth = ((water_level - f) / water_level.max(1e-9)).clamp(0.0, 1.0) as f32;
        lerp3([0.12, 0.28, 0.55], [0.03, 0.10, 0.35], depth)
    } else {
        let e = ((f - water_level) / (1.0 - water_level).max(1e-9)).clamp(0.0, 1.0) as f32;
        lerp3([0.20, 0.50, 0.15], [0.55, 0.42, 0.28], e)
    }
}

fn vv_reflectivity(f: f64, water_level: f64) -> f32 {
    if f < water_level {
        WATER_REFLECTIVITY
    } else {
        let e = ((f - water_level) / (1.0 - water_level).max(1e-9)).clamp(0.0, 1.0) as f32;
        LAND_BASE + LAND_TEXTURE * e
    }
}

/// Seed of the `k`-th speckle draw of a scene.
pub fn speckle_seed(scene_seed: u64, k: usize) -> u64 {
    rng::derive_seed(scene_seed, 0x5EC_0000 + k as u64)
}

pub fn gen_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let n = spec.size;
    let plane = n * n;
    let mut found = None;
    let mut last_fraction = 0.0;
    for attempt in 0..MAX_ATTEMPTS {
        let field = value_noise(n, spec.smoothness, rng::derive_seed(spec.seed, 0xF1E1D + attempt));
        let water = field.iter().filter(|&&f| f < spec.water_level).count() as f64 / plane as f64;
        last_fraction = water;
        if water > MIN_WATER_FRACTION && water < MAX_WATER_FRACTION {
            found = Some((field, water));
            break;
        }
    }
    let (field, water_fraction) = found.ok_or_else(|| {
        DseError::Generation(format!(
            "water fraction outside ({MIN_WATER_FRACTION}, {MAX_WATER_FRACTION}) after {MAX_ATTEMPTS} attempts (last {last_fraction:.3})"
        ))
    })?;

    let mask_data: Vec<f32> = field.iter().map(|&f| (f < spec.water_level) as u8 as f32).collect();
    let mut eo = vec![0f32; 3 * plane];
    let mut sar = vec![0f32; 2 * plane];
    for (i, &f) in field.iter().enumerate() {
        let rgb = eo_color(f, spec.water_level);
        for c in 0..3 {
            eo[c * plane + i] = rgb[c];
        }
        let vv = vv_reflectivity(f, spec.water_level);
        sar[i] = vv;
        sar[plane + i] = CROSS_POL_RATIO * vv;
    }
    let sar_clean = Tile::new(n, n, 2, TileKind::SarLinear, sar)?;
    let sar_noisy = (0..spec.n_timesteps)
        .map(|k| simulate_speckle(&sar_clean, &SpeckleParams::new(spec.looks, speckle_seed(spec.seed, k))?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Scene {
        eo: Tile::new(n, n, 3, TileKind::EoRgb, eo)?,
        sar_clean,
        sar_noisy,
        mask: Tile::new(n, n, 1, TileKind::Mask, mask_data)?,
        water_fraction,
    })
}

/// Generates `n` scenes with seeds `seed, seed + 1, …`.
pub fn gen_scenes(n: usize, template: &SceneSpec, seed: u64) -> Result<Vec<Scene>> {
    (0..n)
        .map(|i| {
            gen_scene(&SceneSpec {
                seed: seed.wrapping_add(i as u64),
                ..*template
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub eo_path: String,
    pub sar_clean_path: String,
    pub sar_noisy_paths: Vec<String>,
    pub mask_path: String,
    pub seed: u64,
}

/// Writes `n` scenes as `DSET` tiles under `out_dir` plus `manifest.json`
/// (the entry array) and `spec.json` (the template echo). Paths in the
/// manifest are relative to `out_dir`.
pub fn gen_corpus(n: usize, template: &SceneSpec, seed: u64, out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    if n == 0 {
        return Err(DseError::argument("corpus needs at least one scene"));
    }
    fs::create_dir_all(out_dir)?;
    let mut manifest = Vec::with_capacity(n);
    for i in 0..n {
        let scene_seed = seed.wrapping_add(i as u64);
        let scene = gen_scene(&SceneSpec {
            seed: scene_seed,
            ..*template
        })?;
        let id = format!("scene_{i:05}");
        let eo_path = format!("{id}_eo.dset");
        let sar_clean_path = format!("{id}_sar_clean.dset");
        let mask_path = format!("{id}_mask.dset");
        write_tile(&scene.eo, out_dir.join(&eo_path))?;
        write_tile(&scene.sar_clean, out_dir.join(&sar_clean_path))?;
        write_tile(&scene.mask, out_dir.join(&mask_path))?;
        let mut sar_noisy_paths = Vec::new();
        for (k, t) in scene.sar_noisy.iter().enumerate() {
            let p = format!("{id}_sar_noisy_{k}.dset");
            write_tile(t, out_dir.join(&p))?;
            sar_noisy_paths.push(p);
        }
        manifest.push(ManifestEntry {
            id,
            eo_path,
            sar_clean_path,
            sar_noisy_paths,
            mask_path,
            seed: scene_seed,
        });
    }
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| DseError::format(e.to_string()))?;
    fs::write(out_dir.join("manifest.json"), json)?;
    let spec_json = serde_json::to_string_pretty(&serde_json::json!({
        "template": template,
        "seed": seed,
        "n": n,
    }))
    .map_err(|e| DseError::format(e.to_string()))?;
    fs::write(out_dir.join("spec.json"), spec_json)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    serde_json::from_str(&text).map_err(|e| DseError::format(format!("manifest: {e}")))
}
