//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every image crosses the boundary as tightly packed RGBA bytes of a
//! square `size × size` canvas.

use dse_core::bridge::{eps_sample, forward_marginal, make_step_schedule, BridgeSchedule, EpsSource};
use dse_core::despeckle::{despeckle_kernel, BiasCorrection, Despeckler, KernelBank, KernelSelection};
use dse_core::latent::{tile_to_tensor, tensor_to_tile, LatentCodec};
use dse_core::metrics::psnr;
use dse_core::rng;
use dse_core::synth::{gen_scene, gen_scenes, Scene, SceneSpec};
use dse_core::tensor::Tensor;
use dse_core::tile::{compose_sar3_pair, normalize, to_db, Tile, TileKind, DB_FLOOR};
use dse_core::translator::{ensemble_translate, train_translator, Pipeline, TrainConfig, TrainPair, UNetPredictor};
use wasm_bindgen::prelude::*;

const T: usize = 1000;

fn normals(n: usize, seed: u64) -> Vec<f64> {
    let src = EpsSource::standard_normal(1.0).expect("unit scale is valid");
    eps_sample(&src, n, rng::derive_seed(seed, 1)).expect("standard normal sampling cannot fail")
}

fn err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn scene(size: usize, looks: f64, seed: u64) -> Result<Scene, JsError> {
    gen_scene(&SceneSpec {
        size,
        looks,
        seed,
        ..Default::default()
    })
    .map_err(err)
}

/// Grey for one channel, RGB for three; values clamp to `[0, 1]`.
pub fn rgba(tile: &Tile) -> Vec<u8> {
    let plane = tile.plane();
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut out = Vec::with_capacity(plane * 4);
    for i in 0..plane {
        let (r, g, b) = if tile.channels() >= 3 {
            (tile.channel(0)[i], tile.channel(1)[i], tile.channel(2)[i])
        } else {
            let v = tile.channel(0)[i];
            (v, v, v)
        };
        out.extend_from_slice(&[q(r), q(g), q(b), 255]);
    }
    out
}

/// First channel of a linear SAR tile in dB, stretched to `[0, 1]`.
fn sar_view(tile: &Tile) -> Result<Tile, JsError> {
    let vv = tile.extract_channel(0).map_err(err)?;
    normalize(&to_db(&vv, DB_FLOOR).map_err(err)?, 1.0, 99.0).map_err(err)
}

fn composite(sar: &Tile) -> Result<Tile, JsError> {
    normalize(&compose_sar3_pair(sar).map_err(err)?, 1.0, 99.0).map_err(err)
}

#[wasm_bindgen]
pub struct SpeckleView {
    clean: Vec<u8>,
    noisy: Vec<u8>,
    despeckled: Vec<u8>,
    psnr_noisy: f64,
    psnr_despeckled: f64,
}

#[wasm_bindgen]
impl SpeckleView {
    pub fn clean(&self) -> Vec<u8> {
        self.clean.clone()
    }
    pub fn noisy(&self) -> Vec<u8> {
        self.noisy.clone()
    }
    pub fn despeckled(&self) -> Vec<u8> {
        self.despeckled.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn psnr_noisy(&self) -> f64 {
        self.psnr_noisy
    }
    #[wasm_bindgen(getter)]
    pub fn psnr_despeckled(&self) -> f64 {
        self.psnr_despeckled
    }
}

/// Speckles a synthetic scene with `looks` and despeckles it with the kernel
/// bank. PSNR is measured on linear intensities against the clean scene.
#[wasm_bindgen]
pub fn speckle_and_despeckle(size: usize, looks: f64, seed: u64, average: bool) -> Result<SpeckleView, JsError> {
    let s = scene(size, looks, seed)?;
    let selection = if average {
        KernelSelection::Average
    } else {
        KernelSelection::MinLocalVariance
    };
    let noisy = &s.sar_noisy[0];
    let den = despeckle_kernel(noisy, &KernelBank::default_bank(selection), BiasCorrection::Analytic { looks })
        .map_err(err)?;
    // Share one stretch across the three panels so they compare directly.
    let stretch = |t: &Tile| -> Result<Vec<u8>, JsError> {
        let db = to_db(&t.extract_channel(0).map_err(err)?, DB_FLOOR).map_err(err)?;
        let scaled: Vec<f32> = db.data().iter().map(|v| (v + 25.0) / 25.0).collect();
        Ok(rgba(&Tile::new(t.width(), t.height(), 1, TileKind::Latent, scaled).map_err(err)?))
    };
    Ok(SpeckleView {
        clean: stretch(&s.sar_clean)?,
        noisy: stretch(noisy)?,
        despeckled: stretch(&den)?,
        psnr_noisy: psnr(noisy, &s.sar_clean, 1.0).map_err(err)?,
        psnr_despeckled: psnr(&den, &s.sar_clean, 1.0).map_err(err)?,
    })
}

/// Forward bridge states between the EO image (`t = 0`) and the SAR
/// composite (`t = T`) at `frames` evenly spaced steps, concatenated.
#[wasm_bindgen]
pub fn bridge_frames(size: usize, seed: u64, variance_scale: f64, frames: usize) -> Result<Vec<u8>, JsError> {
    if frames < 2 {
        return Err(JsError::new("need at least two frames"));
    }
    let s = scene(size, 4.0, seed)?;
    let schedule = BridgeSchedule::new(T, variance_scale).map_err(err)?;
    let x0 = tile_to_tensor(&s.eo);
    let y = tile_to_tensor(&composite(&s.sar_noisy[0])?);
    // One noise field for the whole trajectory keeps frames comparable.
    let eps = Tensor::from_vec(x0.channels, x0.height, x0.width, normals(x0.len(), seed)).map_err(err)?;
    let mut out = Vec::with_capacity(frames * size * size * 4);
    for k in 0..frames {
        let t = k * T / (frames - 1);
        let x = forward_marginal(&schedule, &x0, &y, t, &eps).map_err(err)?;
        out.extend(rgba(&tensor_to_tile(&x, TileKind::Latent).map_err(err)?));
    }
    Ok(out)
}

/// A small translator trained in the page on synthetic pairs.
#[wasm_bindgen]
pub struct TinyTranslator {
    predictor: UNetPredictor,
    pipeline: Pipeline,
    size: usize,
    loss_curve: Vec<f64>,
}

#[wasm_bindgen]
pub struct EnsembleView {
    sar: Vec<u8>,
    truth: Vec<u8>,
    mean: Vec<u8>,
    variance: Vec<u8>,
    mean_variance: f64,
}

#[wasm_bindgen]
impl EnsembleView {
    pub fn sar(&self) -> Vec<u8> {
        self.sar.clone()
    }
    pub fn truth(&self) -> Vec<u8> {
        self.truth.clone()
    }
    pub fn mean(&self) -> Vec<u8> {
        self.mean.clone()
    }
    /// Variance scaled so the largest pixel is white.
    pub fn variance(&self) -> Vec<u8> {
        self.variance.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn mean_variance(&self) -> f64 {
        self.mean_variance
    }
}

#[wasm_bindgen]
impl TinyTranslator {
    /// Trains on `pairs` scenes of `size × size` pixels with a 2× pooling codec.
    #[wasm_bindgen(constructor)]
    pub fn new(size: usize, pairs: usize, epochs: usize, seed: u64) -> Result<TinyTranslator, JsError> {
        let spec = SceneSpec {
            size,
            ..Default::default()
        };
        let scenes = gen_scenes(pairs, &spec, seed).map_err(err)?;
        let codec = LatentCodec::pool(3, 2).map_err(err)?;
        let pipeline = Pipeline::new(codec, BridgeSchedule::new(T, 1.0).map_err(err)?).with_despeckler(Despeckler::Kernel {
            bank: KernelBank::default(),
            bias: BiasCorrection::Analytic { looks: spec.looks },
        });
        let data: Vec<TrainPair> = scenes
            .iter()
            .map(|s| TrainPair::single(s.sar_noisy[0].clone(), s.eo.clone()))
            .collect();
        let cfg = TrainConfig {
            epochs,
            width: 16,
            time_dim: 16,
            lr: 1e-3,
            seed,
            ..Default::default()
        };
        let trained = train_translator(&data, &pipeline, &cfg).map_err(err)?;
        Ok(TinyTranslator {
            predictor: trained.predictor,
            pipeline,
            size,
            loss_curve: trained.loss_curve,
        })
    }

    pub fn loss_curve(&self) -> Vec<f64> {
        self.loss_curve.clone()
    }

    /// `k` samples for a held-out scene; returns their mean and variance map.
    pub fn ensemble(&self, scene_seed: u64, k: usize, scale: f64, steps: usize) -> Result<EnsembleView, JsError> {
        let s = scene(self.size, 4.0, scene_seed)?;
        let steps = make_step_schedule(T, steps).map_err(err)?;
        let eps = EpsSource::standard_normal(scale).map_err(err)?;
        let e = ensemble_translate(&s.sar_noisy, &self.predictor, &self.pipeline, &steps, &eps, k, scene_seed)
            .map_err(err)?;
        let peak = e.variance.data().iter().cloned().fold(0.0f32, f32::max);
        let var_view: Vec<f32> = e
            .variance
            .data()
            .iter()
            .map(|&v| if peak > 0.0 { v / peak } else { 0.0 })
            .collect();
        Ok(EnsembleView {
            sar: rgba(&sar_view(&s.sar_noisy[0])?),
            truth: rgba(&s.eo),
            mean: rgba(&e.mean),
            variance: rgba(&Tile::new(self.size, self.size, 1, TileKind::Latent, var_view).map_err(err)?),
            mean_variance: e.variance.mean(),
        })
    }
}
