//! Blind-spot despeckling in the log domain.
//!
//! Taking logs turns multiplicative speckle into additive noise with a
//! constant offset `E[ln N] = ψ(L) - ln L`. Both estimators below predict each
//! pixel from its neighbours only and then remove that offset.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::digamma;

use crate::error::{DseError, Result};
use crate::latent::tile_to_tensor;
use crate::nn::{mse_loss, read_container, write_container, Adam, ConvLayer, Graph, ParamStore, Var};
use crate::rng;
use crate::tensor::Tensor;
use crate::tile::{Tile, TileKind, DB_FLOOR};

/// `E[ln N]` for unit-mean gamma speckle with `looks` looks.
pub fn log_speckle_mean(looks: f64) -> f64 {
    digamma(looks) - looks.ln()
}

/// How the log-domain offset is removed before exponentiating.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BiasCorrection {
    /// Subtract `ψ(L) - ln L` for known looks.
    Analytic { looks: f64 },
    /// Pick the per-channel offset that preserves the linear-domain mean.
    Empirical,
    None,
}

/// A square weight grid with a zero centre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub size: usize,
    pub weights: Vec<f64>,
}

impl Kernel {
    /// Normalizes `raw` to unit sum after checking shape, sign and the blind centre.
    pub fn new(size: usize, raw: Vec<f64>) -> Result<Self> {
        if size % 2 == 0 || raw.len() != size * size {
            return Err(DseError::config(format!("kernel must be odd and square, got size {size}, {} weights", raw.len())));
        }
        if raw.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(DseError::config("kernel weights must be non-negative"));
        }
        if raw[size * size / 2] != 0.0 {
            return Err(DseError::config("kernel centre weight must be zero"));
        }
        let s: f64 = raw.iter().sum();
        if !(s > 0.0) {
            return Err(DseError::config("kernel has no weight"));
        }
        Ok(Self {
            size,
            weights: raw.into_iter().map(|w| w / s).collect(),
        })
    }

    fn taps(&self) -> Vec<(isize, isize, f64)> {
        let r = (self.size / 2) as isize;
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(i, &w)| ((i / self.size) as isize - r, (i % self.size) as isize - r, w))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelSelection {
    MinLocalVariance,
    Average,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelBank {
    pub kernels: Vec<Kernel>,
    pub selection: KernelSelection,
}

impl KernelBank {
    /// Four directional 1×5 kernels (horizontal, vertical, both diagonals)
    /// and a 5×5 donut, all with a blind centre.
    pub fn default_bank(selection: KernelSelection) -> Self {
        let line = |f: &dyn Fn(usize, usize) -> bool| {
            let raw = (0..25)
                .map(|i| {
                    let (y, x) = (i / 5, i % 5);
                    if (y, x) != (2, 2) && f(y, x) {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            Kernel::new(5, raw).expect("built-in kernel is valid")
        };
        Self {
            kernels: vec![
                line(&|y, _| y == 2),
                line(&|_, x| x == 2),
                line(&|y, x| y == x),
                line(&|y, x| y + x == 4),
                line(&|_, _| true),
            ],
            selection,
        }
    }
}

impl Default for KernelBank {
    fn default() -> Self {
        Self::default_bank(KernelSelection::MinLocalVariance)
    }
}

fn log_plane(values: &[f32]) -> Vec<f64> {
    values.iter().map(|&v| (v.max(0.0) as f64 + DB_FLOOR as f64).ln()).collect()
}

/// Converts log-domain estimates back to intensities, removing the offset.
fn finish_channel(est_log: &[f64], noisy: &[f32], bias: BiasCorrection) -> Vec<f32> {
    let floor = DB_FLOOR as f64;
    let offset = match bias {
        BiasCorrection::Analytic { looks } => log_speckle_mean(looks),
        BiasCorrection::None => 0.0,
        BiasCorrection::Empirical => {
            let n = est_log.len() as f64;
            let est_mean = est_log.iter().map(|v| v.exp()).sum::<f64>() / n;
            let obs_mean = noisy.iter().map(|&v| v.max(0.0) as f64 + floor).sum::<f64>() / n;
            est_mean.ln() - obs_mean.ln()
        }
    };
    est_log
        .iter()
        .map(|&l| ((l - offset).exp() - floor).max(0.0) as f32)
        .collect()
}

/// Kernel-bank blind-spot despeckler.
///
/// Each pixel is estimated as `exp(Σ w·ln(y + floor) - offset)` using, per
/// pixel, the kernel with the smallest weighted log-domain variance (or the
/// average of all kernels). Borders replicate edge pixels.
pub fn despeckle_kernel(noisy: &Tile, bank: &KernelBank, bias: BiasCorrection) -> Result<Tile> {
    if bank.kernels.is_empty() {
        return Err(DseError::config("kernel bank is empty"));
    }
    if noisy.kind() != TileKind::SarLinear {
        return Err(DseError::kind(format!("despeckling expects SAR_LINEAR, got {:?}", noisy.kind())));
    }
    let (w, h) = (noisy.width() as isize, noisy.height() as isize);
    let taps: Vec<_> = bank.kernels.iter().map(Kernel::taps).collect();
    let mut out = Vec::with_capacity(noisy.data().len());
    for c in 0..noisy.channels() {
        let l = log_plane(noisy.channel(c));
        let at = |y: isize, x: isize| l[(y.clamp(0, h - 1) * w + x.clamp(0, w - 1)) as usize];
        let mut est = vec![0.0; l.len()];
        for y in 0..h {
            for x in 0..w {
                let mut best = (f64::INFINITY, 0.0);
                let mut avg = 0.0;
                for kt in &taps {
                    let mean: f64 = kt.iter().map(|&(dy, dx, wt)| wt * at(y + dy, x + dx)).sum();
                    match bank.selection {
                        KernelSelection::Average => avg += mean,
                        KernelSelection::MinLocalVariance => {
                            let var: f64 = kt.iter().map(|&(dy, dx, wt)| wt * (at(y + dy, x + dx) - mean).powi(2)).sum();
                            if var < best.0 {
                                best = (var, mean);
                            }
                        }
                    }
                }
                est[(y * w + x) as usize] = match bank.selection {
                    KernelSelection::Average => avg / taps.len() as f64,
                    KernelSelection::MinLocalVariance => best.1,
                };
            }
        }
        out.extend(finish_channel(&est, noisy.channel(c), bias));
    }
    Tile::new(noisy.width(), noisy.height(), noisy.channels(), TileKind::SarLinear, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskReplacement {
    /// Replace a masked pixel with a random unmasked neighbour from its 5×5
    /// window (widened only if the whole window is masked).
    NeighborShuffle,
    /// Replace with zero in the centred log domain (the tile's mean log value).
    Zero,
}

/// Pixels hidden from the network during one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct BlindSpotMask {
    pub masked: Vec<usize>,
    pub replacement: MaskReplacement,
    /// Source pixel for each masked pixel under `NeighborShuffle`; never itself masked.
    pub sources: Vec<usize>,
}

impl BlindSpotMask {
    /// Picks `round(fraction · width · height)` pixels (at least one) and their
    /// replacement sources. Depends only on the geometry and the generator.
    pub fn sample<R: Rng>(width: usize, height: usize, fraction: f64, replacement: MaskReplacement, rng: &mut R) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 0.5) {
            return Err(DseError::config(format!("mask fraction must lie in (0, 0.5], got {fraction}")));
        }
        let n = width * height;
        let k = ((fraction * n as f64).round() as usize).clamp(1, n);
        let mut masked = index::sample(rng, n, k).into_vec();
        masked.sort_unstable();
        let mut is_masked = vec![false; n];
        masked.iter().for_each(|&p| is_masked[p] = true);
        let sources = masked
            .iter()
            .map(|&p| {
                let (y, x) = (p / width, p % width);
                // Nearest ring (radius 2 first) that holds an unmasked pixel.
                let mut r = 2;
                loop {
                    let cands: Vec<usize> = (y.saturating_sub(r)..(y + r + 1).min(height))
                        .flat_map(|sy| (x.saturating_sub(r)..(x + r + 1).min(width)).map(move |sx| sy * width + sx))
                        .filter(|&s| !is_masked[s])
                        .collect();
                    if !cands.is_empty() {
                        break cands[rng.random_range(0..cands.len())];
                    }
                    r *= 2;
                }
            })
            .collect();
        Ok(Self {
            masked,
            replacement,
            sources,
        })
    }

    /// Applies the mask to every channel of a centred log-domain tensor.
    pub fn apply(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        let plane = x.plane();
        for c in 0..x.channels {
            for (&p, &s) in self.masked.iter().zip(&self.sources) {
                out.data[c * plane + p] = match self.replacement {
                    MaskReplacement::NeighborShuffle => x.data[c * plane + s],
                    MaskReplacement::Zero => 0.0,
                };
            }
        }
        out
    }

    /// Loss mask over all channels.
    pub fn loss_mask(&self, x: &Tensor) -> Vec<bool> {
        let plane = x.plane();
        let mut m = vec![false; x.len()];
        for c in 0..x.channels {
            for &p in &self.masked {
                m[c * plane + p] = true;
            }
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlindSpotConfig {
    pub mask_fraction: f64,
    pub replacement: MaskReplacement,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub hidden: usize,
    pub seed: u64,
    /// Known looks enable analytic bias correction at inference.
    pub looks: Option<f64>,
}

impl Default for BlindSpotConfig {
    fn default() -> Self {
        Self {
            mask_fraction: 0.1,
            replacement: MaskReplacement::NeighborShuffle,
            epochs: 10,
            lr: 3e-3,
            batch_size: 4,
            hidden: 16,
            seed: 0,
            looks: None,
        }
    }
}

/// Trainable blind-spot regressor operating on centred log intensities.
#[derive(Debug, Clone)]
pub struct DenoiserModel {
    channels: usize,
    hidden: usize,
    looks: Option<f64>,
    store: ParamStore,
    layers: Vec<ConvLayer>,
}

/// Per-channel mean of a log-domain tensor.
fn channel_means(x: &Tensor) -> Vec<f64> {
    (0..x.channels)
        .map(|c| x.channel(c).iter().sum::<f64>() / x.plane() as f64)
        .collect()
}

fn centred_log(tile: &Tile) -> (Tensor, Vec<f64>) {
    let mut x = tile_to_tensor(tile);
    x.data = log_plane(tile.data());
    let means = channel_means(&x);
    for (c, m) in means.iter().enumerate() {
        x.channel_mut(c).iter_mut().for_each(|v| *v -= m);
    }
    (x, means)
}

impl DenoiserModel {
    fn new(channels: usize, hidden: usize, looks: Option<f64>, seed: u64) -> Self {
        let mut r = rng::seeded(seed);
        let mut store = ParamStore::new();
        let layers = vec![
            ConvLayer::new(&mut store, "bs.c1", channels, hidden, 3, &mut r),
            ConvLayer::new(&mut store, "bs.c2", hidden, hidden, 3, &mut r),
            ConvLayer::new(&mut store, "bs.c3", hidden, hidden, 3, &mut r),
            ConvLayer::new(&mut store, "bs.out", hidden, channels, 1, &mut r),
        ];
        Self {
            channels,
            hidden,
            looks,
            store,
            layers,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn forward(&self, g: &mut Graph, x: &Tensor) -> Var {
        let mut h = g.input(x.clone());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(g, h);
            if i < last {
                h = g.silu(h);
            }
        }
        h
    }

    /// Network prediction on a centred log-domain tensor.
    pub fn predict_log(&self, x: &Tensor) -> Tensor {
        let mut g = Graph::new(&self.store);
        let out = self.forward(&mut g, x);
        g.value(out).clone()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::json!({
            "model": "blind_spot_denoiser",
            "channels": self.channels,
            "hidden": self.hidden,
            "looks": self.looks,
        });
        write_container(&header, &self.store)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = read_container(bytes)?;
        if c.header.get("model").and_then(|m| m.as_str()) != Some("blind_spot_denoiser") {
            return Err(DseError::format("container does not hold a blind-spot denoiser"));
        }
        let get = |k: &str| {
            c.header
                .get(k)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| DseError::format(format!("denoiser header lacks {k}")))
        };
        let looks = c.header.get("looks").and_then(|v| v.as_f64());
        let mut m = DenoiserModel::new(get("channels")?, get("hidden")?, looks, 0);
        m.store.load_from(&c.params)?;
        Ok(m)
    }
}

/// Output of [`train_blindspot`].
#[derive(Debug, Clone)]
pub struct TrainedDenoiser {
    pub model: DenoiserModel,
    pub loss_curve: Vec<f64>,
}

/// Masked-pixel training of a [`DenoiserModel`]: each step hides a random
/// subset of pixels and regresses their centred log intensities from the
/// masked input.
pub fn train_blindspot(corpus: &[Tile], config: &BlindSpotConfig) -> Result<TrainedDenoiser> {
    let first = corpus
        .first()
        .ok_or_else(|| DseError::argument("blind-spot training needs a non-empty corpus"))?;
    if config.epochs == 0 || config.batch_size == 0 || !(config.lr > 0.0) || config.hidden == 0 {
        return Err(DseError::config("epochs, batch size, hidden width and learning rate must be positive"));
    }
    if !(config.mask_fraction > 0.0 && config.mask_fraction <= 0.5) {
        return Err(DseError::config(format!("mask fraction must lie in (0, 0.5], got {}", config.mask_fraction)));
    }
    let channels = first.channels();
    let data: Vec<Tensor> = corpus
        .iter()
        .map(|t| {
            if t.channels() != channels {
                return Err(DseError::shape("corpus tiles differ in channel count"));
            }
            if t.kind() != TileKind::SarLinear {
                return Err(DseError::kind("blind-spot training expects SAR_LINEAR tiles"));
            }
            Ok(centred_log(t).0)
        })
        .collect::<Result<_>>()?;
    let mut model = DenoiserModel::new(channels, config.hidden, config.looks, config.seed);
    let mut opt = Adam::new(&model.store, config.lr);
    let mut r = rng::seeded(rng::derive_seed(config.seed, 3));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut r);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads = model.store.zero_grads();
            for &i in batch {
                let x = &data[i];
                let mask = BlindSpotMask::sample(x.width, x.height, config.mask_fraction, config.replacement, &mut r)?;
                let mut g = Graph::new(&model.store);
                let out = model.forward(&mut g, &mask.apply(x));
                let lm = mask.loss_mask(x);
                let (loss, seed) = mse_loss(g.value(out), x, Some(&lm));
                if !loss.is_finite() {
                    return Err(DseError::Training {
                        step,
                        last_finite_epoch: curve.len().checked_sub(1),
                    });
                }
                total += loss;
                g.backward(out, seed, &mut grads);
            }
            grads.scale(1.0 / batch.len() as f64);
            opt.step(&mut model.store, &grads);
            step += 1;
        }
        curve.push(total / data.len() as f64);
    }
    Ok(TrainedDenoiser { model, loss_curve: curve })
}

/// Full-image log-domain prediction, exponentiated back with bias removal.
/// Uses analytic correction when the model knows its looks, else empirical.
pub fn despeckle_model(noisy: &Tile, model: &DenoiserModel) -> Result<Tile> {
    if noisy.channels() != model.channels {
        return Err(DseError::shape(format!(
            "denoiser expects {} channels, got {}",
            model.channels,
            noisy.channels()
        )));
    }
    let (x, means) = centred_log(noisy);
    let pred = model.predict_log(&x);
    let bias = match model.looks {
        Some(looks) => BiasCorrection::Analytic { looks },
        None => BiasCorrection::Empirical,
    };
    let mut out = Vec::with_capacity(noisy.data().len());
    for c in 0..noisy.channels() {
        let est: Vec<f64> = pred.channel(c).iter().map(|v| v + means[c]).collect();
        out.extend(finish_channel(&est, noisy.channel(c), bias));
    }
    Tile::new(noisy.width(), noisy.height(), noisy.channels(), TileKind::SarLinear, out)
}

/// A configured despeckling stage for the translation pipeline.
#[derive(Debug, Clone)]
pub enum Despeckler {
    Kernel { bank: KernelBank, bias: BiasCorrection },
    Model(DenoiserModel),
}

impl Despeckler {
    pub fn apply(&self, noisy: &Tile) -> Result<Tile> {
        match self {
            Despeckler::Kernel { bank, bias } => despeckle_kernel(noisy, bank, *bias),
            Despeckler::Model(m) => despeckle_model(noisy, m),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::speckle::{simulate_speckle, SpeckleParams};

    #[test]
    fn default_bank_is_blind_and_normalized() {
        for k in KernelBank::default().kernels {
            assert_eq!(k.weights[12], 0.0);
            assert!((k.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(Kernel::new(3, vec![1.0; 9]).is_err());
    }

    #[test]
    fn constant_tile_is_preserved() {
        let t = Tile::filled(12, 9, 2, TileKind::SarLinear, 0.37).unwrap();
        for sel in [KernelSelection::MinLocalVariance, KernelSelection::Average] {
            let out = despeckle_kernel(&t, &KernelBank::default_bank(sel), BiasCorrection::Empirical).unwrap();
            assert!(out.data().iter().all(|&v| (v - 0.37).abs() < 1e-5));
        }
    }

    #[test]
    fn bright_centre_is_excluded() {
        let mut data = vec![0.2f32; 81];
        data[40] = 50.0;
        let t = Tile::new(9, 9, 1, TileKind::SarLinear, data).unwrap();
        let out = despeckle_kernel(&t, &KernelBank::default(), BiasCorrection::None).unwrap();
        assert!((out.get(0, 4, 4) - 0.2).abs() < 1e-5, "{}", out.get(0, 4, 4));
    }

    #[test]
    fn empty_bank_rejected() {
        let t = Tile::filled(4, 4, 1, TileKind::SarLinear, 1.0).unwrap();
        let bank = KernelBank {
            kernels: vec![],
            selection: KernelSelection::Average,
        };
        assert!(matches!(despeckle_kernel(&t, &bank, BiasCorrection::None), Err(DseError::Config(_))));
    }

    #[test]
    fn masked_pixels_never_reach_the_network() {
        let mut r = rng::seeded(4);
        let x = Tensor::from_vec(1, 8, 8, (0..64).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let model = DenoiserModel::new(1, 4, None, 0);
        for replacement in [MaskReplacement::NeighborShuffle, MaskReplacement::Zero] {
            let mask = BlindSpotMask::sample(8, 8, 0.5, replacement, &mut rng::seeded(5)).unwrap();
            assert!(mask.sources.iter().all(|s| !mask.masked.contains(s)));
            let mut y = x.clone();
            for &p in &mask.masked {
                y.data[p] += 100.0;
            }
            assert_eq!(mask.apply(&x), mask.apply(&y));
            assert_eq!(model.predict_log(&mask.apply(&x)), model.predict_log(&mask.apply(&y)));
        }
    }

    #[test]
    fn constant_corpus_is_learned() {
        let corpus: Vec<Tile> = (0..6).map(|i| Tile::filled(16, 16, 1, TileKind::SarLinear, 0.1 + 0.1 * i as f32).unwrap()).collect();
        let cfg = BlindSpotConfig { epochs: 5, ..Default::default() };
        let trained = train_blindspot(&corpus, &cfg).unwrap();
        assert!(*trained.loss_curve.last().unwrap() < 1e-4, "{:?}", trained.loss_curve);
        for t in &corpus {
            let out = despeckle_model(t, &trained.model).unwrap();
            let mse = out.data().iter().zip(t.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / 256.0;
            assert!(mse < 1e-4, "{mse}");
        }
        assert_eq!(train_blindspot(&corpus, &cfg).unwrap().loss_curve, trained.loss_curve);
    }

    #[test]
    fn model_output_is_nonnegative_and_checked() {
        let clean = Tile::filled(16, 16, 1, TileKind::SarLinear, 0.5).unwrap();
        let noisy = simulate_speckle(&clean, &SpeckleParams::new(1.0, 3).unwrap()).unwrap();
        let trained = train_blindspot(&[noisy.clone()], &BlindSpotConfig { epochs: 2, ..Default::default() }).unwrap();
        assert!(despeckle_model(&noisy, &trained.model).unwrap().data().iter().all(|&v| v >= 0.0));
        let two = Tile::filled(16, 16, 2, TileKind::SarLinear, 0.5).unwrap();
        assert!(matches!(despeckle_model(&two, &trained.model), Err(DseError::Shape(_))));
        let back = DenoiserModel::from_bytes(&trained.model.to_bytes()).unwrap();
        assert_eq!(back.to_bytes(), trained.model.to_bytes());
    }
}
