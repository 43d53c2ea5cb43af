//! SAR-to-EO translation: displacement predictor, training, the end-to-end
//! pipeline, multi-temporal conditioning and ensembles.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bridge::{forward_marginal, reverse_sample, BridgeSchedule, DisplacementPredictor, EpsSource, StepSchedule};
use crate::despeckle::Despeckler;
use crate::error::{DseError, Result, StageExt};
use crate::latent::{tensor_to_tile, CodecDescriptor, LatentCodec};
use crate::nn::{
    mse_loss, read_container, timestep_embedding, write_container, Adam, ConvLayer, Graph, LinearLayer, Param, ParamStore,
    Var,
};
use crate::rng;
use crate::tensor::{Latent, Tensor};
use crate::tile::{compose_sar3_pair, normalize, Tile, TileKind};

/// Percentiles used to normalize SAR composites.
pub const NORM_LO_PCT: f64 = 1.0;
pub const NORM_HI_PCT: f64 = 99.0;

/// `D = m_t (y - x0) + sqrt(δ_t) ε`, so that `x_t = x0 + D`.
pub fn training_target(schedule: &BridgeSchedule, x0: &Latent, y: &Latent, t: usize, eps: &Latent) -> Result<Latent> {
    let xt = forward_marginal(schedule, x0, y, t, eps)?;
    xt.zip_map(x0, |a, b| a - b)
}

/// Shape hyperparameters of [`UNetPredictor`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorArch {
    pub latent_channels: usize,
    pub context_channels: usize,
    pub width: usize,
    pub time_dim: usize,
}

impl PredictorArch {
    pub fn new(latent_channels: usize, context_channels: usize) -> Self {
        Self {
            latent_channels,
            context_channels,
            width: 32,
            time_dim: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 || self.context_channels == 0 || self.width == 0 {
            return Err(DseError::config("predictor channel counts and width must be positive"));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(DseError::config(format!("time_dim must be even and >= 2, got {}", self.time_dim)));
        }
        Ok(())
    }
}

/// Small encoder-decoder with two pooling stages, skip connections and a
/// sinusoidal step embedding injected as a per-channel bias in every block.
/// Input is `concat(x_t, context)`.
#[derive(Debug, Clone)]
pub struct UNetPredictor {
    arch: PredictorArch,
    store: ParamStore,
    time: LinearLayer,
    proj: [LinearLayer; 5],
    conv: [ConvLayer; 5],
    out: ConvLayer,
}

impl UNetPredictor {
    /// Random initialization with a zero output layer, so a fresh model
    /// predicts `D = 0`.
    pub fn new(arch: PredictorArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut r = rng::seeded(seed);
        let mut store = ParamStore::new();
        let w = arch.width;
        let time = LinearLayer::new(&mut store, "time", arch.time_dim, w, &mut r);
        let proj = std::array::from_fn(|i| LinearLayer::new(&mut store, &format!("proj{i}"), w, w, &mut r));
        let ins = [arch.latent_channels + arch.context_channels, w, w, 2 * w, 2 * w];
        let names = ["enc0", "down1", "down2", "up1", "up2"];
        let conv = std::array::from_fn(|i| ConvLayer::new(&mut store, names[i], ins[i], w, 3, &mut r));
        let out = ConvLayer::new(&mut store, "out", w, arch.latent_channels, 1, &mut r);
        store.value_mut(out.w).iter_mut().for_each(|v| *v = 0.0);
        Ok(Self {
            arch,
            store,
            time,
            proj,
            conv,
            out,
        })
    }

    /// Every parameter zero: predicts `D = 0` everywhere.
    pub fn zeroed(arch: PredictorArch) -> Result<Self> {
        let mut p = Self::new(arch, 0)?;
        for i in 0..p.store.len() {
            p.store.value_mut(crate::nn::ParamId(i)).iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(p)
    }

    pub fn arch(&self) -> PredictorArch {
        self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check_inputs(&self, x_t: &Latent, context: &Latent) -> Result<()> {
        if x_t.channels != self.arch.latent_channels || context.channels != self.arch.context_channels {
            return Err(DseError::shape(format!(
                "predictor expects {}+{} channels, got {}+{}",
                self.arch.latent_channels, self.arch.context_channels, x_t.channels, context.channels
            )));
        }
        if (x_t.height, x_t.width) != (context.height, context.width) {
            return Err(DseError::shape("x_t and context differ in spatial size"));
        }
        if x_t.height % 4 != 0 || x_t.width % 4 != 0 || x_t.height == 0 {
            return Err(DseError::shape(format!(
                "latent {}x{} must be divisible by 4",
                x_t.width, x_t.height
            )));
        }
        Ok(())
    }

    fn forward(&self, g: &mut Graph, x_t: &Latent, t: usize, context: &Latent) -> Var {
        let emb = g.input(timestep_embedding(t as f64, self.arch.time_dim));
        let temb = self.time.apply(g, emb);
        let temb = g.silu(temb);
        let xi = g.input(x_t.clone());
        let ci = g.input(context.clone());
        let input = g.concat(&[xi, ci]);
        let block = |g: &mut Graph, i: usize, x: Var| {
            let h = self.conv[i].apply(g, x);
            let b = self.proj[i].apply(g, temb);
            let h = g.channel_bias(h, b);
            g.silu(h)
        };
        let e0 = block(g, 0, input);
        let p1 = g.avg_pool2(e0);
        let d1 = block(g, 1, p1);
        let p2 = g.avg_pool2(d1);
        let d2 = block(g, 2, p2);
        let u = g.upsample2(d2);
        let u = g.concat(&[u, d1]);
        let u1 = block(g, 3, u);
        let u = g.upsample2(u1);
        let u = g.concat(&[u, e0]);
        let u2 = block(g, 4, u);
        self.out.apply(g, u2)
    }

    /// MSE against `target` for one example, accumulating parameter
    /// gradients into `grads`.
    pub fn loss_and_grads(
        &self,
        x_t: &Latent,
        t: usize,
        context: &Latent,
        target: &Latent,
        grads: &mut crate::nn::Grads,
    ) -> Result<f64> {
        self.check_inputs(x_t, context)?;
        x_t.check_same_shape(target, "predictor target")?;
        let mut g = Graph::new(&self.store);
        let out = self.forward(&mut g, x_t, t, context);
        let (loss, seed) = mse_loss(g.value(out), target, None);
        g.backward(out, seed, grads);
        Ok(loss)
    }
}

impl DisplacementPredictor for UNetPredictor {
    fn predict(&self, x_t: &Latent, t: usize, context: &Latent) -> Result<Latent> {
        self.check_inputs(x_t, context)?;
        let mut g = Graph::new(&self.store);
        let out = self.forward(&mut g, x_t, t, context);
        Ok(g.value(out).clone())
    }
}

/// Everything around the predictor: codec, schedule and optional despeckler.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub codec: LatentCodec,
    pub schedule: BridgeSchedule,
    pub despeckler: Option<Despeckler>,
}

impl Pipeline {
    pub fn new(codec: LatentCodec, schedule: BridgeSchedule) -> Self {
        Self {
            codec,
            schedule,
            despeckler: None,
        }
    }

    pub fn with_despeckler(mut self, despeckler: Despeckler) -> Self {
        self.despeckler = Some(despeckler);
        self
    }

    /// Composite, optionally despeckle, then normalize a `(VV, VH)` tile.
    pub fn prepare_sar(&self, sar: &Tile) -> Result<Tile> {
        let comp = compose_sar3_pair(sar).stage("compose")?;
        let comp = match &self.despeckler {
            Some(d) => d.apply(&comp).stage("despeckle")?,
            None => comp,
        };
        normalize(&comp, NORM_LO_PCT, NORM_HI_PCT).stage("normalize")
    }

    pub fn encode_sar(&self, sar: &Tile) -> Result<Latent> {
        let prepared = self.prepare_sar(sar)?;
        self.codec.encode(&prepared).stage("encode")
    }

    pub fn encode_eo(&self, eo: &Tile) -> Result<Latent> {
        if eo.kind() != TileKind::EoRgb {
            return Err(DseError::kind(format!("expected EO_RGB target, got {:?}", eo.kind())));
        }
        self.codec.encode(eo).stage("encode")
    }

    /// Decodes a latent into an EO tile clamped to `[0, 1]`.
    pub fn decode_eo(&self, latent: &Latent) -> Result<Tile> {
        let img = self.codec.decode_tensor(latent).stage("decode")?;
        tensor_to_tile(&img.map(|v| v.clamp(0.0, 1.0)), TileKind::EoRgb).stage("decode")
    }

    /// Preprocesses and encodes every tile, concatenating latents along the
    /// channel axis in input order.
    pub fn stack_context(&self, sar_tiles: &[Tile]) -> Result<Latent> {
        let first = sar_tiles
            .first()
            .ok_or_else(|| DseError::argument("context stack needs at least one tile"))?;
        let mut latents = Vec::with_capacity(sar_tiles.len());
        for t in sar_tiles {
            if (t.width(), t.height()) != (first.width(), first.height()) {
                return Err(DseError::shape(format!(
                    "context tiles differ in size: {}x{} vs {}x{}",
                    t.width(),
                    t.height(),
                    first.width(),
                    first.height()
                )));
            }
            latents.push(self.encode_sar(t)?);
        }
        let refs: Vec<&Tensor> = latents.iter().collect();
        Tensor::concat_channels(&refs)
    }

    /// `(y, context)` for a stack of co-registered SAR tiles; `y` is the
    /// latent of the first tile.
    pub fn conditioning(&self, sar_tiles: &[Tile]) -> Result<(Latent, Latent)> {
        let context = self.stack_context(sar_tiles)?;
        let c = self.codec.latent_channels();
        let y = Tensor::from_vec(
            c,
            context.height,
            context.width,
            context.data[..c * context.plane()].to_vec(),
        )?;
        Ok((y, context))
    }

    /// Predictor shape for this pipeline with `n_temporal` context tiles.
    pub fn arch(&self, n_temporal: usize) -> PredictorArch {
        let c = self.codec.latent_channels();
        PredictorArch::new(c, c * n_temporal)
    }
}

/// One training example: co-registered SAR acquisitions and the EO target.
#[derive(Debug, Clone)]
pub struct TrainPair {
    pub sar: Vec<Tile>,
    pub eo: Tile,
}

impl TrainPair {
    pub fn single(sar: Tile, eo: Tile) -> Self {
        Self { sar: vec![sar], eo }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub eps: EpsSource,
    pub width: usize,
    pub time_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            lr: 2e-4,
            seed: 0,
            eps: EpsSource::standard_normal(1.0).expect("unit scale is valid"),
            width: 32,
            time_dim: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, schedule: &BridgeSchedule) -> Result<()> {
        if schedule.total_steps() < 2 {
            return Err(DseError::config("training needs T >= 2"));
        }
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(DseError::config("epochs, batch size and learning rate must be positive"));
        }
        self.eps.validate()
    }
}

#[derive(Debug, Clone)]
pub struct TrainedTranslator {
    pub predictor: UNetPredictor,
    pub loss_curve: Vec<f64>,
}

/// Encoded training data: `(x0, y, context)` per pair.
pub type EncodedPair = (Latent, Latent, Latent);

pub fn encode_pairs(pairs: &[TrainPair], pipeline: &Pipeline) -> Result<Vec<EncodedPair>> {
    let n_temporal = pairs
        .first()
        .ok_or_else(|| DseError::argument("translator training needs a non-empty corpus"))?
        .sar
        .len();
    pairs
        .iter()
        .map(|p| {
            if p.sar.len() != n_temporal {
                return Err(DseError::shape("pairs differ in number of SAR acquisitions"));
            }
            let first = p.sar.first().ok_or_else(|| DseError::argument("pair without SAR tiles"))?;
            if (first.width(), first.height()) != (p.eo.width(), p.eo.height()) {
                return Err(DseError::shape("SAR and EO tiles are not co-registered"));
            }
            let x0 = pipeline.encode_eo(&p.eo)?;
            let (y, ctx) = pipeline.conditioning(&p.sar)?;
            Ok((x0, y, ctx))
        })
        .collect()
}

/// Regresses the bridge displacement with MSE, `t ~ U{1..T}` per example per
/// step and unscaled noise from `config.eps`.
pub fn train_translator(pairs: &[TrainPair], pipeline: &Pipeline, config: &TrainConfig) -> Result<TrainedTranslator> {
    config.validate(&pipeline.schedule)?;
    let data = encode_pairs(pairs, pipeline)?;
    let arch = PredictorArch {
        width: config.width,
        time_dim: config.time_dim,
        ..pipeline.arch(pairs[0].sar.len())
    };
    let mut predictor = UNetPredictor::new(arch, config.seed)?;
    let loss_curve = fit(&mut predictor, &data, &pipeline.schedule, config)?;
    Ok(TrainedTranslator { predictor, loss_curve })
}

/// Trains `predictor` in place on pre-encoded data.
pub fn fit(predictor: &mut UNetPredictor, data: &[EncodedPair], schedule: &BridgeSchedule, config: &TrainConfig) -> Result<Vec<f64>> {
    config.validate(schedule)?;
    if data.is_empty() {
        return Err(DseError::argument("translator training needs a non-empty corpus"));
    }
    let mut opt = Adam::new(&predictor.store, config.lr);
    let mut r = rng::seeded(rng::derive_seed(config.seed, 7));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut r);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads = predictor.store.zero_grads();
            for &i in batch {
                let (x0, y, ctx) = &data[i];
                let t = r.random_range(1..=schedule.total_steps());
                let eps = Tensor::from_vec(x0.channels, x0.height, x0.width, config.eps.sample_with(x0.len(), &mut r)?)?;
                let x_t = forward_marginal(schedule, x0, y, t, &eps)?;
                let target = x_t.zip_map(x0, |a, b| a - b)?;
                let loss = predictor.loss_and_grads(&x_t, t, ctx, &target, &mut grads)?;
                if !loss.is_finite() {
                    return Err(DseError::Training {
                        step,
                        last_finite_epoch: curve.len().checked_sub(1),
                    });
                }
                total += loss;
            }
            grads.scale(1.0 / batch.len() as f64);
            opt.step(&mut predictor.store, &grads);
            step += 1;
        }
        curve.push(total / data.len() as f64);
    }
    Ok(curve)
}

/// Mean displacement MSE over `draws` fixed `(t, ε)` draws per example.
pub fn eval_loss(predictor: &UNetPredictor, data: &[EncodedPair], schedule: &BridgeSchedule, draws: usize, seed: u64) -> Result<f64> {
    if data.is_empty() || draws == 0 {
        return Err(DseError::argument("evaluation needs data and at least one draw"));
    }
    let mut r = rng::seeded(seed);
    let eps_src = EpsSource::standard_normal(1.0)?;
    let mut total = 0.0;
    for (x0, y, ctx) in data {
        for _ in 0..draws {
            let t = r.random_range(1..=schedule.total_steps());
            let eps = Tensor::from_vec(x0.channels, x0.height, x0.width, eps_src.sample_with(x0.len(), &mut r)?)?;
            let x_t = forward_marginal(schedule, x0, y, t, &eps)?;
            let target = x_t.zip_map(x0, |a, b| a - b)?;
            let pred = predictor.predict(&x_t, t, ctx)?;
            total += mse_loss(&pred, &target, None).0;
        }
    }
    Ok(total / (data.len() * draws) as f64)
}

/// Runs the reverse bridge for a SAR stack and returns the final latent.
pub fn translate_latent<P: DisplacementPredictor + ?Sized>(
    sar_tiles: &[Tile],
    predictor: &P,
    pipeline: &Pipeline,
    steps: &StepSchedule,
    eps: &EpsSource,
    seed: u64,
) -> Result<Latent> {
    let (y, context) = pipeline.conditioning(sar_tiles)?;
    reverse_sample(&pipeline.schedule, &y, &context, predictor, steps, eps, seed).stage("sample")
}

/// Full chain for one `(VV, VH)` tile, producing an EO tile in `[0, 1]`.
pub fn translate<P: DisplacementPredictor + ?Sized>(
    sar: &Tile,
    predictor: &P,
    pipeline: &Pipeline,
    steps: &StepSchedule,
    eps: &EpsSource,
    seed: u64,
) -> Result<Tile> {
    translate_stack(std::slice::from_ref(sar), predictor, pipeline, steps, eps, seed)
}

/// [`translate`] conditioned on several co-registered acquisitions.
pub fn translate_stack<P: DisplacementPredictor + ?Sized>(
    sar_tiles: &[Tile],
    predictor: &P,
    pipeline: &Pipeline,
    steps: &StepSchedule,
    eps: &EpsSource,
    seed: u64,
) -> Result<Tile> {
    let latent = translate_latent(sar_tiles, predictor, pipeline, steps, eps, seed)?;
    pipeline.decode_eo(&latent)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleResult {
    pub samples: Vec<Tile>,
    pub mean: Tile,
    /// One channel: per-pixel sample variance averaged over channels.
    pub variance: Tile,
}

impl EnsembleResult {
    pub fn k(&self) -> usize {
        self.samples.len()
    }

    /// Collects samples into mean and variance. A single sample has zero variance.
    pub fn from_samples(samples: Vec<Tile>) -> Result<Self> {
        let first = samples.first().ok_or_else(|| DseError::argument("ensemble needs K >= 1"))?;
        let (w, h, c) = (first.width(), first.height(), first.channels());
        if samples.iter().any(|s| (s.width(), s.height(), s.channels()) != (w, h, c)) {
            return Err(DseError::shape("ensemble samples differ in shape"));
        }
        let k = samples.len() as f64;
        let n = w * h * c;
        let mut mean = vec![0.0f64; n];
        for s in &samples {
            for (m, &v) in mean.iter_mut().zip(s.data()) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= k);
        let mut var = vec![0.0f64; w * h];
        if samples.len() > 1 {
            let plane = w * h;
            for s in &samples {
                for (i, &v) in s.data().iter().enumerate() {
                    var[i % plane] += (v as f64 - mean[i]).powi(2);
                }
            }
            let denom = (k - 1.0) * c as f64;
            var.iter_mut().for_each(|v| *v /= denom);
        }
        let mean_tile = Tile::new(w, h, c, first.kind(), mean.iter().map(|&v| v as f32).collect())?;
        let var_tile = Tile::new(w, h, 1, TileKind::Latent, var.iter().map(|&v| v as f32).collect())?;
        Ok(Self {
            samples,
            mean: mean_tile,
            variance: var_tile,
        })
    }
}

/// `k` translations with seeds `base_seed + i`.
#[allow(clippy::too_many_arguments)]
pub fn ensemble_translate<P: DisplacementPredictor + ?Sized>(
    sar_tiles: &[Tile],
    predictor: &P,
    pipeline: &Pipeline,
    steps: &StepSchedule,
    eps: &EpsSource,
    k: usize,
    base_seed: u64,
) -> Result<EnsembleResult> {
    if k == 0 {
        return Err(DseError::argument("ensemble needs K >= 1"));
    }
    let samples = (0..k as u64)
        .map(|i| translate_stack(sar_tiles, predictor, pipeline, steps, eps, base_seed.wrapping_add(i)))
        .collect::<Result<Vec<_>>>()?;
    EnsembleResult::from_samples(samples)
}

/// A predictor bundled with the codec and schedule it was trained with.
#[derive(Debug, Clone)]
pub struct SavedTranslator {
    pub predictor: UNetPredictor,
    pub codec: LatentCodec,
    pub schedule: BridgeSchedule,
}

const CODEC_PREFIX: &str = "codec/";

pub fn model_to_bytes(predictor: &UNetPredictor, codec: &LatentCodec, schedule: &BridgeSchedule) -> Vec<u8> {
    let header = serde_json::json!({
        "model": "translator",
        "architecture": predictor.arch,
        "codec": codec.descriptor(),
        "schedule": {"total_steps": schedule.total_steps(), "variance_scale": schedule.variance_scale()},
    });
    let mut store = predictor.store.clone();
    if let Some(cp) = codec.params() {
        for p in cp.params() {
            store.push_raw(Param {
                name: format!("{CODEC_PREFIX}{}", p.name),
                ..p.clone()
            });
        }
    }
    write_container(&header, &store)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<SavedTranslator> {
    let c = read_container(bytes)?;
    if c.header.get("model").and_then(|m| m.as_str()) != Some("translator") {
        return Err(DseError::format("container does not hold a translator"));
    }
    let field = |k: &str| {
        c.header
            .get(k)
            .cloned()
            .ok_or_else(|| DseError::format(format!("translator header lacks {k}")))
    };
    let arch: PredictorArch =
        serde_json::from_value(field("architecture")?).map_err(|e| DseError::format(format!("architecture: {e}")))?;
    let desc: CodecDescriptor = serde_json::from_value(field("codec")?).map_err(|e| DseError::format(format!("codec: {e}")))?;
    let sched = field("schedule")?;
    let total = sched["total_steps"]
        .as_u64()
        .ok_or_else(|| DseError::format("schedule lacks total_steps"))?;
    let scale = sched["variance_scale"]
        .as_f64()
        .ok_or_else(|| DseError::format("schedule lacks variance_scale"))?;
    let schedule = BridgeSchedule::new(total as usize, scale).map_err(|e| DseError::format(e.to_string()))?;

    let mut own = ParamStore::new();
    let mut codec_params = ParamStore::new();
    for p in c.params.params() {
        match p.name.strip_prefix(CODEC_PREFIX) {
            Some(name) => codec_params.push_raw(Param {
                name: name.to_string(),
                ..p.clone()
            }),
            None => own.push_raw(p.clone()),
        }
    }
    let mut predictor = UNetPredictor::new(arch, 0).map_err(|e| DseError::format(e.to_string()))?;
    predictor.store.load_from(&own)?;
    let codec = LatentCodec::from_parts(desc, &codec_params)?;
    Ok(SavedTranslator {
        predictor,
        codec,
        schedule,
    })
}

pub fn save_model(path: impl AsRef<Path>, predictor: &UNetPredictor, codec: &LatentCodec, schedule: &BridgeSchedule) -> Result<()> {
    std::fs::write(path, model_to_bytes(predictor, codec, schedule))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SavedTranslator> {
    model_from_bytes(&std::fs::read(path)?)
}
