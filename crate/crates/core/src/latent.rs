//! Latent codecs: the space in which the bridge runs.
//!
//! `Pool(f)` encodes by `f × f` mean pooling and decodes by bilinear
//! upsampling. `Learned` keeps the pooled image as its first latent channels
//! and adds learned detail channels decoded as a residual.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{DseError, Result};
use crate::nn::{avg_pool2, mse_loss, read_container, write_container, Adam, ConvLayer, Graph, ParamStore, Var};
use crate::rng;
use crate::tensor::{Latent, Tensor};
use crate::tile::{Tile, TileKind};

pub fn tile_to_tensor(tile: &Tile) -> Tensor {
    Tensor {
        channels: tile.channels(),
        height: tile.height(),
        width: tile.width(),
        data: tile.data().iter().map(|&v| v as f64).collect(),
    }
}

pub fn tensor_to_tile(t: &Tensor, kind: TileKind) -> Result<Tile> {
    Tile::new(
        t.width,
        t.height,
        t.channels,
        kind,
        t.data.iter().map(|&v| v as f32).collect(),
    )
}

/// Serializable description of a codec (weights travel separately).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CodecDescriptor {
    Identity { channels: usize },
    Pool { channels: usize, factor: usize },
    Learned {
        channels: usize,
        factor: usize,
        latent_channels: usize,
        hidden: usize,
    },
}

#[derive(Debug, Clone)]
pub struct LatentCodec {
    descriptor: CodecDescriptor,
    learned: Option<LearnedNet>,
}

impl LatentCodec {
    pub fn identity(channels: usize) -> Self {
        Self {
            descriptor: CodecDescriptor::Identity { channels },
            learned: None,
        }
    }

    pub fn pool(channels: usize, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(DseError::config("pooling factor must be >= 1"));
        }
        Ok(Self {
            descriptor: CodecDescriptor::Pool { channels, factor },
            learned: None,
        })
    }

    pub fn descriptor(&self) -> CodecDescriptor {
        self.descriptor
    }

    pub fn image_channels(&self) -> usize {
        match self.descriptor {
            CodecDescriptor::Identity { channels }
            | CodecDescriptor::Pool { channels, .. }
            | CodecDescriptor::Learned { channels, .. } => channels,
        }
    }

    pub fn latent_channels(&self) -> usize {
        match self.descriptor {
            CodecDescriptor::Identity { channels } | CodecDescriptor::Pool { channels, .. } => channels,
            CodecDescriptor::Learned { latent_channels, .. } => latent_channels,
        }
    }

    pub fn spatial_factor(&self) -> usize {
        match self.descriptor {
            CodecDescriptor::Identity { .. } => 1,
            CodecDescriptor::Pool { factor, .. } | CodecDescriptor::Learned { factor, .. } => factor,
        }
    }

    pub fn params(&self) -> Option<&ParamStore> {
        self.learned.as_ref().map(|l| &l.store)
    }

    fn check_input(&self, t: &Tensor) -> Result<()> {
        let f = self.spatial_factor();
        if t.channels != self.image_channels() {
            return Err(DseError::shape(format!(
                "codec expects {} channels, got {}",
                self.image_channels(),
                t.channels
            )));
        }
        if t.height % f != 0 || t.width % f != 0 || t.height == 0 || t.width == 0 {
            return Err(DseError::shape(format!(
                "{}x{} is not divisible by spatial factor {f}",
                t.width, t.height
            )));
        }
        Ok(())
    }

    pub fn encode(&self, tile: &Tile) -> Result<Latent> {
        self.encode_tensor(&tile_to_tensor(tile))
    }

    pub fn encode_tensor(&self, t: &Tensor) -> Result<Latent> {
        self.check_input(t)?;
        match self.descriptor {
            CodecDescriptor::Identity { .. } => Ok(t.clone()),
            CodecDescriptor::Pool { factor, .. } => Ok(mean_pool(t, factor)),
            CodecDescriptor::Learned { .. } => {
                let net = self.learned.as_ref().expect("learned codec has weights");
                let mut g = Graph::new(&net.store);
                let z = net.encode_graph(&mut g, t);
                Ok(g.value(z).clone())
            }
        }
    }

    pub fn decode(&self, latent: &Latent, kind: TileKind) -> Result<Tile> {
        tensor_to_tile(&self.decode_tensor(latent)?, kind)
    }

    pub fn decode_tensor(&self, latent: &Latent) -> Result<Tensor> {
        if latent.channels != self.latent_channels() {
            return Err(DseError::shape(format!(
                "codec expects {} latent channels, got {}",
                self.latent_channels(),
                latent.channels
            )));
        }
        match self.descriptor {
            CodecDescriptor::Identity { .. } => Ok(latent.clone()),
            CodecDescriptor::Pool { factor, .. } => Ok(bilinear_upsample(latent, factor)),
            CodecDescriptor::Learned { .. } => {
                let net = self.learned.as_ref().expect("learned codec has weights");
                let mut g = Graph::new(&net.store);
                let out = net.decode_graph(&mut g, latent);
                Ok(g.value(out).clone())
            }
        }
    }

    /// Serializes a codec into a `DSEM` container.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::json!({
            "model": "latent_codec",
            "codec": self.descriptor,
        });
        let empty = ParamStore::new();
        write_container(&header, self.params().unwrap_or(&empty))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = read_container(bytes)?;
        if c.header.get("model").and_then(|m| m.as_str()) != Some("latent_codec") {
            return Err(DseError::format("container does not hold a latent codec"));
        }
        let desc: CodecDescriptor = serde_json::from_value(c.header["codec"].clone())
            .map_err(|e| DseError::format(format!("codec descriptor: {e}")))?;
        Self::from_parts(desc, &c.params)
    }

    /// Rebuilds a codec from its descriptor and (for learned codecs) weights.
    pub fn from_parts(desc: CodecDescriptor, params: &ParamStore) -> Result<Self> {
        match desc {
            CodecDescriptor::Identity { channels } => Ok(Self::identity(channels)),
            CodecDescriptor::Pool { channels, factor } => Self::pool(channels, factor),
            CodecDescriptor::Learned {
                channels,
                factor,
                latent_channels,
                hidden,
            } => {
                let mut net = LearnedNet::new(channels, factor, latent_channels, hidden, 0)?;
                net.store.load_from(params)?;
                Ok(Self {
                    descriptor: desc,
                    learned: Some(net),
                })
            }
        }
    }
}

/// `f × f` block mean.
pub fn mean_pool(t: &Tensor, f: usize) -> Tensor {
    if f == 2 {
        return avg_pool2(t);
    }
    let (c, h, w) = t.shape();
    let (oh, ow) = (h / f, w / f);
    let mut out = Tensor::zeros(c, oh, ow);
    let norm = 1.0 / (f * f) as f64;
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut s = 0.0;
                for dy in 0..f {
                    for dx in 0..f {
                        s += t.at(ch, y * f + dy, x * f + dx);
                    }
                }
                out.data[(ch * oh + y) * ow + x] = s * norm;
            }
        }
    }
    out
}

/// Bilinear upsampling by an integer factor with half-pixel centres and edge clamping.
pub fn bilinear_upsample(t: &Tensor, f: usize) -> Tensor {
    let (c, h, w) = t.shape();
    let (oh, ow) = (h * f, w * f);
    let taps = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|j| {
                let u = ((j as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = u.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, u - i0 as f64)
            })
            .collect()
    };
    let ty = taps(oh, h);
    let tx = taps(ow, w);
    let mut out = Tensor::zeros(c, oh, ow);
    for ch in 0..c {
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = t.at(ch, y0, x0) * (1.0 - fx) + t.at(ch, y0, x1) * fx;
                let bot = t.at(ch, y1, x0) * (1.0 - fx) + t.at(ch, y1, x1) * fx;
                out.data[(ch * oh + y) * ow + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
struct LearnedNet {
    channels: usize,
    factor: usize,
    store: ParamStore,
    enc_in: ConvLayer,
    enc_mid: Vec<ConvLayer>,
    enc_out: ConvLayer,
    dec_in: ConvLayer,
    dec_mid: Vec<ConvLayer>,
    dec_out: ConvLayer,
}

impl LearnedNet {
    fn new(channels: usize, factor: usize, latent_channels: usize, hidden: usize, seed: u64) -> Result<Self> {
        if !factor.is_power_of_two() || factor < 2 {
            return Err(DseError::config(format!(
                "learned codec factor must be a power of two >= 2, got {factor}"
            )));
        }
        if latent_channels <= channels {
            return Err(DseError::config(format!(
                "learned codec needs more latent channels ({latent_channels}) than image channels ({channels})"
            )));
        }
        let detail = latent_channels - channels;
        let levels = factor.trailing_zeros() as usize;
        let mut r = rng::seeded(seed);
        let mut store = ParamStore::new();
        let enc_in = ConvLayer::new(&mut store, "enc.in", channels, hidden, 3, &mut r);
        let enc_mid = (0..levels)
            .map(|i| ConvLayer::new(&mut store, &format!("enc.down{i}"), hidden, hidden, 3, &mut r))
            .collect();
        let enc_out = ConvLayer::new(&mut store, "enc.out", hidden, detail, 3, &mut r);
        let dec_in = ConvLayer::new(&mut store, "dec.in", latent_channels, hidden, 3, &mut r);
        let dec_mid = (0..levels)
            .map(|i| ConvLayer::new(&mut store, &format!("dec.up{i}"), hidden, hidden, 3, &mut r))
            .collect();
        let dec_out = ConvLayer::new(&mut store, "dec.out", hidden, channels, 3, &mut r);
        store.value_mut(dec_out.w).iter_mut().for_each(|v| *v = 0.0);
        Ok(Self {
            channels,
            factor,
            store,
            enc_in,
            enc_mid,
            enc_out,
            dec_in,
            dec_mid,
            dec_out,
        })
    }

    fn encode_graph(&self, g: &mut Graph, x: &Tensor) -> Var {
        let pooled = g.input(mean_pool(x, self.factor));
        let xi = g.input(x.clone());
        let mut h = self.enc_in.apply(g, xi);
        h = g.silu(h);
        for layer in &self.enc_mid {
            h = g.avg_pool2(h);
            h = layer.apply(g, h);
            h = g.silu(h);
        }
        let detail = self.enc_out.apply(g, h);
        g.concat(&[pooled, detail])
    }

    fn decode_graph(&self, g: &mut Graph, z: &Tensor) -> Var {
        let zi = g.input(z.clone());
        self.decode_from(g, zi, z)
    }

    fn decode_from(&self, g: &mut Graph, zv: Var, z: &Tensor) -> Var {
        let base_channels = Tensor {
            channels: self.channels,
            height: z.height,
            width: z.width,
            data: z.data[..self.channels * z.plane()].to_vec(),
        };
        let base = g.input(bilinear_upsample(&base_channels, self.factor));
        let mut h = self.dec_in.apply(g, zv);
        h = g.silu(h);
        for layer in &self.dec_mid {
            h = g.upsample2(h);
            h = layer.apply(g, h);
            h = g.silu(h);
        }
        let residual = self.dec_out.apply(g, h);
        g.add(base, residual)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub latent_channels: usize,
    pub factor: usize,
    pub hidden: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 2e-3,
            latent_channels: 8,
            factor: 2,
            hidden: 16,
            batch_size: 4,
            seed: 0,
        }
    }
}

/// Result of [`train_codec`]: the learned codec and its per-epoch mean loss.
#[derive(Debug, Clone)]
pub struct TrainedCodec {
    pub codec: LatentCodec,
    pub loss_curve: Vec<f64>,
}

/// Trains a learned codec on reconstruction MSE.
pub fn train_codec(corpus: &[Tile], config: &CodecTrainConfig) -> Result<TrainedCodec> {
    let first = corpus
        .first()
        .ok_or_else(|| DseError::argument("codec training needs a non-empty corpus"))?;
    if config.epochs == 0 || config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(DseError::config("epochs, batch size and learning rate must be positive"));
    }
    let channels = first.channels();
    let mut net = LearnedNet::new(channels, config.factor, config.latent_channels, config.hidden, config.seed)?;
    let descriptor = CodecDescriptor::Learned {
        channels,
        factor: config.factor,
        latent_channels: config.latent_channels,
        hidden: config.hidden,
    };
    let probe = LatentCodec {
        descriptor,
        learned: None,
    };
    let data: Vec<Tensor> = corpus
        .iter()
        .map(|t| {
            let x = tile_to_tensor(t);
            probe.check_input(&x).map(|_| x)
        })
        .collect::<Result<_>>()?;
    let mut opt = Adam::new(&net.store, config.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut r = rng::seeded(rng::derive_seed(config.seed, 1));
    let mut curve = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for _epoch in 0..config.epochs {
        order.shuffle(&mut r);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads = net.store.zero_grads();
            for &i in batch {
                let x = &data[i];
                let mut g = Graph::new(&net.store);
                let z = net.encode_graph(&mut g, x);
                let zval = g.value(z).clone();
                let out = net.decode_from(&mut g, z, &zval);
                let (loss, seed) = mse_loss(g.value(out), x, None);
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
            opt.step(&mut net.store, &grads);
            step += 1;
        }
        curve.push(total / data.len() as f64);
    }
    Ok(TrainedCodec {
        codec: LatentCodec {
            descriptor,
            learned: Some(net),
        },
        loss_curve: curve,
    })
}
