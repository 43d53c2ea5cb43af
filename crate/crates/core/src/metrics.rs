//! Translation metrics (PSNR, SSIM), binary segmentation metrics, a small
//! trainable water segmenter and tabular reports.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{DseError, Result};
use crate::latent::tile_to_tensor;
use crate::nn::{bce_with_logits, read_container, write_container, Adam, ConvLayer, Graph, ParamStore};
use crate::rng;
use crate::tensor::Tensor;
use crate::tile::{Tile, TileKind};

/// PSNR reported for identical inputs.
pub const PSNR_CAP: f64 = 99.0;

fn check_same_shape(a: &Tile, b: &Tile, what: &str) -> Result<()> {
    a.check_same_dims(b, what)?;
    if a.channels() != b.channels() {
        return Err(DseError::shape(format!(
            "{what}: {} vs {} channels",
            a.channels(),
            b.channels()
        )));
    }
    Ok(())
}

pub fn mse(a: &Tile, b: &Tile) -> Result<f64> {
    check_same_shape(a, b, "mse")?;
    let n = a.data().len().max(1) as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / n)
}

/// `10 · log10(max² / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tile, b: &Tile, max_val: f64) -> Result<f64> {
    if !(max_val > 0.0) {
        return Err(DseError::argument(format!("max_val must be positive, got {max_val}")));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (max_val * max_val / m).log10()).min(PSNR_CAP))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub max_val: f64,
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            max_val: 1.0,
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

impl SsimParams {
    pub fn with_max(max_val: f64) -> Self {
        Self {
            max_val,
            ..Self::default()
        }
    }
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..window)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of a `w × h` plane.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; oh * w];
    for y in 0..oh {
        for x in 0..w {
            tmp[y * w + x] = (0..n).map(|i| k[i] * src[(y + i) * w + x]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[y * w + x + i]).sum();
        }
    }
    out
}

/// Mean structural similarity over all fully-contained Gaussian windows and channels.
pub fn ssim(a: &Tile, b: &Tile, params: &SsimParams) -> Result<f64> {
    check_same_shape(a, b, "ssim")?;
    let (w, h) = (a.width(), a.height());
    if w < params.window || h < params.window {
        return Err(DseError::shape(format!(
            "{w}x{h} tile is smaller than the {}-pixel SSIM window",
            params.window
        )));
    }
    let k = gaussian_kernel(params.window, params.sigma);
    let c1 = (params.k1 * params.max_val).powi(2);
    let c2 = (params.k2 * params.max_val).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..a.channels() {
        let x: Vec<f64> = a.channel(c).iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.channel(c).iter().map(|&v| v as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(&x, w, h, &k);
        let my = filter_valid(&y, w, h, &k);
        let sxx = filter_valid(&xx, w, h, &k);
        let syy = filter_valid(&yy, w, h, &k);
        let sxy = filter_valid(&xy, w, h, &k);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Binary confusion counts for the flood class (1). Background (0) metrics
/// are obtained by swapping `tp ↔ tn` and `fp ↔ fn`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Counts from the point of view of the background class.
    pub fn swapped(&self) -> Self {
        Self {
            tp: self.tn,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tp,
        }
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

pub fn confusion(pred: &Tile, gt: &Tile) -> Result<ConfusionCounts> {
    check_same_shape(pred, gt, "confusion")?;
    if pred.kind() != TileKind::Mask || gt.kind() != TileKind::Mask {
        return Err(DseError::kind("confusion expects two MASK tiles"));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p == 1.0, g == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub background: ClassMetrics,
    pub flood: ClassMetrics,
    pub accuracy: f64,
}

impl SegMetrics {
    /// Flattened `(name, value)` pairs in report column order.
    pub fn to_row(&self) -> Vec<(String, f64)> {
        let mut row = Vec::new();
        for (name, pick) in [
            ("precision", (|m: &ClassMetrics| m.precision) as fn(&ClassMetrics) -> f64),
            ("recall", |m| m.recall),
            ("f1", |m| m.f1),
            ("iou", |m| m.iou),
        ] {
            row.push((format!("{name}0"), pick(&self.background)));
            row.push((format!("{name}1"), pick(&self.flood)));
        }
        row.push(("acc".to_string(), self.accuracy));
        row
    }
}

/// `num / den`, with 1 when the class is absent from both masks and 0 when
/// the denominator vanishes for any other reason.
fn ratio(num: u64, den: u64, class_absent: bool) -> f64 {
    if den == 0 {
        if class_absent {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

fn class_metrics(c: &ConfusionCounts) -> ClassMetrics {
    let absent = c.tp + c.fp + c.fn_ == 0;
    ClassMetrics {
        precision: ratio(c.tp, c.tp + c.fp, absent),
        recall: ratio(c.tp, c.tp + c.fn_, absent),
        f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, absent),
        iou: ratio(c.tp, c.tp + c.fp + c.fn_, absent),
    }
}

pub fn seg_metrics(counts: &ConfusionCounts) -> SegMetrics {
    SegMetrics {
        background: class_metrics(&counts.swapped()),
        flood: class_metrics(counts),
        accuracy: ratio(counts.tp + counts.tn, counts.total(), true),
    }
}

/// Small water segmenter: two `k × k` convolutions and a 1×1 logit head.
/// With the default `k = 1` every pixel is classified from its own values.
#[derive(Debug, Clone)]
pub struct Segmenter {
    channels: usize,
    hidden: usize,
    kernel: usize,
    store: ParamStore,
    c1: ConvLayer,
    c2: ConvLayer,
    head: ConvLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmenterConfig {
    pub hidden: usize,
    /// Odd spatial size of the two hidden convolutions.
    pub kernel: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            hidden: 8,
            kernel: 1,
            epochs: 15,
            lr: 1e-2,
            batch_size: 4,
            seed: 0,
        }
    }
}

impl Segmenter {
    pub fn new(channels: usize, hidden: usize, kernel: usize, seed: u64) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(DseError::config(format!("segmenter kernel must be odd, got {kernel}")));
        }
        let mut r = rng::seeded(seed);
        let mut store = ParamStore::new();
        let c1 = ConvLayer::new(&mut store, "seg.c1", channels, hidden, kernel, &mut r);
        let c2 = ConvLayer::new(&mut store, "seg.c2", hidden, hidden, kernel, &mut r);
        let head = ConvLayer::new(&mut store, "seg.head", hidden, 1, 1, &mut r);
        Ok(Self {
            channels,
            hidden,
            kernel,
            store,
            c1,
            c2,
            head,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn logits(&self, g: &mut Graph, x: &Tensor) -> crate::nn::Var {
        let xi = g.input(x.clone());
        let h = self.c1.apply(g, xi);
        let h = g.silu(h);
        let h = self.c2.apply(g, h);
        let h = g.silu(h);
        self.head.apply(g, h)
    }

    pub fn predict(&self, input: &Tile) -> Result<Tile> {
        if input.channels() != self.channels {
            return Err(DseError::shape(format!(
                "segmenter expects {} channels, got {}",
                self.channels,
                input.channels()
            )));
        }
        let mut g = Graph::new(&self.store);
        let out = self.logits(&mut g, &tile_to_tensor(input));
        let data = g.value(out).data.iter().map(|&z| (z > 0.0) as u8 as f32).collect();
        Tile::new(input.width(), input.height(), 1, TileKind::Mask, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::json!({
            "model": "segmenter",
            "channels": self.channels,
            "hidden": self.hidden,
            "kernel": self.kernel,
        });
        write_container(&header, &self.store)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = read_container(bytes)?;
        if c.header.get("model").and_then(|m| m.as_str()) != Some("segmenter") {
            return Err(DseError::format("container does not hold a segmenter"));
        }
        let get = |k: &str| {
            c.header
                .get(k)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| DseError::format(format!("segmenter header lacks {k}")))
        };
        let mut s = Segmenter::new(get("channels")?, get("hidden")?, get("kernel")?, 0)?;
        s.store.load_from(&c.params)?;
        Ok(s)
    }
}

/// Trains a [`Segmenter`] with binary cross-entropy.
pub fn train_segmenter(inputs: &[Tile], masks: &[Tile], config: &SegmenterConfig) -> Result<(Segmenter, Vec<f64>)> {
    if inputs.is_empty() || inputs.len() != masks.len() {
        return Err(DseError::argument("segmenter needs equally many inputs and masks"));
    }
    let channels = inputs[0].channels();
    let mut seg = Segmenter::new(channels, config.hidden, config.kernel, config.seed)?;
    let data: Vec<(Tensor, Tensor)> = inputs
        .iter()
        .zip(masks)
        .map(|(x, m)| {
            if x.channels() != channels {
                return Err(DseError::shape("segmenter inputs differ in channel count"));
            }
            x.check_same_dims(m, "segmenter input/mask")?;
            Ok((tile_to_tensor(x), tile_to_tensor(m)))
        })
        .collect::<Result<_>>()?;
    let mut opt = Adam::new(&seg.store, config.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut r = rng::seeded(rng::derive_seed(config.seed, 7));
    let mut curve = Vec::new();
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut r);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size.max(1)) {
            let mut grads = seg.store.zero_grads();
            for &i in batch {
                let (x, m) = &data[i];
                let mut g = Graph::new(&seg.store);
                let out = seg.logits(&mut g, x);
                let (loss, seed) = bce_with_logits(g.value(out), m);
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
            opt.step(&mut seg.store, &grads);
            step += 1;
        }
        curve.push(total / data.len() as f64);
    }
    Ok((seg, curve))
}

pub enum SegMethod<'a> {
    /// Water where `channel < threshold`.
    Threshold { channel: usize, threshold: f32 },
    Trained(&'a Segmenter),
}

pub fn segment_water(input: &Tile, method: &SegMethod) -> Result<Tile> {
    match method {
        SegMethod::Threshold { channel, threshold } => {
            if *channel >= input.channels() {
                return Err(DseError::argument(format!(
                    "threshold channel {channel} out of range for {} channels",
                    input.channels()
                )));
            }
            let data = input
                .channel(*channel)
                .iter()
                .map(|&v| (v < *threshold) as u8 as f32)
                .collect();
            Tile::new(input.width(), input.height(), 1, TileKind::Mask, data)
        }
        SegMethod::Trained(model) => model.predict(input),
    }
}

/// A rendered metric table.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub columns: Vec<String>,
    pub text: String,
    pub csv: String,
}

pub type ReportRow = (String, Vec<(String, f64)>);

/// Renders rows as an aligned text table and CSV. Column order is the key
/// order of the first row; every row must carry the same keys.
pub fn report_table(rows: &[ReportRow]) -> Result<Report> {
    let columns: Vec<String> = rows
        .first()
        .map(|(_, m)| m.iter().map(|(k, _)| k.clone()).collect())
        .unwrap_or_default();
    for (label, m) in rows {
        let keys: Vec<&String> = m.iter().map(|(k, _)| k).collect();
        if keys.len() != columns.len() || keys.iter().zip(&columns).any(|(a, b)| *a != b) {
            return Err(DseError::argument(format!("row {label:?} has different metric keys")));
        }
    }
    let mut csv = String::from("label");
    for c in &columns {
        csv.push(',');
        csv.push_str(c);
    }
    csv.push('\n');
    for (label, m) in rows {
        csv.push_str(label);
        for (_, v) in m {
            write!(csv, ",{v}").unwrap();
        }
        csv.push('\n');
    }

    let label_w = rows.iter().map(|(l, _)| l.len()).chain([5]).max().unwrap();
    let col_w: Vec<usize> = columns.iter().map(|c| c.len().max(8)).collect();
    let mut text = format!("{:<label_w$}", "label");
    for (c, w) in columns.iter().zip(&col_w) {
        write!(text, "  {c:>w$}").unwrap();
    }
    text.push('\n');
    for (label, m) in rows {
        write!(text, "{label:<label_w$}").unwrap();
        for ((_, v), w) in m.iter().zip(&col_w) {
            write!(text, "  {v:>w$.4}").unwrap();
        }
        text.push('\n');
    }
    Ok(Report { columns, text, csv })
}

/// Parses CSV produced by [`report_table`].
pub fn parse_report_csv(csv: &str) -> Result<Vec<ReportRow>> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| DseError::format("empty CSV"))?
        .split(',')
        .collect();
    if header.first() != Some(&"label") {
        return Err(DseError::format("CSV header must start with label"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != header.len() {
                return Err(DseError::format(format!("CSV row has {} fields", fields.len())));
            }
            let values = header[1..]
                .iter()
                .zip(&fields[1..])
                .map(|(k, v)| {
                    v.parse::<f64>()
                        .map(|x| (k.to_string(), x))
                        .map_err(|e| DseError::format(format!("CSV value {v:?}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((fields[0].to_string(), values))
        })
        .collect()
}
