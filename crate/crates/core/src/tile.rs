//! Raster data model, the `DSET` tile file format, radiometric conversions and
//! dataset utilities.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{DseError, Result};
use crate::rng;

/// Floor applied to linear intensities before taking logarithms.
pub const DB_FLOOR: f32 = 1e-6;

const MAGIC: &[u8; 4] = b"DSET";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TileKind {
    SarLinear,
    SarDb,
    EoRgb,
    Mask,
    Latent,
}

impl TileKind {
    pub fn code(self) -> u32 {
        match self {
            TileKind::SarLinear => 0,
            TileKind::SarDb => 1,
            TileKind::EoRgb => 2,
            TileKind::Mask => 3,
            TileKind::Latent => 4,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        Ok(match code {
            0 => TileKind::SarLinear,
            1 => TileKind::SarDb,
            2 => TileKind::EoRgb,
            3 => TileKind::Mask,
            4 => TileKind::Latent,
            other => return Err(DseError::format(format!("unknown tile kind code {other}"))),
        })
    }
}

/// Multi-channel `f32` raster. Data is channel-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    width: usize,
    height: usize,
    channels: usize,
    kind: TileKind,
    data: Vec<f32>,
}

impl Tile {
    /// Builds a tile, checking the length and kind invariants.
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        kind: TileKind,
        data: Vec<f32>,
    ) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(DseError::shape(format!(
                "tile data length {} != {width}x{height}x{channels}",
                data.len()
            )));
        }
        match kind {
            TileKind::Mask if data.iter().any(|&v| v != 0.0 && v != 1.0) => {
                return Err(DseError::kind("MASK tiles must contain only 0 and 1"));
            }
            TileKind::SarLinear if data.iter().any(|&v| !(v >= 0.0)) => {
                return Err(DseError::kind("SAR_LINEAR tiles must be non-negative"));
            }
            _ => {}
        }
        Ok(Self {
            width,
            height,
            channels,
            kind,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, kind: TileKind, value: f32) -> Result<Self> {
        Self::new(width, height, channels, kind, vec![value; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn kind(&self) -> TileKind {
        self.kind
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn plane(&self) -> usize {
        self.width * self.height
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn same_dims(&self, other: &Tile) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn check_same_dims(&self, other: &Tile, what: &str) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(DseError::shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    /// Returns a single-channel tile holding channel `c`.
    pub fn extract_channel(&self, c: usize) -> Result<Tile> {
        if c >= self.channels {
            return Err(DseError::argument(format!(
                "channel {c} out of range for {}-channel tile",
                self.channels
            )));
        }
        Tile::new(self.width, self.height, 1, self.kind, self.channel(c).to_vec())
    }

    /// Concatenates tiles along the channel axis. The result takes the kind of the first tile.
    pub fn stack(parts: &[&Tile], kind: TileKind) -> Result<Tile> {
        let first = parts
            .first()
            .ok_or_else(|| DseError::shape("cannot stack zero tiles"))?;
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            first.check_same_dims(p, "stack")?;
            channels += p.channels;
            data.extend_from_slice(&p.data);
        }
        Tile::new(first.width, first.height, channels, kind, data)
    }

    /// Relabels the tile kind, re-checking invariants for the new kind.
    pub fn with_kind(self, kind: TileKind) -> Result<Tile> {
        Tile::new(self.width, self.height, self.channels, kind, self.data)
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Serializes the tile in the `DSET v1` format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        for v in [
            VERSION,
            self.width as u32,
            self.height as u32,
            self.channels as u32,
            self.kind.code(),
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses a `DSET v1` byte buffer.
    pub fn from_bytes(bytes: &[u8]) -> Result<Tile> {
        if bytes.len() < HEADER_LEN {
            if bytes.len() >= 4 && &bytes[..4] != MAGIC {
                return Err(DseError::format("bad magic"));
            }
            return Err(truncated("tile header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(DseError::format(format!(
                "bad magic {:?}",
                String::from_utf8_lossy(&bytes[..4])
            )));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != VERSION {
            return Err(DseError::format(format!("unsupported DSET version {version}")));
        }
        let (width, height, channels) = (word(1) as usize, word(2) as usize, word(3) as usize);
        let kind = TileKind::from_code(word(4))?;
        let n = width
            .checked_mul(height)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| DseError::format("tile dimensions overflow"))?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() < 4 * n {
            return Err(truncated("tile payload"));
        }
        if payload.len() > 4 * n {
            return Err(DseError::format("trailing bytes after tile payload"));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tile::new(width, height, channels, kind, data)
    }
}

fn truncated(what: &str) -> DseError {
    DseError::Io(std::io::Error::new(
        std::io::ErrorKind::UnexpectedEof,
        format!("truncated {what}"),
    ))
}

pub fn read_tile(path: impl AsRef<Path>) -> Result<Tile> {
    Tile::from_bytes(&fs::read(path)?)
}

pub fn write_tile(tile: &Tile, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, tile.to_bytes())?;
    Ok(())
}

/// Converts linear intensity to decibels, clamping at `floor` first.
pub fn to_db(tile: &Tile, floor: f32) -> Result<Tile> {
    if tile.kind != TileKind::SarLinear {
        return Err(DseError::kind(format!("to_db expects SAR_LINEAR, got {:?}", tile.kind)));
    }
    let data = tile
        .data
        .iter()
        .map(|&v| 10.0 * v.max(floor).log10())
        .collect();
    Tile::new(tile.width, tile.height, tile.channels, TileKind::SarDb, data)
}

pub fn from_db(tile: &Tile) -> Result<Tile> {
    if tile.kind != TileKind::SarDb {
        return Err(DseError::kind(format!("from_db expects SAR_DB, got {:?}", tile.kind)));
    }
    let data = tile.data.iter().map(|&v| 10f32.powf(v / 10.0)).collect();
    Tile::new(tile.width, tile.height, tile.channels, TileKind::SarLinear, data)
}

/// Builds the three-channel SAR composite `[VV, VH, (VV+VH)/2]`.
pub fn compose_sar3(vv: &Tile, vh: &Tile) -> Result<Tile> {
    if vv.channels != 1 || vh.channels != 1 {
        return Err(DseError::shape(format!(
            "compose_sar3 expects single-channel inputs, got {} and {}",
            vv.channels, vh.channels
        )));
    }
    vv.check_same_dims(vh, "compose_sar3")?;
    if vv.kind != vh.kind {
        return Err(DseError::kind(format!(
            "compose_sar3 kinds differ: {:?} vs {:?}",
            vv.kind, vh.kind
        )));
    }
    let mut data = Vec::with_capacity(3 * vv.plane());
    data.extend_from_slice(&vv.data);
    data.extend_from_slice(&vh.data);
    data.extend(vv.data.iter().zip(&vh.data).map(|(&a, &b)| (a + b) / 2.0));
    Tile::new(vv.width, vv.height, 3, vv.kind, data)
}

/// Splits a two-channel `(VV, VH)` tile and composes it.
pub fn compose_sar3_pair(sar: &Tile) -> Result<Tile> {
    match sar.channels {
        2 => compose_sar3(&sar.extract_channel(0)?, &sar.extract_channel(1)?),
        3 => Ok(sar.clone()),
        n => Err(DseError::shape(format!(
            "expected a (VV, VH) tile with 2 channels, got {n}"
        ))),
    }
}

/// Linear-interpolated percentile of `sorted` (ascending), `pct` in [0, 100].
pub(crate) fn percentile_sorted(sorted: &[f32], pct: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0] as f64;
    }
    let pos = (pct / 100.0).clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] as f64 * (1.0 - frac) + sorted[hi] as f64 * frac
}

/// Per-channel percentile normalization to [0, 1].
///
/// Each channel is clipped to `[P_lo, P_hi]` and mapped affinely onto
/// `[0, 1]`. Channels with `P_hi == P_lo` map to zero.
pub fn normalize(tile: &Tile, lo_pct: f64, hi_pct: f64) -> Result<Tile> {
    if tile.data.is_empty() {
        return Err(DseError::shape("cannot normalize an empty tile"));
    }
    if !(lo_pct < hi_pct) || lo_pct < 0.0 || hi_pct > 100.0 {
        return Err(DseError::argument(format!(
            "percentiles must satisfy 0 <= lo < hi <= 100, got {lo_pct}, {hi_pct}"
        )));
    }
    let mut data = Vec::with_capacity(tile.data.len());
    for c in 0..tile.channels {
        let chan = tile.channel(c);
        let mut sorted = chan.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let p_lo = percentile_sorted(&sorted, lo_pct);
        let p_hi = percentile_sorted(&sorted, hi_pct);
        let span = p_hi - p_lo;
        data.extend(chan.iter().map(|&v| {
            if span > 0.0 {
                ((v as f64).clamp(p_lo, p_hi) - p_lo) as f32 / span as f32
            } else {
                0.0
            }
        }));
    }
    let kind = match tile.kind {
        TileKind::Mask => TileKind::Latent,
        k => k,
    };
    Tile::new(tile.width, tile.height, tile.channels, kind, data)
}

/// One co-registered training triple.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudPair {
    pub sar: Tile,
    pub eo: Tile,
    pub cloud_mask: Tile,
}

/// Drops pairs whose cloud fraction exceeds `max_cloud_frac`, preserving order.
pub fn cloud_filter(pairs: Vec<CloudPair>, max_cloud_frac: f64) -> Vec<CloudPair> {
    pairs
        .into_iter()
        .filter(|p| p.cloud_mask.mean() <= max_cloud_frac)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train_frac: f64, val_frac: f64, test_frac: f64, seed: u64) -> Result<Self> {
        let spec = Self {
            train_frac,
            val_frac,
            test_frac,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let fracs = [self.train_frac, self.val_frac, self.test_frac];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(DseError::config(format!("split fractions must lie in [0, 1]: {fracs:?}")));
        }
        let sum: f64 = fracs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DseError::config(format!("split fractions sum to {sum}, not 1")));
        }
        Ok(())
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_frac: 0.6,
            val_frac: 0.2,
            test_frac: 0.2,
            seed: 0,
        }
    }
}

/// Seeded shuffle-and-split. Validation and test sizes are floored and the
/// remainder goes to training.
pub fn split_dataset<T: Clone>(items: &[T], spec: &SplitSpec) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    spec.validate()?;
    if items.is_empty() {
        return Err(DseError::argument("cannot split an empty item list"));
    }
    let n = items.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(spec.seed));
    let n_val = (n as f64 * spec.val_frac).floor() as usize;
    let n_test = (n as f64 * spec.test_frac).floor() as usize;
    let n_train = n - n_val - n_test;
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    Ok((
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_val]),
        pick(&order[n_train + n_val..]),
    ))
}

/// Quantizes a display value: `round(255 · v^gamma)` with halves rounded up.
pub fn quantize_u8(v: f32, gamma: f32) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (255.0 * (v as f64).powf(gamma as f64) + 0.5).floor().min(255.0) as u8
}

/// Encodes a 1- or 3-channel tile as an 8-bit PNG.
pub fn encode_png(tile: &Tile, gamma: f32) -> Result<Vec<u8>> {
    let color = match tile.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        n => return Err(DseError::kind(format!("PNG export needs 1 or 3 channels, got {n}"))),
    };
    let plane = tile.plane();
    let mut pixels = Vec::with_capacity(plane * tile.channels);
    for i in 0..plane {
        for c in 0..tile.channels {
            pixels.push(quantize_u8(tile.data[c * plane + i], gamma));
        }
    }
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, tile.width as u32, tile.height as u32);
        encoder.set_color(color);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().map_err(png_err)?;
        writer.write_image_data(&pixels).map_err(png_err)?;
    }
    Ok(out)
}

pub fn export_png(tile: &Tile, path: impl AsRef<Path>, gamma: f32) -> Result<()> {
    let bytes = encode_png(tile, gamma)?;
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

/// Reads an 8-bit grayscale or RGB PNG back into a tile with values in [0, 1].
pub fn read_png(path: impl AsRef<Path>) -> Result<Tile> {
    let file = fs::File::open(path)?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(png_decode_err)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(png_decode_err)?;
    let (channels, kind) = match info.color_type {
        png::ColorType::Grayscale => (1, TileKind::Latent),
        png::ColorType::Rgb => (3, TileKind::EoRgb),
        other => return Err(DseError::format(format!("unsupported PNG color type {other:?}"))),
    };
    if info.bit_depth != png::BitDepth::Eight {
        return Err(DseError::format("only 8-bit PNGs are supported"));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let plane = w * h;
    let mut data = vec![0f32; plane * channels];
    for i in 0..plane {
        for c in 0..channels {
            data[c * plane + i] = buf[i * channels + c] as f32 / 255.0;
        }
    }
    Tile::new(w, h, channels, kind, data)
}

fn png_err(e: png::EncodingError) -> DseError {
    DseError::format(format!("png encoding: {e}"))
}

fn png_decode_err(e: png::DecodingError) -> DseError {
    DseError::format(format!("png decoding: {e}"))
}
