//! Minimal convolutional network toolkit: parameters, a reverse-mode graph,
//! Adam, losses and the `DSEM` model container.

mod container;
mod graph;
mod params;

pub use container::{read_container, write_container, ModelContainer};
pub use graph::{Graph, Var};
pub use params::{Adam, Grads, Param, ParamId, ParamStore};

pub(crate) use graph::avg_pool2;

use rand::Rng;

use crate::tensor::Tensor;

/// Weight and bias handles for one convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvLayer {
    pub w: ParamId,
    pub b: ParamId,
}

impl ConvLayer {
    /// Registers a `k × k` convolution with uniform fan-in initialization.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_c: usize, out_c: usize, k: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (in_c * k * k) as f64).sqrt() * 0.5;
        let w = store.add_uniform(format!("{name}.weight"), vec![out_c, in_c, k, k], bound, rng);
        let b = store.add_zeros(format!("{name}.bias"), vec![out_c]);
        Self { w, b }
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        g.conv2d(x, self.w, self.b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearLayer {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_n: usize, out_n: usize, rng: &mut R) -> Self {
        let bound = (6.0 / in_n as f64).sqrt() * 0.5;
        let w = store.add_uniform(format!("{name}.weight"), vec![out_n, in_n], bound, rng);
        let b = store.add_zeros(format!("{name}.bias"), vec![out_n]);
        Self { w, b }
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        g.linear(x, self.w, self.b)
    }
}

/// Sinusoidal embedding of a step index.
pub fn timestep_embedding(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t * freq).sin();
        out[half + i] = (t * freq).cos();
    }
    Tensor::vector(out)
}

/// Mean squared error and its gradient. With `mask`, only positions where the
/// mask is non-zero contribute and the mean is over those positions.
pub fn mse_loss(pred: &Tensor, target: &Tensor, mask: Option<&[bool]>) -> (f64, Tensor) {
    assert!(pred.same_shape(target), "mse_loss: shape mismatch");
    let count = match mask {
        Some(m) => m.iter().filter(|&&b| b).count(),
        None => pred.len(),
    }
    .max(1) as f64;
    let mut grad = Tensor::zeros(pred.channels, pred.height, pred.width);
    let mut loss = 0.0;
    for i in 0..pred.len() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let d = pred.data[i] - target.data[i];
        loss += d * d;
        grad.data[i] = 2.0 * d / count;
    }
    (loss / count, grad)
}

/// Binary cross-entropy on logits and its gradient, averaged over elements.
pub fn bce_with_logits(logits: &Tensor, target: &Tensor) -> (f64, Tensor) {
    assert!(logits.same_shape(target), "bce: shape mismatch");
    let n = logits.len().max(1) as f64;
    let mut grad = Tensor::zeros(logits.channels, logits.height, logits.width);
    let mut loss = 0.0;
    for i in 0..logits.len() {
        let z = logits.data[i];
        let y = target.data[i];
        loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        let s = 1.0 / (1.0 + (-z).exp());
        grad.data[i] = (s - y) / n;
    }
    (loss / n, grad)
}
