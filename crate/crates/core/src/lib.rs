pub mod bridge;
pub mod despeckle;
pub mod error;
pub mod latent;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod speckle;
pub mod synth;
pub mod tensor;
pub mod tile;
pub mod translator;
