pub mod autograd;
pub mod container;
pub mod datapipe;
pub mod diffusion;
pub mod encoders;
pub mod eval;
pub mod error;
pub mod harness;
pub mod hash;
pub mod image;
pub mod latent;
pub mod nn;
pub mod params;
pub mod pose;
pub mod projector;
pub mod tensor;
