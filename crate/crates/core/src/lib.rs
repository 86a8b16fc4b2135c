//! Quantized massive-MIMO downlink precoding.
//!
//! The crate covers DAC quantizer design, linear baselines (MRT, ZF), the
//! empirical Bussgang metrics used to score any precoder, a message-passing
//! GNN precoder with its straight-through Gumbel-softmax trainer, and the
//! FLOP and power models.

pub mod channel;
pub mod dataset;
pub mod energy;
pub mod gnn;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod precoders;
pub mod quantizer;
pub mod rng;
pub mod trainer;

pub use channel::{CMatrix, ChannelMatrix, ChannelModel, SymbolBatch};
pub use quantizer::{Resolution, ScalarQuantizer};
