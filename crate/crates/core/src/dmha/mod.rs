//! Hierarchical alignment stack: the four convolutional encoders, pyramid
//! injection of coarser-scale DFCs into the base pathway, and the two
//! contrastive alignment losses.

pub mod contrastive;
pub mod encoder;
pub mod tsa;

pub use contrastive::{contrastive_node, contrastive_with_grad, cosine_sim, dsa_loss, fsa_common, fsa_loss, CommonSpacePair};
pub use encoder::{encode_pathway, EncodedPathway, Encoder, EncoderConfig, EncoderOutput, Pathway};
pub use tsa::{TsaInjector, TsaTrace};
