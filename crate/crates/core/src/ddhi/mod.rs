//! Dual-domain interactions: fine-grained modulated attention within each
//! domain, residual mixing, cross-domain multi-head attention and the
//! residual projector that produces class logits.

pub mod global;
pub mod head;
pub mod interaction;

pub use global::{global_interaction, CrossAttention, DomainEmbeddings, GlobalInteraction, GlobalVars};
pub use head::{classify, cross_entropy, cross_entropy_node, softmax, total_loss, Classifier};
pub use interaction::{
    fi_block, fi_block_node, fi_node, fine_grained_attention, fine_grained_interaction, residual_mix, FiOutputs,
    FiPairing, FiVars, LambdaMode, LatentTokens, LatentVars, ResidualMixer,
};
