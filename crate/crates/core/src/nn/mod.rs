//! Neural operators: convolution stem, 4D and 3D MetaBlocks, multi-head
//! attention with learned bias, normalization variants and conv-BN folding.

mod attention;
mod blocks;
mod layers;
mod params;

pub use attention::{mhsa, AttnParams};
pub use blocks::{
    patch_embed, spatial_to_tokens, tokens_to_spatial, Embedding, Feature, Mb3d, Mb4d, Norm4d, Stem,
};
pub use layers::{
    activation, avgpool3x3, batchnorm, channel_layernorm, conv2d, conv_bn, cross_entropy,
    fold_bn_into_conv, groupnorm, layernorm, linear, softmax, BnParams, BnWeights, ConvBn,
    ConvParams, ConvWeights, LinearParams, NormParams, Transfer, BN_EPS, BN_MOMENTUM, LN_EPS,
};
pub use params::{Graph, Mode, ParamBuilder, ParamEntry, ParamId, ParamKind, ParamStore};
