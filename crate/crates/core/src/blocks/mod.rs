//! Network building blocks and the assembled embedding extractors.

pub mod gradcheck;
pub mod layers;
pub mod network;
pub mod params;
pub mod resnet;
pub mod se;
pub mod stem;
pub mod tdnn;

pub use layers::{l2_normalize, BatchNorm, Conv1d, Conv2d, Linear};
pub use network::{Network, NetworkConfig, NetworkOutput, Variant, TOY_PARAM_LIMIT};
pub use params::{Ctx, DecayGroup, Init, Param, ParamId, ParamStore};
pub use resnet::{Excite, ResBlock, ResBlockSpec};
pub use se::{Bottleneck, Excitation, FeatureMap, FreqPositionalEncoding, FwSeBlock, SeBlock};
pub use stem::{ConvStem, StemConfig};
pub use tdnn::{weighted_stats, AttentiveStatsPool, Res2DilatedBlock, TdnnLayer};
pub use gradcheck::{check_block, relative_error, GradCheck, GradCheckOptions};
