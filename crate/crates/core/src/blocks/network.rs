//! Full embedding extractors: ECAPA-TDNN (optionally behind the 2D stem) and
//! the SE-/fwSE-ResNet family.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{BatchNorm, Conv2d, Linear};
use super::params::{Ctx, Init, ParamStore};
use super::resnet::{Excite, ResBlock, ResBlockSpec};
use super::se::Bottleneck;
use super::stem::{ConvStem, StemConfig};
use super::tdnn::{AttentiveStatsPool, Res2DilatedBlock, TdnnLayer};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::scoring::SpeakerEmbedding;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    EcapaTdnn,
    EcapaCnnTdnn,
    SeResnet,
    FwseResnetPosenc,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::EcapaTdnn,
        Variant::EcapaCnnTdnn,
        Variant::SeResnet,
        Variant::FwseResnetPosenc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::EcapaTdnn => "ecapa_tdnn",
            Variant::EcapaCnnTdnn => "ecapa_cnn_tdnn",
            Variant::SeResnet => "se_resnet",
            Variant::FwseResnetPosenc => "fwse_resnet_posenc",
        }
    }

    pub fn is_resnet(self) -> bool {
        matches!(self, Variant::SeResnet | Variant::FwseResnetPosenc)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub variant: Variant,
    pub n_mels: usize,
    pub embedding_dim: usize,
    pub ecapa_channels: usize,
    /// One Res2 block per entry, with that dilation.
    pub ecapa_dilations: Vec<usize>,
    pub res2_scale: usize,
    pub mfa_channels: usize,
    pub stem: StemConfig,
    pub resnet_widths: Vec<usize>,
    pub resnet_blocks: Vec<usize>,
    pub resnet_strides: Vec<usize>,
    pub se_bottleneck: Bottleneck,
    pub attention_dim: usize,
    /// Frequency positional encodings at every residual block input; only
    /// honoured by the ResNet variants.
    pub pos_enc: bool,
}

/// Parameter budget for the toy presets.
pub const TOY_PARAM_LIMIT: usize = 5_000_000;

impl NetworkConfig {
    /// Desk-scale configuration used for tests and the toy pipeline.
    pub fn toy(variant: Variant) -> Self {
        NetworkConfig {
            variant,
            n_mels: 80,
            embedding_dim: 64,
            ecapa_channels: 64,
            ecapa_dilations: vec![2, 3, 4],
            res2_scale: 4,
            mfa_channels: 192,
            stem: StemConfig {
                channels: 8,
                ..StemConfig::default()
            },
            resnet_widths: vec![16, 32, 64, 128],
            resnet_blocks: vec![1, 1, 1, 1],
            resnet_strides: vec![1, 2, 2, 2],
            se_bottleneck: Bottleneck::Divisor(4),
            attention_dim: 32,
            pos_enc: variant == Variant::FwseResnetPosenc,
        }
    }

    /// Paper-scale configuration.
    pub fn full(variant: Variant) -> Self {
        NetworkConfig {
            variant,
            n_mels: 80,
            embedding_dim: 192,
            ecapa_channels: 2048,
            ecapa_dilations: vec![2, 3, 4],
            res2_scale: 8,
            mfa_channels: 3 * 2048,
            stem: StemConfig::default(),
            resnet_widths: vec![64, 128, 256, 512],
            resnet_blocks: vec![3, 4, 6, 3],
            resnet_strides: vec![1, 2, 2, 2],
            se_bottleneck: Bottleneck::Fixed(128),
            attention_dim: 128,
            pos_enc: variant == Variant::FwseResnetPosenc,
        }
    }

    pub fn with_n_mels(mut self, n_mels: usize) -> Self {
        self.n_mels = n_mels;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_mels == 0 || self.embedding_dim == 0 || self.attention_dim == 0 {
            return bad("n_mels, embedding_dim and attention_dim must be positive".into());
        }
        if self.variant.is_resnet() {
            let stages = self.resnet_widths.len();
            if stages == 0 || self.resnet_blocks.len() != stages || self.resnet_strides.len() != stages {
                return bad("resnet widths, blocks and strides must have one entry per stage".into());
            }
            if self.resnet_widths.iter().chain(&self.resnet_blocks).chain(&self.resnet_strides).any(|&v| v == 0) {
                return bad("resnet stage parameters must be positive".into());
            }
        } else {
            if self.ecapa_dilations.is_empty() || self.ecapa_dilations.contains(&0) {
                return bad("ecapa needs at least one block with positive dilation".into());
            }
            if self.res2_scale == 0 || !self.ecapa_channels.is_multiple_of(self.res2_scale) {
                return bad(format!(
                    "{} channels cannot be split into {} groups",
                    self.ecapa_channels, self.res2_scale
                ));
            }
            if self.mfa_channels == 0 {
                return bad("mfa_channels must be positive".into());
            }
            if self.variant == Variant::EcapaCnnTdnn {
                self.stem.validate(self.n_mels)?;
            }
        }
        Ok(())
    }

    /// Short stable digest identifying the architecture; stored with weights.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug)]
struct EcapaBody {
    stem: Option<ConvStem>,
    layer1: TdnnLayer,
    blocks: Vec<Res2DilatedBlock>,
    mfa: TdnnLayer,
}

#[derive(Clone, Debug)]
struct ResnetBody {
    conv1: Conv2d,
    bn1: BatchNorm,
    blocks: Vec<ResBlock>,
}

#[derive(Clone, Debug)]
enum Body {
    Ecapa(EcapaBody),
    Resnet(ResnetBody),
}

/// Embedding and the pooling-layer statistics it was computed from.
pub struct NetworkOutput<'t> {
    pub embedding: Var<'t>,
    pub pooled: Var<'t>,
}

/// Network architecture; the weights live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    cfg: NetworkConfig,
    body: Body,
    pool: AttentiveStatsPool,
    pool_bn: BatchNorm,
    bottleneck: Linear,
}

impl Network {
    pub fn new<R: Rng>(cfg: NetworkConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let init = &mut Init { rng };
        let (body, pooled_channels) = if cfg.variant.is_resnet() {
            build_resnet(&cfg, store, init)
        } else {
            build_ecapa(&cfg, store, init)?
        };
        let pool = AttentiveStatsPool::new(store, init, "pool", pooled_channels, cfg.attention_dim);
        let pool_bn = BatchNorm::new(store, "pool_bn", 2 * pooled_channels);
        let bottleneck = Linear::new(store, init, "embedding", 2 * pooled_channels, cfg.embedding_dim);
        Ok(Network {
            cfg,
            body,
            pool,
            pool_bn,
            bottleneck,
        })
    }

    /// Builds the network together with a fresh parameter store.
    pub fn with_params<R: Rng>(cfg: NetworkConfig, rng: &mut R) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let net = Network::new(cfg, &mut store, rng)?;
        Ok((net, store))
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    /// Dimension of the pooling-layer output.
    pub fn pooled_dim(&self) -> usize {
        2 * self.pool.channels
    }

    /// Frame-level features `(N, C', T')` entering the pooling layer.
    pub fn trunk<'t>(&self, ctx: &mut Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[1] != self.cfg.n_mels {
            return Err(Error::Config(format!(
                "network expects (N, {}, T) features, got {shape:?}",
                self.cfg.n_mels
            )));
        }
        match &self.body {
            Body::Ecapa(b) => {
                let mut h = match &b.stem {
                    Some(stem) => stem.forward(ctx, x)?,
                    None => x,
                };
                h = b.layer1.forward(ctx, h)?;
                let mut outs = Vec::with_capacity(b.blocks.len());
                for block in &b.blocks {
                    h = block.forward(ctx, h)?;
                    outs.push(h);
                }
                let cat = if outs.len() == 1 { outs[0] } else { ctx.tape.concat(&outs, 1)? };
                b.mfa.forward(ctx, cat)
            }
            Body::Resnet(b) => {
                let (n, f, t) = (shape[0], shape[1], shape[2]);
                let h = b.conv1.forward(ctx, x.reshape(&[n, 1, f, t])?)?;
                let mut h = b.bn1.forward(ctx, h)?.relu();
                for block in &b.blocks {
                    h = block.forward(ctx, h)?;
                }
                let s = h.shape();
                h.reshape(&[n, s[1] * s[2], s[3]])
            }
        }
    }

    pub fn forward_full<'t>(&self, ctx: &mut Ctx<'t, '_>, x: Var<'t>) -> Result<NetworkOutput<'t>> {
        let h = self.trunk(ctx, x)?;
        let pooled = self.pool.forward(ctx, h)?;
        let normed = self.pool_bn.forward(ctx, pooled)?;
        let embedding = self.bottleneck.forward(ctx, normed)?;
        Ok(NetworkOutput { embedding, pooled })
    }

    /// `(N, n_mels, T)` features to `(N, embedding_dim)` embeddings.
    pub fn forward<'t>(&self, ctx: &mut Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(self.forward_full(ctx, x)?.embedding)
    }

    /// Inference on one utterance: the embedding and the pooled statistics.
    pub fn embed_with_pooled(&self, store: &mut ParamStore, features: &FeatureMatrix) -> Result<(SpeakerEmbedding, Vec<f64>)> {
        let v = features.values();
        let x = v.reshape(&[1, v.shape()[0], v.shape()[1]])?;
        let tape = Tape::new();
        let mut ctx = Ctx::new(&tape, store, false);
        let out = self.forward_full(&mut ctx, tape.constant(x))?;
        let emb = SpeakerEmbedding::new(out.embedding.value().data().to_vec())?;
        Ok((emb, out.pooled.value().data().to_vec()))
    }

    pub fn embed(&self, store: &mut ParamStore, features: &FeatureMatrix) -> Result<SpeakerEmbedding> {
        Ok(self.embed_with_pooled(store, features)?.0)
    }

    /// Batched inference on a `(N, n_mels, T)` tensor, one row per item.
    pub fn embed_batch(&self, store: &mut ParamStore, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let mut ctx = Ctx::new(&tape, store, false);
        let y = self.forward(&mut ctx, tape.constant(x.clone()))?;
        Ok((*y.value()).clone())
    }

    /// Positional encodings of every residual block, in block order.
    pub fn positional_encodings(&self) -> Vec<super::ParamId> {
        match &self.body {
            Body::Resnet(b) => b.blocks.iter().filter_map(|blk| blk.pos_enc.as_ref().map(|p| p.p)).collect(),
            Body::Ecapa(_) => Vec::new(),
        }
    }
}

fn build_ecapa<R: Rng>(cfg: &NetworkConfig, store: &mut ParamStore, init: &mut Init<'_, R>) -> Result<(Body, usize)> {
    let c = cfg.ecapa_channels;
    let (stem, c_in) = if cfg.variant == Variant::EcapaCnnTdnn {
        let stem = ConvStem::new(store, init, "stem", cfg.stem, cfg.n_mels)?;
        let out = stem.output_channels();
        (Some(stem), out)
    } else {
        (None, cfg.n_mels)
    };
    let layer1 = TdnnLayer::new(store, init, "layer1", c_in, c, 5, 1);
    let blocks = cfg
        .ecapa_dilations
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            Res2DilatedBlock::new(store, init, &format!("block{i}"), c, cfg.res2_scale, d, Some(cfg.se_bottleneck))
        })
        .collect::<Result<Vec<_>>>()?;
    let mfa = TdnnLayer::new(store, init, "mfa", c * blocks.len(), cfg.mfa_channels, 1, 1);
    Ok((
        Body::Ecapa(EcapaBody {
            stem,
            layer1,
            blocks,
            mfa,
        }),
        cfg.mfa_channels,
    ))
}

fn build_resnet<R: Rng>(cfg: &NetworkConfig, store: &mut ParamStore, init: &mut Init<'_, R>) -> (Body, usize) {
    let c0 = cfg.resnet_widths[0];
    let conv1 = Conv2d::new(store, init, "conv1", 1, c0, (3, 3), (1, 1), false);
    let bn1 = BatchNorm::new(store, "bn1", c0);
    let excite = match cfg.variant {
        Variant::FwseResnetPosenc => Excite::Frequency,
        _ => Excite::Channel,
    };
    let mut blocks = Vec::new();
    let (mut c_in, mut freq) = (c0, cfg.n_mels);
    for (stage, ((&width, &count), &stride)) in cfg
        .resnet_widths
        .iter()
        .zip(&cfg.resnet_blocks)
        .zip(&cfg.resnet_strides)
        .enumerate()
    {
        for i in 0..count {
            let spec = ResBlockSpec {
                c_in,
                c_out: width,
                freq_in: freq,
                stride: if i == 0 { stride } else { 1 },
                excite,
                bottleneck: cfg.se_bottleneck,
                pos_enc: cfg.pos_enc,
            };
            blocks.push(ResBlock::new(store, init, &format!("stage{stage}.block{i}"), spec));
            c_in = width;
            freq = spec.freq_out();
        }
    }
    (Body::Resnet(ResnetBody { conv1, bn1, blocks }), c_in * freq)
}
