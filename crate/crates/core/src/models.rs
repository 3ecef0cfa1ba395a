//! The two segmentation networks: a single-encoder residual UNet
//! ([`Arch::Basic`]) and the dual-encoder DFUNet ([`Arch::DualFlow`]) whose
//! prior stream is fused into the primary stream at every encoder stage.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::blocks::{
    CrossAttention, CrossAttentionSpec, DownPool, ResidualStage, StageSpec, SupervisionHead, UpSample,
    ATTENTION_REDUCTION,
};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamKind, ParamStore};
use crate::tensor::{softmax, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    Basic,
    DualFlow,
}

impl Arch {
    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Basic => "basic",
            Arch::DualFlow => "dualflow",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "basic" => Ok(Arch::Basic),
            "dualflow" => Ok(Arch::DualFlow),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

/// Channels of the prior stream in a dual-flow input (registered pre-RT image and its mask).
pub const PRIOR_CHANNELS: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    /// 1 (a single image) or 3 (mid-RT, registered pre-RT, registered pre-RT mask).
    pub in_channels: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    /// Down-pool strides between consecutive stages; one entry fewer than stages.
    pub pool_schedule: Vec<[usize; 3]>,
    pub deep_supervision_levels: usize,
}

impl ModelConfig {
    /// Six stages, xy pooled five times and z three times.
    pub fn full_scale(arch: Arch, in_channels: usize) -> Self {
        ModelConfig {
            arch,
            in_channels,
            base_channels: 32,
            max_channels: 320,
            pool_schedule: vec![[1, 2, 2], [2, 2, 2], [2, 2, 2], [2, 2, 2], [1, 2, 2]],
            deep_supervision_levels: 4,
        }
    }

    /// Three stages of 4, 8 and 16 channels.
    pub fn toy(arch: Arch, in_channels: usize) -> Self {
        ModelConfig {
            arch,
            in_channels,
            base_channels: 4,
            max_channels: 320,
            pool_schedule: vec![[1, 2, 2], [2, 2, 2]],
            deep_supervision_levels: 3,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.pool_schedule.len() + 1
    }

    pub fn stage_channels(&self) -> Vec<usize> {
        (0..self.num_stages())
            .map(|s| (self.base_channels << s).min(self.max_channels))
            .collect()
    }

    /// Encoder stage specs; the last stage is the bottleneck and does not pool.
    pub fn stages(&self) -> Vec<StageSpec> {
        let ch = self.stage_channels();
        (0..self.num_stages())
            .map(|s| StageSpec {
                channels_in: if s == 0 { self.encoder_input_channels() } else { ch[s] },
                channels_out: ch[s],
                pool: self.pool_schedule.get(s).copied().unwrap_or([1; 3]),
            })
            .collect()
    }

    fn encoder_input_channels(&self) -> usize {
        match self.arch {
            Arch::Basic => self.in_channels,
            Arch::DualFlow => 1,
        }
    }

    /// Cumulative pool stride reaching stage `s`.
    pub fn cumulative_stride(&self, s: usize) -> [usize; 3] {
        let mut acc = [1; 3];
        for p in &self.pool_schedule[..s] {
            for a in 0..3 {
                acc[a] *= p[a];
            }
        }
        acc
    }

    /// Every spatial input dimension must be a multiple of this.
    pub fn divisor(&self) -> [usize; 3] {
        self.cumulative_stride(self.pool_schedule.len())
    }

    /// Number of stride-2 poolings per axis (z, y, x).
    pub fn pool_counts(&self) -> [usize; 3] {
        let mut n = [0; 3];
        for p in &self.pool_schedule {
            for a in 0..3 {
                n[a] += usize::from(p[a] == 2);
            }
        }
        n
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 1 && self.in_channels != 3 {
            return Err(Error::Config(format!(
                "in_channels must be 1 or 3, got {}",
                self.in_channels
            )));
        }
        if self.arch == Arch::DualFlow && self.in_channels != 1 + PRIOR_CHANNELS {
            return Err(Error::Config(
                "the dual-flow network takes 3 input channels (mid-RT + prior image + prior mask)".into(),
            ));
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            return Err(Error::Config("channel widths must be positive and base <= max".into()));
        }
        if self.pool_schedule.is_empty() {
            return Err(Error::Config("at least two stages are required".into()));
        }
        for spec in self.stages() {
            spec.validate()?;
        }
        if self.deep_supervision_levels == 0 || self.deep_supervision_levels > self.num_stages() {
            return Err(Error::Config(format!(
                "deep_supervision_levels must be in 1..={}, got {}",
                self.num_stages(),
                self.deep_supervision_levels
            )));
        }
        if self.arch == Arch::DualFlow {
            for c in self.stage_channels() {
                CrossAttentionSpec::new(c).validate()?;
            }
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let pools = self
            .pool_schedule
            .iter()
            .map(|p| format!("{},{},{}", p[0], p[1], p[2]))
            .collect::<Vec<_>>()
            .join(";");
        vec![
            ("model.arch".into(), self.arch.as_str().into()),
            ("model.in_channels".into(), self.in_channels.to_string()),
            ("model.base_channels".into(), self.base_channels.to_string()),
            ("model.max_channels".into(), self.max_channels.to_string()),
            ("model.pools".into(), pools),
            ("model.deep_supervision_levels".into(), self.deep_supervision_levels.to_string()),
        ]
    }

    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            pairs
                .get(k)
                .ok_or_else(|| Error::Config(format!("missing key {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Config(format!("{k} is not an integer")))
        };
        let cfg = ModelConfig {
            arch: Arch::parse(get("model.arch")?)?,
            in_channels: num("model.in_channels")?,
            base_channels: num("model.base_channels")?,
            max_channels: num("model.max_channels")?,
            pool_schedule: parse_pools(get("model.pools")?)?,
            deep_supervision_levels: num("model.deep_supervision_levels")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parse `"1,2,2;2,2,2"` into a pool schedule.
pub fn parse_pools(s: &str) -> Result<Vec<[usize; 3]>> {
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let v: Vec<usize> = p
                .split(',')
                .map(|x| x.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Config(format!("bad pool stride {p:?}")))?;
            <[usize; 3]>::try_from(v).map_err(|_| Error::Config(format!("pool {p:?} needs three strides")))
        })
        .collect()
}

#[derive(Clone, Debug)]
struct Encoder {
    stages: Vec<ResidualStage>,
    pools: Vec<DownPool>,
}

impl Encoder {
    fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, in_channels: usize) -> Self {
        let ch = cfg.stage_channels();
        let mut stages = Vec::new();
        let mut pools = Vec::new();
        for (s, spec) in cfg.stages().into_iter().enumerate() {
            let spec = StageSpec {
                channels_in: if s == 0 { in_channels } else { spec.channels_in },
                ..spec
            };
            stages.push(ResidualStage::new(store, &format!("{name}.stage{s}"), spec));
            if s + 1 < ch.len() {
                pools.push(DownPool::new(store, &format!("{name}.pool{s}"), ch[s], ch[s + 1], spec.pool));
            }
        }
        Encoder { stages, pools }
    }
}

#[derive(Clone, Debug)]
struct Decoder {
    ups: Vec<UpSample>,
    heads: Vec<SupervisionHead>,
}

impl Decoder {
    fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Self {
        let ch = cfg.stage_channels();
        let ups = (0..cfg.pool_schedule.len())
            .map(|s| UpSample::new(store, &format!("dec.up{s}"), ch[s + 1], ch[s], cfg.pool_schedule[s]))
            .collect();
        let heads = (0..cfg.deep_supervision_levels)
            .map(|d| SupervisionHead::new(store, &format!("dec.head{d}"), ch[d]))
            .collect();
        Decoder { ups, heads }
    }

    /// `skips[s]` are the encoder features of stage `s`; the last is the bottleneck.
    fn forward(&self, g: &mut Graph, p: &Binding, skips: &[Var]) -> Result<Vec<Var>> {
        let levels = skips.len();
        let mut features = vec![skips[levels - 1]; levels];
        let mut h = skips[levels - 1];
        for s in (0..levels - 1).rev() {
            h = self.ups[s].forward(g, p, h, skips[s])?;
            features[s] = h;
        }
        self.heads
            .iter()
            .enumerate()
            .map(|(d, head)| head.forward(g, p, features[d]))
            .collect()
    }
}

#[derive(Clone, Debug)]
enum Network {
    Basic {
        encoder: Encoder,
        decoder: Decoder,
    },
    DualFlow {
        primary: Encoder,
        prior: Encoder,
        fusion: Vec<CrossAttention>,
        decoder: Decoder,
    },
}

/// A realized network with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    net: Network,
}

/// Build the single-encoder network.
pub fn build_basic(config: &ModelConfig) -> Result<Model> {
    if config.arch != Arch::Basic {
        return Err(Error::Config("build_basic needs arch = basic".into()));
    }
    Model::new(config.clone())
}

/// Build the dual-encoder network.
pub fn build_dualflow(config: &ModelConfig) -> Result<Model> {
    if config.arch != Arch::DualFlow {
        return Err(Error::Config("build_dualflow needs arch = dualflow".into()));
    }
    Model::new(config.clone())
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let net = match config.arch {
            Arch::Basic => Network::Basic {
                encoder: Encoder::new(&mut params, "enc", &config, config.in_channels),
                decoder: Decoder::new(&mut params, &config),
            },
            Arch::DualFlow => {
                let primary = Encoder::new(&mut params, "enc_mid", &config, 1);
                let prior = Encoder::new(&mut params, "enc_pre", &config, PRIOR_CHANNELS);
                let fusion = config
                    .stage_channels()
                    .iter()
                    .enumerate()
                    .map(|(s, &c)| {
                        CrossAttention::new(
                            &mut params,
                            &format!("fuse{s}"),
                            CrossAttentionSpec {
                                channels: c,
                                reduction: ATTENTION_REDUCTION,
                            },
                        )
                    })
                    .collect();
                Network::DualFlow {
                    primary,
                    prior,
                    fusion,
                    decoder: Decoder::new(&mut params, &config),
                }
            }
        };
        Ok(Model { config, params, net })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let shape = g.shape(x);
        if shape.len() != 5 || shape[1] != self.config.in_channels {
            return Err(Error::shape(format!(
                "model expects [N, {}, D, H, W] input, got {shape:?}",
                self.config.in_channels
            )));
        }
        let div = self.config.divisor();
        if (0..3).any(|a| shape[2 + a] % div[a] != 0) {
            return Err(Error::shape(format!(
                "spatial dims {:?} must be multiples of {div:?}",
                &shape[2..]
            )));
        }
        Ok(())
    }

    /// Logits per supervision level, `d = 0` at full resolution.
    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Vec<Var>> {
        self.check_input(g, x)?;
        match &self.net {
            Network::Basic { encoder, decoder } => {
                let skips = run_encoder(g, p, encoder, x, |_, _, h| Ok(h))?;
                decoder.forward(g, p, &skips)
            }
            Network::DualFlow {
                primary,
                prior,
                fusion,
                decoder,
            } => {
                let mid = g.select_channels(x, 0, 1)?;
                let pre = g.select_channels(x, 1, PRIOR_CHANNELS)?;
                let pre_features = run_encoder(g, p, prior, pre, |_, _, h| Ok(h))?;
                let skips = run_encoder(g, p, primary, mid, |g, s, h| {
                    fusion[s].forward(g, p, h, pre_features[s])
                })?;
                decoder.forward(g, p, &skips)
            }
        }
    }

    /// Dual-flow forward through the primary encoder and decoder only, with
    /// every fusion block bypassed. For the basic network this is `forward`.
    pub fn forward_primary_only(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Vec<Var>> {
        self.check_input(g, x)?;
        match &self.net {
            Network::Basic { .. } => self.forward(g, p, x),
            Network::DualFlow { primary, decoder, .. } => {
                let mid = g.select_channels(x, 0, 1)?;
                let skips = run_encoder(g, p, primary, mid, |_, _, h| Ok(h))?;
                decoder.forward(g, p, &skips)
            }
        }
    }

    /// Class probabilities `[N, 3, D, H, W]` at full resolution, without gradients.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(input.clone());
        let logits = self.forward(&mut g, &p, x)?;
        let top = g.value(logits[0]);
        Tensor::new(top.shape(), softmax(top.shape(), top.data()))
    }

    /// Copy parameters with matching names and shapes from `other`; returns how many were copied.
    pub fn load_matching(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for id in self.params.ids().collect::<Vec<_>>() {
            let name = self.params.name(id).to_string();
            if let Some(src) = other.lookup(&name) {
                let t = other.get(src).clone();
                if self.params.set(id, t).is_ok() {
                    copied += 1;
                }
            }
        }
        copied
    }
}

fn run_encoder(
    g: &mut Graph,
    p: &Binding,
    enc: &Encoder,
    x: Var,
    mut fuse: impl FnMut(&mut Graph, usize, Var) -> Result<Var>,
) -> Result<Vec<Var>> {
    let mut skips = Vec::with_capacity(enc.stages.len());
    let mut h = x;
    for (s, stage) in enc.stages.iter().enumerate() {
        h = stage.forward(g, p, h)?;
        h = fuse(g, s, h)?;
        skips.push(h);
        if let Some(pool) = enc.pools.get(s) {
            h = pool.forward(g, p, h)?;
        }
    }
    Ok(skips)
}

/// Fan-in scaled normal weights (variance 2 / fan_in), zero biases, unit norm
/// scales and zero norm shifts. Deterministic per seed.
pub fn init_parameters(model: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = model.params_mut();
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        let value = match store.kind(id) {
            ParamKind::ConvWeight { fan_in } => {
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                Tensor::from_fn(&shape, |_| normal.sample(&mut rng))
            }
            ParamKind::Bias | ParamKind::NormShift => Tensor::zeros(&shape),
            ParamKind::NormScale => Tensor::full(&shape, 1.0),
        };
        store.set(id, value).expect("same shape");
    }
}

/// Convenience: build and initialize.
pub fn build_initialized(config: &ModelConfig, seed: u64) -> Result<Model> {
    let mut m = Model::new(config.clone())?;
    init_parameters(&mut m, seed);
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_pooling_counts() {
        let cfg = ModelConfig::full_scale(Arch::Basic, 1);
        cfg.validate().unwrap();
        assert_eq!(cfg.num_stages(), 6);
        assert_eq!(cfg.pool_counts(), [3, 5, 5]);
        assert_eq!(cfg.stage_channels(), vec![32, 64, 128, 256, 320, 320]);
        // 56 x 224 x 160 patches are compatible
        let div = cfg.divisor();
        assert_eq!(div, [8, 32, 32]);
        assert!([56, 224, 160].iter().zip(div).all(|(d, k)| d % k == 0));
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::toy(Arch::Basic, 2);
        assert!(cfg.validate().is_err());
        cfg.in_channels = 1;
        cfg.deep_supervision_levels = 4;
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::toy(Arch::DualFlow, 1).validate().is_err());
        let mut cfg = ModelConfig::toy(Arch::Basic, 1);
        cfg.pool_schedule[0] = [1, 3, 2];
        assert!(cfg.validate().is_err());
        assert!(build_basic(&ModelConfig::toy(Arch::DualFlow, 3)).is_err());
    }

    #[test]
    fn config_pairs_round_trip() {
        let cfg = ModelConfig::full_scale(Arch::DualFlow, 3);
        let map: BTreeMap<_, _> = cfg.to_pairs().into_iter().collect();
        assert_eq!(ModelConfig::from_pairs(&map).unwrap(), cfg);
    }

    #[test]
    fn forward_rejects_bad_input() {
        let m = build_initialized(&ModelConfig::toy(Arch::Basic, 1), 0).unwrap();
        assert!(m.predict(&Tensor::zeros(&[1, 1, 8, 30, 32])).is_err());
        assert!(m.predict(&Tensor::zeros(&[1, 3, 8, 32, 32])).is_err());
    }
}
