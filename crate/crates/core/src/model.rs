//! The hierarchical latent segmentation model.
//!
//! Three subnetworks share one parameter store:
//!
//! * the **posterior** net sees the image and the one-hot mask and predicts
//!   `q(z_l | z_{l+1}, s, x)` for every latent level,
//! * the **prior** net has the same layout but sees only the image and
//!   predicts `p(z_l | z_{l+1}, x)`,
//! * the **likelihood** net decodes the latent pyramid into logits, coarse
//!   to fine, each finer level adding a residual to the upsampled coarser
//!   logits.
//!
//! Latent level `l` (1-based) lives at `2^(1-l)` of the input resolution
//! and has `latent_channels` channels. The likelihood net only ever sees
//! the latents, so nothing reaches the output without being sampled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NormMode, Var};
use crate::labels::{one_hot, LabelMap};
use crate::layers::{Conv, ConvBlock, ConvBnRelu, UpStage};
use crate::params::ParamStore;
use crate::tensor::{level_size, Scalar, Shape, Tensor};

/// Lower bound added to every predicted standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-5;

/// Initial scale of the latent mean and scale heads. Small heads start
/// prior and posterior close together, so the summed KL does not swamp
/// the first updates.
pub const LATENT_HEAD_GAIN: f64 = 0.1;

/// Per-level channel multipliers applied to the base width.
pub const CHANNEL_FACTORS: [usize; 7] = [1, 2, 4, 6, 6, 6, 6];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of latent levels `L`.
    pub latent_levels: usize,
    /// Number of resolution levels `R >= L` in the encoders.
    pub resolution_levels: usize,
    /// Channels `D` of every latent map.
    pub latent_channels: usize,
    /// Number of segmentation classes `K`.
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub input_channels: usize,
    /// Feature channels per resolution level; length `R`.
    pub channels: Vec<usize>,
    /// KL weight per latent level; length `L`.
    pub alpha: Vec<f64>,
    /// Plain encoder-decoder without latents.
    pub deterministic: bool,
    /// How cross-entropy terms enter the training objective.
    #[serde(default)]
    pub ce_reduction: CeReduction,
}

/// Reduction of the cross-entropy terms inside the objective. The KL
/// terms are always summed over latent positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CeReduction {
    /// Summed over pixels: the full-mask log-likelihood, on the same
    /// footing as the summed KL.
    #[default]
    Sum,
    /// Averaged over pixels.
    Mean,
}

/// `base * {1, 2, 4, 6, 6, 6, 6, ...}` truncated to `levels`.
pub fn channel_schedule(base: usize, levels: usize) -> Vec<usize> {
    (0..levels)
        .map(|r| base * CHANNEL_FACTORS.get(r).copied().unwrap_or(6))
        .collect()
}

/// `alpha_l = 2^(l-1)`, compensating the 4x growth in latent size per level.
pub fn default_alpha(latent_levels: usize) -> Vec<f64> {
    (0..latent_levels).map(|l| (1u64 << l) as f64).collect()
}

impl ModelConfig {
    /// Hierarchical model with two latent channels, two classes and a
    /// single-channel input.
    pub fn phiseg(latent_levels: usize, resolution_levels: usize, height: usize, width: usize, base_channels: usize) -> Self {
        Self {
            latent_levels,
            resolution_levels,
            latent_channels: 2,
            classes: 2,
            height,
            width,
            input_channels: 1,
            channels: channel_schedule(base_channels, resolution_levels),
            alpha: default_alpha(latent_levels),
            deterministic: false,
            ce_reduction: CeReduction::Sum,
        }
    }

    /// Deterministic U-Net baseline with the same encoder layout.
    pub fn deterministic(resolution_levels: usize, height: usize, width: usize, base_channels: usize) -> Self {
        Self {
            deterministic: true,
            ..Self::phiseg(1, resolution_levels, height, width, base_channels)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let (l, r) = (self.latent_levels, self.resolution_levels);
        if l < 1 || l > r {
            return bad(format!("need 1 <= latent_levels <= resolution_levels, got L={l}, R={r}"));
        }
        if r > 16 {
            return bad(format!("resolution_levels={r} is unreasonably deep"));
        }
        let f = 1usize << (r - 1);
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(f) || !self.width.is_multiple_of(f) {
            return bad(format!(
                "input {}x{} must be a nonzero multiple of 2^(R-1) = {f}",
                self.height, self.width
            ));
        }
        if self.latent_channels < 1 {
            return bad("latent_channels must be at least 1".into());
        }
        if self.classes < 2 || self.classes > 256 {
            return bad(format!("classes must be in [2, 256], got {}", self.classes));
        }
        if self.input_channels < 1 {
            return bad("input_channels must be at least 1".into());
        }
        if self.channels.len() != r {
            return bad(format!("channel schedule has {} entries, expected R={r}", self.channels.len()));
        }
        if self.channels.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        if self.alpha.len() != l {
            return bad(format!("alpha has {} entries, expected L={l}", self.alpha.len()));
        }
        if self.alpha.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return bad("every alpha must be positive and finite".into());
        }
        Ok(())
    }

    /// Spatial size at latent level `level` (1-based).
    pub fn level_shape(&self, level: usize) -> (usize, usize) {
        level_size(self.height, self.width, level)
    }

    /// Shapes of the latent maps for a batch, index `l - 1`.
    pub fn latent_shapes(&self, batch: usize) -> Vec<Shape> {
        (1..=self.latent_levels)
            .map(|l| {
                let (h, w) = self.level_shape(l);
                Shape::new(batch, self.latent_channels, h, w)
            })
            .collect()
    }

    fn check_image(&self, x: Shape) -> Result<()> {
        if (x.c, x.h, x.w) != (self.input_channels, self.height, self.width) {
            return Err(Error::Shape(format!(
                "image {x} does not match config ({} channels, {}x{})",
                self.input_channels, self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Mean and standard deviation maps of one latent level, `(n, D, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams<T> {
    pub mu: Tensor<T>,
    pub sigma: Tensor<T>,
    /// 1-based latent level.
    pub level: usize,
}

impl<T: Scalar> GaussianParams<T> {
    pub fn new(mu: Tensor<T>, sigma: Tensor<T>, level: usize) -> Result<Self> {
        if mu.shape() != sigma.shape() {
            return Err(Error::Shape(format!("mu {} vs sigma {}", mu.shape(), sigma.shape())));
        }
        if sigma.data().iter().any(|&s| !(s > T::zero())) {
            return Err(Error::InvalidInput("sigma must be strictly positive".into()));
        }
        Ok(Self { mu, sigma, level })
    }
}

/// Sampled latents, index `l - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPyramid<T> {
    pub z: Vec<Tensor<T>>,
}

/// Logits per level, index `l - 1`; `s_hat[0]` is the full-resolution
/// prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitPyramid<T> {
    pub s_hat: Vec<Tensor<T>>,
}

/// `mu + sigma * noise`.
pub fn reparam_sample<T: Scalar>(g: &GaussianParams<T>, noise: &Tensor<T>) -> Result<Tensor<T>> {
    if noise.shape() != g.mu.shape() {
        return Err(Error::Shape(format!(
            "noise {} does not match level-{} parameters {}",
            noise.shape(),
            g.level,
            g.mu.shape()
        )));
    }
    let scaled = g.sigma.zip_map(noise, |s, e| s * e);
    Ok(g.mu.zip_map(&scaled, |m, v| m + v))
}

/// Encoder plus top-down latent heads; used for both prior and posterior.
#[derive(Debug, Clone)]
struct LatentNet {
    encoder: Vec<ConvBlock>,
    /// Decoder stages from level `R-1` back up to level `L-1` (0-based),
    /// indexed by `r - (L - 1)`.
    bottom_up: Vec<UpStage>,
    /// For latent level `l < L`, index `l - 1`: convolution of the
    /// upsampled `z_{l+1}`.
    inject: Vec<ConvBnRelu>,
    merge: Vec<ConvBlock>,
    mu_heads: Vec<Conv>,
    sigma_heads: Vec<Conv>,
}

/// Outputs of a latent net inside a graph, index `l - 1`.
#[derive(Debug, Clone)]
pub struct LatentVars {
    pub mu: Vec<Var>,
    pub sigma: Vec<Var>,
    pub z: Vec<Var>,
}

impl LatentNet {
    fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig, in_channels: usize) -> Self {
        let c = &cfg.channels;
        let (l, r) = (cfg.latent_levels, cfg.resolution_levels);
        let d = cfg.latent_channels;
        let encoder = (0..r)
            .map(|i| {
                let cin = if i == 0 { in_channels } else { c[i - 1] };
                ConvBlock::new(store, rng, &format!("{name}.enc{i}"), cin, c[i])
            })
            .collect();
        let bottom_up = (l - 1..r - 1)
            .map(|i| UpStage::new(store, rng, &format!("{name}.dec{i}"), c[i + 1], c[i], c[i]))
            .collect();
        let inject = (0..l - 1)
            .map(|i| ConvBnRelu::new(store, rng, &format!("{name}.inject{}", i + 1), d, c[i]))
            .collect();
        let merge = (0..l - 1)
            .map(|i| ConvBlock::new(store, rng, &format!("{name}.merge{}", i + 1), 2 * c[i], c[i]))
            .collect();
        let mu_heads = (0..l)
            .map(|i| Conv::head(store, rng, &format!("{name}.mu{}", i + 1), c[i], d, LATENT_HEAD_GAIN))
            .collect();
        let sigma_heads = (0..l)
            .map(|i| Conv::head(store, rng, &format!("{name}.sigma{}", i + 1), c[i], d, LATENT_HEAD_GAIN))
            .collect();
        Self {
            encoder,
            bottom_up,
            inject,
            merge,
            mu_heads,
            sigma_heads,
        }
    }

    /// `noise[l-1]` is used for every level without an `injected[l-1]`.
    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        input: Var,
        latent_levels: usize,
        noise: &[Option<Var>],
        injected: &[Option<Var>],
    ) -> LatentVars {
        let mut feats = Vec::with_capacity(self.encoder.len());
        let mut h = input;
        for (i, block) in self.encoder.iter().enumerate() {
            if i > 0 {
                h = g.avg_pool2(h);
            }
            h = block.forward(g, h);
            feats.push(h);
        }
        let lo = latent_levels - 1;
        let mut top = feats[feats.len() - 1];
        for r in (lo..feats.len() - 1).rev() {
            top = self.bottom_up[r - lo].forward(g, top, feats[r]);
        }

        let l_count = latent_levels;
        let mut mu = vec![None; l_count];
        let mut sigma = vec![None; l_count];
        let mut z: Vec<Option<Var>> = vec![None; l_count];
        for i in (0..l_count).rev() {
            let h = if i + 1 == l_count {
                top
            } else {
                let up = g.upsample(z[i + 1].expect("coarser level sampled first"), 2);
                let inj = self.inject[i].forward(g, up);
                let cat = g.concat(&[feats[i], inj]);
                self.merge[i].forward(g, cat)
            };
            let m = self.mu_heads[i].forward(g, h);
            let raw = self.sigma_heads[i].forward(g, h);
            let sp = g.softplus(raw);
            let s = g.add_scalar(sp, T::lit(SIGMA_FLOOR));
            z[i] = Some(match injected.get(i).copied().flatten() {
                Some(v) => v,
                None => {
                    let eps = noise[i].expect("noise for every non-injected level");
                    let scaled = g.mul(s, eps);
                    g.add(m, scaled)
                }
            });
            mu[i] = Some(m);
            sigma[i] = Some(s);
        }
        LatentVars {
            mu: mu.into_iter().map(Option::unwrap).collect(),
            sigma: sigma.into_iter().map(Option::unwrap).collect(),
            z: z.into_iter().map(Option::unwrap).collect(),
        }
    }
}

#[derive(Debug, Clone)]
struct LikelihoodNet {
    bottom_in: ConvBlock,
    /// Index `l - 1` for `l < L`.
    level_up: Vec<ConvBnRelu>,
    level_block: Vec<ConvBlock>,
    /// Index `l - 1`; the level-`L` head predicts logits, the others
    /// predict residuals.
    heads: Vec<Conv>,
}

impl LikelihoodNet {
    fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let c = &cfg.channels;
        let l = cfg.latent_levels;
        let d = cfg.latent_channels;
        let bottom_in = ConvBlock::new(store, rng, "likelihood.in", d, c[l - 1]);
        let level_up = (0..l - 1)
            .map(|i| ConvBnRelu::new(store, rng, &format!("likelihood.up{}", i + 1), c[i + 1], c[i]))
            .collect();
        let level_block = (0..l - 1)
            .map(|i| ConvBlock::new(store, rng, &format!("likelihood.block{}", i + 1), c[i] + d, c[i]))
            .collect();
        let heads = (0..l)
            .map(|i| Conv::head(store, rng, &format!("likelihood.head{}", i + 1), c[i], cfg.classes, 1.0))
            .collect();
        Self {
            bottom_in,
            level_up,
            level_block,
            heads,
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, z: &[Var]) -> Vec<Var> {
        let l = z.len();
        let lo = l - 1;
        let mut f = self.bottom_in.forward(g, z[lo]);

        let mut logits = vec![None; l];
        logits[lo] = Some(self.heads[lo].forward(g, f));
        for i in (0..lo).rev() {
            let u = g.upsample(f, 2);
            let u = self.level_up[i].forward(g, u);
            let cat = g.concat(&[u, z[i]]);
            f = self.level_block[i].forward(g, cat);
            let residual = self.heads[i].forward(g, f);
            let coarse = g.upsample(logits[i + 1].unwrap(), 2);
            logits[i] = Some(g.add(coarse, residual));
        }
        logits.into_iter().map(Option::unwrap).collect()
    }
}

/// Plain U-Net: encoder, decoder with feature skips, logit head.
#[derive(Debug, Clone)]
struct UNet {
    encoder: Vec<ConvBlock>,
    decoder: Vec<UpStage>,
    head: Conv,
}

impl UNet {
    fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let c = &cfg.channels;
        let r = cfg.resolution_levels;
        let encoder = (0..r)
            .map(|i| {
                let cin = if i == 0 { cfg.input_channels } else { c[i - 1] };
                ConvBlock::new(store, rng, &format!("unet.enc{i}"), cin, c[i])
            })
            .collect();
        let decoder = (0..r - 1)
            .map(|i| UpStage::new(store, rng, &format!("unet.dec{i}"), c[i + 1], c[i], c[i]))
            .collect();
        let head = Conv::head(store, rng, "unet.head", c[0], cfg.classes, 1.0);
        Self { encoder, decoder, head }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let mut feats = Vec::with_capacity(self.encoder.len());
        let mut h = x;
        for (i, block) in self.encoder.iter().enumerate() {
            if i > 0 {
                h = g.avg_pool2(h);
            }
            h = block.forward(g, h);
            feats.push(h);
        }
        let mut f = *feats.last().unwrap();
        for k in (0..feats.len() - 1).rev() {
            f = self.decoder[k].forward(g, f, feats[k]);
        }
        self.head.forward(g, f)
    }
}

// One value per model, so the size gap between variants does not matter.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone)]
enum Architecture {
    Hierarchical {
        posterior: LatentNet,
        prior: LatentNet,
        likelihood: LikelihoodNet,
    },
    Deterministic(UNet),
}

/// Parameters of a complete model together with the layer layout that
/// indexes into them.
#[derive(Debug, Clone)]
pub struct NetworkWeights<T> {
    config: ModelConfig,
    store: ParamStore<T>,
    arch: Architecture,
}

/// Builds and initialises a model; the same `(config, seed)` always gives
/// the same parameters.
pub fn build_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<NetworkWeights<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let arch = if config.deterministic {
        Architecture::Deterministic(UNet::new(&mut store, &mut rng, config))
    } else {
        let posterior = LatentNet::new(
            &mut store,
            &mut rng,
            "posterior",
            config,
            config.input_channels + config.classes,
        );
        let prior = LatentNet::new(&mut store, &mut rng, "prior", config, config.input_channels);
        let likelihood = LikelihoodNet::new(&mut store, &mut rng, config);
        Architecture::Hierarchical {
            posterior,
            prior,
            likelihood,
        }
    };
    Ok(NetworkWeights {
        config: config.clone(),
        store,
        arch,
    })
}

impl<T: Scalar> NetworkWeights<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self.arch, Architecture::Deterministic(_))
    }

    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    pub fn checksum(&self) -> String {
        self.store.checksum()
    }

    pub fn cast<U: Scalar>(&self) -> NetworkWeights<U> {
        NetworkWeights {
            config: self.config.clone(),
            store: self.store.cast(),
            arch: self.arch.clone(),
        }
    }

    /// Replaces the parameter store, which must have the same layout.
    pub(crate) fn with_store(mut self, store: ParamStore<T>) -> Result<Self> {
        if store.shapes() != self.store.shapes() {
            return Err(Error::DimensionMismatch("parameter layout differs from the model config".into()));
        }
        self.store = store;
        Ok(self)
    }

    /// Parameter-name prefixes of each subnetwork.
    pub fn subnetwork_prefixes(&self) -> &'static [&'static str] {
        match self.arch {
            Architecture::Hierarchical { .. } => &["posterior.", "prior.", "likelihood."],
            Architecture::Deterministic(_) => &["unet."],
        }
    }

    /// Parameters of the residual head at latent level `level < L`.
    pub fn residual_head(&self, level: usize) -> Option<&Conv> {
        match &self.arch {
            Architecture::Hierarchical { likelihood, .. } if level >= 1 && level < self.config.latent_levels => {
                likelihood.heads.get(level - 1)
            }
            _ => None,
        }
    }

    fn hierarchical(&self) -> Result<(&LatentNet, &LatentNet, &LikelihoodNet)> {
        match &self.arch {
            Architecture::Hierarchical {
                posterior,
                prior,
                likelihood,
            } => Ok((posterior, prior, likelihood)),
            Architecture::Deterministic(_) => Err(Error::InvalidInput(
                "the deterministic baseline has no latent networks".into(),
            )),
        }
    }

    fn noise_vars(&self, g: &mut Graph<T>, noise: &[Tensor<T>], batch: usize, required: &[bool]) -> Result<Vec<Option<Var>>> {
        let shapes = self.config.latent_shapes(batch);
        let mut out = Vec::with_capacity(shapes.len());
        for (i, shape) in shapes.iter().enumerate() {
            if !required[i] {
                out.push(None);
                continue;
            }
            let n = noise
                .get(i)
                .ok_or_else(|| Error::Shape(format!("missing noise for latent level {}", i + 1)))?;
            if n.shape() != *shape {
                return Err(Error::Shape(format!(
                    "noise for level {} is {}, expected {shape}",
                    i + 1,
                    n.shape()
                )));
            }
            out.push(Some(g.input(n.clone())));
        }
        Ok(out)
    }

    /// Posterior pass inside `g`. `mask_onehot` is `(n, K, h, w)`.
    pub fn posterior_graph(&self, g: &mut Graph<T>, x: Var, mask_onehot: Var, noise: &[Tensor<T>]) -> Result<LatentVars> {
        let (posterior, _, _) = self.hierarchical()?;
        let xs = g.shape(x);
        self.config.check_image(xs)?;
        let ms = g.shape(mask_onehot);
        if ms != xs.with_channels(self.config.classes) {
            return Err(Error::Shape(format!("mask {ms} does not match image {xs}")));
        }
        let l = self.config.latent_levels;
        let noise = self.noise_vars(g, noise, xs.n, &vec![true; l])?;
        let input = g.concat(&[x, mask_onehot]);
        Ok(posterior.forward(g, input, l, &noise, &[]))
    }

    /// Prior pass inside `g`; `injected[l-1]`, when present, replaces the
    /// sampled latent at that level.
    pub fn prior_graph(&self, g: &mut Graph<T>, x: Var, noise: &[Tensor<T>], injected: &[Option<Var>]) -> Result<LatentVars> {
        let (_, prior, _) = self.hierarchical()?;
        let xs = g.shape(x);
        self.config.check_image(xs)?;
        let l = self.config.latent_levels;
        if injected.len() > l {
            return Err(Error::Shape(format!("{} injected levels for L={l}", injected.len())));
        }
        let shapes = self.config.latent_shapes(xs.n);
        for (i, inj) in injected.iter().enumerate() {
            if let Some(v) = inj {
                if g.shape(*v) != shapes[i] {
                    return Err(Error::Shape(format!(
                        "injected latent for level {} is {}, expected {}",
                        i + 1,
                        g.shape(*v),
                        shapes[i]
                    )));
                }
            }
        }
        let required: Vec<bool> = (0..l).map(|i| injected.get(i).copied().flatten().is_none()).collect();
        let noise = self.noise_vars(g, noise, xs.n, &required)?;
        Ok(prior.forward(g, x, l, &noise, injected))
    }

    /// Likelihood pass inside `g`; returns logits per level, index `l - 1`.
    pub fn likelihood_graph(&self, g: &mut Graph<T>, z: &[Var]) -> Result<Vec<Var>> {
        let (_, _, likelihood) = self.hierarchical()?;
        let l = self.config.latent_levels;
        if z.len() != l {
            return Err(Error::Shape(format!("latent pyramid has {} levels, expected {l}", z.len())));
        }
        let n = g.shape(z[0]).n;
        for (i, (v, s)) in z.iter().zip(self.config.latent_shapes(n)).enumerate() {
            if g.shape(*v) != s {
                return Err(Error::Shape(format!("latent level {} is {}, expected {s}", i + 1, g.shape(*v))));
            }
        }
        Ok(likelihood.forward(g, z))
    }

    /// Deterministic baseline pass inside `g`.
    pub fn deterministic_graph(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        match &self.arch {
            Architecture::Deterministic(unet) => {
                self.config.check_image(g.shape(x))?;
                Ok(unet.forward(g, x))
            }
            Architecture::Hierarchical { .. } => Err(Error::InvalidInput("model is not the deterministic baseline".into())),
        }
    }
}

fn collect_params<T: Scalar>(g: &Graph<T>, vars: &LatentVars) -> Result<(Vec<GaussianParams<T>>, LatentPyramid<T>)> {
    let params = vars
        .mu
        .iter()
        .zip(&vars.sigma)
        .enumerate()
        .map(|(i, (&m, &s))| GaussianParams::new(g.value(m).clone(), g.value(s).clone(), i + 1))
        .collect::<Result<Vec<_>>>()?;
    let z = vars.z.iter().map(|&v| g.value(v).clone()).collect();
    Ok((params, LatentPyramid { z }))
}

/// Approximate posterior `q(z | s, x)` with frozen normalization.
pub fn posterior_forward<T: Scalar>(
    w: &NetworkWeights<T>,
    x: &Tensor<T>,
    s: &[LabelMap],
    noise: &[Tensor<T>],
) -> Result<(Vec<GaussianParams<T>>, LatentPyramid<T>)> {
    if s.len() != x.shape().n {
        return Err(Error::Shape(format!("{} masks for a batch of {}", s.len(), x.shape().n)));
    }
    let mut g = Graph::new(&w.store, NormMode::Frozen);
    let xv = g.input(x.clone());
    let mask = g.input(one_hot(s, w.config.classes)?);
    let vars = w.posterior_graph(&mut g, xv, mask, noise)?;
    collect_params(&g, &vars)
}

/// Prior `p(z | x)` with frozen normalization. `injected[l-1]`, when
/// present, is used as `z_l` instead of a fresh sample.
pub fn prior_forward<T: Scalar>(
    w: &NetworkWeights<T>,
    x: &Tensor<T>,
    noise: &[Tensor<T>],
    injected: &[Option<Tensor<T>>],
) -> Result<(Vec<GaussianParams<T>>, LatentPyramid<T>)> {
    let mut g = Graph::new(&w.store, NormMode::Frozen);
    let xv = g.input(x.clone());
    let inj: Vec<Option<Var>> = injected.iter().map(|t| t.as_ref().map(|t| g.input(t.clone()))).collect();
    let vars = w.prior_graph(&mut g, xv, noise, &inj)?;
    collect_params(&g, &vars)
}

/// Decodes a latent pyramid with frozen normalization.
pub fn likelihood_forward<T: Scalar>(w: &NetworkWeights<T>, z: &LatentPyramid<T>) -> Result<LogitPyramid<T>> {
    if z.z.len() != w.config.latent_levels {
        return Err(Error::Shape(format!(
            "latent pyramid has {} levels, expected {}",
            z.z.len(),
            w.config.latent_levels
        )));
    }
    let mut g = Graph::new(&w.store, NormMode::Frozen);
    let vars: Vec<Var> = z.z.iter().map(|t| g.input(t.clone())).collect();
    let logits = w.likelihood_graph(&mut g, &vars)?;
    Ok(LogitPyramid {
        s_hat: logits.iter().map(|&v| g.value(v).clone()).collect(),
    })
}

/// Deterministic baseline logits as a single-level pyramid.
pub fn deterministic_forward<T: Scalar>(w: &NetworkWeights<T>, x: &Tensor<T>) -> Result<LogitPyramid<T>> {
    let mut g = Graph::new(&w.store, NormMode::Frozen);
    let xv = g.input(x.clone());
    let out = w.deterministic_graph(&mut g, xv)?;
    Ok(LogitPyramid {
        s_hat: vec![g.value(out).clone()],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_doubles_per_level() {
        assert_eq!(default_alpha(5), vec![1.0, 2.0, 4.0, 8.0, 16.0]);
    }

    #[test]
    fn schedule_truncates_and_extends() {
        assert_eq!(channel_schedule(8, 4), vec![8, 16, 32, 48]);
        assert_eq!(channel_schedule(2, 8), vec![2, 4, 8, 12, 12, 12, 12, 12]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let ok = ModelConfig::phiseg(2, 3, 16, 16, 2);
        assert!(ok.validate().is_ok());
        let mut c = ok.clone();
        c.latent_levels = 4;
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.height = 18;
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.alpha = vec![1.0, 0.0];
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.classes = 1;
        assert!(c.validate().is_err());
        let mut c = ok;
        c.latent_channels = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn reparam_rejects_mismatched_noise() {
        let sh = Shape::new(1, 2, 2, 2);
        let g = GaussianParams::new(Tensor::<f64>::zeros(sh), Tensor::full(sh, 1.0), 1).unwrap();
        assert!(reparam_sample(&g, &Tensor::zeros(Shape::new(1, 1, 2, 2))).is_err());
    }

    #[test]
    fn gaussian_params_require_positive_sigma() {
        let sh = Shape::new(1, 1, 1, 2);
        assert!(GaussianParams::new(Tensor::<f64>::zeros(sh), Tensor::from_vec(sh, vec![1.0, 0.0]), 1).is_err());
    }

    #[test]
    fn prior_and_posterior_share_layout_but_not_values() {
        let w: NetworkWeights<f64> = build_model(&ModelConfig::phiseg(2, 3, 8, 8, 2), 1).unwrap();
        let shapes = w.store().shapes();
        let strip = |prefix: &str| -> Vec<_> {
            shapes
                .iter()
                .filter_map(|(n, s, t)| n.strip_prefix(prefix).map(|rest| (rest.to_string(), *s, *t)))
                .filter(|(n, _, _)| !n.starts_with("enc0.0.conv"))
                .collect()
        };
        assert_eq!(strip("posterior."), strip("prior."));
        let post = w.store().find("posterior.enc1.0.conv.weight").unwrap();
        let prior = w.store().find("prior.enc1.0.conv.weight").unwrap();
        assert_ne!(post, prior);
        assert_ne!(w.store().get(post), w.store().get(prior));
    }
}
