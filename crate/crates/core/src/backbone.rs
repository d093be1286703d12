//! Frozen pre-normalization vision transformer with adapter insertion sites.
//!
//! Each block is
//!
//! ```text
//! x ← x + attn(ln1(x)) + δ_attn(ln1(x))
//! x ← x + mlp(ln2(x))  + δ_mlp(ln2(x))
//! ```
//!
//! where the deltas come from an optional [`DeltaProvider`]. With no provider
//! (or all-zero deltas) this is the plain transformer forward.

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::TensorBundle;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

pub const IN_CHANNELS: usize = 3;
pub const DIGEST_ALGORITHM: &str = "sha256";

const PARAMS_PER_LAYER: usize = 12;
const HEADER_PARAMS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
}

impl BackboneConfig {
    /// 32px images, 4px patches, d=64, four layers.
    pub fn toy() -> Self {
        BackboneConfig {
            image_size: 32,
            patch_size: 4,
            embed_dim: 64,
            num_layers: 4,
            num_heads: 4,
            mlp_ratio: 4.0,
        }
    }

    /// ViT-B/16 geometry, for structural checks.
    pub fn vit_b16() -> Self {
        BackboneConfig {
            image_size: 224,
            patch_size: 16,
            embed_dim: 768,
            num_layers: 12,
            num_heads: 12,
            mlp_ratio: 4.0,
        }
    }

    /// 16px images, d=32, two layers: the geometry used for sweeps on one CPU core.
    pub fn tiny() -> Self {
        BackboneConfig {
            image_size: 16,
            patch_size: 4,
            embed_dim: 32,
            num_layers: 2,
            num_heads: 2,
            mlp_ratio: 2.0,
        }
    }

    /// d=16 geometry for finite-difference checks.
    pub fn micro() -> Self {
        BackboneConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 16,
            num_layers: 2,
            num_heads: 2,
            mlp_ratio: 2.0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "vit-b16" => Ok(Self::vit_b16()),
            "tiny" => Ok(Self::tiny()),
            "micro" => Ok(Self::micro()),
            other => Err(Error::InvalidConfig(format!("unknown backbone preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidGeometry(msg));
        if self.image_size == 0 || self.patch_size == 0 || self.embed_dim == 0 {
            return bad(format!("zero extent in {self:?}"));
        }
        if self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.num_layers == 0 {
            return bad("num_layers must be at least 1".into());
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return bad(format!("mlp_ratio {} gives an empty hidden layer", self.mlp_ratio));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.image_size / self.patch_size;
        (g, g)
    }

    pub fn num_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    /// Patch tokens plus the class token.
    pub fn num_tokens(&self) -> usize {
        1 + self.num_patches()
    }

    pub fn patch_dim(&self) -> usize {
        IN_CHANNELS * self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn num_sites(&self) -> usize {
        2 * self.num_layers
    }

    pub fn sites(&self) -> Vec<InsertionSite> {
        InsertionSite::all(self.num_layers)
    }

    /// Canonical parameter names and shapes, in storage order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let hid = self.mlp_hidden();
        let mut specs = vec![
            ("patch_embed.w".to_string(), vec![self.patch_dim(), d]),
            ("patch_embed.b".to_string(), vec![d]),
            ("cls_token".to_string(), vec![d]),
            ("pos_embed".to_string(), vec![self.num_tokens(), d]),
        ];
        for l in 0..self.num_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            specs.extend([
                (p("ln1.g"), vec![d]),
                (p("ln1.b"), vec![d]),
                (p("attn.qkv.w"), vec![d, 3 * d]),
                (p("attn.qkv.b"), vec![3 * d]),
                (p("attn.proj.w"), vec![d, d]),
                (p("attn.proj.b"), vec![d]),
                (p("ln2.g"), vec![d]),
                (p("ln2.b"), vec![d]),
                (p("mlp.fc1.w"), vec![d, hid]),
                (p("mlp.fc1.b"), vec![hid]),
                (p("mlp.fc2.w"), vec![hid, d]),
                (p("mlp.fc2.b"), vec![d]),
            ]);
        }
        specs.push(("ln_f.g".into(), vec![d]));
        specs.push(("ln_f.b".into(), vec![d]));
        specs
    }

    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Branch {
    Attn,
    Mlp,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Attn => "attn",
            Branch::Mlp => "mlp",
        }
    }
}

/// Where a delta enters the residual stream: beside the attention or the
/// feed-forward branch of one layer. Ordered by layer, then attention first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InsertionSite {
    pub layer: usize,
    pub branch: Branch,
}

impl InsertionSite {
    pub fn new(layer: usize, branch: Branch) -> Self {
        InsertionSite { layer, branch }
    }

    pub fn all(num_layers: usize) -> Vec<InsertionSite> {
        (0..num_layers)
            .flat_map(|l| [Branch::Attn, Branch::Mlp].map(|b| InsertionSite::new(l, b)))
            .collect()
    }

    /// Position in the total order of sites.
    pub fn index(self) -> usize {
        2 * self.layer + matches!(self.branch, Branch::Mlp) as usize
    }

    pub fn from_index(index: usize) -> Self {
        let branch = if index % 2 == 0 { Branch::Attn } else { Branch::Mlp };
        InsertionSite::new(index / 2, branch)
    }
}

impl fmt::Display for InsertionSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer{}.{}", self.layer, self.branch.as_str())
    }
}

/// Supplies the additive delta for each insertion site during a forward pass.
/// `input` is the normalized block input `[B, T, d]`; returning `None` adds nothing.
pub trait DeltaProvider<T: Real> {
    fn delta(&mut self, tape: &mut Tape<T>, site: InsertionSite, input: Var, grid: (usize, usize)) -> Result<Option<Var>>;
}

/// The plain transformer forward.
pub struct NoDelta;

impl<T: Real> DeltaProvider<T> for NoDelta {
    fn delta(&mut self, _: &mut Tape<T>, _: InsertionSite, _: Var, _: (usize, usize)) -> Result<Option<Var>> {
        Ok(None)
    }
}

impl<T: Real, F> DeltaProvider<T> for F
where
    F: FnMut(&mut Tape<T>, InsertionSite, Var, (usize, usize)) -> Result<Option<Var>>,
{
    fn delta(&mut self, tape: &mut Tape<T>, site: InsertionSite, input: Var, grid: (usize, usize)) -> Result<Option<Var>> {
        self(tape, site, input, grid)
    }
}

/// Backbone parameters bound to a tape, in canonical order.
#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub params: Vec<Var>,
}

impl BackboneVars {
    fn layer(&self, l: usize, k: usize) -> Var {
        self.params[HEADER_PARAMS + l * PARAMS_PER_LAYER + k]
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    params: Vec<Tensor<f32>>,
    fingerprint: String,
}

impl Backbone {
    /// Deterministic random initialization. Linear maps are drawn from
    /// N(0, 1/fan_in), embeddings from N(0, 0.02²); norms start at identity.
    pub fn build(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .param_specs()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let std = if name.ends_with(".g") {
                    return Tensor::full(shape, 1.0f32);
                } else if name.ends_with(".b") {
                    return Tensor::zeros(shape);
                } else if name == "cls_token" || name == "pos_embed" {
                    0.02
                } else {
                    1.0 / (shape[0] as f64).sqrt()
                };
                let normal = Normal::new(0.0, std).expect("positive std");
                let data = (0..n).map(|_| normal.sample(&mut rng) as f32).collect();
                Tensor::new(shape, data).expect("shape from spec")
            })
            .collect();
        Self::from_params(config, params)
    }

    /// Freezes a full parameter list (canonical order) and fingerprints it.
    pub fn from_params(config: BackboneConfig, params: Vec<Tensor<f32>>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != params.len() {
            return Err(Error::InvalidGeometry(format!(
                "expected {} backbone tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for ((name, shape), t) in specs.iter().zip(&params) {
            if t.shape() != shape.as_slice() {
                return Err(Error::InvalidGeometry(format!(
                    "{name}: expected {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        let fingerprint = digest(&config, &params);
        Ok(Backbone {
            config,
            params,
            fingerprint,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub fn named_params(&self) -> impl Iterator<Item = (String, &Tensor<f32>)> {
        self.config
            .param_specs()
            .into_iter()
            .map(|(n, _)| n)
            .zip(self.params.iter())
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Digest recorded when the backbone was frozen.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Digest of the parameter bytes as they are now.
    pub fn compute_fingerprint(&self) -> String {
        digest(&self.config, &self.params)
    }

    pub fn verify_fingerprint(&self) -> Result<()> {
        let now = self.compute_fingerprint();
        if now != self.fingerprint {
            return Err(Error::FrozenViolation {
                before: self.fingerprint.clone(),
                after: now,
            });
        }
        Ok(())
    }

    pub fn sites(&self) -> Vec<InsertionSite> {
        self.config.sites()
    }

    /// Records the parameters on `tape`. Only warm-up pre-training binds them
    /// as trainable.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, trainable: bool) -> BackboneVars {
        BackboneVars {
            params: self.params.iter().map(|p| tape.leaf(p.cast(), trainable)).collect(),
        }
    }

    /// `[B, 3, S, S]` images → `[B, P, 3·p·p]` patch rows, channel-major
    /// within a patch.
    pub fn patchify<T: Real>(&self, images: &Tensor<f32>) -> Result<Tensor<T>> {
        let c = &self.config;
        let (s, p) = (c.image_size, c.patch_size);
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != IN_CHANNELS || shape[2] != s || shape[3] != s {
            return Err(Error::shape("patchify", shape, &[0, IN_CHANNELS, s, s]));
        }
        let batch = shape[0];
        let g = s / p;
        let pd = c.patch_dim();
        let src = images.data();
        let mut out = Vec::with_capacity(batch * g * g * pd);
        for b in 0..batch {
            for gy in 0..g {
                for gx in 0..g {
                    for ch in 0..IN_CHANNELS {
                        for py in 0..p {
                            let row = ((b * IN_CHANNELS + ch) * s + gy * p + py) * s + gx * p;
                            out.extend(src[row..row + p].iter().map(|&v| T::from_f32(v)));
                        }
                    }
                }
            }
        }
        Tensor::new(vec![batch, g * g, pd], out)
    }

    /// Token features `[B, T, d]` after the final normalization.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &BackboneVars,
        images: &Tensor<f32>,
        deltas: &mut dyn DeltaProvider<T>,
    ) -> Result<Var> {
        let grid = self.config.grid();
        let patches = tape.constant(self.patchify(images)?);
        let p = &vars.params;
        let x = tape.linear(patches, p[0], p[1])?;
        let x = tape.prepend_token(x, p[2])?;
        let mut x = tape.add_broadcast(x, p[3])?;
        for l in 0..self.config.num_layers {
            let h = tape.layer_norm(x, vars.layer(l, 0), vars.layer(l, 1))?;
            let qkv = tape.linear(h, vars.layer(l, 2), vars.layer(l, 3))?;
            let a = tape.attention(qkv, self.config.num_heads)?;
            let a = tape.linear(a, vars.layer(l, 4), vars.layer(l, 5))?;
            x = tape.add(x, a)?;
            x = self.apply_delta(tape, deltas, InsertionSite::new(l, Branch::Attn), x, h, grid)?;

            let h = tape.layer_norm(x, vars.layer(l, 6), vars.layer(l, 7))?;
            let m = tape.linear(h, vars.layer(l, 8), vars.layer(l, 9))?;
            let m = tape.gelu(m);
            let m = tape.linear(m, vars.layer(l, 10), vars.layer(l, 11))?;
            x = tape.add(x, m)?;
            x = self.apply_delta(tape, deltas, InsertionSite::new(l, Branch::Mlp), x, h, grid)?;
        }
        let n = p.len();
        tape.layer_norm(x, p[n - 2], p[n - 1])
    }

    fn apply_delta<T: Real>(
        &self,
        tape: &mut Tape<T>,
        deltas: &mut dyn DeltaProvider<T>,
        site: InsertionSite,
        x: Var,
        normed: Var,
        grid: (usize, usize),
    ) -> Result<Var> {
        match deltas.delta(tape, site, normed, grid)? {
            None => Ok(x),
            Some(delta) => {
                if tape.shape(delta) != tape.shape(x) {
                    return Err(Error::DeltaShape {
                        site: site.to_string(),
                        got: tape.shape(delta).to_vec(),
                        expected: tape.shape(x).to_vec(),
                    });
                }
                tape.add(x, delta)
            }
        }
    }

    /// One-shot inference forward without gradients.
    pub fn features(&self, images: &Tensor<f32>, deltas: &mut dyn DeltaProvider<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &vars, images, deltas)?;
        Ok(tape.value(out).clone())
    }

    pub fn to_bundle(&self) -> TensorBundle {
        let c = &self.config;
        let mut bundle = TensorBundle::new()
            .with_meta("kind", "backbone")
            .with_meta("image_size", c.image_size)
            .with_meta("patch_size", c.patch_size)
            .with_meta("embed_dim", c.embed_dim)
            .with_meta("num_layers", c.num_layers)
            .with_meta("num_heads", c.num_heads)
            .with_meta("mlp_ratio", c.mlp_ratio)
            .with_meta("digest_algorithm", DIGEST_ALGORITHM)
            .with_meta("fingerprint", &self.fingerprint);
        for (name, t) in self.named_params() {
            bundle.push(name, t.clone());
        }
        bundle
    }

    pub fn from_bundle(bundle: &TensorBundle) -> Result<Self> {
        let num = |k: &str| -> Result<usize> {
            bundle
                .meta(k)?
                .parse()
                .map_err(|_| Error::Malformed(format!("metadata {k} is not an integer")))
        };
        if bundle.meta("kind")? != "backbone" {
            return Err(Error::Malformed("bundle is not a backbone".into()));
        }
        let config = BackboneConfig {
            image_size: num("image_size")?,
            patch_size: num("patch_size")?,
            embed_dim: num("embed_dim")?,
            num_layers: num("num_layers")?,
            num_heads: num("num_heads")?,
            mlp_ratio: bundle
                .meta("mlp_ratio")?
                .parse()
                .map_err(|_| Error::Malformed("mlp_ratio".into()))?,
        };
        let algo = bundle.meta("digest_algorithm")?;
        if algo != DIGEST_ALGORITHM {
            return Err(Error::Malformed(format!("unsupported digest algorithm {algo}")));
        }
        let params = bundle.tensors.iter().map(|(_, t)| t.clone()).collect();
        let backbone = Backbone::from_params(config, params)?;
        let stored = bundle.meta("fingerprint")?;
        if stored != backbone.fingerprint {
            return Err(Error::FrozenViolation {
                before: stored.to_string(),
                after: backbone.fingerprint.clone(),
            });
        }
        Ok(backbone)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_bundle().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bundle(&TensorBundle::load(path)?)
    }
}

/// SHA-256 over the geometry and every parameter (name, extents, little-endian
/// payload) in canonical order.
fn digest(config: &BackboneConfig, params: &[Tensor<f32>]) -> String {
    let mut h = Sha256::new();
    for v in [
        config.image_size,
        config.patch_size,
        config.embed_dim,
        config.num_layers,
        config.num_heads,
    ] {
        h.update((v as u64).to_le_bytes());
    }
    h.update(config.mlp_ratio.to_le_bytes());
    for ((name, _), t) in config.param_specs().iter().zip(params) {
        h.update((name.len() as u32).to_le_bytes());
        h.update(name.as_bytes());
        for &e in t.shape() {
            h.update((e as u32).to_le_bytes());
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        h.update(&buf);
    }
    format!("{DIGEST_ALGORITHM}:{}", hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(config: &BackboneConfig, batch: usize, seed: u64) -> Tensor<f32> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = config.image_size;
        Tensor::from_fn(vec![batch, 3, s, s], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn toy_preset_shapes_and_determinism() {
        let cfg = BackboneConfig::toy();
        let a = Backbone::build(cfg.clone(), 7).unwrap();
        let b = Backbone::build(cfg.clone(), 7).unwrap();
        assert_eq!(cfg.num_tokens(), 65);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint(), a.compute_fingerprint());
        let out = a.features(&images(&cfg, 2, 0), &mut NoDelta).unwrap();
        assert_eq!(out.shape(), &[2, 65, 64]);
        let again = b.features(&images(&cfg, 2, 0), &mut NoDelta).unwrap();
        assert!(out.bitwise_eq(&again));
    }

    #[test]
    fn different_seeds_give_different_digests() {
        let a = Backbone::build(BackboneConfig::tiny(), 1).unwrap();
        let b = Backbone::build(BackboneConfig::tiny(), 2).unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn vit_b16_geometry_has_24_sites() {
        let cfg = BackboneConfig::vit_b16();
        cfg.validate().unwrap();
        assert_eq!(cfg.sites().len(), 24);
        assert_eq!(cfg.num_tokens(), 197);
    }

    #[test]
    fn indivisible_image_is_rejected() {
        let cfg = BackboneConfig {
            image_size: 30,
            ..BackboneConfig::toy()
        };
        let err = Backbone::build(cfg, 0).unwrap_err();
        assert!(matches!(err, Error::InvalidGeometry(_)), "{err}");
    }

    #[test]
    fn sites_are_totally_ordered() {
        let sites = InsertionSite::all(3);
        assert_eq!(sites.len(), 6);
        assert!(sites.windows(2).all(|w| w[0] < w[1]));
        for (i, s) in sites.iter().enumerate() {
            assert_eq!(s.index(), i);
            assert_eq!(InsertionSite::from_index(i), *s);
        }
    }

    #[test]
    fn zero_deltas_are_bitwise_identity() {
        let cfg = BackboneConfig::tiny();
        let bb = Backbone::build(cfg.clone(), 3).unwrap();
        let imgs = images(&cfg, 3, 1);
        let plain = bb.features(&imgs, &mut NoDelta).unwrap();
        let mut zeros = |tape: &mut Tape<f32>, _: InsertionSite, input: Var, _: (usize, usize)| {
            let z = Tensor::zeros(tape.shape(input).to_vec());
            Ok(Some(tape.constant(z)))
        };
        let with = bb.features(&imgs, &mut zeros).unwrap();
        assert!(plain.bitwise_eq(&with));
    }

    #[test]
    fn bad_delta_shape_names_the_site() {
        let cfg = BackboneConfig::tiny();
        let bb = Backbone::build(cfg.clone(), 3).unwrap();
        let mut bad = |tape: &mut Tape<f32>, site: InsertionSite, _: Var, _: (usize, usize)| {
            if site.branch == Branch::Mlp {
                Ok(Some(tape.constant(Tensor::zeros(vec![1, 2, 3]))))
            } else {
                Ok(None)
            }
        };
        let err = bb.features(&images(&cfg, 1, 0), &mut bad).unwrap_err();
        assert!(err.to_string().contains("layer0.mlp"), "{err}");
    }

    #[test]
    fn bundle_round_trip_keeps_fingerprint() {
        let bb = Backbone::build(BackboneConfig::micro(), 9).unwrap();
        let back = Backbone::from_bundle(&TensorBundle::from_bytes(&bb.to_bundle().to_bytes()).unwrap()).unwrap();
        assert_eq!(back.fingerprint(), bb.fingerprint());
        assert_eq!(back.params(), bb.params());
    }
}
