//! The plug-in adapter: at every insertion site a bottleneck of a 1×1
//! down-projection, a 3×3 grid convolution and a 1×1 up-projection, with GELU
//! after the first two stages and a scalar multiplier on the output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, InsertionSite};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

pub const VIT_B16_SQUEEZE_RATIO: f64 = 96.0;
pub const TOY_SQUEEZE_RATIO: f64 = 8.0;

/// Tensor names within one site block, in storage order.
pub const SITE_PARAMS: [&str; 6] = ["down.w", "down.b", "mid.w", "mid.b", "up.w", "up.b"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleGeometry {
    pub embed_dim: usize,
    pub squeeze_dim: usize,
    pub num_sites: usize,
}

impl ModuleGeometry {
    pub fn new(embed_dim: usize, squeeze_dim: usize, num_sites: usize) -> Result<Self> {
        let g = ModuleGeometry {
            embed_dim,
            squeeze_dim,
            num_sites,
        };
        g.validate()?;
        Ok(g)
    }

    /// `h = max(1, round(d / ratio))`.
    pub fn squeeze_dim_for(embed_dim: usize, squeeze_ratio: f64) -> usize {
        ((embed_dim as f64 / squeeze_ratio).round() as usize).max(1)
    }

    pub fn for_backbone(config: &BackboneConfig, squeeze_ratio: f64) -> Result<Self> {
        if !(squeeze_ratio > 0.0) {
            return Err(Error::InvalidGeometry(format!("squeeze ratio {squeeze_ratio} must be positive")));
        }
        Self::new(
            config.embed_dim,
            Self::squeeze_dim_for(config.embed_dim, squeeze_ratio),
            config.num_sites(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.squeeze_dim < 1 || self.squeeze_dim >= self.embed_dim {
            return Err(Error::InvalidGeometry(format!(
                "squeeze_dim {} must lie in 1..{}",
                self.squeeze_dim, self.embed_dim
            )));
        }
        if self.num_sites == 0 {
            return Err(Error::InvalidGeometry("a module needs at least one site".into()));
        }
        Ok(())
    }

    pub fn site_param_shapes(&self) -> [Vec<usize>; 6] {
        let (d, h) = (self.embed_dim, self.squeeze_dim);
        [vec![d, h], vec![h], vec![3, 3, h, h], vec![h], vec![h, d], vec![d]]
    }

    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        (0..self.num_sites)
            .flat_map(|s| {
                let site = InsertionSite::from_index(s);
                SITE_PARAMS
                    .iter()
                    .zip(self.site_param_shapes())
                    .map(move |(n, shape)| (format!("{site}.{n}"), shape))
            })
            .collect()
    }

    /// Closed-form count; the output multiplier is not counted.
    pub fn param_count(&self, include_bias: bool) -> usize {
        let (d, h) = (self.embed_dim, self.squeeze_dim);
        let weights = d * h + 9 * h * h + h * d;
        let biases = if include_bias { h + h + d } else { 0 };
        self.num_sites * (weights + biases)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModuleKind {
    Standard,
    Zero,
}

impl ModuleKind {
    pub fn as_u8(self) -> u8 {
        match self {
            ModuleKind::Standard => 0,
            ModuleKind::Zero => 1,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(ModuleKind::Standard),
            1 => Ok(ModuleKind::Zero),
            other => Err(Error::Malformed(format!("unknown module kind {other}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModuleKind::Standard => "standard",
            ModuleKind::Zero => "zero",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleMeta {
    pub id: String,
    pub task_name: String,
    pub dataset_name: String,
    /// Unix seconds.
    pub created_at: i64,
    pub param_count: u64,
    pub kind: ModuleKind,
    pub midstream_metric: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViMModule {
    pub geometry: ModuleGeometry,
    pub meta: ModuleMeta,
    pub scale: f32,
    params: Vec<Tensor<f32>>,
}

impl ViMModule {
    /// STANDARD draws the down and mid weights from N(0, 1/fan_in) and zeroes
    /// everything else, so a fresh module outputs exact zeros. ZERO is all zeros.
    pub fn init(geometry: ModuleGeometry, seed: u64, kind: ModuleKind) -> Result<Self> {
        geometry.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h) = (geometry.embed_dim, geometry.squeeze_dim);
        let mut params = Vec::with_capacity(geometry.num_sites * SITE_PARAMS.len());
        for _ in 0..geometry.num_sites {
            for (name, shape) in SITE_PARAMS.iter().zip(geometry.site_param_shapes()) {
                let fan_in = match *name {
                    "down.w" => Some(d),
                    "mid.w" => Some(9 * h),
                    _ => None,
                };
                let t = match (kind, fan_in) {
                    (ModuleKind::Standard, Some(fan_in)) => {
                        let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
                        Tensor::from_fn(shape, |_| normal.sample(&mut rng) as f32)
                    }
                    _ => Tensor::zeros(shape),
                };
                params.push(t);
            }
        }
        let id = match kind {
            ModuleKind::Zero => "zero".to_string(),
            ModuleKind::Standard => format!("module-{seed}"),
        };
        let meta = ModuleMeta {
            id,
            task_name: String::new(),
            dataset_name: String::new(),
            created_at: 0,
            param_count: geometry.param_count(true) as u64,
            kind,
            midstream_metric: None,
        };
        Ok(ViMModule {
            geometry,
            meta,
            scale: 1.0,
            params,
        })
    }

    /// Builds a module from tensors in canonical order.
    pub fn from_params(geometry: ModuleGeometry, meta: ModuleMeta, scale: f32, params: Vec<Tensor<f32>>) -> Result<Self> {
        geometry.validate()?;
        let specs = geometry.param_specs();
        if specs.len() != params.len() {
            return Err(Error::InvalidGeometry(format!(
                "expected {} module tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for ((name, shape), t) in specs.iter().zip(&params) {
            if t.shape() != shape.as_slice() {
                return Err(Error::InvalidGeometry(format!("{name}: expected {shape:?}, got {:?}", t.shape())));
            }
        }
        Ok(ViMModule {
            geometry,
            meta,
            scale,
            params,
        })
    }

    pub fn with_meta(mut self, id: &str, task_name: &str, dataset_name: &str) -> Self {
        self.meta.id = id.to_string();
        self.meta.task_name = task_name.to_string();
        self.meta.dataset_name = dataset_name.to_string();
        self
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.params
    }

    pub fn named_params(&self) -> impl Iterator<Item = (String, &Tensor<f32>)> {
        self.geometry
            .param_specs()
            .into_iter()
            .map(|(n, _)| n)
            .zip(self.params.iter())
    }

    pub fn site_params(&self, site: usize) -> &[Tensor<f32>] {
        &self.params[site * SITE_PARAMS.len()..(site + 1) * SITE_PARAMS.len()]
    }

    pub fn param_count(&self, include_bias: bool) -> usize {
        self.geometry.param_count(include_bias)
    }

    /// Counts tensor elements directly, for checking against the closed form.
    pub fn measured_param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// SHA-256 over the multiplier and parameter bytes; metadata is ignored.
    pub fn content_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.scale.to_le_bytes());
        for t in &self.params {
            for &e in t.shape() {
                h.update((e as u32).to_le_bytes());
            }
            let mut buf = Vec::with_capacity(t.numel() * 4);
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }

    /// Records every site's parameters on `tape`.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, trainable: bool) -> ModuleVars<T> {
        let vars: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.cast(), trainable)).collect();
        ModuleVars {
            sites: vars.chunks(SITE_PARAMS.len()).map(SiteVars::from_slice).collect(),
            scale: T::from_f32(self.scale),
        }
    }

    /// Delta for one site outside any training loop.
    pub fn forward(&self, site: InsertionSite, tokens: &Tensor<f32>, grid: (usize, usize)) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let x = tape.constant(tokens.clone());
        let vars = self.bind_site(&mut tape, site)?;
        let out = site_forward(&mut tape, &vars, self.scale, x, grid)?;
        Ok(tape.value(out).clone())
    }

    fn bind_site(&self, tape: &mut Tape<f32>, site: InsertionSite) -> Result<SiteVars> {
        let idx = site.index();
        if idx >= self.geometry.num_sites {
            return Err(Error::InvalidGeometry(format!("{site} is outside a module with {} sites", self.geometry.num_sites)));
        }
        let vars: Vec<Var> = self.site_params(idx).iter().map(|p| tape.constant(p.clone())).collect();
        Ok(SiteVars::from_slice(&vars))
    }
}

/// Tape handles for one site block.
#[derive(Clone, Copy, Debug)]
pub struct SiteVars {
    pub down_w: Var,
    pub down_b: Var,
    pub mid_w: Var,
    pub mid_b: Var,
    pub up_w: Var,
    pub up_b: Var,
}

impl SiteVars {
    pub fn from_slice(v: &[Var]) -> Self {
        SiteVars {
            down_w: v[0],
            down_b: v[1],
            mid_w: v[2],
            mid_b: v[3],
            up_w: v[4],
            up_b: v[5],
        }
    }

    pub fn to_array(self) -> [Var; 6] {
        [self.down_w, self.down_b, self.mid_w, self.mid_b, self.up_w, self.up_b]
    }
}

#[derive(Clone, Debug)]
pub struct ModuleVars<T> {
    pub sites: Vec<SiteVars>,
    pub scale: T,
}

impl<T: Real> ModuleVars<T> {
    pub fn all(&self) -> Vec<Var> {
        self.sites.iter().flat_map(|s| s.to_array()).collect()
    }

    /// The module's scaled delta at `site`.
    pub fn delta(&self, tape: &mut Tape<T>, site: InsertionSite, tokens: Var, grid: (usize, usize)) -> Result<Var> {
        let vars = self
            .sites
            .get(site.index())
            .ok_or_else(|| Error::InvalidGeometry(format!("{site} is outside a module with {} sites", self.sites.len())))?;
        site_forward(tape, vars, self.scale, tokens, grid)
    }
}

/// down → GELU → 3×3 → GELU → up → ·scale on `[B, 1+H·W, d]` tokens. Token 0
/// is the class token and sees only the center tap of the grid convolution.
pub fn site_forward<T: Real>(tape: &mut Tape<T>, v: &SiteVars, scale: T, tokens: Var, grid: (usize, usize)) -> Result<Var> {
    let shape = tape.shape(tokens).to_vec();
    let expected = 1 + grid.0 * grid.1;
    if shape.len() != 3 || shape[1] != expected {
        return Err(Error::InvalidGeometry(format!(
            "tokens {shape:?} do not match a {}x{} grid plus class token",
            grid.0, grid.1
        )));
    }
    let x = tape.linear(tokens, v.down_w, v.down_b)?;
    let x = tape.gelu(x);
    let x = tape.conv3x3(x, v.mid_w, v.mid_b, grid, true)?;
    let x = tape.gelu(x);
    let x = tape.linear(x, v.up_w, v.up_b)?;
    Ok(if scale == T::one() { x } else { tape.scale(x, scale) })
}
