//! Combining a zoo into one delta per site.
//!
//! Raw weights come from a [`WeightProvider`], are masked to the `top_k`
//! largest entries and normalized with a softmax over the survivors. The
//! ensemble strategy forwards every active module and mixes the outputs; the
//! reparameterized strategy mixes the parameters and forwards once.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{Branch, DeltaProvider, InsertionSite};
use crate::container::TensorBundle;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::vim_module::{site_forward, ModuleKind, ModuleMeta, ModuleVars, SiteVars, ViMModule, SITE_PARAMS};
use crate::zoo::ModuleZoo;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TopK {
    All,
    K(usize),
}

impl TopK {
    pub fn resolve(self, m: usize) -> usize {
        match self {
            TopK::All => m,
            TopK::K(k) => k.clamp(1, m),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    Ensemble,
    Reparam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProviderMode {
    Vector,
    LinearProj,
    MlpProj,
}

/// One weight source per insertion site, or one shared by all sites.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightSharing {
    PerSite,
    Global,
}

macro_rules! string_enum {
    ($ty:ty { $($variant:path => $text:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let s = match *self { $( $variant => $text, )+ };
                f.write_str(s)
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $( $text => Ok($variant), )+
                    other => Err(Error::InvalidConfig(format!(
                        "unknown {} {other:?}", stringify!($ty)
                    ))),
                }
            }
        }
    };
}

string_enum!(Strategy { Strategy::Ensemble => "ensemble", Strategy::Reparam => "reparam" });
string_enum!(ProviderMode {
    ProviderMode::Vector => "vector",
    ProviderMode::LinearProj => "linear",
    ProviderMode::MlpProj => "mlp",
});
string_enum!(WeightSharing { WeightSharing::PerSite => "per-site", WeightSharing::Global => "global" });

impl fmt::Display for TopK {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopK::All => f.write_str("all"),
            TopK::K(k) => write!(f, "{k}"),
        }
    }
}

impl FromStr for TopK {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(TopK::All);
        }
        match s.parse::<usize>() {
            Ok(k) if k >= 1 => Ok(TopK::K(k)),
            _ => Err(Error::InvalidConfig(format!("top_k must be 'all' or a positive integer, got {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregationConfig {
    pub strategy: Strategy,
    pub top_k: TopK,
    pub mode: ProviderMode,
    pub sharing: WeightSharing,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        AggregationConfig {
            strategy: Strategy::Ensemble,
            top_k: TopK::All,
            mode: ProviderMode::Vector,
            sharing: WeightSharing::PerSite,
        }
    }
}

/// Indices of the `k` largest values, ties going to the lower index,
/// returned in ascending index order.
pub fn select_top_k<T: PartialOrd + Copy>(raw: &[T], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..raw.len()).collect();
    // stable sort keeps lower indices first among equal values
    order.sort_by(|&a, &b| raw[b].partial_cmp(&raw[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut active: Vec<usize> = order.into_iter().take(k).collect();
    active.sort_unstable();
    active
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedWeights {
    pub alpha: Vec<f64>,
    pub active: Vec<usize>,
}

impl NormalizedWeights {
    pub fn one_hot(m: usize, i: usize) -> Self {
        let mut alpha = vec![0.0; m];
        alpha[i] = 1.0;
        NormalizedWeights { alpha, active: vec![i] }
    }

    /// Explicit weights; the active set is the nonzero entries.
    pub fn from_alpha(alpha: Vec<f64>) -> Self {
        let active = (0..alpha.len()).filter(|&i| alpha[i] != 0.0).collect();
        NormalizedWeights { alpha, active }
    }

    fn as_tensor(&self) -> Tensor<f32> {
        let m = self.alpha.len();
        Tensor::from_fn(vec![1, m], |i| self.alpha[i] as f32)
    }
}

/// Softmax over the `top_k` largest raw entries; the rest are exactly zero.
pub fn normalize_weights(raw: &[f64], top_k: TopK) -> NormalizedWeights {
    let active = select_top_k(raw, top_k.resolve(raw.len()));
    let max = active.iter().map(|&i| raw[i]).fold(f64::NEG_INFINITY, f64::max);
    let mut alpha = vec![0.0; raw.len()];
    let mut sum = 0.0;
    for &i in &active {
        alpha[i] = (raw[i] - max).exp();
        sum += alpha[i];
    }
    for &i in &active {
        alpha[i] /= sum;
    }
    NormalizedWeights { alpha, active }
}

/// Source of raw (pre-softmax) aggregation weights.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightProvider {
    pub mode: ProviderMode,
    pub sharing: WeightSharing,
    pub num_modules: usize,
    pub embed_dim: usize,
    pub num_sites: usize,
    params: Vec<Tensor<f32>>,
}

impl WeightProvider {
    /// Every mode starts at all-zero raw weights: vectors and output layers are
    /// zero, the hidden layer of the MLP map is drawn from N(0, 1/d).
    pub fn new(mode: ProviderMode, sharing: WeightSharing, num_modules: usize, embed_dim: usize, num_sites: usize, seed: u64) -> Result<Self> {
        if num_modules == 0 {
            return Err(Error::InvalidConfig("weight provider needs at least one module".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut provider = WeightProvider {
            mode,
            sharing,
            num_modules,
            embed_dim,
            num_sites,
            params: Vec::new(),
        };
        for _ in 0..provider.groups() {
            for (name, shape) in provider.group_specs() {
                let t = if name == "fc1.w" {
                    let normal = Normal::new(0.0, 1.0 / (embed_dim as f64).sqrt()).expect("positive std");
                    Tensor::from_fn(shape, |_| normal.sample(&mut rng) as f32)
                } else {
                    Tensor::zeros(shape)
                };
                provider.params.push(t);
            }
        }
        Ok(provider)
    }

    pub fn groups(&self) -> usize {
        match self.sharing {
            WeightSharing::PerSite => self.num_sites,
            WeightSharing::Global => 1,
        }
    }

    fn hidden_dim(&self) -> usize {
        (self.embed_dim / 4).max(1)
    }

    fn group_specs(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (d, m, h) = (self.embed_dim, self.num_modules, self.hidden_dim());
        match self.mode {
            ProviderMode::Vector => vec![("raw", vec![1, m])],
            ProviderMode::LinearProj => vec![("proj.w", vec![d, m]), ("proj.b", vec![m])],
            ProviderMode::MlpProj => vec![
                ("fc1.w", vec![d, h]),
                ("fc1.b", vec![h]),
                ("fc2.w", vec![h, m]),
                ("fc2.b", vec![m]),
            ],
        }
    }

    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        (0..self.groups())
            .flat_map(|g| {
                self.group_specs()
                    .into_iter()
                    .map(move |(n, s)| (format!("group{g}.{n}"), s))
            })
            .collect()
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    fn group_of(&self, site: InsertionSite) -> usize {
        match self.sharing {
            WeightSharing::PerSite => site.index(),
            WeightSharing::Global => 0,
        }
    }

    pub fn needs_summary(&self) -> bool {
        self.mode != ProviderMode::Vector
    }

    /// Raw weights for `site`. Projection modes read `summary`, the mean of
    /// the site's normalized input tokens.
    pub fn provide(&self, site: InsertionSite, summary: Option<&[f32]>) -> Result<Vec<f64>> {
        let mut tape = Tape::<f32>::new();
        let vars = self.bind(&mut tape, false);
        let summary = match (self.needs_summary(), summary) {
            (false, _) => None,
            (true, None) => return Err(Error::MissingSummary),
            (true, Some(s)) => Some(tape.constant(Tensor::new(vec![1, s.len()], s.to_vec())?)),
        };
        let raw = vars.raw(&mut tape, self, site, summary)?;
        Ok(tape.value(raw).data().iter().map(|&v| v as f64).collect())
    }

    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, trainable: bool) -> ProviderVars {
        let per = self.group_specs().len();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.cast(), trainable)).collect();
        ProviderVars {
            groups: vars.chunks(per).map(<[Var]>::to_vec).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProviderVars {
    pub groups: Vec<Vec<Var>>,
}

impl ProviderVars {
    pub fn all(&self) -> Vec<Var> {
        self.groups.iter().flatten().copied().collect()
    }

    /// `[1, M]` for vectors, `[B, M]` for projections of a `[B, d]` summary.
    pub fn raw<T: Real>(&self, tape: &mut Tape<T>, provider: &WeightProvider, site: InsertionSite, summary: Option<Var>) -> Result<Var> {
        let g = &self.groups[provider.group_of(site)];
        match provider.mode {
            ProviderMode::Vector => Ok(g[0]),
            ProviderMode::LinearProj => {
                let s = summary.ok_or(Error::MissingSummary)?;
                tape.linear(s, g[0], g[1])
            }
            ProviderMode::MlpProj => {
                let s = summary.ok_or(Error::MissingSummary)?;
                let h = tape.linear(s, g[0], g[1])?;
                let h = tape.gelu(h);
                tape.linear(h, g[2], g[3])
            }
        }
    }
}

/// Tape-level normalization: row-wise top-k mask then masked softmax. Returns
/// the weights and each row's active set.
pub fn normalize_on_tape<T: Real>(tape: &mut Tape<T>, raw: Var, top_k: TopK) -> Result<(Var, Vec<Vec<usize>>)> {
    let m = *tape.shape(raw).last().expect("rank ≥ 1");
    let k = top_k.resolve(m);
    let rows: Vec<Vec<usize>> = tape
        .value(raw)
        .data()
        .chunks(m)
        .map(|row| select_top_k(row, k))
        .collect();
    let mut mask = vec![false; rows.len() * m];
    for (r, active) in rows.iter().enumerate() {
        for &i in active {
            mask[r * m + i] = true;
        }
    }
    Ok((tape.masked_softmax(raw, mask)?, rows))
}

/// Every module's parameters bound on a tape.
pub fn bind_zoo<T: Real>(zoo: &ModuleZoo, tape: &mut Tape<T>, trainable: bool) -> Vec<ModuleVars<T>> {
    zoo.modules().iter().map(|m| m.bind(tape, trainable)).collect()
}

fn union(rows: &[Vec<usize>]) -> Vec<usize> {
    let mut all: Vec<usize> = rows.iter().flatten().copied().collect();
    all.sort_unstable();
    all.dedup();
    all
}

/// `Σ_{i active} α_i · delta_i`, summed in ascending module order. With
/// per-sample weights every module active for some sample is evaluated once.
pub fn ensemble_site<T: Real>(
    tape: &mut Tape<T>,
    modules: &[ModuleVars<T>],
    alpha: Var,
    rows: &[Vec<usize>],
    site: InsertionSite,
    input: Var,
    grid: (usize, usize),
    calls: &mut usize,
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for i in union(rows) {
        let delta = modules[i].delta(tape, site, input, grid)?;
        *calls += 1;
        let term = tape.scale_by_weight(delta, alpha, i)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    acc.ok_or_else(|| Error::InvalidConfig("no active module".into()))
}

/// Parameters `Σ α_i θ_i` for one row of weights, with each module's output
/// multiplier folded into its up-projection.
pub fn merge_site<T: Real>(tape: &mut Tape<T>, modules: &[ModuleVars<T>], alpha: Var, row: usize, active: &[usize], site: InsertionSite) -> Result<SiteVars> {
    let s = site.index();
    let mut merged = Vec::with_capacity(SITE_PARAMS.len());
    for p in 0..SITE_PARAMS.len() {
        let items: Vec<Var> = active
            .iter()
            .map(|&i| {
                let v = modules[i].sites[s].to_array()[p];
                let scale = modules[i].scale;
                if p >= 4 && scale != T::one() {
                    tape.scale(v, scale)
                } else {
                    v
                }
            })
            .collect();
        merged.push(tape.weighted_sum(&items, alpha, row, active)?);
    }
    Ok(SiteVars::from_slice(&merged))
}

/// One merged module per weight row; per-sample rows forward each sample
/// through its own merged module.
pub fn reparam_site<T: Real>(
    tape: &mut Tape<T>,
    modules: &[ModuleVars<T>],
    alpha: Var,
    rows: &[Vec<usize>],
    site: InsertionSite,
    input: Var,
    grid: (usize, usize),
    calls: &mut usize,
) -> Result<Var> {
    if rows.len() == 1 {
        let merged = merge_site(tape, modules, alpha, 0, &rows[0], site)?;
        *calls += 1;
        return site_forward(tape, &merged, T::one(), input, grid);
    }
    let mut outs = Vec::with_capacity(rows.len());
    for (b, active) in rows.iter().enumerate() {
        let merged = merge_site(tape, modules, alpha, b, active, site)?;
        let x = tape.slice_batch(input, b)?;
        *calls += 1;
        outs.push(site_forward(tape, &merged, T::one(), x, grid)?);
    }
    tape.concat_batch(&outs)
}

/// Delta provider that aggregates a bound zoo with live (differentiable)
/// weights. Used for downstream training and for dynamic evaluation.
pub struct LiveAggregation<'a, T: Real> {
    pub config: AggregationConfig,
    pub provider: &'a WeightProvider,
    pub provider_vars: &'a ProviderVars,
    pub modules: &'a [ModuleVars<T>],
    /// Module forwards performed so far.
    pub calls: usize,
    /// Active set per site and weight row from the most recent forward.
    pub last_active: Vec<(InsertionSite, Vec<Vec<usize>>)>,
}

impl<'a, T: Real> LiveAggregation<'a, T> {
    pub fn new(config: AggregationConfig, provider: &'a WeightProvider, provider_vars: &'a ProviderVars, modules: &'a [ModuleVars<T>]) -> Self {
        LiveAggregation {
            config,
            provider,
            provider_vars,
            modules,
            calls: 0,
            last_active: Vec::new(),
        }
    }
}

impl<T: Real> DeltaProvider<T> for LiveAggregation<'_, T> {
    fn delta(&mut self, tape: &mut Tape<T>, site: InsertionSite, input: Var, grid: (usize, usize)) -> Result<Option<Var>> {
        let summary = if self.provider.needs_summary() {
            Some(tape.mean_tokens(input, 0)?)
        } else {
            None
        };
        let raw = self.provider_vars.raw(tape, self.provider, site, summary)?;
        let (alpha, rows) = normalize_on_tape(tape, raw, self.config.top_k)?;
        let out = match self.config.strategy {
            Strategy::Ensemble => ensemble_site(tape, self.modules, alpha, &rows, site, input, grid, &mut self.calls)?,
            Strategy::Reparam => reparam_site(tape, self.modules, alpha, &rows, site, input, grid, &mut self.calls)?,
        };
        self.last_active.push((site, rows));
        Ok(Some(out))
    }
}

/// Output-level combination outside a tape.
pub fn ensemble_forward(zoo: &ModuleZoo, weights: &NormalizedWeights, site: InsertionSite, tokens: &Tensor<f32>, grid: (usize, usize)) -> Result<Tensor<f32>> {
    if weights.alpha.len() != zoo.len() {
        return Err(Error::shape("ensemble_forward", &[weights.alpha.len()], &[zoo.len()]));
    }
    let mut tape = Tape::<f32>::new();
    let modules = bind_zoo(zoo, &mut tape, false);
    let alpha = tape.constant(weights.as_tensor());
    let x = tape.constant(tokens.clone());
    let mut calls = 0;
    let out = ensemble_site(&mut tape, &modules, alpha, &[weights.active.clone()], site, x, grid, &mut calls)?;
    Ok(tape.value(out).clone())
}

/// Parameter-level combination: one merged module, site by site.
pub fn reparameterize(zoo: &ModuleZoo, weights: &[NormalizedWeights]) -> Result<ViMModule> {
    let g = zoo.geometry;
    if weights.len() != g.num_sites {
        return Err(Error::shape("reparameterize", &[weights.len()], &[g.num_sites]));
    }
    if let Some(m) = zoo.modules().iter().find(|m| m.geometry != g) {
        return Err(Error::InvalidGeometry(format!("{} does not match the zoo geometry", m.meta.id)));
    }
    let mut params = Vec::with_capacity(g.num_sites * SITE_PARAMS.len());
    for (s, w) in weights.iter().enumerate() {
        if w.alpha.len() != zoo.len() {
            return Err(Error::shape("reparameterize", &[w.alpha.len()], &[zoo.len()]));
        }
        for p in 0..SITE_PARAMS.len() {
            let shape = zoo.module(0).site_params(s)[p].shape().to_vec();
            let mut acc = Tensor::<f32>::zeros(shape);
            for &i in &w.active {
                let m = zoo.module(i);
                let coeff = w.alpha[i] as f32 * if p >= 4 { m.scale } else { 1.0 };
                for (o, &v) in acc.data_mut().iter_mut().zip(m.site_params(s)[p].data()) {
                    *o += coeff * v;
                }
            }
            params.push(acc);
        }
    }
    let meta = ModuleMeta {
        id: "reparam".into(),
        task_name: "reparam".into(),
        dataset_name: String::new(),
        created_at: 0,
        param_count: g.param_count(true) as u64,
        kind: ModuleKind::Standard,
        midstream_metric: None,
    };
    ViMModule::from_params(g, meta, 1.0, params)
}

/// Provider plus, once training ends, the frozen per-site weights and (for
/// the reparameterized strategy) the merged module.
#[derive(Clone, Debug)]
pub struct AggregationState {
    pub config: AggregationConfig,
    pub provider: WeightProvider,
    pub site_weights: Option<Vec<NormalizedWeights>>,
    pub merged: Option<ViMModule>,
}

impl AggregationState {
    pub fn new(config: AggregationConfig, zoo: &ModuleZoo, seed: u64) -> Result<Self> {
        let g = zoo.geometry;
        let provider = WeightProvider::new(config.mode, config.sharing, zoo.len(), g.embed_dim, g.num_sites, seed)?;
        Ok(AggregationState {
            config,
            provider,
            site_weights: None,
            merged: None,
        })
    }

    pub fn is_finalized(&self) -> bool {
        self.site_weights.is_some()
    }

    /// Freezes per-site weights. Projection providers are evaluated at
    /// `summaries[site]`, the mean normalized input of that site over a
    /// reference set; the frozen table is what gets exported and merged.
    pub fn finalize(&mut self, zoo: &ModuleZoo, summaries: Option<&[Vec<f32>]>) -> Result<()> {
        let sites = zoo.geometry.num_sites;
        let mut weights = Vec::with_capacity(sites);
        for s in 0..sites {
            let site = InsertionSite::from_index(s);
            let summary = summaries.and_then(|all| all.get(s)).map(Vec::as_slice);
            let raw = self.provider.provide(site, summary)?;
            weights.push(normalize_weights(&raw, self.config.top_k));
        }
        self.merged = match self.config.strategy {
            Strategy::Reparam => Some(reparameterize(zoo, &weights)?),
            Strategy::Ensemble => None,
        };
        self.site_weights = Some(weights);
        Ok(())
    }

    pub fn export_weights(&self, zoo: &ModuleZoo) -> Result<WeightTable> {
        let weights = self.site_weights.as_ref().ok_or(Error::NotFinalized)?;
        Ok(WeightTable {
            ids: zoo.ids(),
            rows: weights
                .iter()
                .enumerate()
                .map(|(s, w)| {
                    let site = InsertionSite::from_index(s);
                    WeightRow {
                        layer: site.layer,
                        branch: site.branch,
                        weights: w.alpha.clone(),
                    }
                })
                .collect(),
        })
    }

    pub fn to_bundle(&self) -> TensorBundle {
        let c = &self.config;
        let p = &self.provider;
        let mut b = TensorBundle::new()
            .with_meta("kind", "aggregation")
            .with_meta("strategy", c.strategy)
            .with_meta("top_k", c.top_k)
            .with_meta("mode", c.mode)
            .with_meta("sharing", c.sharing)
            .with_meta("num_modules", p.num_modules)
            .with_meta("embed_dim", p.embed_dim)
            .with_meta("num_sites", p.num_sites)
            .with_meta("finalized", self.is_finalized());
        for ((name, _), t) in p.param_specs().into_iter().zip(p.params()) {
            b.push(format!("provider.{name}"), t.clone());
        }
        if let Some(w) = &self.site_weights {
            let m = p.num_modules;
            let alpha = Tensor::from_fn(vec![w.len(), m], |i| w[i / m].alpha[i % m] as f32);
            b.push("site_alpha", alpha);
        }
        if let Some(merged) = &self.merged {
            for (name, t) in merged.named_params() {
                b.push(format!("merged.{name}"), t.clone());
            }
        }
        b
    }

    /// Restores a saved state. Finalized weights and the merged module are
    /// recomputed from the provider, so `zoo` must be the tuned zoo saved
    /// alongside; projection modes also need the stored summaries.
    pub fn from_bundle(bundle: &TensorBundle, zoo: &ModuleZoo) -> Result<Self> {
        if bundle.meta("kind")? != "aggregation" {
            return Err(Error::Malformed("bundle is not an aggregation state".into()));
        }
        let config = AggregationConfig {
            strategy: bundle.meta("strategy")?.parse()?,
            top_k: bundle.meta("top_k")?.parse()?,
            mode: bundle.meta("mode")?.parse()?,
            sharing: bundle.meta("sharing")?.parse()?,
        };
        let mut state = AggregationState::new(config, zoo, 0)?;
        let stored = bundle.with_prefix("provider.");
        let specs = state.provider.param_specs();
        if stored.len() != specs.len() {
            return Err(Error::Malformed(format!(
                "provider has {} tensors, expected {}",
                stored.len(),
                specs.len()
            )));
        }
        for ((want, shape), (dst, (name, t))) in specs.iter().zip(state.provider.params_mut().iter_mut().zip(stored)) {
            if &name != want || t.shape() != shape.as_slice() {
                return Err(Error::Malformed(format!("provider tensor {name} {:?}", t.shape())));
            }
            *dst = t;
        }
        if bundle.meta("finalized")? == "true" {
            let m = zoo.len();
            let alpha = bundle
                .get("site_alpha")
                .ok_or_else(|| Error::Malformed("finalized state without site_alpha".into()))?;
            if alpha.shape() != [zoo.geometry.num_sites, m] {
                return Err(Error::Malformed(format!("site_alpha shape {:?}", alpha.shape())));
            }
            let weights: Vec<NormalizedWeights> = alpha
                .data()
                .chunks(m)
                .map(|row| {
                    let raw: Vec<f64> = row.iter().map(|&v| v as f64).collect();
                    NormalizedWeights::from_alpha(raw)
                })
                .collect();
            state.merged = match config.strategy {
                Strategy::Reparam => {
                    let tensors: Vec<Tensor<f32>> = bundle.with_prefix("merged.").into_iter().map(|(_, t)| t).collect();
                    let merged = reparameterize(zoo, &weights)?;
                    Some(ViMModule::from_params(zoo.geometry, merged.meta.clone(), 1.0, tensors)?)
                }
                Strategy::Ensemble => None,
            };
            state.site_weights = Some(weights);
        }
        Ok(state)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightRow {
    pub layer: usize,
    pub branch: Branch,
    pub weights: Vec<f64>,
}

/// Normalized weights per insertion site, one column per zoo entry.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightTable {
    pub ids: Vec<String>,
    pub rows: Vec<WeightRow>,
}

impl WeightTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,branch");
        for id in &self.ids {
            out.push(',');
            out.push_str(id);
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{}", r.layer, r.branch.as_str()));
            for w in &r.weights {
                out.push_str(&format!(",{w:.6}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        let ids: Vec<String> = self.ids.iter().map(|s| serde_json::to_string(s).expect("string")).collect();
        let mut out = format!("{{\n  \"columns\": [{}],\n  \"rows\": [\n", ids.join(", "));
        for (i, r) in self.rows.iter().enumerate() {
            let w: Vec<String> = r.weights.iter().map(|w| format!("{w:.6}")).collect();
            out.push_str(&format!(
                "    {{\"layer\": {}, \"branch\": \"{}\", \"weights\": [{}]}}{}\n",
                r.layer,
                r.branch.as_str(),
                w.join(", "),
                if i + 1 < self.rows.len() { "," } else { "" }
            ));
        }
        out.push_str("  ]\n}\n");
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Malformed(format!("weight csv: {m}"));
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty"))?.split(',').collect();
        if header.len() < 3 || header[0] != "layer" || header[1] != "branch" {
            return Err(bad("header"));
        }
        let ids: Vec<String> = header[2..].iter().map(|s| s.to_string()).collect();
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != ids.len() + 2 {
                return Err(bad("ragged row"));
            }
            rows.push(WeightRow {
                layer: cells[0].parse().map_err(|_| bad("layer"))?,
                branch: parse_branch(cells[1])?,
                weights: cells[2..]
                    .iter()
                    .map(|c| c.parse().map_err(|_| bad("value")))
                    .collect::<Result<_>>()?,
            });
        }
        Ok(WeightTable { ids, rows })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Malformed(format!("weight json: {m}"));
        let v: serde_json::Value = serde_json::from_str(text).map_err(|e| bad(&e.to_string()))?;
        let ids = v["columns"]
            .as_array()
            .ok_or_else(|| bad("columns"))?
            .iter()
            .map(|c| c.as_str().map(str::to_string).ok_or_else(|| bad("column")))
            .collect::<Result<Vec<_>>>()?;
        let rows = v["rows"]
            .as_array()
            .ok_or_else(|| bad("rows"))?
            .iter()
            .map(|r| {
                Ok(WeightRow {
                    layer: r["layer"].as_u64().ok_or_else(|| bad("layer"))? as usize,
                    branch: parse_branch(r["branch"].as_str().ok_or_else(|| bad("branch"))?)?,
                    weights: r["weights"]
                        .as_array()
                        .ok_or_else(|| bad("weights"))?
                        .iter()
                        .map(|w| w.as_f64().ok_or_else(|| bad("weight")))
                        .collect::<Result<_>>()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(WeightTable { ids, rows })
    }
}

fn parse_branch(s: &str) -> Result<Branch> {
    match s {
        "attn" => Ok(Branch::Attn),
        "mlp" => Ok(Branch::Mlp),
        other => Err(Error::Malformed(format!("unknown branch {other:?}"))),
    }
}
