//! Ordered module collection with the zero module at index 0, admission checks
//! and the `VIMZ` container.
//!
//! Layout (little-endian, no padding):
//!
//! ```text
//! "VIMZ" version:u32
//! embed_dim:u32 squeeze_dim:u32 num_sites:u32 backbone_params:u64
//! fingerprint:str module_count:u32
//! per module:
//!   id:str task:str dataset:str created_at:i64 param_count:u64 kind:u8
//!   has_metric:u8 metric:f64 scale:f32 tensor_count:u32
//!   tensor_count × (name:str rank:u32 extents:u32… payload:f32…)
//! checksum:u64
//! ```
//!
//! Strings are a `u32` byte length followed by UTF-8.

use std::collections::HashSet;
use std::ops::Range;
use std::path::Path;

use serde::Serialize;

use crate::container::{read_file, write_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::vim_module::{ModuleGeometry, ModuleKind, ModuleMeta, ViMModule};

pub const ZOO_MAGIC: &[u8; 4] = b"VIMZ";
pub const ZOO_FORMAT_VERSION: u32 = 1;
pub const ZERO_MODULE_ID: &str = "zero";

/// Largest admissible module size as a fraction of the backbone.
pub const DEFAULT_MAX_MODULE_RATIO: f64 = 0.10;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationReport {
    pub accepted: bool,
    pub checks: Vec<Check>,
}

impl ValidationReport {
    fn from_checks(checks: Vec<Check>) -> Self {
        ValidationReport {
            accepted: checks.iter().all(|c| c.passed),
            checks,
        }
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn failed(&self, name: &str) -> bool {
        self.checks.iter().any(|c| c.name == name && !c.passed)
    }

    pub fn summary(&self) -> String {
        self.failures()
            .map(|c| format!("{}: {}", c.name, c.message))
            .collect::<Vec<_>>()
            .join("; ")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModuleZoo {
    pub geometry: ModuleGeometry,
    pub backbone_fingerprint: String,
    pub backbone_params: u64,
    pub format_version: u32,
    pub max_module_ratio: f64,
    modules: Vec<ViMModule>,
}

impl ModuleZoo {
    /// A zoo holding only the zero module.
    pub fn create(geometry: ModuleGeometry, backbone_fingerprint: &str, backbone_params: u64) -> Result<Self> {
        geometry.validate()?;
        let zero = ViMModule::init(geometry, 0, ModuleKind::Zero)?.with_meta(ZERO_MODULE_ID, "zero", "none");
        Ok(ModuleZoo {
            geometry,
            backbone_fingerprint: backbone_fingerprint.to_string(),
            backbone_params,
            format_version: ZOO_FORMAT_VERSION,
            max_module_ratio: DEFAULT_MAX_MODULE_RATIO,
            modules: vec![zero],
        })
    }

    pub fn with_max_module_ratio(mut self, ratio: f64) -> Self {
        self.max_module_ratio = ratio;
        self
    }

    /// Number of entries, the zero module included.
    pub fn len(&self) -> usize {
        self.modules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }

    pub fn modules(&self) -> &[ViMModule] {
        &self.modules
    }

    pub fn module(&self, index: usize) -> &ViMModule {
        &self.modules[index]
    }

    pub fn ids(&self) -> Vec<String> {
        self.modules.iter().map(|m| m.meta.id.clone()).collect()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.modules.iter().position(|m| m.meta.id == id)
    }

    /// Replaces the parameters of entry `index` in place. Used by downstream
    /// tuning, which adapts activated modules; the result is a working copy and
    /// not an admission.
    pub fn replace_module(&mut self, index: usize, module: ViMModule) -> Result<()> {
        if module.geometry != self.geometry {
            return Err(Error::InvalidGeometry(format!(
                "module geometry {:?} differs from zoo geometry {:?}",
                module.geometry, self.geometry
            )));
        }
        self.modules[index] = module;
        Ok(())
    }

    /// Runs every admission check without modifying the zoo.
    pub fn validate_candidate(&self, module: &ViMModule) -> ValidationReport {
        let mut checks = self.intrinsic_checks(module);
        let id_taken = self.modules.iter().any(|m| m.meta.id == module.meta.id);
        checks.push(Check {
            name: "unique_id",
            passed: !id_taken,
            message: if id_taken {
                format!("id {:?} already present", module.meta.id)
            } else {
                "ok".into()
            },
        });
        let digest = module.content_digest();
        let dup = self.modules.iter().find(|m| m.content_digest() == digest);
        checks.push(Check {
            name: "duplicate_parameters",
            passed: dup.is_none(),
            message: match dup {
                Some(m) => format!("parameters identical to {:?}", m.meta.id),
                None => "ok".into(),
            },
        });
        ValidationReport::from_checks(checks)
    }

    fn intrinsic_checks(&self, module: &ViMModule) -> Vec<Check> {
        let mut checks = Vec::new();
        let geo_ok = module.geometry == self.geometry && module.measured_param_count() == self.geometry.param_count(true);
        checks.push(Check {
            name: "geometry",
            passed: geo_ok,
            message: if geo_ok {
                "ok".into()
            } else {
                format!("module {:?} vs zoo {:?}", module.geometry, self.geometry)
            },
        });
        let measured = module.measured_param_count() as u64;
        checks.push(Check {
            name: "param_count",
            passed: module.meta.param_count == measured,
            message: format!("declared {}, measured {measured}", module.meta.param_count),
        });
        let ratio = measured as f64 / self.backbone_params.max(1) as f64;
        checks.push(Check {
            name: "size_bound",
            passed: ratio <= self.max_module_ratio,
            message: format!("module/backbone = {ratio:.4} (limit {:.4})", self.max_module_ratio),
        });
        let finite = module.params().iter().all(|t| t.is_finite()) && module.scale.is_finite();
        checks.push(Check {
            name: "finite",
            passed: finite,
            message: if finite { "ok".into() } else { "non-finite parameter".into() },
        });
        checks
    }

    /// Validates and, when accepted and `report_only` is false, appends.
    /// Rejected candidates leave the returned zoo equal to `self`.
    pub fn add(&self, module: ViMModule, report_only: bool) -> (ModuleZoo, ValidationReport) {
        let report = self.validate_candidate(&module);
        let mut next = self.clone();
        if report.accepted && !report_only {
            next.modules.push(module);
        }
        (next, report)
    }

    /// [`add`](Self::add) that turns a rejection into an error.
    pub fn try_add(&self, module: ViMModule) -> Result<ModuleZoo> {
        let (zoo, report) = self.add(module, false);
        if !report.accepted {
            return Err(Error::Validation(report.summary()));
        }
        Ok(zoo)
    }

    /// Re-checks every stored entry against the zoo's own geometry.
    pub fn validate(&self) -> ValidationReport {
        let mut checks = Vec::new();
        let zero_ok = self.modules.first().is_some_and(|m| m.meta.kind == ModuleKind::Zero);
        checks.push(Check {
            name: "zero_module",
            passed: zero_ok,
            message: if zero_ok { "ok".into() } else { "index 0 is not a zero module".into() },
        });
        let mut seen = HashSet::new();
        for m in &self.modules {
            for mut c in self.intrinsic_checks(m) {
                if m.meta.kind == ModuleKind::Zero && c.name == "size_bound" {
                    continue;
                }
                c.message = format!("{}: {}", m.meta.id, c.message);
                checks.push(c);
            }
            let fresh = seen.insert(m.meta.id.clone());
            checks.push(Check {
                name: "unique_id",
                passed: fresh,
                message: format!("{}", m.meta.id),
            });
        }
        ValidationReport::from_checks(checks)
    }

    /// Entries whose metadata satisfies `keep`; the zero module always stays.
    pub fn subset(&self, keep: impl Fn(&ModuleMeta) -> bool) -> ModuleZoo {
        let mut next = self.clone();
        next.modules = self
            .modules
            .iter()
            .enumerate()
            .filter(|(i, m)| *i == 0 || keep(&m.meta))
            .map(|(_, m)| m.clone())
            .collect();
        next
    }

    /// The zero module followed by the first `n` other entries.
    pub fn truncated(&self, n: usize) -> ModuleZoo {
        let mut next = self.clone();
        next.modules.truncate(n + 1);
        next
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.encode().0
    }

    /// Byte range of each module record within [`to_bytes`](Self::to_bytes).
    pub fn entry_ranges(&self) -> Vec<Range<usize>> {
        self.encode().1
    }

    fn encode(&self) -> (Vec<u8>, Vec<Range<usize>>) {
        let mut w = ByteWriter::new();
        w.bytes(ZOO_MAGIC);
        w.u32(self.format_version);
        w.u32(self.geometry.embed_dim as u32);
        w.u32(self.geometry.squeeze_dim as u32);
        w.u32(self.geometry.num_sites as u32);
        w.u64(self.backbone_params);
        w.str(&self.backbone_fingerprint);
        w.u32(self.modules.len() as u32);
        let mut ranges = Vec::with_capacity(self.modules.len());
        for m in &self.modules {
            let start = w.len();
            write_module(&mut w, m);
            ranges.push(start..w.len());
        }
        (w.finish(), ranges)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::checked(bytes)?;
        r.magic(ZOO_MAGIC)?;
        let version = r.u32()?;
        if version > ZOO_FORMAT_VERSION || version == 0 {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: ZOO_FORMAT_VERSION,
            });
        }
        let geometry = ModuleGeometry::new(r.u32()? as usize, r.u32()? as usize, r.u32()? as usize)
            .map_err(|e| Error::Malformed(e.to_string()))?;
        let backbone_params = r.u64()?;
        let backbone_fingerprint = r.str()?;
        let count = r.u32()? as usize;
        let mut modules = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            modules.push(read_module(&mut r, geometry)?);
        }
        if r.remaining() != 0 {
            return Err(Error::Malformed(format!("{} trailing bytes", r.remaining())));
        }
        let zoo = ModuleZoo {
            geometry,
            backbone_fingerprint,
            backbone_params,
            format_version: version,
            max_module_ratio: DEFAULT_MAX_MODULE_RATIO,
            modules,
        };
        let report = zoo.validate();
        if !report.accepted {
            return Err(Error::Validation(report.summary()));
        }
        Ok(zoo)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }

    /// Checks that the zoo was built against the given backbone.
    pub fn check_backbone(&self, fingerprint: &str, embed_dim: usize, num_sites: usize) -> Result<()> {
        if self.geometry.embed_dim != embed_dim || self.geometry.num_sites != num_sites {
            return Err(Error::InvalidGeometry(format!(
                "zoo expects d={} with {} sites, backbone has d={embed_dim} with {num_sites} sites",
                self.geometry.embed_dim, self.geometry.num_sites
            )));
        }
        if self.backbone_fingerprint != fingerprint {
            return Err(Error::Validation(format!(
                "zoo was built for backbone {}, not {fingerprint}",
                self.backbone_fingerprint
            )));
        }
        Ok(())
    }
}

fn write_module(w: &mut ByteWriter, m: &ViMModule) {
    w.str(&m.meta.id);
    w.str(&m.meta.task_name);
    w.str(&m.meta.dataset_name);
    w.i64(m.meta.created_at);
    w.u64(m.meta.param_count);
    w.u8(m.meta.kind.as_u8());
    w.u8(m.meta.midstream_metric.is_some() as u8);
    w.f64(m.meta.midstream_metric.unwrap_or(0.0));
    w.f32(m.scale);
    w.u32(m.params().len() as u32);
    for (name, t) in m.named_params() {
        w.tensor(&name, t);
    }
}

fn read_module(r: &mut ByteReader<'_>, geometry: ModuleGeometry) -> Result<ViMModule> {
    let id = r.str()?;
    let task_name = r.str()?;
    let dataset_name = r.str()?;
    let created_at = r.i64()?;
    let param_count = r.u64()?;
    let kind = ModuleKind::from_u8(r.u8()?)?;
    let has_metric = r.u8()?;
    let metric = r.f64()?;
    let scale = r.f32()?;
    let n = r.u32()? as usize;
    let specs = geometry.param_specs();
    if n != specs.len() {
        return Err(Error::Malformed(format!("module {id:?} has {n} tensors, expected {}", specs.len())));
    }
    let mut params = Vec::with_capacity(n);
    for (want, _) in &specs {
        let (name, t) = r.tensor()?;
        if &name != want {
            return Err(Error::Malformed(format!("module {id:?}: tensor {name:?} where {want:?} was expected")));
        }
        params.push(t);
    }
    let meta = ModuleMeta {
        id,
        task_name,
        dataset_name,
        created_at,
        param_count,
        kind,
        midstream_metric: (has_metric != 0).then_some(metric),
    };
    ViMModule::from_params(geometry, meta, scale, params).map_err(|e| Error::Malformed(e.to_string()))
}
