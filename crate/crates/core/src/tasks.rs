//! Procedural toy tasks and the small heads trained on top of the backbone.
//!
//! Every sample is rendered from its own ChaCha8 stream, keyed by a SHA-256
//! of the task spec and selected by `(split, index)`, so datasets are
//! reproducible bit for bit without being stored.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::TensorBundle;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

pub const CHANNELS: usize = 3;
const MAX_COUNT: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskFamily {
    ShapeCls,
    ColorCls,
    PatchSeg,
    CountReg,
    RotationPretext,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 5] = [
        TaskFamily::ShapeCls,
        TaskFamily::ColorCls,
        TaskFamily::PatchSeg,
        TaskFamily::CountReg,
        TaskFamily::RotationPretext,
    ];

    /// Canonical name; classification families share the `cls-` prefix.
    pub fn name(self) -> &'static str {
        match self {
            TaskFamily::ShapeCls => "cls-shape",
            TaskFamily::ColorCls => "cls-color",
            TaskFamily::PatchSeg => "seg-patch",
            TaskFamily::CountReg => "reg-count",
            TaskFamily::RotationPretext => "pretext-rotation",
        }
    }

    fn aliases(self) -> &'static [&'static str] {
        match self {
            TaskFamily::ShapeCls => &["shape-cls", "shape"],
            TaskFamily::ColorCls => &["color-cls", "color"],
            TaskFamily::PatchSeg => &["patch-seg", "seg"],
            TaskFamily::CountReg => &["count-reg", "count"],
            TaskFamily::RotationPretext => &["rotation", "rotation-pretext"],
        }
    }

    pub fn head_kind(self) -> HeadKind {
        match self {
            TaskFamily::PatchSeg => HeadKind::DensePerPatch,
            TaskFamily::CountReg => HeadKind::ScalarReg,
            _ => HeadKind::LinearCls,
        }
    }

    pub fn default_classes(self) -> usize {
        match self {
            TaskFamily::PatchSeg => 2,
            TaskFamily::CountReg => 1,
            _ => 4,
        }
    }

    fn tag(self) -> u8 {
        self as u8
    }
}

impl FromStr for TaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskFamily::ALL
            .into_iter()
            .find(|f| f.name() == s || f.aliases().contains(&s))
            .ok_or_else(|| Error::UnsupportedTask(format!("unknown task family {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSpec {
    pub family: TaskFamily,
    pub variant: u32,
    pub image_size: usize,
    pub patch_size: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(family: TaskFamily, variant: u32, image_size: usize, patch_size: usize) -> Self {
        TaskSpec {
            family,
            variant,
            image_size,
            patch_size,
            num_classes: family.default_classes(),
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_classes(mut self, n: usize) -> Self {
        self.num_classes = n;
        self
    }

    /// Parses `family[:vN]`, e.g. `shape-cls:v1`.
    pub fn parse(text: &str, image_size: usize, patch_size: usize) -> Result<Self> {
        let (fam, variant) = match text.split_once(':') {
            Some((f, v)) => {
                let v = v.trim_start_matches('v');
                let v = v
                    .parse()
                    .map_err(|_| Error::UnsupportedTask(format!("bad variant in {text:?}")))?;
                (f, v)
            }
            None => (text, 0),
        };
        let spec = TaskSpec::new(fam.parse()?, variant, image_size, patch_size);
        spec.validate()?;
        Ok(spec)
    }

    /// `cls-shape:v0`, the task name recorded in module metadata.
    pub fn task_name(&self) -> String {
        format!("{}:v{}", self.family.name(), self.variant)
    }

    pub fn dataset_name(&self) -> String {
        format!("toy-{}-v{}-{}px-s{}", self.family.name(), self.variant, self.image_size, self.seed)
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::UnsupportedTask(m));
        if self.image_size < 8 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "{}: image {}px with {}px patches is unsupported",
                self.task_name(),
                self.image_size,
                self.patch_size
            ));
        }
        if self.variant as usize >= SHAPE_SETS.len() {
            return bad(format!("{}: variants 0..{} exist", self.task_name(), SHAPE_SETS.len()));
        }
        let max = match self.family {
            TaskFamily::ShapeCls | TaskFamily::ColorCls | TaskFamily::RotationPretext => 4,
            TaskFamily::PatchSeg => 5,
            TaskFamily::CountReg => 1,
        };
        let min = match self.family {
            TaskFamily::CountReg => 1,
            TaskFamily::RotationPretext => 4,
            _ => 2,
        };
        if self.num_classes < min || self.num_classes > max {
            return bad(format!(
                "{} supports {min}..={max} classes, got {}",
                self.task_name(),
                self.num_classes
            ));
        }
        Ok(())
    }

    fn sample_rng(&self, split: Split, index: usize) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(b"vim-toy-task");
        h.update(self.seed.to_le_bytes());
        h.update([self.family.tag()]);
        h.update(self.variant.to_le_bytes());
        for v in [self.image_size, self.patch_size, self.num_classes] {
            h.update((v as u64).to_le_bytes());
        }
        let key: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream((split.stream() << 40) | index as u64);
        rng
    }
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.task_name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Disk,
    Square,
    TriangleUp,
    Cross,
    Ring,
    Diamond,
    HBar,
    TShape,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 8] = [
        ShapeKind::Disk,
        ShapeKind::Square,
        ShapeKind::TriangleUp,
        ShapeKind::Cross,
        ShapeKind::Ring,
        ShapeKind::Diamond,
        ShapeKind::HBar,
        ShapeKind::TShape,
    ];

    /// Membership in shape-local coordinates scaled to the unit box.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            ShapeKind::Disk => u * u + v * v <= 1.0,
            ShapeKind::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            ShapeKind::TriangleUp => (-0.9..=0.8).contains(&v) && u.abs() <= 0.9 * (v + 0.9) / 1.7,
            ShapeKind::Cross => (u.abs() <= 0.3 && v.abs() <= 0.9) || (v.abs() <= 0.3 && u.abs() <= 0.9),
            ShapeKind::Ring => (0.3..=1.0).contains(&(u * u + v * v)),
            ShapeKind::Diamond => u.abs() + v.abs() <= 1.0,
            ShapeKind::HBar => u.abs() <= 0.95 && v.abs() <= 0.3,
            ShapeKind::TShape => ((-0.9..=-0.5).contains(&v) && u.abs() <= 0.9) || (u.abs() <= 0.25 && (-0.9..=0.9).contains(&v)),
        }
    }
}

const SHAPE_SETS: [[ShapeKind; 4]; 4] = {
    use ShapeKind::*;
    [
        [Disk, Square, TriangleUp, Cross],
        [Ring, Diamond, HBar, TShape],
        [Disk, TriangleUp, Ring, HBar],
        [Square, Cross, Diamond, TShape],
    ]
};

const COLOR_SETS: [[[f32; 3]; 4]; 2] = [
    [[0.9, 0.15, 0.1], [0.1, 0.8, 0.2], [0.15, 0.25, 0.95], [0.95, 0.9, 0.1]],
    [[0.1, 0.9, 0.9], [0.9, 0.1, 0.85], [1.0, 0.55, 0.05], [0.5, 0.15, 0.7]],
];

fn all_colors() -> impl Iterator<Item = [f32; 3]> {
    COLOR_SETS.into_iter().flatten()
}

/// One shape instance in pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub color: [f32; 3],
    /// Class index of this shape within its task, when it has one.
    pub class: usize,
}

impl Shape {
    /// Whether the pixel whose center is `(x + ½, y + ½)` lies inside.
    pub fn covers_pixel(&self, x: usize, y: usize) -> bool {
        let u = (x as f64 + 0.5 - self.cx) / self.radius;
        let v = (y as f64 + 0.5 - self.cy) / self.radius;
        self.kind.contains(u, v)
    }
}

/// Everything needed to re-render a sample before any rotation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub size: usize,
    pub background: f32,
    /// Added to row `y` as `gradient · y / size`.
    pub gradient: f32,
    pub noise: Vec<f32>,
    pub shapes: Vec<Shape>,
    /// Quarter turns applied counter-clockwise after rendering.
    pub rotation: usize,
}

impl Scene {
    /// Unrotated `[3, S, S]` image; later shapes paint over earlier ones.
    pub fn render(&self) -> Tensor<f32> {
        let s = self.size;
        let mut img = vec![0.0f32; CHANNELS * s * s];
        for c in 0..CHANNELS {
            for y in 0..s {
                for x in 0..s {
                    let i = (c * s + y) * s + x;
                    img[i] = self.background + self.gradient * y as f32 / s as f32 + self.noise[i];
                }
            }
        }
        for shape in &self.shapes {
            for y in 0..s {
                for x in 0..s {
                    if shape.covers_pixel(x, y) {
                        for c in 0..CHANNELS {
                            img[(c * s + y) * s + x] = shape.color[c];
                        }
                    }
                }
            }
        }
        for v in &mut img {
            *v = v.clamp(0.0, 1.0);
        }
        Tensor::new(vec![CHANNELS, s, s], img).expect("image shape")
    }
}

/// `k` quarter turns counter-clockwise of a `[C, S, S]` image:
/// one turn maps `new[y][x] = old[x][S-1-y]`.
pub fn rotate90(img: &Tensor<f32>, k: usize) -> Tensor<f32> {
    let (c, s) = (img.shape()[0], img.shape()[1]);
    let mut cur = img.clone();
    for _ in 0..k % 4 {
        let src = cur.data().to_vec();
        let dst = cur.data_mut();
        for ch in 0..c {
            for y in 0..s {
                for x in 0..s {
                    dst[(ch * s + y) * s + x] = src[(ch * s + x) * s + (s - 1 - y)];
                }
            }
        }
    }
    cur
}

#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    Class(Vec<usize>),
    /// Row-major `[n, patches]`.
    Patch(Vec<usize>),
    Scalar(Vec<f32>),
}

impl Labels {
    fn select(&self, indices: &[usize], per_sample: usize) -> Labels {
        match self {
            Labels::Class(v) => Labels::Class(indices.iter().map(|&i| v[i]).collect()),
            Labels::Patch(v) => Labels::Patch(
                indices
                    .iter()
                    .flat_map(|&i| v[i * per_sample..(i + 1) * per_sample].iter().copied())
                    .collect(),
            ),
            Labels::Scalar(v) => Labels::Scalar(indices.iter().map(|&i| v[i]).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub spec: TaskSpec,
    pub split: Split,
    /// `[n, 3, S, S]`
    pub images: Tensor<f32>,
    pub labels: Labels,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn per_sample_labels(&self) -> usize {
        match self.labels {
            Labels::Patch(_) => self.spec.grid() * self.spec.grid(),
            _ => 1,
        }
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Labels) {
        let per = CHANNELS * self.spec.image_size * self.spec.image_size;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        (
            Tensor::new(shape, data).expect("batch shape"),
            self.labels.select(indices, self.per_sample_labels()),
        )
    }

    /// Image and label tensors for inspection, in the tensor-bundle format.
    pub fn to_bundle(&self) -> TensorBundle {
        let mut b = TensorBundle::new()
            .with_meta("kind", "dataset")
            .with_meta("task", self.spec.task_name())
            .with_meta("dataset", self.spec.dataset_name())
            .with_meta("split", format!("{:?}", self.split).to_lowercase());
        b.push("images", self.images.clone());
        let n = self.len();
        let labels = match &self.labels {
            Labels::Class(v) => Tensor::from_fn(vec![n], |i| v[i] as f32),
            Labels::Patch(v) => Tensor::from_fn(vec![n, v.len() / n], |i| v[i] as f32),
            Labels::Scalar(v) => Tensor::from_fn(vec![n], |i| v[i]),
        };
        b.push("labels", labels);
        b
    }
}

/// The scene behind sample `index` of `split`, with its label material.
pub fn scene(spec: &TaskSpec, split: Split, index: usize) -> Result<Scene> {
    spec.validate()?;
    let mut rng = spec.sample_rng(split, index);
    let s = spec.image_size;
    let sf = s as f64;
    let background = rng.random_range(0.3f32..0.6);
    let noise: Vec<f32> = (0..CHANNELS * s * s).map(|_| rng.random_range(-0.08f32..0.08)).collect();
    let shapes_set = SHAPE_SETS[spec.variant as usize];
    let colors = COLOR_SETS[spec.variant as usize % COLOR_SETS.len()];
    let jitter = |rng: &mut ChaCha8Rng, c: [f32; 3]| c.map(|v| (v + rng.random_range(-0.05f32..0.05)).clamp(0.0, 1.0));
    let any_color = |rng: &mut ChaCha8Rng| all_colors().nth(rng.random_range(0..8)).expect("eight colors");
    let place = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
        let radius = rng.random_range(lo * sf..hi * sf);
        let margin = radius * 0.9;
        let cx = rng.random_range(margin..sf - margin);
        let cy = rng.random_range(margin..sf - margin);
        (cx, cy, radius)
    };
    let mut gradient = 0.0;
    let mut rotation = 0;
    let mut shapes = Vec::new();
    match spec.family {
        TaskFamily::ShapeCls | TaskFamily::PatchSeg => {
            let classes = if spec.family == TaskFamily::ShapeCls {
                spec.num_classes
            } else {
                spec.num_classes - 1
            };
            let class = rng.random_range(0..classes);
            let c = any_color(&mut rng);
            let color = jitter(&mut rng, c);
            let (cx, cy, radius) = place(&mut rng, 0.22, 0.36);
            shapes.push(Shape {
                kind: shapes_set[class],
                cx,
                cy,
                radius,
                color,
                class,
            });
        }
        TaskFamily::ColorCls => {
            let class = rng.random_range(0..spec.num_classes);
            let kind = ShapeKind::ALL[rng.random_range(0..8)];
            let color = jitter(&mut rng, colors[class]);
            let (cx, cy, radius) = place(&mut rng, 0.22, 0.36);
            shapes.push(Shape {
                kind,
                cx,
                cy,
                radius,
                color,
                class,
            });
        }
        TaskFamily::CountReg => {
            let count = rng.random_range(1..=MAX_COUNT);
            let mut tries = 0;
            while shapes.len() < count {
                tries += 1;
                let kind = shapes_set[rng.random_range(0..4)];
                let c = any_color(&mut rng);
                let color = jitter(&mut rng, c);
                let (cx, cy, radius) = place(&mut rng, 0.1, 0.15);
                let clear = shapes.iter().all(|o: &Shape| {
                    (o.cx - cx).abs() > o.radius + radius || (o.cy - cy).abs() > o.radius + radius
                });
                if clear || tries > 200 {
                    shapes.push(Shape {
                        kind,
                        cx,
                        cy,
                        radius,
                        color,
                        class: 0,
                    });
                }
            }
        }
        TaskFamily::RotationPretext => {
            gradient = 0.35;
            rotation = rng.random_range(0..4);
            for _ in 0..rng.random_range(1..=2) {
                let kind = ShapeKind::ALL[rng.random_range(0..8)];
                let c = any_color(&mut rng);
                let color = jitter(&mut rng, c);
                let (cx, cy, radius) = place(&mut rng, 0.18, 0.3);
                shapes.push(Shape {
                    kind,
                    cx,
                    cy,
                    radius,
                    color,
                    class: 0,
                });
            }
        }
    }
    Ok(Scene {
        size: s,
        background,
        gradient,
        noise,
        shapes,
        rotation,
    })
}

/// Per-patch labels: a patch takes the class of the shape covering more
/// than half of its pixel centers (offset by one), else background 0.
pub fn patch_labels(scene: &Scene, patch_size: usize) -> Vec<usize> {
    let g = scene.size / patch_size;
    let mut labels = vec![0; g * g];
    for (p, label) in labels.iter_mut().enumerate() {
        let (gy, gx) = (p / g, p % g);
        for shape in &scene.shapes {
            let mut covered = 0;
            for y in gy * patch_size..(gy + 1) * patch_size {
                for x in gx * patch_size..(gx + 1) * patch_size {
                    covered += shape.covers_pixel(x, y) as usize;
                }
            }
            if 2 * covered > patch_size * patch_size {
                *label = 1 + shape.class;
            }
        }
    }
    labels
}

/// Sample `index`: the image and its label material.
pub fn sample(spec: &TaskSpec, split: Split, index: usize) -> Result<(Tensor<f32>, Labels)> {
    let sc = scene(spec, split, index)?;
    let img = rotate90(&sc.render(), sc.rotation);
    let labels = match spec.family {
        TaskFamily::ShapeCls | TaskFamily::ColorCls => Labels::Class(vec![sc.shapes[0].class]),
        TaskFamily::RotationPretext => Labels::Class(vec![sc.rotation]),
        TaskFamily::PatchSeg => Labels::Patch(patch_labels(&sc, spec.patch_size)),
        TaskFamily::CountReg => Labels::Scalar(vec![sc.shapes.len() as f32 / MAX_COUNT as f32]),
    };
    Ok((img, labels))
}

pub fn generate(spec: &TaskSpec, n: usize, split: Split) -> Result<ToyDataset> {
    if n == 0 {
        return Err(Error::InvalidConfig("dataset size must be at least 1".into()));
    }
    spec.validate()?;
    let s = spec.image_size;
    let mut images = Vec::with_capacity(n * CHANNELS * s * s);
    let mut labels: Option<Labels> = None;
    for i in 0..n {
        let (img, l) = sample(spec, split, i)?;
        images.extend_from_slice(img.data());
        labels = Some(match (labels, l) {
            (None, l) => l,
            (Some(Labels::Class(mut a)), Labels::Class(b)) => {
                a.extend(b);
                Labels::Class(a)
            }
            (Some(Labels::Patch(mut a)), Labels::Patch(b)) => {
                a.extend(b);
                Labels::Patch(a)
            }
            (Some(Labels::Scalar(mut a)), Labels::Scalar(b)) => {
                a.extend(b);
                Labels::Scalar(a)
            }
            _ => unreachable!("one family per dataset"),
        });
    }
    Ok(ToyDataset {
        spec: spec.clone(),
        split,
        images: Tensor::new(vec![n, CHANNELS, s, s], images)?,
        labels: labels.expect("n ≥ 1"),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    /// Class token → linear → cross-entropy.
    LinearCls,
    /// Each patch token → linear → cross-entropy.
    DensePerPatch,
    /// Mean patch token → linear → squared error.
    ScalarReg,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::LinearCls => "linear-cls",
            HeadKind::DensePerPatch => "dense-per-patch",
            HeadKind::ScalarReg => "scalar-reg",
        }
    }

    pub fn higher_is_better(self) -> bool {
        self != HeadKind::ScalarReg
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [HeadKind::LinearCls, HeadKind::DensePerPatch, HeadKind::ScalarReg]
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Malformed(format!("unknown head kind {s:?}")))
    }
}

/// Zero-initialized linear readout.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskHead {
    pub kind: HeadKind,
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
}

pub struct HeadVars {
    pub weight: Var,
    pub bias: Var,
}

impl TaskHead {
    pub fn new(kind: HeadKind, embed_dim: usize, outputs: usize) -> Self {
        TaskHead {
            kind,
            weight: Tensor::zeros(vec![embed_dim, outputs]),
            bias: Tensor::zeros(vec![outputs]),
        }
    }

    pub fn for_task(spec: &TaskSpec, embed_dim: usize) -> Self {
        Self::new(spec.family.head_kind(), embed_dim, spec.num_classes)
    }

    pub fn outputs(&self) -> usize {
        self.bias.numel()
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, trainable: bool) -> HeadVars {
        HeadVars {
            weight: tape.leaf(self.weight.cast(), trainable),
            bias: tape.leaf(self.bias.cast(), trainable),
        }
    }

    /// Predictions (`[B, C]`, `[B·P, C]` or `[B, 1]`) and the mean loss.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, vars: &HeadVars, features: Var, labels: &Labels) -> Result<(Var, Var)> {
        let fs = tape.shape(features).to_vec();
        if fs.len() != 3 || fs[2] != self.weight.shape()[0] {
            return Err(Error::shape("head", &fs, self.weight.shape()));
        }
        let (batch, tokens) = (fs[0], fs[1]);
        match (self.kind, labels) {
            (HeadKind::LinearCls, Labels::Class(y)) => {
                let cls = tape.select_token(features, 0)?;
                let logits = tape.linear(cls, vars.weight, vars.bias)?;
                let loss = tape.cross_entropy(logits, y)?;
                Ok((logits, loss))
            }
            (HeadKind::DensePerPatch, Labels::Patch(y)) => {
                let patches = tape.slice_tokens(features, 1, tokens - 1)?;
                let logits = tape.linear(patches, vars.weight, vars.bias)?;
                let flat = tape.reshape(logits, vec![batch * (tokens - 1), self.outputs()])?;
                let loss = tape.cross_entropy(flat, y)?;
                Ok((flat, loss))
            }
            (HeadKind::ScalarReg, Labels::Scalar(y)) => {
                let pooled = tape.mean_tokens(features, 1)?;
                let pred = tape.linear(pooled, vars.weight, vars.bias)?;
                let target: Vec<T> = y.iter().map(|&v| T::from_f32(v)).collect();
                let loss = tape.mse(pred, &target)?;
                Ok((pred, loss))
            }
            (kind, labels) => Err(Error::UnsupportedTask(format!(
                "{} head cannot score {} labels",
                kind.as_str(),
                match labels {
                    Labels::Class(_) => "class",
                    Labels::Patch(_) => "per-patch",
                    Labels::Scalar(_) => "scalar",
                }
            ))),
        }
    }

    pub fn to_bundle(&self) -> TensorBundle {
        let mut b = TensorBundle::new().with_meta("kind", "head").with_meta("head_kind", self.kind.as_str());
        b.push("head.w", self.weight.clone());
        b.push("head.b", self.bias.clone());
        b
    }

    pub fn from_bundle(bundle: &TensorBundle) -> Result<Self> {
        let kind = bundle.meta("head_kind")?.parse()?;
        let get = |n: &str| {
            bundle
                .get(n)
                .cloned()
                .ok_or_else(|| Error::Malformed(format!("missing tensor {n}")))
        };
        let (weight, bias) = (get("head.w")?, get("head.b")?);
        if weight.rank() != 2 || weight.shape()[1] != bias.numel() {
            return Err(Error::Malformed("head weight and bias disagree".into()));
        }
        Ok(TaskHead { kind, weight, bias })
    }
}

/// Accumulates the validation metric over batches: accuracy for the class
/// heads, mean squared error for regression.
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    correct: usize,
    total: usize,
    sq_err: f64,
}

impl MetricAccumulator {
    pub fn update(&mut self, kind: HeadKind, predictions: &Tensor<f32>, labels: &Labels) {
        match (kind, labels) {
            (HeadKind::ScalarReg, Labels::Scalar(y)) => {
                for (&p, &t) in predictions.data().iter().zip(y) {
                    self.sq_err += ((p - t) as f64).powi(2);
                    self.total += 1;
                }
            }
            (_, Labels::Class(y)) | (_, Labels::Patch(y)) => {
                let c = predictions.last_dim();
                for (row, &t) in predictions.data().chunks(c).zip(y) {
                    // first maximum wins, so ties resolve deterministically
                    let arg = row
                        .iter()
                        .enumerate()
                        .fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
                    self.correct += (arg == t) as usize;
                    self.total += 1;
                }
            }
            _ => {}
        }
    }

    pub fn value(&self, kind: HeadKind) -> f64 {
        if self.total == 0 {
            return f64::NAN;
        }
        match kind {
            HeadKind::ScalarReg => self.sq_err / self.total as f64,
            _ => self.correct as f64 / self.total as f64,
        }
    }
}
