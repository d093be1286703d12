//! Fixtures shared by the criterion benches.

use vim_core::aggregation::{AggregationConfig, AggregationState, Strategy};
use vim_core::tasks::{generate, Split, TaskFamily, TaskHead, TaskSpec, ToyDataset};
use vim_core::{Backbone, BackboneConfig, ModuleGeometry, ModuleKind, ModuleZoo, Tensor, ViMModule};

pub struct Fixture {
    pub backbone: Backbone,
    pub geometry: ModuleGeometry,
    pub zoo: ModuleZoo,
    pub head: TaskHead,
    pub data: ToyDataset,
}

/// Deterministic non-trivial module: every weight is a small hashed value.
pub fn module(geometry: ModuleGeometry, seed: u64) -> ViMModule {
    let mut m = ViMModule::init(geometry, seed, ModuleKind::Standard).expect("geometry");
    for (p, t) in m.params_mut().iter_mut().enumerate() {
        let salt = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ p as u64;
        for (i, x) in t.data_mut().iter_mut().enumerate() {
            let h = (i as u64 ^ salt).wrapping_mul(0xBF58_476D_1CE4_E5B9) >> 40;
            *x = (h as f32 / (1u64 << 24) as f32 - 0.5) * 0.2;
        }
    }
    m.with_meta(&format!("bench-{seed}"), "bench", "bench")
}

/// Backbone of `preset`, a zoo of `modules` trained-looking modules and
/// `samples` shape-classification images.
pub fn fixture(preset: &str, modules: usize, samples: usize) -> Fixture {
    let config = BackboneConfig::preset(preset).expect("preset");
    let backbone = Backbone::build(config.clone(), 0).expect("backbone");
    let geometry = ModuleGeometry::for_backbone(&config, 8.0).expect("geometry");
    let mut zoo = ModuleZoo::create(geometry, backbone.fingerprint(), backbone.param_count() as u64)
        .expect("zoo")
        .with_max_module_ratio(1.0);
    for s in 0..modules as u64 {
        zoo = zoo.try_add(module(geometry, s + 1)).expect("add");
    }
    let spec = TaskSpec::new(TaskFamily::ShapeCls, 0, config.image_size, config.patch_size);
    let head = TaskHead::for_task(&spec, config.embed_dim);
    let data = generate(&spec, samples, Split::Val).expect("data");
    Fixture {
        backbone,
        geometry,
        zoo,
        head,
        data,
    }
}

/// Finalized vector-mode state with uniform weights over the whole zoo.
pub fn finalized_state(zoo: &ModuleZoo, strategy: Strategy) -> AggregationState {
    let config = AggregationConfig {
        strategy,
        ..Default::default()
    };
    let mut state = AggregationState::new(config, zoo, 0).expect("state");
    state.finalize(zoo, None).expect("finalize");
    state
}

/// `[batch, tokens, dim]` activations shaped like the backbone's sequence.
pub fn tokens(config: &BackboneConfig, batch: usize) -> Tensor<f32> {
    let shape = vec![batch, config.num_tokens(), config.embed_dim];
    Tensor::from_fn(shape, |i| ((i * 7919) % 101) as f32 / 50.0 - 1.0)
}
