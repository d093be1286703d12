use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vim_core::aggregation::{
    AggregationConfig, AggregationState, LiveAggregation, NormalizedWeights, ProviderMode, ProviderVars, Strategy, TopK,
    WeightProvider, WeightSharing,
};
use vim_core::numerics::check_gradient;
use vim_core::tasks::{generate, HeadVars, Split, TaskFamily, TaskHead, TaskSpec};
use vim_core::training::*;
use vim_core::vim_module::{ModuleGeometry, ModuleVars, SiteVars};
use vim_core::zoo::ModuleZoo;
use vim_core::{Backbone, BackboneConfig, Error, ModuleKind, Tape, Tensor, Var, ViMModule};

fn randomize(tensors: &mut [Tensor<f32>], rng: &mut ChaCha8Rng, amp: f32) {
    for t in tensors {
        for v in t.data_mut() {
            *v = rng.random_range(-amp..amp);
        }
    }
}

fn random_module(g: ModuleGeometry, seed: u64) -> ViMModule {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = ViMModule::init(g, seed, ModuleKind::Standard).unwrap();
    randomize(m.params_mut(), &mut rng, 0.5);
    m.with_meta(&format!("r{seed}"), "t", "d")
}

fn named64(prefix: &str, named: Vec<(String, &Tensor<f32>)>) -> Vec<(String, Tensor<f64>)> {
    named.into_iter().map(|(n, t)| (format!("{prefix}{n}"), t.cast())).collect()
}

fn module_vars(g: ModuleGeometry, scale: f64, vars: &[Var]) -> ModuleVars<f64> {
    ModuleVars {
        sites: vars[..6 * g.num_sites].chunks(6).map(SiteVars::from_slice).collect(),
        scale,
    }
}

fn micro() -> (Backbone, ModuleGeometry, TaskSpec) {
    let cfg = BackboneConfig::micro();
    let g = ModuleGeometry::new(cfg.embed_dim, 4, cfg.num_sites()).unwrap();
    let spec = TaskSpec::new(TaskFamily::ShapeCls, 0, cfg.image_size, cfg.patch_size);
    (Backbone::build(cfg, 3).unwrap(), g, spec)
}

fn random_head(spec: &TaskSpec, d: usize, seed: u64) -> TaskHead {
    let mut head = TaskHead::for_task(spec, d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    randomize(std::slice::from_mut(&mut head.weight), &mut rng, 0.5);
    randomize(std::slice::from_mut(&mut head.bias), &mut rng, 0.5);
    head
}

#[test]
fn full_model_gradient_check_f64() {
    let (backbone, g, spec) = micro();
    let module = random_module(g, 11);
    let head = random_head(&spec, g.embed_dim, 12);
    let data = generate(&spec, 10, Split::Train).unwrap();
    let mut params = named64("module.", module.named_params().collect());
    params.push(("head.w".into(), head.weight.cast()));
    params.push(("head.b".into(), head.bias.cast()));
    let n_mod = module.params().len();
    let report = check_gradient(
        |tape: &mut Tape<f64>, vars: &[Var]| {
            let bb = backbone.bind(tape, false);
            let mv = module_vars(g, module.scale as f64, &vars[..n_mod]);
            let hv = HeadVars {
                weight: vars[n_mod],
                bias: vars[n_mod + 1],
            };
            let mut deltas = |tape: &mut Tape<f64>, site, input, grid| mv.delta(tape, site, input, grid).map(Some);
            let feats = backbone.forward(tape, &bb, &data.images, &mut deltas)?;
            Ok(head.forward(tape, &hv, feats, &data.labels)?.1)
        },
        &params,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
    assert!(report.max_relative_error < 1e-4);
}

#[test]
fn backbone_gradient_check_f64() {
    let (backbone, g, spec) = micro();
    let head = random_head(&spec, g.embed_dim, 13);
    let data = generate(&spec, 4, Split::Train).unwrap();
    let mut params = named64("backbone.", backbone.named_params().collect());
    let n_bb = params.len();
    params.push(("head.w".into(), head.weight.cast()));
    params.push(("head.b".into(), head.bias.cast()));
    let report = check_gradient(
        |tape: &mut Tape<f64>, vars: &[Var]| {
            let bb = vim_core::backbone::BackboneVars {
                params: vars[..n_bb].to_vec(),
            };
            let hv = HeadVars {
                weight: vars[n_bb],
                bias: vars[n_bb + 1],
            };
            let feats = backbone.forward(tape, &bb, &data.images, &mut vim_core::backbone::NoDelta)?;
            Ok(head.forward(tape, &hv, feats, &data.labels)?.1)
        },
        &params,
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn aggregated_model_gradient_check_f64() {
    let (backbone, g, spec) = micro();
    let zoo = zoo_of(&backbone, g, &[21, 22]);
    let data = generate(&spec, 6, Split::Train).unwrap();
    let cases = [
        (Strategy::Ensemble, ProviderMode::Vector, WeightSharing::PerSite, TopK::All),
        (Strategy::Ensemble, ProviderMode::Vector, WeightSharing::Global, TopK::K(2)),
        (Strategy::Reparam, ProviderMode::Vector, WeightSharing::PerSite, TopK::All),
        (Strategy::Ensemble, ProviderMode::MlpProj, WeightSharing::PerSite, TopK::All),
        (Strategy::Reparam, ProviderMode::LinearProj, WeightSharing::Global, TopK::K(2)),
    ];
    for (i, (strategy, mode, sharing, top_k)) in cases.into_iter().enumerate() {
        let config = AggregationConfig {
            strategy,
            mode,
            sharing,
            top_k,
        };
        let mut provider = WeightProvider::new(mode, sharing, zoo.len(), g.embed_dim, g.num_sites, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(30 + i as u64);
        randomize(provider.params_mut(), &mut rng, 1.0);
        let head = random_head(&spec, g.embed_dim, 14);
        let mut params = Vec::new();
        for (m, module) in zoo.modules().iter().enumerate() {
            params.extend(named64(&format!("zoo.{m}."), module.named_params().collect()));
        }
        let n_zoo = params.len();
        for ((n, _), t) in provider.param_specs().into_iter().zip(provider.params()) {
            params.push((format!("provider.{n}"), t.cast()));
        }
        let n_prov = params.len() - n_zoo;
        params.push(("head.w".into(), head.weight.cast()));
        params.push(("head.b".into(), head.bias.cast()));
        let per_module = 6 * g.num_sites;
        let groups = provider.groups();
        let report = check_gradient(
            |tape: &mut Tape<f64>, vars: &[Var]| {
                let bb = backbone.bind(tape, false);
                let modules: Vec<ModuleVars<f64>> = zoo
                    .modules()
                    .iter()
                    .enumerate()
                    .map(|(m, module)| module_vars(g, module.scale as f64, &vars[m * per_module..(m + 1) * per_module]))
                    .collect();
                let pv = ProviderVars {
                    groups: vars[n_zoo..n_zoo + n_prov].chunks(n_prov / groups).map(|c| c.to_vec()).collect(),
                };
                let hv = HeadVars {
                    weight: vars[n_zoo + n_prov],
                    bias: vars[n_zoo + n_prov + 1],
                };
                let mut live = LiveAggregation::new(config, &provider, &pv, &modules);
                let feats = backbone.forward(tape, &bb, &data.images, &mut live)?;
                Ok(head.forward(tape, &hv, feats, &data.labels)?.1)
            },
            &params,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{config:?}: {report:?}");
    }
}

fn zoo_of(backbone: &Backbone, g: ModuleGeometry, seeds: &[u64]) -> ModuleZoo {
    let mut zoo = ModuleZoo::create(g, backbone.fingerprint(), backbone.param_count() as u64)
        .unwrap()
        .with_max_module_ratio(1.0);
    for &s in seeds {
        zoo = zoo.try_add(random_module(g, s)).unwrap();
    }
    zoo
}

#[test]
fn top_1_routes_gradient_to_exactly_one_module_per_site() {
    let (backbone, g, spec) = micro();
    let zoo = zoo_of(&backbone, g, &[41, 42, 43]);
    let data = generate(&spec, 4, Split::Train).unwrap();
    let config = AggregationConfig {
        top_k: TopK::K(1),
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for _ in 0..5 {
        let mut provider = WeightProvider::new(config.mode, config.sharing, zoo.len(), g.embed_dim, g.num_sites, 0).unwrap();
        randomize(provider.params_mut(), &mut rng, 2.0);
        let mut tape = Tape::<f32>::new();
        let bb = backbone.bind(&mut tape, false);
        let modules: Vec<ModuleVars<f32>> = zoo.modules().iter().map(|m| m.bind(&mut tape, true)).collect();
        let pv = provider.bind(&mut tape, true);
        let head = random_head(&spec, g.embed_dim, 45);
        let hv = head.bind(&mut tape, true);
        let mut live = LiveAggregation::new(config, &provider, &pv, &modules);
        let feats = backbone.forward(&mut tape, &bb, &data.images, &mut live).unwrap();
        let (_, loss) = head.forward(&mut tape, &hv, feats, &data.labels).unwrap();
        let grads = tape.backward(loss).unwrap();
        for site in 0..g.num_sites {
            let raw: Vec<f64> = provider.provide(vim_core::backbone::InsertionSite::from_index(site), None).unwrap();
            let winner = vim_core::aggregation::select_top_k(&raw, 1)[0];
            let touched: Vec<usize> = (0..zoo.len())
                .filter(|&m| {
                    modules[m].sites[site]
                        .to_array()
                        .iter()
                        .any(|&v| grads.get(v).is_some_and(|gr| gr.data().iter().any(|&x| x != 0.0)))
                })
                .collect();
            assert_eq!(touched, vec![winner], "site {site}");
        }
    }
}

fn tiny_setup() -> (Backbone, ModuleGeometry, TrainConfig) {
    let cfg = BackboneConfig::tiny();
    let g = ModuleGeometry::for_backbone(&cfg, 8.0).unwrap();
    let train = TrainConfig {
        steps: 12,
        batch_size: 8,
        train_size: 32,
        val_size: 32,
        eval_every: 5,
        ..Default::default()
    };
    (Backbone::build(cfg, 1).unwrap(), g, train)
}

#[test]
fn midstream_is_deterministic_frozen_and_audited() {
    let (backbone, g, cfg) = tiny_setup();
    let spec = TaskSpec::new(TaskFamily::ShapeCls, 0, 16, 4);
    let (a, _, ma) = train_midstream(&backbone, &spec, g, 7, &cfg).unwrap();
    let (b, _, mb) = train_midstream(&backbone, &spec, g, 7, &cfg).unwrap();
    assert_eq!(ma.loss_curve.len(), 12);
    assert!(ma.loss_curve.iter().zip(&mb.loss_curve).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(a.params().iter().zip(b.params()).all(|(x, y)| x.bitwise_eq(y)));
    assert_eq!(ma.evals.iter().map(|e| e.step).collect::<Vec<_>>(), vec![5, 10, 12]);
    assert!(ma.frozen_ok());
    assert_eq!(ma.fingerprint_before, backbone.fingerprint());
    ma.audit_trainable().unwrap();
    assert!(ma.touched.iter().all(|n| n.starts_with("module.") || n.starts_with("head.")));
    assert!(ma.touched.iter().any(|n| n.starts_with("module.")));
    assert_eq!(a.meta.task_name, "cls-shape:v0");
    assert_eq!(a.meta.midstream_metric, Some(ma.final_metric));
    assert_eq!(ma.to_jsonl().lines().count(), 12);
    let (c, _, _) = train_midstream(&backbone, &spec, g, 8, &cfg).unwrap();
    assert!(!a.params()[0].bitwise_eq(&c.params()[0]));
}

#[test]
fn downstream_freezing_contract_and_trainable_set() {
    let (backbone, g, cfg) = tiny_setup();
    let zoo = zoo_of(&backbone, g, &[51, 52]);
    let spec = TaskSpec::new(TaskFamily::ShapeCls, 2, 16, 4);
    for strategy in [Strategy::Ensemble, Strategy::Reparam] {
        for freeze_modules in [false, true] {
            let agg = AggregationConfig {
                strategy,
                ..Default::default()
            };
            let options = DownstreamOptions {
                freeze_modules,
                freeze_zero_module: false,
            };
            let run = train_downstream(&backbone, &zoo, &spec, agg, &cfg, options).unwrap();
            let m = &run.metrics;
            assert!(m.frozen_ok());
            m.audit_trainable().unwrap();
            assert!(!m.touched.iter().any(|n| n.starts_with("backbone.")));
            assert!(m.touched.iter().any(|n| n.starts_with("provider.")));
            assert_eq!(m.touched.iter().any(|n| n.starts_with("zoo.")), !freeze_modules);
            if freeze_modules {
                assert_eq!(run.zoo.to_bytes(), zoo.to_bytes());
            }
            assert_eq!(m.extra["strategy"], strategy.to_string());
            assert_eq!(run.state.merged.is_some(), strategy == Strategy::Reparam);
            let again = evaluate(&backbone, &run.zoo, &run.state, &run.head, &generate(&spec, 32, Split::Val).unwrap()).unwrap();
            assert_eq!(again, run.eval);
        }
    }
}

#[test]
fn frozen_zero_module_stays_zero() {
    let (backbone, g, cfg) = tiny_setup();
    let zoo = zoo_of(&backbone, g, &[53]);
    let spec = TaskSpec::new(TaskFamily::ShapeCls, 2, 16, 4);
    let opts = DownstreamOptions {
        freeze_modules: false,
        freeze_zero_module: true,
    };
    let run = train_downstream(&backbone, &zoo, &spec, AggregationConfig::default(), &cfg, opts).unwrap();
    assert!(run.zoo.module(0).params().iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    assert!(!run.metrics.touched.iter().any(|n| n.starts_with("zoo.0.")));
    let open = train_downstream(&backbone, &zoo, &spec, AggregationConfig::default(), &cfg, DownstreamOptions::default()).unwrap();
    assert!(open.metrics.touched.iter().any(|n| n.starts_with("zoo.0.")));
}

#[test]
fn zero_initialized_top_1_trains_only_the_zero_module() {
    // all raw weights tie at zero, the tie goes to index 0 and a one-entry
    // softmax has no gradient, so routing never moves
    let (backbone, g, cfg) = tiny_setup();
    let zoo = zoo_of(&backbone, g, &[54, 55]);
    let spec = TaskSpec::new(TaskFamily::ShapeCls, 2, 16, 4);
    let agg = AggregationConfig {
        top_k: TopK::K(1),
        ..Default::default()
    };
    let run = train_downstream(&backbone, &zoo, &spec, agg, &cfg, DownstreamOptions::default()).unwrap();
    let zoo_touched: Vec<&String> = run.metrics.touched.iter().filter(|n| n.starts_with("zoo.")).collect();
    assert!(!zoo_touched.is_empty());
    assert!(zoo_touched.iter().all(|n| n.starts_with("zoo.0.")));
    let table = run.state.export_weights(&run.zoo).unwrap();
    assert!(table.rows.iter().all(|r| r.weights[0] == 1.0));
}

#[test]
fn one_hot_state_matches_direct_module_evaluation() {
    let (backbone, g, _) = tiny_setup();
    let zoo = zoo_of(&backbone, g, &[61, 62, 63]);
    let spec = TaskSpec::new(TaskFamily::ShapeCls, 1, 16, 4);
    let head = random_head(&spec, g.embed_dim, 64);
    let data = generate(&spec, 100, Split::Val).unwrap();
    for strategy in [Strategy::Ensemble, Strategy::Reparam] {
        for i in 0..zoo.len() {
            let agg = AggregationConfig {
                strategy,
                ..Default::default()
            };
            let mut state = AggregationState::new(agg, &zoo, 0).unwrap();
            state.site_weights = Some(vec![NormalizedWeights::one_hot(zoo.len(), i); g.num_sites]);
            if strategy == Strategy::Reparam {
                state.merged = Some(vim_core::aggregation::reparameterize(&zoo, state.site_weights.as_ref().unwrap()).unwrap());
            }
            let report = evaluate(&backbone, &zoo, &state, &head, &data).unwrap();
            let direct = evaluate_module(&backbone, Some(zoo.module(i)), &head, &data).unwrap();
            assert!((report.metric - direct).abs() <= 1e-4, "{strategy} module {i}");
            // 100 samples in batches of at most 64
            assert_eq!(report.batches, 2);
            assert_eq!(report.module_forward_calls, 2 * g.num_sites);
        }
    }
}

#[test]
fn call_counts_separate_ensemble_from_reparam() {
    let (backbone, g, _) = tiny_setup();
    let zoo = zoo_of(&backbone, g, &[71, 72, 73]);
    let spec = TaskSpec::new(TaskFamily::ShapeCls, 1, 16, 4);
    let head = random_head(&spec, g.embed_dim, 74);
    let data = generate(&spec, 64, Split::Val).unwrap();
    let mut metrics = Vec::new();
    for strategy in [Strategy::Ensemble, Strategy::Reparam] {
        let agg = AggregationConfig {
            strategy,
            ..Default::default()
        };
        let mut state = AggregationState::new(agg, &zoo, 0).unwrap();
        assert!(matches!(evaluate(&backbone, &zoo, &state, &head, &data), Err(Error::NotFinalized)));
        state.finalize(&zoo, None).unwrap();
        let report = evaluate(&backbone, &zoo, &state, &head, &data).unwrap();
        let expected = match strategy {
            Strategy::Ensemble => zoo.len() * g.num_sites,
            Strategy::Reparam => g.num_sites,
        };
        assert_eq!(report.module_forward_calls, expected);
        metrics.push(report.metric);
    }
}

#[test]
fn pretrain_zero_steps_and_determinism() {
    let cfg = BackboneConfig::micro();
    let warm = TaskSpec::new(TaskFamily::RotationPretext, 0, cfg.image_size, cfg.patch_size);
    let zero = TrainConfig {
        steps: 0,
        seed: 9,
        ..Default::default()
    };
    let (b0, m0) = pretrain_backbone(cfg.clone(), &warm, &zero).unwrap();
    assert_eq!(b0.fingerprint(), Backbone::build(cfg.clone(), 9).unwrap().fingerprint());
    assert!(m0.loss_curve.is_empty());
    let short = TrainConfig {
        steps: 5,
        batch_size: 4,
        train_size: 16,
        val_size: 8,
        seed: 9,
        ..Default::default()
    };
    let (b1, m1) = pretrain_backbone(cfg.clone(), &warm, &short).unwrap();
    let (b2, _) = pretrain_backbone(cfg, &warm, &short).unwrap();
    assert_eq!(b1.fingerprint(), b2.fingerprint());
    assert_ne!(b1.fingerprint(), b0.fingerprint());
    assert!(m1.touched.iter().any(|n| n.starts_with("backbone.")));
    m1.audit_trainable().unwrap();
}

#[test]
fn divergence_aborts_with_diagnostics() {
    let cfg = BackboneConfig::micro();
    let warm = TaskSpec::new(TaskFamily::RotationPretext, 0, cfg.image_size, cfg.patch_size);
    let wild = TrainConfig {
        steps: 20,
        batch_size: 4,
        train_size: 16,
        val_size: 8,
        learning_rate: 1e30,
        optimizer: OptimizerKind::SgdMomentum,
        ..Default::default()
    };
    match pretrain_backbone(cfg, &warm, &wild) {
        Err(Error::Divergence { .. }) => {}
        other => panic!("expected divergence, got {:?}", other.map(|(_, m)| m.loss_curve)),
    }
}

#[test]
fn midstream_module_beats_the_linear_probe() {
    let cfg = BackboneConfig::tiny();
    let warm = TaskSpec::new(TaskFamily::RotationPretext, 0, cfg.image_size, cfg.patch_size);
    let pre = TrainConfig {
        steps: 300,
        train_size: 2048,
        ..Default::default()
    };
    let (backbone, pm) = pretrain_backbone(cfg.clone(), &warm, &pre).unwrap();
    assert!(pm.final_metric > 0.25);
    let g = ModuleGeometry::for_backbone(&cfg, 8.0).unwrap();
    let spec = TaskSpec::new(TaskFamily::ShapeCls, 0, cfg.image_size, cfg.patch_size);
    let mid = TrainConfig {
        steps: 800,
        learning_rate: 3e-3,
        train_size: 1024,
        ..Default::default()
    };
    let (_, probe) = train_linear_probe(&backbone, &spec, &mid).unwrap();
    let (_, _, m) = train_midstream(&backbone, &spec, g, 1, &mid).unwrap();
    assert!(probe.final_metric > 0.25, "probe {}", probe.final_metric);
    assert!(m.final_metric >= probe.final_metric + 0.05, "module {} probe {}", m.final_metric, probe.final_metric);
}

#[test]
#[ignore = "toy preset warm-up takes several minutes"]
fn toy_rotation_warm_up_exceeds_ninety_percent() {
    let cfg = BackboneConfig::toy();
    let warm = TaskSpec::new(TaskFamily::RotationPretext, 0, cfg.image_size, cfg.patch_size);
    let pre = TrainConfig {
        steps: 2000,
        train_size: 4096,
        ..Default::default()
    };
    let (_, m) = pretrain_backbone(cfg, &warm, &pre).unwrap();
    assert!(m.final_metric > 0.9, "{}", m.final_metric);
}
