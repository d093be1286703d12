//! Grid-consistency of the adapter delta.

use proptest::prelude::*;
use vim_core::backbone::InsertionSite;
use vim_core::vim_module::{ModuleGeometry, ModuleKind, ViMModule};
use vim_core::Tensor;

fn module(d: usize, h: usize, values: &[f32]) -> ViMModule {
    let mut m = ViMModule::init(ModuleGeometry::new(d, h, 2).unwrap(), 0, ModuleKind::Standard).unwrap();
    let mut it = values.iter().cycle();
    for t in m.params_mut() {
        for v in t.data_mut() {
            *v = *it.next().unwrap();
        }
    }
    m
}

/// Reorders patch rows (tokens 1..) so that new patch `i` is old patch `perm[i]`.
fn permute_patches(x: &Tensor<f32>, perm: &[usize]) -> Tensor<f32> {
    let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = x.clone();
    for bi in 0..b {
        for (i, &p) in perm.iter().enumerate() {
            let src = (bi * t + 1 + p) * d;
            let dst = (bi * t + 1 + i) * d;
            out.data_mut()[dst..dst + d].copy_from_slice(&x.data()[src..src + d]);
        }
    }
    out
}

/// Kernel taps remapped so that the convolution commutes with a grid symmetry.
fn transform_kernel(m: &mut ViMModule, site: usize, tap_map: impl Fn(usize, usize) -> (usize, usize)) {
    let idx = site * 6 + 2;
    let h = m.geometry.squeeze_dim;
    let old = m.params()[idx].clone();
    let dst = m.params_mut()[idx].data_mut();
    for ky in 0..3 {
        for kx in 0..3 {
            let (ny, nx) = tap_map(ky, kx);
            let (s, t) = ((ky * 3 + kx) * h * h, (ny * 3 + nx) * h * h);
            dst[t..t + h * h].copy_from_slice(&old.data()[s..s + h * h]);
        }
    }
}

fn assert_close(a: &Tensor<f32>, b: &Tensor<f32>) {
    assert_eq!(a.shape(), b.shape());
    let diff = a.max_abs_diff(b);
    assert!(diff < 1e-5, "max abs diff {diff}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn grid_symmetries_permute_delta_rows(
        gh in 1usize..5,
        gw in 1usize..5,
        values in prop::collection::vec(-0.6f32..0.6, 97),
        inputs in prop::collection::vec(-1.0f32..1.0, 61),
        sym in 0usize..3,
    ) {
        let (d, h) = (6, 3);
        let site = InsertionSite::from_index(1);
        let t = 1 + gh * gw;
        let mut it = inputs.iter().cycle();
        let x = Tensor::from_fn(vec![2, t, d], |_| *it.next().unwrap());
        let m = module(d, h, &values);
        let base = m.forward(site, &x, (gh, gw)).unwrap();

        // new grid position (y, x) reads old position via `src`
        let (grid, perm, tap): ((usize, usize), Vec<usize>, Box<dyn Fn(usize, usize) -> (usize, usize)>) = match sym {
            0 => ((gh, gw), (0..gh * gw).map(|i| (i / gw) * gw + (gw - 1 - i % gw)).collect(), Box::new(|y, x| (y, 2 - x))),
            1 => ((gh, gw), (0..gh * gw).map(|i| (gh - 1 - i / gw) * gw + i % gw).collect(), Box::new(|y, x| (2 - y, x))),
            _ => ((gw, gh), (0..gh * gw).map(|i| (i % gh) * gw + i / gh).collect(), Box::new(|y, x| (x, y))),
        };
        let mut mt = m.clone();
        transform_kernel(&mut mt, 1, tap);
        let got = mt.forward(site, &permute_patches(&x, &perm), grid).unwrap();
        assert_close(&got, &permute_patches(&base, &perm));
    }

    #[test]
    fn any_permutation_commutes_with_center_only_kernel(
        values in prop::collection::vec(-0.6f32..0.6, 97),
        keys in prop::collection::vec(0u32..1000, 9),
    ) {
        let (d, h, g) = (6, 3, 3);
        let site = InsertionSite::from_index(0);
        let mut m = module(d, h, &values);
        let mid = m.params_mut()[2].data_mut();
        for tap in (0..9).filter(|&k| k != 4) {
            mid[tap * h * h..(tap + 1) * h * h].fill(0.0);
        }
        let mut perm: Vec<usize> = (0..g * g).collect();
        perm.sort_by_key(|&i| (keys[i], i));
        let x = Tensor::from_fn(vec![1, 1 + g * g, d], |i| ((i * 37 % 17) as f32 - 8.0) / 8.0);
        let base = m.forward(site, &x, (g, g)).unwrap();
        let got = m.forward(site, &permute_patches(&x, &perm), (g, g)).unwrap();
        assert_close(&got, &permute_patches(&base, &perm));
    }
}
