use sha2::{Digest, Sha256};
use vim_core::tasks::{generate, patch_labels, rotate90, sample, scene, Labels, ShapeKind, Split, TaskFamily, TaskSpec};

/// Shape membership written out again from the geometric descriptions:
/// `(u, v)` is the pixel-center offset divided by the radius.
fn inside(kind: ShapeKind, u: f64, v: f64) -> bool {
    let r2 = u.hypot(v).powi(2);
    match kind {
        ShapeKind::Disk => r2 <= 1.0,
        ShapeKind::Ring => r2 >= 0.3 && r2 <= 1.0,
        ShapeKind::Square => u.abs().max(v.abs()) <= 0.8,
        ShapeKind::Diamond => u.abs() + v.abs() <= 1.0,
        ShapeKind::HBar => u.abs() <= 0.95 && v.abs() <= 0.3,
        ShapeKind::Cross => {
            let (a, b) = (u.abs().min(v.abs()), u.abs().max(v.abs()));
            a <= 0.3 && b <= 0.9
        }
        ShapeKind::TriangleUp => {
            // apex (0, -0.9), base corners (±0.9, 0.8)
            let t = (v + 0.9) / 1.7;
            (0.0..=1.0).contains(&t) && u.abs() <= 0.9 * t
        }
        ShapeKind::TShape => {
            let bar = v >= -0.9 && v <= -0.5 && u.abs() <= 0.9;
            let stem = u.abs() <= 0.25 && v >= -0.9 && v <= 0.9;
            bar || stem
        }
    }
}

#[test]
fn patch_labels_match_an_independent_rasterizer() {
    for (size, patch) in [(32, 4), (16, 4), (24, 8)] {
        let spec = TaskSpec::new(TaskFamily::PatchSeg, 1, size, patch).with_seed(4).with_classes(3);
        let data = generate(&spec, 40, Split::Train).unwrap();
        let Labels::Patch(labels) = &data.labels else { panic!("patch labels") };
        let g = size / patch;
        let mut foreground = 0;
        for i in 0..40 {
            let sc = scene(&spec, Split::Train, i).unwrap();
            assert_eq!(patch_labels(&sc, patch), labels[i * g * g..(i + 1) * g * g]);
            let shape = &sc.shapes[0];
            for p in 0..g * g {
                let (py, px) = (p / g, p % g);
                let mut hits = 0;
                for y in py * patch..(py + 1) * patch {
                    for x in px * patch..(px + 1) * patch {
                        let u = (x as f64 + 0.5 - shape.cx) / shape.radius;
                        let v = (y as f64 + 0.5 - shape.cy) / shape.radius;
                        hits += inside(shape.kind, u, v) as usize;
                    }
                }
                let want = if hits as f64 > 0.5 * (patch * patch) as f64 { 1 + shape.class } else { 0 };
                assert_eq!(labels[i * g * g + p], want, "sample {i} patch {p}");
                foreground += (want > 0) as usize;
            }
        }
        assert!(foreground > 0);
    }
}

#[test]
fn rotation_labels_are_undone_by_inverse_rotation() {
    let spec = TaskSpec::new(TaskFamily::RotationPretext, 0, 16, 4).with_seed(2);
    let mut seen = [false; 4];
    for i in 0..32 {
        let (img, labels) = sample(&spec, Split::Val, i).unwrap();
        let Labels::Class(k) = labels else { panic!() };
        let k = k[0];
        seen[k] = true;
        let sc = scene(&spec, Split::Val, i).unwrap();
        assert_eq!(rotate90(&img, (4 - k) % 4), sc.render());
        assert_eq!(rotate90(&sc.render(), k), img);
    }
    assert!(seen.iter().all(|&s| s));
}

#[test]
fn quarter_turn_moves_pixels_counter_clockwise() {
    // top-right pixel goes to the top-left corner
    let mut img = vim_core::Tensor::zeros(vec![1, 3, 3]);
    img.data_mut()[2] = 1.0;
    let r = rotate90(&img, 1);
    assert_eq!(r.data()[0], 1.0);
    assert_eq!(rotate90(&img, 4), img);
}

#[test]
fn generated_bytes_are_pinned() {
    let spec = TaskSpec::new(TaskFamily::ShapeCls, 0, 16, 4).with_seed(1);
    let data = generate(&spec, 4, Split::Train).unwrap();
    let mut h = Sha256::new();
    for v in data.images.data() {
        h.update(v.to_le_bytes());
    }
    let digest = hex::encode(h.finalize());
    assert_eq!(digest, include_str!("data/shape_cls_v0_16px_seed1.sha256").trim());
}

#[test]
fn every_family_generates() {
    for fam in TaskFamily::ALL {
        for variant in 0..4 {
            let spec = TaskSpec::new(fam, variant, 16, 4);
            let d = generate(&spec, 6, Split::Train).unwrap();
            assert_eq!(d.len(), 6);
            assert!(d.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
            if let Labels::Scalar(y) = &d.labels {
                assert!(y.iter().all(|&c| c > 0.0 && c <= 1.0));
            }
        }
    }
}
