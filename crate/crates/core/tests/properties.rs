//! Property suites: projection and PGD invariants, attack reduction
//! identities, metric invariances, shape contracts and data purity.

use advseg_core::attacks::{self, AttackSpec, Init, LinearSurrogate, LossGradient, Norm};
use advseg_core::data::{self, LabeledDataset, Mask, SceneSpec, SplitSpec, Split, NUM_CLASSES};
use advseg_core::exec::Execution;
use advseg_core::metrics::{Confusion, ZeroUnion};
use advseg_core::nn::{Architecture, ModelConfig, SegModel};
use advseg_core::{Result, Tensor};
use proptest::prelude::*;

/// Loss `Σ w (x - c)^2`: gradient varies with the input and vanishes at `c`.
struct Quadratic {
    weights: Tensor,
    centre: Tensor,
}

impl LossGradient for Quadratic {
    fn loss_and_grad(&self, image: &Tensor, _mask: &Mask) -> Result<(f64, Tensor)> {
        let d = image.zip_map(&self.centre, |x, c| x - c)?;
        let loss = d.zip_map(&self.weights, |d, w| w * d * d)?.sum();
        Ok((loss, d.zip_map(&self.weights, |d, w| 2.0 * w * d)?))
    }
}

fn tensor(shape: Vec<usize>, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(lo..hi, n).prop_map(move |v| Tensor::new(shape.clone(), v).unwrap())
}

fn norm() -> impl Strategy<Value = Norm> {
    prop_oneof![Just(Norm::L2), Just(Norm::Linf)]
}

fn spec() -> impl Strategy<Value = AttackSpec> {
    (norm(), 1e-3f64..2.0, 1e-3f64..1.0, 1usize..8, any::<bool>(), any::<u64>()).prop_map(|(norm, eps, alpha, steps, random, seed)| AttackSpec {
        norm,
        epsilon: eps,
        alpha,
        steps,
        init: if random { Init::RandomInBall } else { Init::Zero },
        seed,
    })
}

/// Image in [0,1] with some coordinates pinned to the box edges.
fn image(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    tensor(shape, -0.3, 1.3).prop_map(|t| t.map(|v| v.clamp(0.0, 1.0)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn pgd_stays_in_ball_and_box_after_every_step(
        spec in spec(),
        x in image(vec![3, 3, 4]),
        w in tensor(vec![3, 3, 4], -2.0, 2.0),
        c in tensor(vec![3, 3, 4], -0.5, 1.5),
        quadratic in any::<bool>(),
    ) {
        let mask = Mask::filled(3, 4, 0);
        let model: Box<dyn LossGradient> = if quadratic {
            Box::new(Quadratic { weights: w, centre: c })
        } else {
            Box::new(LinearSurrogate { weights: w })
        };
        let mut steps = 0;
        let mut violation = None;
        attacks::pgd_observed(model.as_ref(), &x, &mask, &spec, 0, &mut |it, delta, adv| {
            steps += 1;
            let n = spec.norm.of(delta);
            let off = adv.zip_map(&x, |a, x| a - x).unwrap().zip_map(delta, |a, d| a - d).unwrap().linf_norm();
            if n > spec.epsilon + 1e-9 || adv.data().iter().any(|v| !(0.0..=1.0).contains(v)) || off != 0.0 {
                violation = Some((it, n));
            }
        }).unwrap();
        prop_assert_eq!(steps, spec.steps);
        prop_assert!(violation.is_none(), "iteration {:?} left the feasible set (eps {})", violation, spec.epsilon);
    }

    #[test]
    fn projection_lands_in_ball_and_fixes_interior(
        d in tensor(vec![2, 5], -3.0, 3.0),
        norm in norm(),
        eps in 1e-3f64..4.0,
    ) {
        let p = attacks::project(&d, norm, eps);
        prop_assert!(norm.of(&p) <= eps + 1e-9);
        let again = attacks::project(&p, norm, eps);
        prop_assert!(again.zip_map(&p, |a, b| a - b).unwrap().linf_norm() <= 1e-12 * eps.max(1.0));
        if norm.of(&d) <= eps {
            prop_assert_eq!(&p, &d);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn fgsm_is_one_step_pgd_and_bim_is_zero_init_pgd(
        x in image(vec![3, 2, 3]),
        w in tensor(vec![3, 2, 3], -2.0, 2.0),
        c in tensor(vec![3, 2, 3], -0.5, 1.5),
        eps in 1e-3f64..0.5,
        alpha in 1e-3f64..0.2,
        steps in 1usize..12,
    ) {
        let mask = Mask::filled(2, 3, 0);
        let m = Quadratic { weights: w, centre: c };
        let one = AttackSpec::new(Norm::Linf, eps, eps, 1);
        let f = attacks::fgsm_single(&m, &x, &mask, eps).unwrap();
        let p = attacks::pgd_single(&m, &x, &mask, &one, 0).unwrap();
        prop_assert!(f.data().iter().zip(p.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let many = AttackSpec::new(Norm::Linf, eps, alpha, steps);
        let b = attacks::bim_single(&m, &x, &mask, eps, alpha, steps).unwrap();
        let p = attacks::pgd_single(&m, &x, &mask, &many, 0).unwrap();
        prop_assert!(b.data().iter().zip(p.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn miou_invariant_to_class_relabelling_and_pixel_order(
        pairs in prop::collection::vec((0u8..5, 0u8..5), 1..60),
        perm in Just((0u8..5).collect::<Vec<u8>>()).prop_shuffle(),
        order in any::<u64>(),
    ) {
        let n = pairs.len();
        let score = |pairs: &[(u8, u8)]| {
            let pred = Mask::new(1, n, pairs.iter().map(|p| p.0).collect()).unwrap();
            let truth = Mask::new(1, n, pairs.iter().map(|p| p.1).collect()).unwrap();
            let mut cm = Confusion::new(5);
            cm.add(&pred, &truth).unwrap();
            (cm.mean_iou(ZeroUnion::Exclude), cm.pixel_accuracy())
        };
        let base = score(&pairs);
        let relabelled: Vec<(u8, u8)> = pairs.iter().map(|&(p, t)| (perm[p as usize], perm[t as usize])).collect();
        let r = score(&relabelled);
        prop_assert!((base.0 - r.0).abs() < 1e-12 && base.1 == r.1);
        let mut shuffled = pairs.clone();
        let k = (order % n as u64) as usize;
        shuffled.rotate_left(k);
        shuffled.reverse();
        let s = score(&shuffled);
        prop_assert!((base.0 - s.0).abs() < 1e-12 && base.1 == s.1);
        prop_assert!((0.0..=1.0).contains(&base.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_scenes_are_pure_and_valid(seed in any::<u64>(), index in 0u64..10_000, trail in any::<bool>()) {
        let spec = if trail { SceneSpec::trail(seed) } else { SceneSpec::forest(seed) }.with_size(32);
        let (img, mask) = data::generate_scene(&spec, index).unwrap();
        let (img2, mask2) = data::generate_scene(&spec, index).unwrap();
        prop_assert_eq!(&img, &img2);
        prop_assert_eq!(&mask, &mask2);
        prop_assert_eq!(img.shape(), &[3, 32, 32]);
        prop_assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(mask.labels().iter().all(|&l| (l as usize) < NUM_CLASSES));
    }

    #[test]
    fn augmentation_is_seeded_and_keeps_labels(seed in any::<u64>(), index in 0u64..1000) {
        let (img, mask) = data::generate_scene(&SceneSpec::forest(3).with_size(16), index).unwrap();
        let (a, m) = data::augment(&img, &mask, seed);
        let (a2, m2) = data::augment(&img, &mask, seed);
        prop_assert_eq!(&a, &a2);
        prop_assert_eq!(&m, &m2);
        prop_assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(m.histogram(NUM_CLASSES), mask.histogram(NUM_CLASSES));
        prop_assert!(m == mask || m == data::hflip_mask(&mask));
    }
}

#[test]
fn model_output_shapes_follow_input_size() {
    for arch in [Architecture::UNet, Architecture::LinkNet] {
        let mut cfg = ModelConfig::new(arch);
        cfg.base_channels = 4;
        let model = SegModel::new(&cfg).unwrap();
        for size in [32usize, 64, 128] {
            for (h, w) in [(size, size), (size, 32), (32, size)] {
                let x = Tensor::full(&[3, h, w], 0.5);
                assert_eq!(model.logits(&x).unwrap().shape(), &[1, NUM_CLASSES, h, w], "{arch} {h}x{w}");
                let batch = Tensor::full(&[2, 3, h, w], 0.5);
                assert_eq!(model.logits(&batch).unwrap().shape(), &[2, NUM_CLASSES, h, w]);
                let mask = model.predict(&x).unwrap();
                assert_eq!((mask.height(), mask.width()), (h, w));
            }
        }
        assert!(model.logits(&Tensor::full(&[3, 36, 32], 0.5)).is_err());
        assert!(model.logits(&Tensor::full(&[1, 32, 32], 0.5)).is_err());
    }
}

#[test]
fn merging_and_splitting_reported_dataset_sizes() {
    let a = data::generate_dataset(&SceneSpec::forest(1).with_size(16), 1076, Execution::default()).unwrap();
    let b = data::generate_dataset(&SceneSpec::trail(2).with_size(16), 366, Execution::default()).unwrap();
    let merged = data::merge_datasets(&a, &b).unwrap();
    assert_eq!(merged.len(), 1442);
    let split = data::split_dataset(
        &merged,
        SplitSpec::Counts {
            train: 794,
            val: 360,
            test: 288,
        },
        5,
    )
    .unwrap();
    assert_eq!(split.indices(Split::Train).len(), 794);
    assert_eq!(split.indices(Split::Val).len(), 360);
    assert_eq!(split.indices(Split::Test).len(), 288);
    let mut seen: Vec<&Tensor> = split.images.iter().collect();
    seen.sort_by(|x, y| x.data().partial_cmp(y.data()).unwrap());
    let mut orig: Vec<&Tensor> = merged.images.iter().collect();
    orig.sort_by(|x, y| x.data().partial_cmp(y.data()).unwrap());
    assert_eq!(seen, orig, "split must be a permutation of the merged set");
}

#[test]
fn split_is_seeded() {
    let d = data::generate_dataset(&SceneSpec::forest(4).with_size(16), 30, Execution::default()).unwrap();
    let spec = SplitSpec::Ratios {
        train: 0.6,
        val: 0.2,
        test: 0.2,
    };
    let a = data::split_dataset(&d, spec, 1).unwrap();
    let b = data::split_dataset(&d, spec, 1).unwrap();
    let c = data::split_dataset(&d, spec, 2).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.splits, c.splits);
    assert_eq!(a.indices(Split::Train).len(), 18);
    let _: &LabeledDataset = &a;
}
