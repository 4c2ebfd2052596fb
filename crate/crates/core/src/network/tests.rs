use super::*;
use crate::dataset::{generate_scene, SceneSpec};
use crate::diffcore::finite_difference_check_subset;
use crate::losses::seg_ce;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WIDTHS: [usize; LEVELS] = [4, 4, 6, 6];

fn small_model(classes: Vec<ClassId>, fusion: FusionConfig) -> Model {
    Model::new(ModelConfig::new(WIDTHS, classes, fusion, 7)).unwrap()
}

fn frame(h: usize, w: usize, seed: u64) -> ProjectedFrame {
    let spec = SceneSpec {
        seed,
        height: h,
        width: w,
        density: h * w / 2,
        ..SceneSpec::default()
    };
    generate_scene(&spec).unwrap()
}

fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> DiffTensor {
    DiffTensor::new(
        shape.to_vec(),
        (0..shape.iter().product()).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )
    .unwrap()
}

#[test]
fn fuse_examples() {
    let mut g = Graph::new();
    let a = g.constant(vec![2], vec![2.0, 4.0]).unwrap();
    let b = g.constant(vec![2], vec![0.0, 2.0]).unwrap();
    let m = fuse(&mut g, a, b, 0.5).unwrap();
    assert_eq!(g.value(m), &[1.0, 3.0]);
    assert_eq!(fuse(&mut g, a, b, 1.0).unwrap(), a);
    assert_eq!(fuse(&mut g, a, b, 0.0).unwrap(), b);
    let c = g.constant(vec![3], vec![0.0; 3]).unwrap();
    assert!(fuse(&mut g, a, c, 0.5).is_err());
    assert!(fuse(&mut g, a, b, 1.5).is_err());
}

#[test]
fn outputs_are_distributions_with_expected_pyramid() {
    let model = small_model(vec![1, 2, 3, 4], FusionConfig::default());
    let f = frame(16, 12, 1);
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let out = model.forward(&mut g, &p, &f, ModalityAvailability::BOTH).unwrap();
    for (i, &v) in out.color_pyramid.iter().enumerate() {
        let (h, w) = (16usize.div_ceil(1 << (i + 1)), 12usize.div_ceil(1 << (i + 1)));
        assert_eq!(g.shape(v), &[WIDTHS[i], h, w]);
        assert_eq!(g.shape(out.lidar_pyramid[i]), g.shape(v));
    }
    for probs in [out.color_probs, out.lidar_probs] {
        assert_eq!(g.shape(probs), &[4, 16, 12]);
        let v = g.value(probs);
        for px in 0..16 * 12 {
            let s: f64 = (0..4).map(|k| v[k * 192 + px]).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn rejects_no_modality_and_bad_config() {
    let model = small_model(vec![1, 2], FusionConfig::default());
    let none = ModalityAvailability {
        color_present: false,
        lidar_present: false,
    };
    assert!(model.predict(&frame(8, 8, 0), none).is_err());
    let mut cfg = model.config().clone();
    cfg.lidar.widths[2] = 5;
    assert!(Model::new(cfg).is_err());
    assert!(Model::new(ModelConfig::new(WIDTHS, vec![1], FusionConfig::default(), 0)).is_err());
    assert!(Model::new(ModelConfig::new(WIDTHS, vec![0, 1], FusionConfig::default(), 0)).is_err());
}

fn symmetric_config(r: f64) -> ModelConfig {
    let branch = BranchConfig {
        in_channels: 4,
        widths: WIDTHS,
        input_scale: vec![1.0, 0.5, 2.0, 1.0],
    };
    ModelConfig {
        color: branch.clone(),
        lidar: branch,
        fusion: FusionConfig {
            r,
            ..FusionConfig::default()
        },
        classes: vec![1, 2, 3],
        init_seed: 11,
        init_gain: DEFAULT_INIT_GAIN,
    }
}

fn run_raw(
    model: &Model,
    a: &DiffTensor,
    b: &DiffTensor,
) -> (DiffTensor, DiffTensor, Vec<DiffTensor>, Vec<DiffTensor>) {
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let (av, bv) = (g.leaf(a), g.leaf(b));
    let out = model
        .forward_inputs(&mut g, &p, av, bv, ModalityAvailability::BOTH)
        .unwrap();
    (
        g.tensor(out.color_probs),
        g.tensor(out.lidar_probs),
        out.color_pyramid.iter().map(|&v| g.tensor(v)).collect(),
        out.lidar_pyramid.iter().map(|&v| g.tensor(v)).collect(),
    )
}

#[test]
fn swapping_branches_swaps_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for r in [0.5, 0.25, 0.75] {
        let model = Model::new(symmetric_config(r)).unwrap();
        let mut swapped = Model::new(symmetric_config(1.0 - r)).unwrap();
        swapped.color = model.lidar.clone();
        swapped.lidar = model.color.clone();
        let (a, b) = (random_tensor(&mut rng, &[4, 8, 8]), random_tensor(&mut rng, &[4, 8, 8]));
        let (c1, l1, pc1, pl1) = run_raw(&model, &a, &b);
        let (c2, l2, pc2, pl2) = run_raw(&swapped, &b, &a);
        assert_eq!(c1, l2);
        assert_eq!(l1, c2);
        assert_eq!(pc1, pl2);
        assert_eq!(pl1, pc2);
    }
}

#[test]
fn identical_branches_and_inputs_give_identical_outputs() {
    let mut model = Model::new(symmetric_config(0.5)).unwrap();
    model.lidar = model.color.clone();
    let a = random_tensor(&mut ChaCha8Rng::seed_from_u64(5), &[4, 8, 8]);
    let (c, l, pc, pl) = run_raw(&model, &a, &a);
    assert_eq!(c, l);
    assert_eq!(pc, pl);
}

#[test]
fn absent_modality_has_no_influence() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for write_back in [true, false] {
        let model = small_model(
            vec![1, 2, 3],
            FusionConfig {
                write_back,
                ..FusionConfig::default()
            },
        );
        let f = frame(8, 8, 2);
        for avail in [ModalityAvailability::COLOR_ONLY, ModalityAvailability::LIDAR_ONLY] {
            let base = model.predict(&f, avail).unwrap();
            let mut g = f.clone();
            if avail.color_present {
                g.lidar = random_tensor(&mut rng, &[5, 8, 8]);
            } else {
                g.color = random_tensor(&mut rng, &[3, 8, 8]);
            }
            assert_eq!(model.predict(&g, avail).unwrap(), base);
            let mut g2 = Graph::new();
            let p = model.bind(&mut g2, false);
            let junk_c = g2.leaf(&random_tensor(&mut rng, &[3, 8, 8]));
            let junk_l = g2.leaf(&random_tensor(&mut rng, &[5, 8, 8]));
            let real_c = g2.leaf(&f.color);
            let real_l = g2.leaf(&f.lidar);
            let (ci, li) = if avail.color_present {
                (real_c, junk_l)
            } else {
                (junk_c, real_l)
            };
            let out = model.forward_inputs(&mut g2, &p, ci, li, avail).unwrap();
            assert_eq!(g2.tensor(out.color_probs), base.color);
            assert_eq!(g2.tensor(out.lidar_probs), base.lidar);
        }
    }
}

#[test]
fn loss_on_one_branch_reaches_both() {
    let model = small_model(vec![1, 2, 3, 4], FusionConfig::default());
    let f = frame(8, 8, 3);
    let mut g = Graph::new();
    let p = model.bind(&mut g, true);
    let out = model.forward(&mut g, &p, &f, ModalityAvailability::BOTH).unwrap();
    let loss = seg_ce(&mut g, out.color_probs, &f.labels, model.classes()).unwrap();
    g.backward(loss).unwrap();
    for (group, first) in [(ParamGroup::Color, 0usize), (ParamGroup::Lidar, 16)] {
        assert_eq!(model.param_groups()[first], group);
        let grad = g.grad(p.vars()[first]).expect("gradient reaches first encoder layer");
        assert!(grad.iter().any(|&x| x != 0.0), "{group:?}");
    }
}

#[test]
fn prediction_is_deterministic() {
    let f = frame(8, 8, 9);
    let a = small_model(vec![1, 2, 3], FusionConfig::default())
        .predict(&f, ModalityAvailability::BOTH)
        .unwrap();
    let b = small_model(vec![1, 2, 3], FusionConfig::default())
        .predict(&f, ModalityAvailability::BOTH)
        .unwrap();
    assert_eq!(a, b);
}

fn logits(model: &Model, f: &ProjectedFrame) -> (DiffTensor, DiffTensor) {
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let out = model.forward(&mut g, &p, f, ModalityAvailability::BOTH).unwrap();
    (g.tensor(out.color_logits), g.tensor(out.lidar_logits))
}

#[test]
fn extending_classifier_preserves_old_logits() {
    let model = small_model((1..=6).collect(), FusionConfig::default());
    let f = frame(8, 8, 4);
    let (c6, l6) = logits(&model, &f);
    let grown = model.extend_classifier(&(1..=7).collect::<Vec<_>>()).unwrap();
    assert_eq!(grown.num_classes(), 7);
    let (c7, l7) = logits(&grown, &f);
    let n = 64;
    for (old, new) in [(&c6, &c7), (&l6, &l7)] {
        for (a, b) in old.values().iter().zip(&new.values()[..6 * n]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    let probs = grown.predict(&f, ModalityAvailability::BOTH).unwrap();
    for px in 0..n {
        let s: f64 = (0..7).map(|k| probs.color.values()[k * n + px]).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
    assert_eq!(model.extend_classifier(model.classes()).unwrap(), model);
    assert!(model.extend_classifier(&[1, 2, 3]).is_err());
    assert!(model.extend_classifier(&[2, 1, 3, 4, 5, 6, 7]).is_err());
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = small_model(
        vec![3, 1, 2],
        FusionConfig {
            r: 0.3,
            write_back: false,
            learnable: true,
        },
    );
    let digest = [7u8; 32];
    save_checkpoint(&path, &model, digest).unwrap();
    let first = std::fs::read(&path).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.model, model);
    assert_eq!(ck.config_digest, digest);
    save_checkpoint(&path, &ck.model, ck.config_digest).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);

    assert!(matches!(
        Checkpoint::from_bytes(&first[..first.len() - 3], &path),
        Err(Error::Format { .. })
    ));
    let mut bad = first.clone();
    bad[0] = b'X';
    assert!(matches!(
        Checkpoint::from_bytes(&bad, &path),
        Err(Error::Format { offset: 0, .. })
    ));
}

#[test]
fn learnable_fusion_receives_gradient() {
    let model = small_model(
        vec![1, 2, 3, 4],
        FusionConfig {
            learnable: true,
            ..FusionConfig::default()
        },
    );
    let f = frame(8, 8, 5);
    let mut g = Graph::new();
    let p = model.bind(&mut g, true);
    let out = model.forward(&mut g, &p, &f, ModalityAvailability::BOTH).unwrap();
    let loss = seg_ce(&mut g, out.lidar_probs, &f.labels, model.classes()).unwrap();
    g.backward(loss).unwrap();
    let grad = g.grad(*p.vars().last().unwrap()).unwrap();
    assert!(grad.iter().all(|x| x.is_finite()) && grad.iter().any(|&x| x != 0.0));
    let fixed = small_model(vec![1, 2, 3, 4], FusionConfig::default());
    assert_eq!(
        model
            .predict(&f, ModalityAvailability::COLOR_ONLY)
            .unwrap()
            .color
            .shape(),
        fixed
            .predict(&f, ModalityAvailability::COLOR_ONLY)
            .unwrap()
            .color
            .shape()
    );
}

#[test]
fn whole_network_gradient_matches_finite_differences() {
    let model = small_model(vec![1, 2, 3, 4], FusionConfig::default());
    let f = frame(8, 8, 6);
    let theta = model.flat_params();
    let total = theta.numel();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let probe: Vec<usize> = (0..200).map(|_| rng.gen_range(0..total)).collect();
    let objective = |g: &mut Graph, th: Var| {
        let p = model.bind_flat(g, th)?;
        let out = model.forward(g, &p, &f, ModalityAvailability::BOTH)?;
        let a = seg_ce(g, out.color_probs, &f.labels, model.classes())?;
        let b = seg_ce(g, out.lidar_probs, &f.labels, model.classes())?;
        g.add(a, b)
    };
    let report = finite_difference_check_subset(objective, &theta, 1e-5, Some(&probe)).unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}
