use symseg::continual::{run_offline, StepPlan};
use symseg::dataset::{build_schedule, generate_frames, Preset, SceneSpec};
use symseg::metrics::modality_table;
use symseg::network::{load_checkpoint, save_checkpoint, ModalityAvailability};

fn two_class_data() -> (
    Vec<symseg::geometry::ProjectedFrame>,
    Vec<symseg::geometry::ProjectedFrame>,
) {
    let spec = SceneSpec {
        num_classes: 2,
        ..SceneSpec::default()
    };
    let train = generate_frames(
        &SceneSpec {
            seed: 300,
            ..spec.clone()
        },
        32,
    )
    .unwrap();
    let eval = generate_frames(&SceneSpec { seed: 900, ..spec }, 8).unwrap();
    (train, eval)
}

#[test]
fn offline_two_class_training_separates_the_classes() {
    let (train, eval) = two_class_data();
    let plan = StepPlan {
        iterations: 400,
        warmup: 40,
        ..StepPlan::new(build_schedule(&Preset::Offline, 2, &[1, 2]).unwrap(), 1)
    };
    let (model, report) = run_offline(&plan, &train, &eval).unwrap();
    let last = report.last();
    let (c, l) = (last.color.miou.unwrap(), last.lidar.miou.unwrap());
    assert!(c > 0.8 && l > 0.8, "rgb {c}, lidar {l}");
    let losses = &last.losses;
    let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = losses[losses.len() - 20..].iter().sum::<f64>() / 20.0;
    assert!(tail < 0.5 * head, "loss {head} -> {tail}");

    let table = modality_table(&model, &eval).unwrap();
    let both = table.row(ModalityAvailability::BOTH).unwrap();
    assert!((both.color_miou - c).abs() < 1e-12);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &model, [7; 32]).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.config_digest, [7; 32]);
    assert_eq!(back.model, model);
    assert_eq!(modality_table(&back.model, &eval).unwrap(), table);
}
