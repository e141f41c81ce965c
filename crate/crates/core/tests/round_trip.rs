use dfar::checkpoint;
use dfar::config::TrainConfig;
use dfar::data::{generate_synthetic_dataset, load_dataset, Sequence, SyntheticSpec};
use dfar::model::Model;
use dfar::pipeline::{infer_dataset, write_detections, InferOptions};
use dfar::train::Trainer;

fn detections_text(model: &Model<f32>, data: &[Sequence]) -> Vec<u8> {
    let opts = InferOptions { input_size: 64, conf_thresh: 0.0, nms_iou: 0.65 };
    let dets = infer_dataset(model, data, &opts, &mut Vec::new()).unwrap();
    let mut out = Vec::new();
    write_detections(&dets, &mut out).unwrap();
    out
}

#[test]
fn trained_checkpoint_reloads_to_identical_detections() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        num_sequences: 2,
        num_test_sequences: 1,
        frames_per_sequence: 6,
        image_size: 64,
        ..SyntheticSpec::default()
    };
    generate_synthetic_dataset(&spec, tmp.path()).unwrap();
    let train = load_dataset(&tmp.path().join("train")).unwrap();
    let test = load_dataset(&tmp.path().join("test")).unwrap();

    let config = TrainConfig {
        input_size: 64,
        batch_size: 1,
        max_iterations: Some(2),
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::<f32>::new(config).unwrap();
    let mut log = Vec::new();
    trainer.train(&train, &tmp.path().join("run"), &mut log).unwrap();
    assert_eq!(trainer.iteration, 2);
    assert_eq!(String::from_utf8(log).unwrap().lines().count(), 2);

    let path = tmp.path().join("model.ckpt");
    trainer.save(&path).unwrap();
    let restored = checkpoint::load::<f32>(&path).unwrap();
    assert_eq!(restored.iteration, 2);
    assert_eq!(restored.config, trainer.config);

    let before = detections_text(&trainer.model, &test);
    assert!(!before.is_empty());
    assert_eq!(before, detections_text(&restored.model, &test));
}
