use rcf::datagen::{gen_sequence, Scenario, SequenceParams};
use rcf::model::{stage1_step, train_stage1_logged, Adam, Dataset, ModelShape, SegModel, TrainConfig, TrainItem};
use rcf::refine::{train_stage2_logged, CrfParams};
use rcf::RcfError;

fn rigid_dataset(seed: u64, frames: usize) -> Dataset {
    let p = SequenceParams { frames, ..Default::default() };
    Dataset::from_sequences(&[gen_sequence(Scenario::Rigid, &p, seed).unwrap()])
}

#[test]
fn fixed_batch_loss_decreases() {
    let cfg = TrainConfig::default();
    let data = rigid_dataset(1, 9);
    let mut model = SegModel::new(ModelShape::from_config(&cfg, 64, 64), cfg.seed).unwrap();
    let grid = model.shape.mask_grid();
    let flows: Vec<_> = data.pairs.iter().map(|p| p.flow.resized(grid.0, grid.1)).collect();
    let items: Vec<TrainItem<'_>> = data
        .pairs
        .iter()
        .zip(&flows)
        .map(|(p, f)| TrainItem { frame_t: &p.frame_t, frame_t1: &p.frame_t1, flow: f, backward_flow: None, appearance_target: None })
        .collect();
    let n = model.num_params();
    let mut opt = Adam::new(n, cfg.lr, cfg.min_lr, cfg.poly_power, 20, cfg.weight_decay);
    let losses: Vec<f64> = (0..21).map(|_| stage1_step(&mut model, &items, &mut opt, cfg.lr).unwrap()).collect();
    assert!(losses[20] < losses[0], "{losses:?}");
}

#[test]
fn training_is_deterministic_and_logged() {
    let cfg = TrainConfig { steps_stage1: 4, steps_stage2: 4, batch: 2, feature_channels: 4, head_channels: 4, ..Default::default() };
    let data = rigid_dataset(2, 4);
    let (mut log_a, mut log_b) = (Vec::new(), Vec::new());
    let a = train_stage1_logged(&data, &cfg, &mut log_a).unwrap();
    let b = train_stage1_logged(&data, &cfg, &mut log_b).unwrap();
    assert_eq!(a.encode(), b.encode());
    assert_eq!(log_a.len(), 4);
    assert!(log_a.iter().all(|l| l.stage == "stage1" && l.loss.is_finite()));

    let mut ck = a;
    ck.object_channel = Some(0);
    let mut log = Vec::new();
    let out = train_stage2_logged(&ck, &data, &CrfParams::default(), &mut log).unwrap();
    assert_eq!(out.object_channel, Some(0));
    let stages: Vec<&str> = log.iter().map(|l| l.stage).collect();
    assert_eq!(stages, ["stage2_crf", "stage2_crf", "stage2_ncut", "stage2_ncut"]);
    assert!(log.iter().all(|l| l.appearance.is_finite() && l.appearance >= 0.0));
}

#[test]
fn stage_two_needs_an_object_channel() {
    let cfg = TrainConfig { steps_stage1: 1, steps_stage2: 2, batch: 1, feature_channels: 4, head_channels: 4, ..Default::default() };
    let data = rigid_dataset(3, 3);
    let ck = train_stage1_logged(&data, &cfg, &mut Vec::new()).unwrap();
    assert!(matches!(train_stage2_logged(&ck, &data, &CrfParams::default(), &mut Vec::new()), Err(RcfError::Config(_))));
}

#[test]
fn invalid_configs_are_rejected_before_training() {
    let data = rigid_dataset(4, 3);
    for cfg in [
        TrainConfig { channels: 0, ..Default::default() },
        TrainConfig { lambda: -1.0, ..Default::default() },
        TrainConfig { lr: f64::NAN, ..Default::default() },
    ] {
        assert!(matches!(train_stage1_logged(&data, &cfg, &mut Vec::new()), Err(RcfError::Config(_))), "{cfg:?}");
    }
}
