use wavereprog::backbone::{build_res12, Res12Config};
use wavereprog::degradations::{make_pairs, scenes::render_scene, DegradationSpec};
use wavereprog::losses::LossConfig;
use wavereprog::model::{ModelConfig, ReprogramModel};
use wavereprog::nn::InitMethod;
use wavereprog::output_transform::OutputTransformConfig;
use wavereprog::training::{train, FitOptions, TrainConfig};

#[test]
fn toy_training_reduces_loss() {
    let scenes: Vec<_> = (0..200).map(|i| render_scene(2000 + i, 64, 64)).collect();
    let spec = DegradationSpec::parse_short("noise:25", 0).unwrap();
    let pairs = make_pairs(&scenes, &[spec], 1).unwrap();
    let cfg = Res12Config {
        trunk_width: 4,
        n_blocks: 2,
        head_tail_widths: [3, 4, 4, 4, 3, 3],
        block_inner_width: 2,
        ..Default::default()
    };
    let bb = build_res12::<f32>(&cfg, InitMethod::KaimingUniform, 1).unwrap();
    let mc = ModelConfig {
        output: OutputTransformConfig {
            patch: 32,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut m = ReprogramModel::new(&mc, bb, 2).unwrap();
    let tc = TrainConfig {
        patch: 32,
        epochs: 30,
        seed: 3,
        ..Default::default()
    };
    let h = train(
        &mut m,
        &pairs,
        &tc,
        &LossConfig::default(),
        &FitOptions::default(),
    )
    .unwrap();
    let (first, last) = (h[0].mean_total, h.last().unwrap().mean_total);
    assert!(last <= 0.8 * first, "{first} -> {last}");
}
