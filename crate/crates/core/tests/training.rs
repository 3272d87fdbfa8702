use nettrim::datagen::{accuracy, gen_spirals, predict, train_with_history, SpiralConfig, TrainConfig};

#[test]
fn spiral_net_trains_to_high_accuracy() {
    let (x, labels) = gen_spirals(&SpiralConfig { points_per_class: 200, seed: 0, ..Default::default() }).unwrap();
    let out = train_with_history(&x, &labels, &TrainConfig::default()).unwrap();
    let acc = accuracy(&predict(&out.net, &x).unwrap(), &labels);
    assert!(acc >= 0.9, "{acc}");
}
