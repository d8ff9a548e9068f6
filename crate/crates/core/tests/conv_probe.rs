//! Manual convergence probe.
use std::time::Instant;
use phactor::config::{ModelConfig, TrainConfig, TrainMode};
use phactor::model::FactorModel;
use phactor::phantom::{generate_dataset, make_split, PhantomConfig};
use phactor::training::{assemble, fit, Trainer};

#[test]
#[ignore]
fn convergence_probe() {
    let phantom = PhantomConfig { image_size: 64, num_subjects: 20, slices_per_subject: 3, phases_per_subject: 10, seed: 1, ..PhantomConfig::default() };
    let subjects = generate_dataset(&phantom).unwrap();
    let ids: Vec<u32> = subjects.iter().map(|s| s.id).collect();
    let plan = make_split(&ids, 0).unwrap();
    let (_, data) = assemble(&subjects, &plan, 1.0, 300, 1).unwrap();
    let cfg = ModelConfig { height: 64, width: 64, channels: 8, latent_dims: 8, num_classes: 3, encoder_depth: 3, base_filters: 8, film_stages: 4, seed: 1 };
    let tcfg = TrainConfig { mode: TrainMode::Sdnet, max_epochs: 10, patience: 10, seed: 1, ..TrainConfig::default() };
    let model = FactorModel::new(cfg).unwrap();
    let mut trainer = Trainer::new(model, tcfg).unwrap();
    let t = Instant::now();
    let result = fit(&mut trainer, &data, None).unwrap();
    println!("10 epochs in {:?}: best val dice loss {:.4} at epoch {}", t.elapsed(), result.best_val_dice_loss, result.best_epoch);
    let last: Vec<&str> = result.loss_csv.lines().rev().take(3).collect();
    println!("last rows: {last:#?}");
}
