//! Manual throughput probe: `cargo test -p phactor --test throughput -- --ignored --nocapture`

use std::time::Instant;

use phactor::config::{ModelConfig, TrainConfig, TrainMode};
use phactor::model::FactorModel;
use phactor::phantom::{generate_dataset, make_split, PhantomConfig};
use phactor::training::{assemble, fit, Trainer};

#[test]
#[ignore]
fn step_timing_desk_scale() {
    let phantom = PhantomConfig {
        image_size: 64,
        num_subjects: 20,
        slices_per_subject: 3,
        phases_per_subject: 10,
        seed: 1,
        ..PhantomConfig::default()
    };
    let t0 = Instant::now();
    let subjects = generate_dataset(&phantom).unwrap();
    println!("generate 20 subjects (600 images): {:?}", t0.elapsed());

    let ids: Vec<u32> = subjects.iter().map(|s| s.id).collect();
    let plan = make_split(&ids, 0).unwrap();
    let (_, data) = assemble(&subjects, &plan, 1.0, 300, 1).unwrap();
    println!(
        "labeled={} unlabeled={} val={}",
        data.labeled.len(),
        data.unlabeled.len(),
        data.validation.len()
    );

    for base in [8usize, 12, 16] {
        let cfg = ModelConfig {
            height: 64,
            width: 64,
            channels: 8,
            latent_dims: 8,
            num_classes: 3,
            encoder_depth: 3,
            base_filters: base,
            film_stages: 4,
            seed: 1,
        };
        let tcfg = TrainConfig {
            mode: TrainMode::Sdnet,
            max_epochs: 1,
            patience: 5,
            seed: 1,
            ..TrainConfig::default()
        };
        let model = FactorModel::new(cfg).unwrap();
        let mut trainer = Trainer::new(model, tcfg).unwrap();
        let t = Instant::now();
        let result = fit(&mut trainer, &data, None).unwrap();
        let steps = result.loss_csv.lines().count() - 1;
        println!(
            "base={base}: epoch of {} steps in {:?} ({:.0} ms/step), val dice loss {:.3}",
            steps,
            t.elapsed(),
            t.elapsed().as_millis() as f64 / steps as f64,
            result.best_val_dice_loss,
        );
    }
}
