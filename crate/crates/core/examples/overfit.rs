//! Overfit a desk-scale M model on eight synthetic 64×64 images.
//!
//! `cargo run --release --example overfit -- [epochs]`

use std::time::Instant;

use seunet_core::data::{generate_synthetic, load_samples, stack_batch};
use seunet_core::model::{Variant, VariantSpec};
use seunet_core::ops::Mode;
use seunet_core::train::{bce_value, train, Adam, AdamConfig, TrainConfig};
use seunet_core::{Model32, Tape};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let epochs: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(300);
    let dir = std::env::temp_dir().join("seunet-overfit");
    let manifest = generate_synthetic(8, 64, 1, &dir)?;
    let data = load_samples::<f32>(&manifest, None)?;
    let mut model = Model32::new(VariantSpec::desk(Variant::M), 0)?;
    let cfg = TrainConfig { epochs, batch_size: 8, seed: 0, adam: AdamConfig::default(), checkpoint_dir: None, checkpoint_every: 10 };
    let mut opt = Adam::new(model.params(), cfg.adam);
    let start = Instant::now();
    train(&mut model, &mut opt, &data, &cfg, 1, |log| {
        if log.epoch % 10 == 0 {
            println!("{} ({:.1}s)", log.line(), start.elapsed().as_secs_f64());
        }
        Ok(())
    })?;

    let refs: Vec<_> = data.iter().collect();
    let (x, y) = stack_batch(&refs)?;
    let mut tape = Tape::inference();
    let xv = tape.constant(x);
    let out = model.forward(&mut tape, xv, Mode::Eval)?;
    println!("eval bce {:.5}", bce_value(tape.value(out.logits), &y)?);
    Ok(())
}
