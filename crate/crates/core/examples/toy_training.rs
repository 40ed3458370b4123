//! Trains the compact network on a synthetic toy set and reports overlap MAE
//! and yaw accuracy per epoch.
//!
//!     cargo run --release --example toy_training -- --epochs 100 --optimizer adam

use std::time::Instant;

use clap::Parser;
use overlap_loop::net::model::{image_to_input, Architecture, ChannelSet, ModelWeights};
use overlap_loop::net::train::{evaluate_set, train, Hyperparams, Optimizer, TrainingPair, TrainingSet};
use overlap_loop::synthetic::{toy_dataset, ToyConfig};

#[derive(Parser)]
struct Args {
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value = "adam")]
    optimizer: String,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value = "depth,normals")]
    channels: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Evaluate on the training set every this many epochs.
    #[arg(long, default_value_t = 5)]
    every: usize,
}

fn main() -> overlap_loop::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let channels: ChannelSet = args.channels.parse()?;
    let optimizer = match args.optimizer.as_str() {
        "adam" => Optimizer::Adam,
        "amsgrad" => Optimizer::AmsGrad,
        _ => Optimizer::Sgd,
    };

    let t0 = Instant::now();
    let data = toy_dataset(&ToyConfig { seed: args.seed, ..Default::default() })?;
    let inputs = data.images.iter().map(|img| image_to_input(img, &channels)).collect::<Result<Vec<_>, _>>()?;
    let pairs = data
        .labels
        .iter()
        .map(|l| TrainingPair { a: l.query_id, b: l.ref_id, overlap: l.overlap, yaw: l.yaw_gt })
        .collect();
    let set = TrainingSet { inputs, pairs };
    let mut hist = [0usize; 5];
    for p in &set.pairs {
        hist[((p.overlap * 5.0) as usize).min(4)] += 1;
    }
    println!("toy set: {} scans, {} pairs, overlap histogram {:?} ({:.1}s)", data.images.len(), set.pairs.len(), hist, t0.elapsed().as_secs_f64());

    let hp = Hyperparams { lr: args.lr, max_epochs: args.epochs, batch_size: args.batch, optimizer, seed: args.seed, ..Default::default() };
    let init = ModelWeights::init(Architecture::compact(channels.depth()), channels, args.seed)?;
    let m = evaluate_set(&init, &set, &hp)?;
    println!("init: loss {:.4} mae {:.4} yaw {:?}", m.mean_loss, m.overlap_mae, m.yaw_accuracy);
    let t1 = Instant::now();
    let outcome = train(init, &set, None, &hp, |r, w| {
        if r.epoch % args.every == 0 {
            let m = evaluate_set(w, &set, &hp)?;
            println!(
                "epoch {:3} ({:.0}s): running {:.4} | loss {:.4} mae {:.4} yaw {:?}/{}",
                r.epoch,
                t1.elapsed().as_secs_f64(),
                r.running_loss,
                m.mean_loss,
                m.overlap_mae,
                m.yaw_accuracy,
                m.yaw_pairs
            );
        }
        Ok(())
    })?;
    let m = evaluate_set(&outcome.weights, &set, &hp)?;
    println!("final: mae {:.4} yaw accuracy {:?} in {:.0}s", m.overlap_mae, m.yaw_accuracy, t1.elapsed().as_secs_f64());
    Ok(())
}
