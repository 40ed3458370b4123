//! Layer-by-layer tensor shapes of both network variants, plus one forward
//! pass of the full-size network on a random 64 × 900 input.

use std::time::Instant;

use overlap_loop::net::model::{Architecture, ChannelSet, ModelWeights};
use overlap_loop::net::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> overlap_loop::Result<()> {
    let channels = ChannelSet::all();
    for (name, arch) in [("full", Architecture::full(channels.depth())), ("compact", Architecture::compact(channels.depth()))] {
        let trace = arch.shape_trace()?;
        println!("{name}: input {:?}", arch.leg_input_shape());
        for (i, s) in trace.leg.iter().enumerate() {
            println!("  leg {:2}  {:?}", i + 1, s);
        }
        println!("  delta   {:?}", trace.delta);
        for (i, s) in trace.head.iter().enumerate() {
            println!("  head {}  {:?}", i + 1, s);
        }
        println!("  dense   {} -> 1", trace.dense_inputs);
    }

    let model = ModelWeights::init(Architecture::full(channels.depth()), channels.clone(), 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut input = || Tensor::from_vec(64, 900, channels.depth(), (0..64 * 900 * channels.depth()).map(|_| rng.random_range(0.0..1.0)).collect());
    let (a, b) = (input()?, input()?);
    let t = Instant::now();
    let (fa, fb) = (model.leg_forward(&a)?, model.leg_forward(&b)?);
    let p = model.predict_from_features(&fa, &fb)?;
    println!("full forward pass: features {:?}, overlap {:.3}, yaw {}° in {:.2}s", fa.shape(), p.overlap, p.yaw, t.elapsed().as_secs_f64());
    Ok(())
}
