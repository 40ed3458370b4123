//! Loop-closure search on a synthetic two-lap drive: leg features for every
//! scan, gated candidates, one detection per query and a precision-recall
//! report. Without `--weights` the network is untrained; `--oracle` swaps in
//! ground-truth overlaps to show the harness ceiling.
//!
//!     cargo run --release --example loop_detection -- --gate mahalanobis --strategy top-k

use clap::Parser;
use overlap_loop::cli::odometry_history;
use overlap_loop::net::model::{image_to_input, Architecture, ChannelSet, ModelWeights};
use overlap_loop::overlap::{label_pair, LabelConfig};
use overlap_loop::pipeline::{attach_ground_truth, evaluate, recall_at_n, run_detection, DetectionConfig, Gate, QueryOutcome, ScoredCandidate, Strategy};
use overlap_loop::projection::preprocess;
use overlap_loop::synthetic::{compact_projection, loop_trajectory, Scene};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

#[derive(Parser)]
struct Args {
    #[arg(long, default_value_t = 80)]
    scans: usize,
    #[arg(long, default_value = "none")]
    gate: Gate,
    #[arg(long, default_value = "best")]
    strategy: Strategy,
    #[arg(long, default_value_t = 20)]
    exclusion: usize,
    /// Weight file stem written by the train stage.
    #[arg(long)]
    weights: Option<std::path::PathBuf>,
    #[arg(long)]
    oracle: bool,
}

fn main() -> overlap_loop::Result<()> {
    let args = Args::parse();
    let cfg = compact_projection();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let poses = loop_trajectory(args.scans, 40.0, 0.5);
    let keep: Vec<_> = poses.iter().map(|p| p.translation()).collect();
    let scene = Scene::random_structured(&mut rng, 70.0, 120, &keep, 3.0);
    let clouds: Vec<_> = poses.par_iter().map(|p| scene.scan(p, &cfg, None)).collect();
    let images: Vec<_> = clouds.par_iter().map(|c| preprocess(c, &cfg, None)).collect();

    let channels: ChannelSet = "depth,normals,intensity".parse()?;
    let model = match &args.weights {
        Some(stem) => ModelWeights::load(stem)?,
        None => ModelWeights::init(Architecture::compact(channels.depth()), channels, 0)?,
    };
    let features = images
        .par_iter()
        .map(|img| model.leg_forward(&image_to_input(img, &model.channels)?))
        .collect::<overlap_loop::Result<Vec<_>>>()?;
    let history = odometry_history(&poses, 0.05, 0.002)?;
    let det = DetectionConfig { recent_exclusion: args.exclusion, gate: args.gate, strategy: args.strategy, ..Default::default() };
    let mut outcomes = run_detection(&model, &features, &history, &det)?;

    let truth = |q: usize, c: usize| label_pair(&clouds[q], &poses[q], &images[c], &poses[c], (q, c), &LabelConfig::default()).map(|l| l.overlap);
    if args.oracle {
        outcomes = outcomes
            .into_iter()
            .map(|o| {
                let scored = o.scored.iter().map(|s| Ok(ScoredCandidate { overlap: truth(o.query, s.id)?, ..*s })).collect::<overlap_loop::Result<Vec<_>>>()?;
                let detection = overlap_loop::pipeline::detect(o.query, &scored, &history, &det)?;
                Ok(QueryOutcome { query: o.query, scored, detection })
            })
            .collect::<overlap_loop::Result<_>>()?;
    }
    let (detections, ranked) = attach_ground_truth(&outcomes, &det, truth)?;
    let report = evaluate(&detections, &det)?;
    println!("gate {}  strategy {}  queries {}  with loops {}", det.gate, det.strategy, report.queries, report.positives);
    println!("F1 {:.3} at threshold {:.3}, AUC {:.3}", report.f1_max, report.f1_threshold, report.auc);
    for n in [1, 5, 10] {
        println!("recall@{n} {:.3}", recall_at_n(&ranked, det.tp_overlap_threshold, n)?);
    }
    Ok(())
}
