use std::process::ExitCode;

use clap::Parser;
use comverse_csw::{loss, Demo, DemoConfig, FrameFilter};

/// Federated training of the watch model over simulated cameras.
/// Prints `round,loss,contributors` per round.
#[derive(Parser, Debug)]
#[command(name = "csw-demo", version)]
struct Args {
    #[arg(long, default_value_t = 3)]
    children: usize,
    #[arg(long, default_value_t = 50)]
    rounds: u64,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    /// Keep only the K largest gradient coordinates.
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    eta: f64,
    #[arg(long, default_value_t = 50)]
    samples: usize,
    /// Label noise std.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Train only on frames with anomaly score at least this.
    #[arg(long)]
    min_anomaly: Option<f64>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let config = DemoConfig {
        children: args.children,
        rounds: args.rounds,
        dim: args.dim,
        topk: args.topk,
        seed: args.seed,
        eta: args.eta,
        samples_per_child: args.samples,
        noise: args.noise,
        filter: args.min_anomaly.map_or(FrameFilter::All, FrameFilter::MinAnomaly),
    };
    let mut demo = match Demo::new(config) {
        Ok(d) => d,
        Err(e) => {
            eprintln!("csw-demo: {e}");
            return ExitCode::from(2);
        }
    };
    let start = loss(&demo.model().weights, &demo.pooled());
    println!("round,loss,contributors");
    if let Ok(l) = start {
        println!("0,{l:.12e},0");
    }
    while demo.model().round < args.rounds {
        match demo.run_round() {
            Ok(r) => println!("{},{:.12e},{}", r.round, r.loss, r.contributors),
            Err(e) => {
                eprintln!("csw-demo: {e}");
                return ExitCode::FAILURE;
            }
        }
    }
    ExitCode::SUCCESS
}
