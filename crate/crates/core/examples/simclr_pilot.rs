//! SimCLR on the synthetic texture set with the d1/width-1 encoder.
//! Prints per-epoch loss, the final/first loss ratio and linear-probe error
//! before and after training.
//!
//! cargo run --release -p hyperdiv --example simclr_pilot [epochs] [lr] [batch] [weight_decay] [seed]

use std::time::Instant;

use hyperdiv::data::gen_synthetic;
use hyperdiv::encoder::{build_encoder, EncoderSpec, NormKind};
use hyperdiv::evaluation::{evaluate_probe, ProbeConfig};
use hyperdiv::ssl::{train, SslConfig};

fn main() -> hyperdiv::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize| args.get(i).map(String::as_str);
    let mut cfg = SslConfig::default();
    cfg.epochs = arg(1).map_or(30, |s| s.parse().expect("epochs"));
    cfg.lr = arg(2).map_or(cfg.lr, |s| s.parse().expect("lr"));
    cfg.batch_size = arg(3).map_or(cfg.batch_size, |s| s.parse().expect("batch"));
    cfg.weight_decay = arg(4).map_or(cfg.weight_decay, |s| s.parse().expect("weight_decay"));
    cfg.seed = arg(5).map_or(0, |s| s.parse().expect("seed"));

    let data = gen_synthetic(4, 100, 32, 7)?;
    let mut enc = build_encoder(&EncoderSpec::preset("d1", 1, NormKind::Batch)?, cfg.seed)?;
    let probe = ProbeConfig::default();
    let before = evaluate_probe(&enc, &data.train, &data.test, &probe)?;
    let t = Instant::now();
    let out = train(&mut enc, &data.train, &cfg, None)?;
    for s in &out.stats {
        println!("epoch {:3} loss {:.5} ({:.2}s)", s.epoch, s.loss, s.wall_s);
    }
    let after = evaluate_probe(&enc, &data.train, &data.test, &probe)?;
    if let (Some(first), Some(last)) = (out.stats.first(), out.stats.last()) {
        println!(
            "ratio {:.4}  train {:.1}s",
            last.loss / first.loss,
            t.elapsed().as_secs_f64()
        );
    }
    println!(
        "probe error untrained {:.4}  trained {:.4}",
        before.test_error, after.test_error
    );
    Ok(())
}
