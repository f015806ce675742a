//! Pretrains on the default corpus and prints the held-out quality numbers.
//!
//! `cargo run --release --example pretrain_report -- <checkpoint-dir> [epochs]`

use std::path::PathBuf;
use std::time::Instant;

use unlearn_core::nets::{save_checkpoint, ArchConfig};
use unlearn_core::pretrain::{assess_quality, pretrain_all, PretrainConfig};
use unlearn_core::synthdata::{build_corpus, CorpusSize};

fn main() -> unlearn_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "pretrained".into()));
    let mut cfg = PretrainConfig::default();
    if let Some(e) = args.next() {
        cfg.epochs = e.parse().expect("epochs");
        cfg.embedder_epochs = cfg.epochs;
    }
    let corpus = build_corpus(CorpusSize::default(), 0)?;
    let arch = ArchConfig::default();
    let t = Instant::now();
    let (nets, history) = pretrain_all(&corpus, &arch, &cfg)?;
    println!("pretrain took {:.1}s", t.elapsed().as_secs_f64());
    for e in &history.epochs {
        println!("{} {} {:.5} {:?}", e.stage, e.epoch, e.loss, e.terms);
    }
    println!("{:#?}", assess_quality(&nets, &corpus)?);
    save_checkpoint(&nets, &out)?;
    Ok(())
}
