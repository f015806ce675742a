//! Identity similarity between a prior-drawn source and the render of its
//! unlearning target, for a range of extrapolation distances. Also prints the
//! similarity to a different source's target as the unrelated baseline, and
//! writes a contact sheet (source, then one target per distance).
//!
//! `cargo run --release --example target_similarity -- <checkpoint-dir> [sheet.png]`

use std::path::{Path, PathBuf};

use unlearn_core::grid::save_contact_sheet;
use unlearn_core::latentops::compute_target_latent;
use unlearn_core::metrics::id_similarity;
use unlearn_core::nets::{load_checkpoint, LatentCode, NoiseVector};
use unlearn_core::rng::substream;

const DISTANCES: [f64; 6] = [0.0, 5.0, 10.0, 20.0, 30.0, 50.0];
const SOURCES: usize = 20;

fn main() -> unlearn_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().expect("usage: target_similarity <checkpoint-dir> [sheet.png]"));
    let sheet = args.next().map(PathBuf::from);
    let nets = load_checkpoint(&dir)?;
    let g = &nets.generator;
    let mean = nets.mean_latent.clone().expect("checkpoint carries a mean latent");
    let sources: Vec<LatentCode> = (0..SOURCES as u64)
        .map(|k| g.map_forward(&NoiseVector::sample(&mut substream(0, "random-source", k), g.config.z_dim)))
        .collect::<unlearn_core::Result<_>>()?;
    let target = |w_u: &LatentCode, d: f64| {
        if d == 0.0 {
            Ok(mean.clone())
        } else {
            compute_target_latent(w_u, &mean, d)
        }
    };
    let (mut own, mut other) = ([0.0; DISTANCES.len()], [0.0; DISTANCES.len()]);
    for (k, w_u) in sources.iter().enumerate() {
        let src = g.generate(w_u)?;
        let next = &sources[(k + 1) % SOURCES];
        for (j, &d) in DISTANCES.iter().enumerate() {
            own[j] += id_similarity(&nets.embedder, &src, &g.generate(&target(w_u, d)?)?);
            other[j] += id_similarity(&nets.embedder, &src, &g.generate(&target(next, d)?)?);
        }
    }
    println!("d,own_target,other_target");
    for (j, d) in DISTANCES.iter().enumerate() {
        println!("{d},{:.4},{:.4}", own[j] / SOURCES as f64, other[j] / SOURCES as f64);
    }
    if let Some(path) = sheet {
        let rows = sources[..4]
            .iter()
            .map(|w_u| {
                let mut row = vec![g.generate(w_u)?];
                for &d in &DISTANCES {
                    row.push(g.generate(&target(w_u, d)?)?);
                }
                Ok(row)
            })
            .collect::<unlearn_core::Result<Vec<_>>>()?;
        save_contact_sheet(Path::new(&path), &rows)?;
    }
    Ok(())
}
