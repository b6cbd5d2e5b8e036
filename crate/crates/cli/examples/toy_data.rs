//! Writes a small synthetic dataset for trying the CLI:
//! `<out>/hdr/*.hdr` (equirectangular) and `<out>/rgbd/train.jsonl`.
//!
//! cargo run -p rgbd-cli --example toy_data -- <out> [count] [size]

use std::path::PathBuf;

use rgbd_diffusion::pano::save_hdr;
use rgbd_diffusion::rgbd::{write_sample, DatasetManifest, Split};
use rgbd_diffusion::synthetic::{synthetic_hdr, synthetic_rgbd};

fn main() -> rgbd_diffusion::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "toy".into()));
    let count: usize = args.next().map(|s| s.parse().expect("count")).unwrap_or(8);
    let size: usize = args.next().map(|s| s.parse().expect("size")).unwrap_or(64);

    let hdr_dir = out.join("hdr");
    std::fs::create_dir_all(&hdr_dir).expect("create hdr dir");
    for i in 0..count {
        save_hdr(
            &synthetic_hdr(size, i as u64),
            &hdr_dir.join(format!("scene_{i:03}.hdr")),
        )?;
    }

    let rgbd_dir = out.join("rgbd");
    let mut manifest = DatasetManifest::new((size, size), Split::Train, &rgbd_dir);
    for i in 0..count {
        let s = synthetic_rgbd(size, size, i as u64, &format!("sample_{i:03}"))?;
        manifest.entries.push(write_sample(&s, &rgbd_dir)?);
    }
    manifest.write(&rgbd_dir.join("train.jsonl"))?;
    println!("{}", out.display());
    Ok(())
}
