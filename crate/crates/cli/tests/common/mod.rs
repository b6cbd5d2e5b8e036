#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use rgbd_diffusion::pano::save_hdr;
use rgbd_diffusion::rgbd::{write_sample, DatasetManifest, Split};
use rgbd_diffusion::synthetic::{synthetic_hdr, synthetic_rgbd};

/// Small enough that every command finishes in a few seconds.
pub const TINY_CONFIG: &str = r#"
seed = 7
[autoencoder]
base_channels = 4
channel_multipliers = [1, 1, 1]
[ae_train]
steps = 3
batch_size = 2
[diffusion.denoiser]
in_channels = 4
base_width = 8
context_dim = 8
attn_resolutions = [1]
[diffusion.text]
context_dim = 8
[diffusion_train]
steps = 2
batch_size = 2
[sampler]
steps = 3
[pano]
sample_height = 16
[pano.prep]
height = 16
"#;

pub fn tiny_config(dir: &Path, in_channels: usize) -> PathBuf {
    let path = dir.join(format!("tiny_{in_channels}.toml"));
    let text = TINY_CONFIG.replace("in_channels = 4", &format!("in_channels = {in_channels}"));
    fs::write(&path, text).unwrap();
    path
}

pub struct Output {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn rgbd(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_rgbd"))
        .args(args)
        .env_remove("RGBD_OUTPUT_ROOT")
        .output()
        .expect("spawn rgbd");
    Output {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

pub fn rgbd_ok(args: &[&str]) -> String {
    let o = rgbd(args);
    assert_eq!(o.code, 0, "rgbd {args:?} failed: {}", o.stderr);
    o.stdout
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn write_hdrs(dir: &Path, n: usize, height: usize) {
    fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        save_hdr(&synthetic_hdr(height, i as u64), &dir.join(format!("scene_{i:02}.hdr"))).unwrap();
    }
}

/// Writes `n` synthetic RGBD samples and returns the manifest path.
pub fn write_rgbd(dir: &Path, n: usize, size: usize) -> PathBuf {
    let mut m = DatasetManifest::new((size, size), Split::Train, dir);
    for i in 0..n {
        let sample = synthetic_rgbd(size, size, 40 + i as u64, &format!("img_{i:02}")).unwrap();
        m.entries.push(write_sample(&sample, dir).unwrap());
    }
    let path = dir.join("train.jsonl");
    m.write(&path).unwrap();
    path
}

/// Relative path → bytes for every file below `dir`.
pub fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Names of files that differ between two output trees (empty when
/// byte-identical).
pub fn tree_diff(a: &Path, b: &Path) -> Vec<String> {
    let (ta, tb) = (tree(a), tree(b));
    let mut bad: Vec<String> = ta
        .iter()
        .filter(|(k, v)| tb.get(*k) != Some(v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    bad.extend(
        tb.keys()
            .filter(|k| !ta.contains_key(*k))
            .map(|k| k.display().to_string()),
    );
    if ta.is_empty() {
        bad.push("<empty output>".into());
    }
    bad
}

/// Trained toy models: (ae checkpoint, pano denoiser, sr denoiser).
pub struct ToyModels {
    pub ae: PathBuf,
    pub pano: PathBuf,
    pub sr: PathBuf,
}

pub fn train_toy_models(root: &Path, pano_manifest: &Path, rgbd_manifest: &Path) -> ToyModels {
    let c4 = tiny_config(root, 4);
    let c8 = tiny_config(root, 8);
    let ae_dir = root.join("ae");
    rgbd_ok(&[
        "--config",
        s(&c4),
        "--out",
        s(&ae_dir),
        "train",
        "ae",
        "--manifest",
        s(pano_manifest),
    ]);
    let ae = ae_dir.join("ae.safetensors");
    let pano_dir = root.join("dp");
    rgbd_ok(&[
        "--config",
        s(&c4),
        "--out",
        s(&pano_dir),
        "train",
        "diffusion-pano",
        "--manifest",
        s(pano_manifest),
        "--ae",
        s(&ae),
    ]);
    let sr_dir = root.join("ds");
    rgbd_ok(&[
        "--config",
        s(&c8),
        "--out",
        s(&sr_dir),
        "train",
        "diffusion-sr",
        "--manifest",
        s(rgbd_manifest),
        "--ae",
        s(&ae),
    ]);
    ToyModels {
        ae,
        pano: pano_dir.join("denoiser.safetensors"),
        sr: sr_dir.join("denoiser.safetensors"),
    }
}
