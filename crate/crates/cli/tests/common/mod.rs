#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Output;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_promptforge")
}

/// Smooth warm images for the real class, high-contrast cool ones for fake.
fn write_image(path: &Path, fake: bool, rng: &mut ChaCha8Rng) {
    let (w, h) = (24 + rng.random_range(0..16), 24 + rng.random_range(0..16));
    let tint: f64 = rng.random_range(0.0..1.0);
    let img = RgbImage::from_fn(w, h, |x, y| {
        let t = (x + y) as f64 / (w + h) as f64;
        let noise: f64 = rng.random_range(-20.0..20.0);
        let px = if fake {
            let checker = if (x / 3 + y / 3) % 2 == 0 {
                60.0
            } else {
                -60.0
            };
            [
                90.0 + checker + noise,
                120.0 + 40.0 * tint + noise,
                200.0 - 60.0 * t + noise,
            ]
        } else {
            [
                190.0 - 50.0 * t + noise,
                140.0 + 30.0 * tint + noise,
                90.0 + noise,
            ]
        };
        Rgb(px.map(|v: f64| v.clamp(0.0, 255.0) as u8))
    });
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    img.save(path).unwrap();
}

/// `root/<subset>/{real,fake}/NNN.png` with `per_class` images per class and subset.
pub fn write_dataset(root: &Path, subsets: &[&str], per_class: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for subset in subsets {
        for (class, fake) in [("real", false), ("fake", true)] {
            for i in 0..per_class {
                let dir = if subset.is_empty() {
                    root.join(class)
                } else {
                    root.join(subset).join(class)
                };
                write_image(&dir.join(format!("{i:03}.png")), fake, &mut rng);
            }
        }
    }
}

/// A config file for a small end-to-end run rooted at `base`.
pub fn write_config(base: &Path, extra: &str) -> PathBuf {
    let train = base.join("data/train");
    let test = base.join("data/test");
    if !train.exists() {
        write_dataset(&train, &[""], 12, 1);
        write_dataset(&test, &["gan_a", "gan_b"], 8, 2);
    }
    let path = base.join("run.cfg");
    let text = format!(
        "run.dir = {}\ndata.train_root = {}\ndata.test_root = {}\ntrain.epochs = 40\ntrain.batch_size = 8\n\
         train.learning_rate = 1e-3\n{extra}",
        base.join("run").display(),
        train.display(),
        test.display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

pub fn run(config: &Path, command: &str, extra: &[&str]) -> Output {
    std::process::Command::new(bin())
        .arg(command)
        .arg("--config")
        .arg(config)
        .args(extra)
        .output()
        .expect("spawn promptforge")
}

pub fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed ({:?}): {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

pub const PIPELINE: [&str; 5] = ["build-prompts", "build-cache", "train", "ttp", "eval"];

pub fn run_pipeline(config: &Path) {
    for cmd in PIPELINE {
        assert_ok(&run(config, cmd, &[]), cmd);
    }
}
