//! Shared test fixtures: a synthetic treebank with class-correlated tokens,
//! written in the same one-tree-per-line format as the real dataset, plus
//! the finite-difference gradient oracle.

pub mod gradcheck;

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Official treebank location, when present: `SST_DATA_DIR` or `data/sst`
/// at the workspace root. The split files are licensed data distributed
/// separately from this repository.
pub fn official_sst_dir() -> Option<PathBuf> {
    if let Ok(dir) = std::env::var("SST_DATA_DIR") {
        let p = PathBuf::from(dir);
        if p.join("train.txt").exists() {
            return Some(p);
        }
    }
    let fallback = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/sst");
    if fallback.join("train.txt").exists() {
        return Some(fallback);
    }
    None
}

/// Renders a random binary tree over `tokens` with the given root label;
/// inner labels are arbitrary.
fn render_tree(tokens: &[String], label: u8, rng: &mut ChaCha8Rng) -> String {
    if tokens.len() == 1 {
        return format!("({} {})", label, tokens[0]);
    }
    let split = rng.gen_range(1..tokens.len());
    let left_label = rng.gen_range(0..5) as u8;
    let right_label = rng.gen_range(0..5) as u8;
    format!(
        "({} {} {})",
        label,
        render_tree(&tokens[..split], left_label, rng),
        render_tree(&tokens[split..], right_label, rng)
    )
}

/// One sentence whose tokens lean heavily on a class-specific vocabulary,
/// so a classifier can learn the mapping.
pub fn synthetic_sentence(class: u8, rng: &mut ChaCha8Rng, len: usize) -> Vec<String> {
    (0..len)
        .map(|_| {
            if rng.gen_bool(0.7) {
                format!("c{}w{}", class, rng.gen_range(0..6))
            } else {
                format!("shared{}", rng.gen_range(0..10))
            }
        })
        .collect()
}

pub fn synthetic_tree_line(class: u8, rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(5..14);
    let tokens = synthetic_sentence(class, rng, len);
    render_tree(&tokens, class, rng)
}

/// Writes train/dev/test tree files (balanced over the five classes) into
/// `dir` and returns the per-split sentence counts.
pub fn write_synthetic_treebank(
    dir: &Path,
    train: usize,
    dev: usize,
    test: usize,
    seed: u64,
) -> (usize, usize, usize) {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, count) in [("train.txt", train), ("dev.txt", dev), ("test.txt", test)] {
        let mut body = String::new();
        for i in 0..count {
            let class = (i % 5) as u8;
            body.push_str(&synthetic_tree_line(class, &mut rng));
            body.push('\n');
        }
        fs::write(dir.join(name), body).unwrap();
    }
    (train, dev, test)
}
