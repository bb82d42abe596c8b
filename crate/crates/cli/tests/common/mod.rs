// Shared by the integration targets; each uses a different subset.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use fracadapt_cli::config::{ConfigFile, Overrides, Settings};

/// A network and cohort small enough for the whole pipeline to take seconds.
pub const SMOKE: &str = r#"
seed = 5

[cohort_a]
patients = 3

[cohort_b]
patients = 2
fractions = 3

[network]
variants = ["base_a"]
channels = [4, 4, 4, 4]
fc_width = 8

[train]
iterations = 50
log_every = 10
val_patches = 4

[adapt]
iterations = [0, 5]
"#;

pub fn settings(config: &str, out: &Path) -> Settings {
    let file = ConfigFile::parse(config).unwrap();
    Settings::resolve(&file, &Overrides { out: Some(out.to_path_buf()), ..Default::default() }).unwrap()
}

/// Every file below `root`, relative to it, sorted.
pub fn files(root: &Path) -> Vec<PathBuf> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<PathBuf>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    let mut v = Vec::new();
    walk(root, root, &mut v);
    v.sort();
    v
}
