use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Environment variable naming the default dataset root.
pub const DATA_ROOT_ENV: &str = "UIE_SNN_DATA_ROOT";

pub fn data_root_from_env() -> Option<PathBuf> {
    std::env::var_os(DATA_ROOT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

/// `(raw, reference)` file paths.
pub type Pair = (PathBuf, PathBuf);

/// The pairs of a dataset and how to split and size them.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub pairs: Vec<Pair>,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub split_seed: u64,
    /// Target `(height, width)`.
    pub resolution: (usize, usize),
}

impl DatasetManifest {
    pub fn new(pairs: Vec<Pair>) -> Self {
        DatasetManifest {
            pairs,
            train_fraction: 0.8,
            val_fraction: 0.2,
            split_seed: 0,
            resolution: (512, 512),
        }
    }

    /// Reads tab-separated `raw<TAB>reference` lines. Relative paths resolve
    /// against the manifest's directory; blank lines and `#` comments are skipped.
    pub fn from_tsv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let mut cols = line.split('\t');
            match (cols.next(), cols.next(), cols.next()) {
                (Some(r), Some(j), None) if !r.is_empty() && !j.is_empty() => {
                    pairs.push((base.join(r), base.join(j)));
                }
                _ => {
                    return Err(Error::Ingestion {
                        path: path.to_path_buf(),
                        reason: format!("line {}: expected two tab-separated paths", i + 1),
                    })
                }
            }
        }
        Ok(Self::new(pairs))
    }

    /// Pairs `root/raw/<name>` with `root/ref/<name>`, sorted by name.
    pub fn from_dirs(root: &Path) -> Result<Self> {
        let raw_dir = root.join("raw");
        let ref_dir = root.join("ref");
        let entries = fs::read_dir(&raw_dir).map_err(|e| Error::Ingestion {
            path: raw_dir.clone(),
            reason: e.to_string(),
        })?;
        let mut names: Vec<_> = entries
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_file())
            .map(|e| e.file_name())
            .collect();
        names.sort();
        let mut pairs = Vec::with_capacity(names.len());
        for name in names {
            let reference = ref_dir.join(&name);
            if !reference.is_file() {
                return Err(Error::Ingestion {
                    path: reference,
                    reason: "no reference image with this name".into(),
                });
            }
            pairs.push((raw_dir.join(&name), reference));
        }
        Ok(Self::new(pairs))
    }

    /// A manifest file or a directory with `raw/` and `ref/`.
    pub fn open(path: &Path) -> Result<Self> {
        if path.is_dir() {
            Self::from_dirs(path)
        } else {
            Self::from_tsv(path)
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let ok = |f: f64| (0.0..=1.0).contains(&f);
        if !ok(self.train_fraction) || !ok(self.val_fraction) {
            out.push("split fractions must lie in [0, 1]".to_string());
        }
        if (self.train_fraction + self.val_fraction - 1.0).abs() > 1e-9 {
            out.push(format!(
                "train and validation fractions must sum to 1, got {} + {}",
                self.train_fraction, self.val_fraction
            ));
        }
        if self.resolution.0 == 0 || self.resolution.1 == 0 {
            out.push("resolution must be positive".to_string());
        }
        out
    }
}

/// Seeded shuffle, then the first `round(n·train_fraction)` pairs train.
pub fn split(manifest: &DatasetManifest, seed: u64) -> Result<(Vec<Pair>, Vec<Pair>)> {
    if manifest.pairs.is_empty() {
        return Err(Error::Config("dataset manifest is empty".into()));
    }
    let problems = manifest.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems.join("; ")));
    }
    let mut seen = HashSet::new();
    for (r, j) in &manifest.pairs {
        if !seen.insert(r) || !seen.insert(j) {
            return Err(Error::Config(format!("path listed twice in manifest: {}", r.display())));
        }
    }
    let mut pairs = manifest.pairs.clone();
    pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (pairs.len() as f64 * manifest.train_fraction).round() as usize;
    let val = pairs.split_off(n_train.min(pairs.len()));
    Ok((pairs, val))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(n: usize) -> DatasetManifest {
        DatasetManifest::new(
            (0..n)
                .map(|i| (PathBuf::from(format!("raw/{i}.png")), PathBuf::from(format!("ref/{i}.png"))))
                .collect(),
        )
    }

    #[test]
    fn ten_pairs_split_eight_two() {
        let m = manifest(10);
        let (train, val) = split(&m, 3).unwrap();
        assert_eq!((train.len(), val.len()), (8, 2));
        let mut all: Vec<_> = train.iter().chain(&val).cloned().collect();
        all.sort();
        let mut want = m.pairs.clone();
        want.sort();
        assert_eq!(all, want);
        assert!(train.iter().all(|p| !val.contains(p)));
        assert_eq!(split(&m, 3).unwrap(), (train, val));
    }

    #[test]
    fn seeds_give_different_permutations() {
        let m = manifest(10);
        let orders: Vec<_> = (0..5).map(|s| split(&m, s).unwrap().0).collect();
        for i in 0..5 {
            for j in i + 1..5 {
                assert_ne!(orders[i], orders[j]);
            }
        }
    }

    #[test]
    fn bad_manifests_are_config_errors() {
        assert!(matches!(split(&manifest(0), 0), Err(Error::Config(_))));
        let mut m = manifest(4);
        m.val_fraction = 0.5;
        assert!(matches!(split(&m, 0), Err(Error::Config(_))));
        let mut dup = manifest(2);
        dup.pairs.push(dup.pairs[0].clone());
        assert!(matches!(split(&dup, 0), Err(Error::Config(_))));
    }

    #[test]
    fn tsv_and_directory_layouts() {
        let dir = tempfile::tempdir().unwrap();
        let tsv = dir.path().join("pairs.tsv");
        fs::write(&tsv, "# comment\na.png\tb.png\n\nc.png\td.png\n").unwrap();
        let m = DatasetManifest::from_tsv(&tsv).unwrap();
        assert_eq!(m.pairs, vec![
            (dir.path().join("a.png"), dir.path().join("b.png")),
            (dir.path().join("c.png"), dir.path().join("d.png")),
        ]);
        fs::write(&tsv, "only-one-column\n").unwrap();
        assert!(DatasetManifest::from_tsv(&tsv).is_err());

        fs::create_dir_all(dir.path().join("raw")).unwrap();
        fs::create_dir_all(dir.path().join("ref")).unwrap();
        for name in ["2.png", "1.png"] {
            fs::write(dir.path().join("raw").join(name), b"").unwrap();
            fs::write(dir.path().join("ref").join(name), b"").unwrap();
        }
        let m = DatasetManifest::open(dir.path()).unwrap();
        assert_eq!(m.pairs.len(), 2);
        assert!(m.pairs[0].0.ends_with("raw/1.png"));
        fs::write(dir.path().join("raw").join("3.png"), b"").unwrap();
        match DatasetManifest::open(dir.path()) {
            Err(Error::Ingestion { path, .. }) => assert!(path.ends_with("ref/3.png")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
