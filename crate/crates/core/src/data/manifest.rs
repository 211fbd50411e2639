use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{read_volume, CaseRecord};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            "unassigned" => Split::Unassigned,
            other => return Err(Error::Data(format!("unknown split {other:?}"))),
        })
    }
}

/// One manifest line: a case id, its split and per-modality file paths.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub images: Vec<PathBuf>,
    pub masks: Vec<PathBuf>,
}

/// Line-oriented case list:
///
/// ```text
/// # seed=42
/// case-000 train image=case-000/m0.hwav image=case-000/m1.hwav mask=case-000/y0.hwav mask=case-000/y1.hwav
/// ```
///
/// Relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
    pub base: PathBuf,
}

impl Manifest {
    pub fn parse(text: &str, base: impl Into<PathBuf>) -> Result<Self> {
        let mut seed = None;
        let mut entries = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            let bad = |m: String| Error::Data(format!("manifest line {}: {m}", no + 1));
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(v) = comment.trim().strip_prefix("seed=") {
                    seed = Some(v.parse().map_err(|_| bad(format!("bad seed {v:?}")))?);
                }
                continue;
            }
            let mut fields = line.split_whitespace();
            let id = fields.next().unwrap().to_string();
            let split = fields.next().ok_or_else(|| bad("missing split".into()))?.parse()?;
            let (mut images, mut masks) = (Vec::new(), Vec::new());
            for f in fields {
                match f.split_once('=') {
                    Some(("image", p)) => images.push(PathBuf::from(p)),
                    Some(("mask", p)) => masks.push(PathBuf::from(p)),
                    _ => return Err(bad(format!("unexpected field {f:?}"))),
                }
            }
            if images.is_empty() || images.len() != masks.len() {
                return Err(bad(format!("{} images and {} masks", images.len(), masks.len())));
            }
            entries.push(ManifestEntry { id, split, images, masks });
        }
        let seed = seed.ok_or_else(|| Error::Data("manifest: missing '# seed=N' header".into()))?;
        Ok(Manifest { seed, entries, base: base.into() })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Manifest::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn render(&self) -> String {
        let mut out = format!("# seed={}\n", self.seed);
        for e in &self.entries {
            out.push_str(&format!("{} {}", e.id, e.split));
            for p in &e.images {
                out.push_str(&format!(" image={}", p.display()));
            }
            for p in &e.masks {
                out.push_str(&format!(" mask={}", p.display()));
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render())?;
        Ok(())
    }

    pub fn of_split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Reads and validates the volumes of one entry.
    pub fn load(&self, entry: &ManifestEntry) -> Result<CaseRecord> {
        let read = |paths: &[PathBuf]| -> Result<Vec<_>> {
            paths
                .iter()
                .map(|p| {
                    let full = self.base.join(p);
                    read_volume(&full).map_err(|e| match e {
                        Error::Io(io) => Error::Data(format!("{}: {io}", full.display())),
                        other => other,
                    })
                })
                .collect()
        };
        let case = CaseRecord {
            id: entry.id.clone(),
            images: read(&entry.images)?,
            masks: read(&entry.masks)?,
            split: entry.split,
        };
        case.validate()?;
        Ok(case)
    }
}

/// Case counts for train, validation and test out of `n`.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let train = (0.7 * n as f64).round() as usize;
    let val = ((0.1 * n as f64).round() as usize).min(n - train);
    (train, val, n - train - val)
}

/// Reassigns every entry to train/val/test by a seeded shuffle.
pub fn split_dataset(manifest: &Manifest, seed: u64) -> Manifest {
    let n = manifest.entries.len();
    let (train, val, _) = split_counts(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut entries = manifest.entries.clone();
    for (rank, &i) in order.iter().enumerate() {
        entries[i].split = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Manifest { seed, entries, base: manifest.base.clone() }
}
