//! Flat `key=value` run configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use mrnet::blocks::BlockKind;
use mrnet::{DType, Error, Result};

pub const KEYS: [&str; 13] = [
    "kind",
    "L",
    "B",
    "widths",
    "width_multiplier",
    "num_classes",
    "epochs",
    "batch_size",
    "lr",
    "seed",
    "dtype",
    "data",
    "out_dir",
];

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Binary CIFAR-10 directory, optionally restricted to the first `n` training images.
    Cifar10 { dir: PathBuf, limit: Option<usize> },
    Synthetic { classes: usize, n: usize },
}

impl DataSource {
    fn parse(v: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Config {
            key: "data".into(),
            message: format!("{msg}: `{v}` (expected cifar10:<path>[:<n>] or synthetic:<classes>:<N>)"),
        };
        if let Some(rest) = v.strip_prefix("cifar10:") {
            let (dir, limit) = match rest.rsplit_once(':') {
                Some((d, n)) if !n.is_empty() && n.chars().all(|c| c.is_ascii_digit()) => {
                    (d, Some(n.parse().map_err(|_| bad("bad subset size"))?))
                }
                _ => (rest, None),
            };
            if dir.is_empty() {
                return Err(bad("empty path"));
            }
            return Ok(DataSource::Cifar10 {
                dir: PathBuf::from(dir),
                limit,
            });
        }
        if let Some(rest) = v.strip_prefix("synthetic:") {
            let (c, n) = rest.split_once(':').ok_or_else(|| bad("missing N"))?;
            let classes: usize = c.parse().map_err(|_| bad("bad class count"))?;
            let n: usize = n.parse().map_err(|_| bad("bad sample count"))?;
            if classes < 2 || n < classes {
                return Err(bad("need classes >= 2 and N >= classes"));
            }
            return Ok(DataSource::Synthetic { classes, n });
        }
        Err(bad("unknown data source"))
    }

    pub fn num_classes(&self) -> usize {
        match self {
            DataSource::Cifar10 { .. } => 10,
            DataSource::Synthetic { classes, .. } => *classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub kind: BlockKind,
    pub depth: usize,
    pub branch_layers: usize,
    pub widths: Vec<usize>,
    pub width_multiplier: usize,
    pub num_classes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub dtype: DType,
    pub data: DataSource,
    pub out_dir: PathBuf,
}

/// Raw key/value pairs, file first, then command-line overrides.
#[derive(Clone, Debug, Default)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

fn split_pair(line: &str) -> Result<(String, String)> {
    let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
        key: line.trim().to_string(),
        message: "expected key=value".into(),
    })?;
    let key = k.trim().to_string();
    if !KEYS.contains(&key.as_str()) {
        return Err(Error::Config {
            key,
            message: format!("unknown key; known keys: {}", KEYS.join(", ")),
        });
    }
    Ok((key, v.trim().to_string()))
}

impl RawConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut raw = RawConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = split_pair(line)?;
            if raw.values.insert(k.clone(), v).is_some() {
                return Err(Error::Config {
                    key: k,
                    message: "given twice in the config file".into(),
                });
            }
        }
        Ok(raw)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config {
            key: "--config".into(),
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        Self::from_text(&text)
    }

    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = split_pair(assignment)?;
        self.values.insert(k, v);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn parse_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| Error::Config {
                key: key.into(),
                message: format!("cannot parse `{v}`"),
            }),
        }
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        let kind = match self.get("kind") {
            None => {
                return Err(Error::Config {
                    key: "kind".into(),
                    message: "required (resnet, dilnet or dmrnet)".into(),
                })
            }
            Some(v) => match BlockKind::parse(v) {
                Some(k @ (BlockKind::Residual | BlockKind::InceptionLike | BlockKind::MergeAndRun)) => k,
                _ => {
                    return Err(Error::Config {
                        key: "kind".into(),
                        message: format!("`{v}` is not one of resnet, dilnet, dmrnet"),
                    })
                }
            },
        };
        let widths = match self.get("widths") {
            None => vec![16, 32, 64],
            Some(v) => v
                .split(',')
                .map(|w| w.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .ok()
                .filter(|ws| !ws.is_empty() && ws.iter().all(|&w| w > 0))
                .ok_or_else(|| Error::Config {
                    key: "widths".into(),
                    message: format!("expected comma-separated positive integers, got `{v}`"),
                })?,
        };
        let dtype = match self.get("dtype").unwrap_or("f32") {
            "f32" | "float32" => DType::F32,
            "f64" | "float64" => DType::F64,
            other => {
                return Err(Error::Config {
                    key: "dtype".into(),
                    message: format!("`{other}` is not f32 or f64"),
                })
            }
        };
        let data = DataSource::parse(self.get("data").unwrap_or("synthetic:2:200"))?;
        let num_classes = self.parse_or("num_classes", data.num_classes())?;
        if num_classes < data.num_classes() {
            return Err(Error::Config {
                key: "num_classes".into(),
                message: format!("data has {} classes", data.num_classes()),
            });
        }
        let positive = |key: &str, v: usize| {
            if v == 0 {
                Err(Error::Config {
                    key: key.into(),
                    message: "must be positive".into(),
                })
            } else {
                Ok(v)
            }
        };
        let lr: f64 = self.parse_or("lr", 0.1)?;
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config {
                key: "lr".into(),
                message: "must be a finite non-negative number".into(),
            });
        }
        Ok(RunConfig {
            kind,
            depth: positive("L", self.parse_or("L", 6)?)?,
            branch_layers: self.parse_or("B", 2)?,
            widths,
            width_multiplier: positive("width_multiplier", self.parse_or("width_multiplier", 1)?)?,
            num_classes,
            epochs: positive("epochs", self.parse_or("epochs", 10)?)?,
            batch_size: positive("batch_size", self.parse_or("batch_size", 64)?)?,
            lr,
            seed: self.parse_or("seed", 0)?,
            dtype,
            data,
            out_dir: PathBuf::from(self.get("out_dir").unwrap_or("out")),
        })
    }
}
