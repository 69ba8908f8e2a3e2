//! Dataset source strings: `idx:<images>,<labels>`, `cifar10:<batch>[,<batch>…]`
//! and `synth[:<classes>,<count>,<C>x<H>x<W>[,<seed>]]`.
//!
//! A synthetic source names one fixed dataset: the same string always yields
//! the same images, independent of the command's `--seed`.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use featurefool::data::{load_cifar10, load_idx, synth_dataset, Dataset};
use featurefool::{Result, Rng};
use serde::{Serialize, Serializer};

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
    Cifar10(Vec<PathBuf>),
    Synth {
        classes: usize,
        count: usize,
        shape: [usize; 3],
        seed: u64,
    },
}

pub const SYNTH_DEFAULT: (usize, usize, [usize; 3]) = (10, 1000, [1, 28, 28]);

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Idx { images, labels } => load_idx(images, labels),
            DataSource::Cifar10(paths) => load_cifar10(paths),
            DataSource::Synth {
                classes,
                count,
                shape,
                seed,
            } => synth_dataset(&mut Rng::new(*seed), *classes, *count, *shape),
        }
    }
}

impl FromStr for DataSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        let parts: Vec<&str> = if rest.is_empty() {
            Vec::new()
        } else {
            rest.split(',').collect()
        };
        match kind {
            "idx" => match parts.as_slice() {
                [images, labels] => Ok(DataSource::Idx {
                    images: images.into(),
                    labels: labels.into(),
                }),
                _ => Err("expected idx:<images>,<labels>".into()),
            },
            "cifar10" if !parts.is_empty() => Ok(DataSource::Cifar10(
                parts.iter().map(PathBuf::from).collect(),
            )),
            "cifar10" => Err("expected cifar10:<batch>[,<batch>...]".into()),
            "synth" => match parts.as_slice() {
                [] => {
                    let (classes, count, shape) = SYNTH_DEFAULT;
                    Ok(DataSource::Synth {
                        classes,
                        count,
                        shape,
                        seed: 0,
                    })
                }
                [classes, count, shape, seed @ ..] if seed.len() <= 1 => {
                    let num = |v: &str| v.parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
                    let dims: Vec<usize> = shape
                        .split('x')
                        .map(num)
                        .collect::<std::result::Result<_, _>>()?;
                    let [c, h, w] = dims[..] else {
                        return Err(format!("shape {shape:?} is not <C>x<H>x<W>"));
                    };
                    let seed = match seed {
                        [v] => v.parse::<u64>().map_err(|e| format!("{v:?}: {e}"))?,
                        _ => 0,
                    };
                    Ok(DataSource::Synth {
                        classes: num(classes)?,
                        count: num(count)?,
                        shape: [c, h, w],
                        seed,
                    })
                }
                _ => Err("expected synth or synth:<classes>,<count>,<C>x<H>x<W>[,<seed>]".into()),
            },
            other => Err(format!(
                "unknown dataset kind {other:?}; use idx:, cifar10: or synth"
            )),
        }
    }
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSource::Idx { images, labels } => {
                write!(f, "idx:{},{}", images.display(), labels.display())
            }
            DataSource::Cifar10(paths) => {
                let joined: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
                write!(f, "cifar10:{}", joined.join(","))
            }
            DataSource::Synth {
                classes,
                count,
                shape: [c, h, w],
                seed,
            } => {
                write!(f, "synth:{classes},{count},{c}x{h}x{w},{seed}")
            }
        }
    }
}

impl Serialize for DataSource {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}
