//! Named bundles of field and training settings.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoding::{GridConfig, TableLayout};
use crate::error::{Error, Result};
use crate::field::FieldConfig;
use crate::occupancy::OccupancyConfig;
use crate::renderer::RenderParams;
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileName {
    /// Published model size and iteration counts.
    Paper,
    /// Reduced table for a desktop CPU.
    Desk,
    /// Seconds-scale runs for tests.
    Tiny,
}

impl ProfileName {
    pub const ALL: [ProfileName; 3] = [ProfileName::Paper, ProfileName::Desk, ProfileName::Tiny];
}

impl fmt::Display for ProfileName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProfileName::Paper => "paper",
            ProfileName::Desk => "desk",
            ProfileName::Tiny => "tiny",
        })
    }
}

impl FromStr for ProfileName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(ProfileName::Paper),
            "desk" => Ok(ProfileName::Desk),
            "tiny" => Ok(ProfileName::Tiny),
            other => Err(Error::Config(format!(
                "unknown profile '{other}' (expected paper, desk or tiny)"
            ))),
        }
    }
}

/// Iteration count and scene scale used for one of the published captures.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PaperDataset {
    pub name: &'static str,
    pub iterations: usize,
    pub scale: f64,
}

pub const PAPER_DATASETS: [PaperDataset; 5] = [
    PaperDataset {
        name: "dancing-walking-standing",
        iterations: 19_000,
        scale: 0.3,
    },
    PaperDataset {
        name: "soccer-penalty-kick",
        iterations: 16_500,
        scale: 0.1,
    },
    PaperDataset {
        name: "soccer-multiplayer",
        iterations: 16_500,
        scale: 0.1,
    },
    PaperDataset {
        name: "cmu-baseball-bat",
        iterations: 14_500,
        scale: 0.006,
    },
    PaperDataset {
        name: "cmu-hand-gesture",
        iterations: 14_500,
        scale: 0.006,
    },
];

pub fn paper_dataset(name: &str) -> Option<PaperDataset> {
    PAPER_DATASETS.iter().copied().find(|d| d.name == name)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub name: ProfileName,
    pub field: FieldConfig,
    pub train: TrainConfig,
    /// Scene scale applied to camera positions.
    pub scale: f64,
}

impl Profile {
    pub fn get(name: ProfileName) -> Profile {
        match name {
            ProfileName::Paper => {
                let d = PAPER_DATASETS[0];
                let mut train = TrainConfig::new(d.iterations, 4096, RenderParams::inference(128, [1.0; 3]));
                train.occupancy = Some(OccupancyConfig::default());
                Profile {
                    name,
                    field: FieldConfig::paper(),
                    train,
                    scale: d.scale,
                }
            }
            ProfileName::Desk => {
                let field = FieldConfig::with_grid(GridConfig {
                    levels: 16,
                    channels: 2,
                    table_size: 1 << 19,
                    r_min: 16.0,
                    r_max_factor: 128.0,
                    half_extent: 2.0,
                    layout: TableLayout::PerLevel,
                });
                let mut train = TrainConfig::new(2000, 4096, RenderParams::inference(64, [1.0; 3]));
                train.occupancy = Some(OccupancyConfig {
                    warmup: DESK_OCCUPANCY_WARMUP,
                    ..OccupancyConfig::default()
                });
                Profile {
                    name,
                    field,
                    train,
                    scale: 0.3,
                }
            }
            ProfileName::Tiny => {
                let field = FieldConfig::with_grid(GridConfig {
                    levels: 8,
                    channels: 2,
                    table_size: 1 << 14,
                    r_min: 8.0,
                    r_max_factor: 32.0,
                    half_extent: 2.0,
                    layout: TableLayout::PerLevel,
                });
                let mut train = TrainConfig::new(300, 1024, RenderParams::inference(32, [1.0; 3]));
                train.log_every = 50;
                Profile {
                    name,
                    field,
                    train,
                    scale: 0.3,
                }
            }
        }
    }

    /// Paper profile with the iteration count and scale of one published capture.
    pub fn paper_for(dataset: &str) -> Result<Profile> {
        let d =
            paper_dataset(dataset).ok_or_else(|| Error::Config(format!("no published settings for '{dataset}'")))?;
        let mut p = Profile::get(ProfileName::Paper);
        p.train.iterations = d.iterations;
        p.scale = d.scale;
        Ok(p)
    }
}

/// Full-density iterations before empty space is skipped in desk training.
pub const DESK_OCCUPANCY_WARMUP: usize = 64;
