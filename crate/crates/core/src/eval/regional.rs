use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The six segmented regions compared between real and generated volumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    CerebralCortex,
    BrainStem,
    Ventricles,
    Thalamus,
    Putamen,
    CerebellarCortex,
}

impl Structure {
    pub const ALL: [Structure; 6] = [
        Structure::CerebralCortex,
        Structure::BrainStem,
        Structure::Ventricles,
        Structure::Thalamus,
        Structure::Putamen,
        Structure::CerebellarCortex,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Structure::CerebralCortex => "cerebral_cortex",
            Structure::BrainStem => "brain_stem",
            Structure::Ventricles => "ventricles",
            Structure::Thalamus => "thalamus",
            Structure::Putamen => "putamen",
            Structure::CerebellarCortex => "cerebellar_cortex",
        }
    }

    fn position(self) -> usize {
        Self::ALL.iter().position(|&s| s == self).expect("listed")
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Structure {
    type Err = Error;

    /// Accepts any case and spaces or hyphens in place of underscores, so
    /// "Brain Stem" and "brain-stem" both parse.
    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .trim()
            .chars()
            .map(|c| {
                if c == ' ' || c == '-' {
                    '_'
                } else {
                    c.to_ascii_lowercase()
                }
            })
            .collect();
        Self::ALL
            .into_iter()
            .find(|st| st.as_str() == norm)
            .ok_or_else(|| Error::Malformed {
                what: "structure name",
                detail: s.to_string(),
            })
    }
}

/// Segmented volumes (mm^3) of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionalVolumes {
    pub id: String,
    volumes: [f64; 6],
}

impl RegionalVolumes {
    pub fn new(id: impl Into<String>, volumes: [f64; 6]) -> Result<Self> {
        if let Some(v) = volumes.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
            return Err(Error::Malformed {
                what: "regional volume",
                detail: format!("volume {v} is not a finite nonnegative number"),
            });
        }
        Ok(Self { id: id.into(), volumes })
    }

    pub fn get(&self, s: Structure) -> f64 {
        self.volumes[s.position()]
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    volume_id: String,
    structure: String,
    mm3: f64,
}

/// Reads long-format CSV with columns `volume_id,structure,mm3`. Every
/// volume needs all six structures exactly once; output keeps the order in
/// which ids first appear.
pub fn read_regional_csv(path: &Path) -> Result<Vec<RegionalVolumes>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_regional(file)
}

fn parse_regional<R: std::io::Read>(reader: R) -> Result<Vec<RegionalVolumes>> {
    let mut ids: Vec<String> = Vec::new();
    let mut slots: Vec<[Option<f64>; 6]> = Vec::new();
    let mut index = std::collections::HashMap::new();
    for row in csv::Reader::from_reader(reader).deserialize::<Row>() {
        let row = row.map_err(|e| Error::Malformed {
            what: "regional CSV",
            detail: e.to_string(),
        })?;
        let s: Structure = row.structure.parse()?;
        let i = *index.entry(row.volume_id.clone()).or_insert_with(|| {
            ids.push(row.volume_id.clone());
            slots.push([None; 6]);
            ids.len() - 1
        });
        let slot = &mut slots[i][s.position()];
        if slot.is_some() {
            return Err(Error::Malformed {
                what: "regional CSV",
                detail: format!("{} listed twice for {}", s, row.volume_id),
            });
        }
        *slot = Some(row.mm3);
    }
    ids.into_iter()
        .zip(slots)
        .map(|(id, slot)| {
            let mut volumes = [0.0; 6];
            for (k, v) in slot.iter().enumerate() {
                volumes[k] = v.ok_or_else(|| Error::Malformed {
                    what: "regional CSV",
                    detail: format!("{} missing for {}", Structure::ALL[k], id),
                })?;
            }
            RegionalVolumes::new(id, volumes)
        })
        .collect()
}

pub fn write_regional_csv(path: &Path, volumes: &[RegionalVolumes]) -> Result<()> {
    let to_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    for v in volumes {
        for s in Structure::ALL {
            w.serialize(Row {
                volume_id: v.id.clone(),
                structure: s.as_str().to_string(),
                mm3: v.get(s),
            })
            .map_err(to_err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
