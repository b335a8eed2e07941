//! Scenes, synthetic generation, ETH/UCY ingestion and the scene JSON-lines format.

mod ethucy;
mod synth;

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ethucy::{load_ethucy, parse_ethucy, EthUcyOptions};
pub use synth::{gen_synthetic, Family, FamilyCounts, SynthConfig};

/// A 2-D position in meters. Serialized as `[x, y]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct TrajPoint {
    pub x: f64,
    pub y: f64,
}

impl TrajPoint {
    pub const ORIGIN: TrajPoint = TrajPoint { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: TrajPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl From<[f64; 2]> for TrajPoint {
    fn from(v: [f64; 2]) -> Self {
        Self { x: v[0], y: v[1] }
    }
}

impl From<TrajPoint> for [f64; 2] {
    fn from(p: TrajPoint) -> Self {
        [p.x, p.y]
    }
}

impl std::ops::Add for TrajPoint {
    type Output = TrajPoint;
    fn add(self, o: TrajPoint) -> TrajPoint {
        TrajPoint::new(self.x + o.x, self.y + o.y)
    }
}

impl std::ops::Sub for TrajPoint {
    type Output = TrajPoint;
    fn sub(self, o: TrajPoint) -> TrajPoint {
        TrajPoint::new(self.x - o.x, self.y - o.y)
    }
}

impl std::ops::Mul<f64> for TrajPoint {
    type Output = TrajPoint;
    fn mul(self, c: f64) -> TrajPoint {
        TrajPoint::new(self.x * c, self.y * c)
    }
}

/// Flatten points into `[x0, y0, x1, y1, ...]`.
pub fn flatten(points: &[TrajPoint]) -> Vec<f64> {
    points.iter().flat_map(|p| [p.x, p.y]).collect()
}

pub fn unflatten(v: &[f64]) -> Vec<TrajPoint> {
    v.chunks_exact(2).map(|c| TrajPoint::new(c[0], c[1])).collect()
}

/// One agent's observed past, ground-truth future and neighbor pasts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub past: Vec<TrajPoint>,
    pub future: Vec<TrajPoint>,
    pub neighbors: Vec<Vec<TrajPoint>>,
    pub timestep: f64,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if self.past.len() < 2 || self.future.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "scene {}: past and future need at least 2 points",
                self.id
            )));
        }
        if !(self.timestep > 0.0 && self.timestep.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "scene {}: timestep must be positive",
                self.id
            )));
        }
        let all = self
            .past
            .iter()
            .chain(&self.future)
            .chain(self.neighbors.iter().flatten());
        if let Some(p) = all.clone().find(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!("scene {}: point {p:?}", self.id)));
        }
        if let Some(n) = self.neighbors.iter().find(|n| n.len() != self.past.len()) {
            return Err(Error::InvalidArgument(format!(
                "scene {}: neighbor past has {} points, expected {}",
                self.id,
                n.len(),
                self.past.len()
            )));
        }
        Ok(())
    }

    /// The agent's last observed position.
    pub fn anchor(&self) -> TrajPoint {
        *self.past.last().expect("validated scene")
    }

    /// Translate everything so the last observed point is the origin.
    /// Returns the translated scene and the offset that undoes it.
    pub fn normalized(&self) -> (Scene, TrajPoint) {
        let o = self.anchor();
        let shift = |v: &[TrajPoint]| v.iter().map(|p| *p - o).collect::<Vec<_>>();
        let scene = Scene {
            id: self.id.clone(),
            past: shift(&self.past),
            future: shift(&self.future),
            neighbors: self.neighbors.iter().map(|n| shift(n)).collect(),
            timestep: self.timestep,
        };
        (scene, o)
    }

    /// Scenario family encoded in synthetic scene ids (`<family>-<index>`).
    pub fn family(&self) -> Option<Family> {
        let prefix = self.id.rsplit_once('-').map(|(p, _)| p)?;
        Family::ALL.into_iter().find(|f| f.name() == prefix)
    }
}

/// Where a [`SceneSet`] came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Synthetic { config: SynthConfig, seed: u64 },
    File { path: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSet {
    pub scenes: Vec<Scene>,
    pub t_p: usize,
    pub t_f: usize,
    pub provenance: Provenance,
    /// Agents dropped during file ingestion (irregular frame stride).
    pub skipped_agents: usize,
}

impl SceneSet {
    pub fn new(scenes: Vec<Scene>, t_p: usize, t_f: usize, provenance: Provenance) -> Result<Self> {
        for s in &scenes {
            s.validate()?;
            if s.past.len() != t_p || s.future.len() != t_f {
                return Err(Error::InvalidArgument(format!(
                    "scene {} has {}+{} points, set expects {t_p}+{t_f}",
                    s.id,
                    s.past.len(),
                    s.future.len()
                )));
            }
        }
        Ok(Self {
            scenes,
            t_p,
            t_f,
            provenance,
            skipped_agents: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    /// Serialize as JSON lines, one scene per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.scenes {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_jsonl()?.as_bytes())
    }

    pub fn read_jsonl(path: &Path) -> Result<SceneSet> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut scenes = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let scene: Scene = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            scenes.push(scene);
        }
        let first = scenes.first().ok_or_else(|| {
            Error::InvalidArgument(format!("{}: no scenes", path.display()))
        })?;
        let (t_p, t_f) = (first.past.len(), first.future.len());
        SceneSet::new(
            scenes,
            t_p,
            t_f,
            Provenance::File {
                path: path.display().to_string(),
            },
        )
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(self.to_jsonl()?.as_bytes())
            .map_err(|e| Error::io("<stream>", e))
    }
}

/// Append one linearly extrapolated point: `F_last + (F_last - F_prev)`.
pub fn extrapolate_gt(future: &[TrajPoint], target_len: usize) -> Result<Vec<TrajPoint>> {
    if future.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "extrapolation needs at least 2 future points, got {}",
            future.len()
        )));
    }
    if target_len != future.len() + 1 {
        return Err(Error::InvalidArgument(format!(
            "extrapolation extends by exactly one step ({} -> {}), asked for {target_len}",
            future.len(),
            future.len() + 1
        )));
    }
    let last = future[future.len() - 1];
    let prev = future[future.len() - 2];
    let mut out = future.to_vec();
    out.push((last - prev) + last);
    Ok(out)
}
