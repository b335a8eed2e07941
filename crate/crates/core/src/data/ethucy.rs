//! ETH/UCY text files: whitespace-separated `frame_id agent_id x y` lines.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use super::{Provenance, Scene, SceneSet, TrajPoint};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EthUcyOptions {
    pub t_p: usize,
    pub t_f: usize,
    pub timestep: f64,
    pub max_neighbors: usize,
}

impl Default for EthUcyOptions {
    fn default() -> Self {
        Self {
            t_p: 8,
            t_f: 12,
            timestep: 0.4,
            max_neighbors: 8,
        }
    }
}

struct Row {
    frame: i64,
    agent: i64,
    pos: TrajPoint,
}

fn integral(v: f64) -> Option<i64> {
    let r = v.round();
    ((v - r).abs() < 1e-6 && r.abs() < 9e15).then_some(r as i64)
}

fn parse_rows(text: &str, label: &str) -> Result<Vec<Row>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: label.to_string(),
        line,
        msg,
    };
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks.len() != 4 {
            return Err(err(lineno, format!("expected 4 columns, found {}", toks.len())));
        }
        let mut vals = [0.0f64; 4];
        for (slot, tok) in vals.iter_mut().zip(&toks) {
            let v: f64 = tok
                .parse()
                .map_err(|_| err(lineno, format!("malformed number `{tok}`")))?;
            if !v.is_finite() {
                return Err(err(lineno, format!("non-finite value `{tok}`")));
            }
            *slot = v;
        }
        let frame = integral(vals[0]).ok_or_else(|| err(lineno, "frame id is not an integer".into()))?;
        let agent = integral(vals[1]).ok_or_else(|| err(lineno, "agent id is not an integer".into()))?;
        rows.push(Row {
            frame,
            agent,
            pos: TrajPoint::new(vals[2], vals[3]),
        });
    }
    Ok(rows)
}

/// Most common positive gap between an agent's consecutive frames
/// (smaller gap wins ties).
fn file_stride(tracks: &BTreeMap<i64, Vec<(i64, TrajPoint)>>) -> Option<i64> {
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for obs in tracks.values() {
        for w in obs.windows(2) {
            let d = w[1].0 - w[0].0;
            if d > 0 {
                *counts.entry(d).or_default() += 1;
            }
        }
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(d, _)| d)
}

/// Parse ETH/UCY text and cut sliding windows of `t_p + t_f` consecutive
/// observations per agent. Agents whose frame gaps are not multiples of the
/// file stride (or that repeat a frame) are skipped and counted.
pub fn parse_ethucy(text: &str, label: &str, opts: EthUcyOptions) -> Result<SceneSet> {
    let rows = parse_rows(text, label)?;
    let window = opts.t_p + opts.t_f;
    let provenance = Provenance::File {
        path: label.to_string(),
    };
    let mut tracks: BTreeMap<i64, Vec<(i64, TrajPoint)>> = BTreeMap::new();
    for r in &rows {
        tracks.entry(r.agent).or_default().push((r.frame, r.pos));
    }
    for obs in tracks.values_mut() {
        obs.sort_by_key(|(f, _)| *f);
    }
    let Some(stride) = file_stride(&tracks) else {
        return SceneSet::new(Vec::new(), opts.t_p, opts.t_f, provenance);
    };

    let mut skipped = 0;
    let mut runs: Vec<(i64, Vec<(i64, TrajPoint)>)> = Vec::new();
    let mut at_frame: HashMap<i64, BTreeMap<i64, TrajPoint>> = HashMap::new();
    for (agent, obs) in &tracks {
        let irregular = obs
            .windows(2)
            .any(|w| w[1].0 == w[0].0 || (w[1].0 - w[0].0) % stride != 0);
        if irregular {
            skipped += 1;
            continue;
        }
        for &(f, p) in obs.iter() {
            at_frame.entry(f).or_default().insert(*agent, p);
        }
        let mut current = vec![obs[0]];
        for w in obs.windows(2) {
            if w[1].0 - w[0].0 != stride {
                runs.push((*agent, std::mem::take(&mut current)));
            }
            current.push(w[1]);
        }
        runs.push((*agent, current));
    }

    let mut scenes = Vec::new();
    for (agent, run) in &runs {
        if run.len() < window {
            continue;
        }
        for start in 0..=run.len() - window {
            let w = &run[start..start + window];
            let past: Vec<TrajPoint> = w[..opts.t_p].iter().map(|(_, p)| *p).collect();
            let future: Vec<TrajPoint> = w[opts.t_p..].iter().map(|(_, p)| *p).collect();
            let past_frames: Vec<i64> = w[..opts.t_p].iter().map(|(f, _)| *f).collect();
            let last = *past.last().expect("t_p >= 1");

            let mut candidates: Vec<(f64, i64, Vec<TrajPoint>)> = Vec::new();
            if let Some(present) = at_frame.get(&past_frames[opts.t_p - 1]) {
                for (&other, &p_last) in present {
                    if other == *agent {
                        continue;
                    }
                    let track: Option<Vec<TrajPoint>> = past_frames
                        .iter()
                        .map(|f| at_frame.get(f).and_then(|m| m.get(&other)).copied())
                        .collect();
                    if let Some(track) = track {
                        candidates.push((p_last.dist(last), other, track));
                    }
                }
            }
            candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            candidates.truncate(opts.max_neighbors);

            scenes.push(Scene {
                id: format!("{label}:{agent}:{}", w[0].0),
                past,
                future,
                neighbors: candidates.into_iter().map(|c| c.2).collect(),
                timestep: opts.timestep,
            });
        }
    }
    let mut set = SceneSet::new(scenes, opts.t_p, opts.t_f, provenance)?;
    set.skipped_agents = skipped;
    Ok(set)
}

/// Load an ETH/UCY file with the standard 8 + 12 split at 0.4 s.
pub fn load_ethucy(path: &Path) -> Result<SceneSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ethucy(&text, &path.display().to_string(), EthUcyOptions::default())
}
