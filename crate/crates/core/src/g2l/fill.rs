use rand::Rng;

use super::embed::PositionEmbeddingTable;
use super::groups::KeyStepGroup;
use crate::data::TrajPoint;
use crate::diffcore::{Activation, Graph, Mlp, Node, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Midpoint head for one interval `l`: endpoint projections and `phi_l`.
#[derive(Clone, Debug, PartialEq)]
pub struct FillHead {
    pub interval: usize,
    /// `[2, D]`, applied to the head endpoint.
    pub w_h: ParamId,
    /// `[2, D]`, applied to the tail endpoint.
    pub w_t: ParamId,
    /// `2D + D_A -> hidden -> 2`.
    pub phi: Mlp,
    pub d_embed: usize,
}

impl FillHead {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        interval: usize,
        d_embed: usize,
        d_agent: usize,
        hidden: usize,
    ) -> Result<Self> {
        let w_h = store.glorot(&format!("{prefix}.wh"), 2, d_embed, rng)?;
        let w_t = store.glorot(&format!("{prefix}.wt"), 2, d_embed, rng)?;
        let phi = Mlp::init(
            store,
            rng,
            &format!("{prefix}.phi"),
            &[2 * d_embed + d_agent, hidden, 2],
            Activation::Relu,
            Activation::Identity,
        )?;
        Ok(Self {
            interval,
            w_h,
            w_t,
            phi,
            d_embed,
        })
    }

    /// The agent-feature block of the first `phi` layer. It depends only on
    /// `A`, so one product serves every fill of a mode.
    pub fn agent_block(&self, g: &mut Graph<'_>, a: Node) -> Result<Node> {
        let first = &self.phi.layers[0];
        let got = g.value(a).len();
        if 2 * self.d_embed + got != first.in_dim {
            return Err(Error::DimensionMismatch {
                layer: first.name.clone(),
                expected: first.in_dim - 2 * self.d_embed,
                got,
            });
        }
        Ok(g.matvec_cols(first.weight, 2 * self.d_embed, a))
    }
}

/// One [`FillHead`] per interval `2, 4, .., L`.
#[derive(Clone, Debug, PartialEq)]
pub struct FillHeadParams {
    pub heads: Vec<FillHead>,
}

impl FillHeadParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        max_interval: usize,
        d_embed: usize,
        d_agent: usize,
        hidden: usize,
    ) -> Result<Self> {
        let mut heads = Vec::new();
        let mut l = 2;
        while l <= max_interval {
            let p = format!("{prefix}.l{l}");
            heads.push(FillHead::init(store, rng, &p, l, d_embed, d_agent, hidden)?);
            l *= 2;
        }
        Ok(Self { heads })
    }

    pub fn head(&self, interval: usize) -> Result<&FillHead> {
        self.heads
            .iter()
            .find(|h| h.interval == interval)
            .ok_or_else(|| Error::InvalidArgument(format!("no fill head for interval {interval}")))
    }

    pub fn max_interval(&self) -> usize {
        self.heads.last().map_or(0, |h| h.interval)
    }
}

/// Per-mode cache of the agent-feature blocks, keyed by head identity.
#[derive(Debug)]
pub struct FillCache {
    a: Node,
    blocks: Vec<(ParamId, Node)>,
}

impl FillCache {
    pub fn new(a: Node) -> Self {
        Self {
            a,
            blocks: Vec::new(),
        }
    }

    pub fn agent(&self) -> Node {
        self.a
    }

    fn block(&mut self, g: &mut Graph<'_>, head: &FillHead) -> Result<Node> {
        let key = head.phi.layers[0].weight;
        if let Some((_, n)) = self.blocks.iter().find(|(k, _)| *k == key) {
            return Ok(*n);
        }
        let n = head.agent_block(g, self.a)?;
        self.blocks.push((key, n));
        Ok(n)
    }
}

#[allow(clippy::too_many_arguments)]
fn fill_with_block(
    g: &mut Graph<'_>,
    head: &FillHead,
    table: &PositionEmbeddingTable,
    zi: Node,
    i: usize,
    zj: Node,
    j: usize,
    agent_block: Node,
) -> Result<Node> {
    let pi = table.node(g, i)?;
    let pj = table.node(g, j)?;
    let hi = g.vecmat(zi, head.w_h);
    let h = g.add(hi, pi);
    let tj = g.vecmat(zj, head.w_t);
    let t = g.add(tj, pj);
    let first = &head.phi.layers[0];
    let mut x = first.apply_blocks(g, Some(agent_block), &[(0, h), (head.d_embed, t)])?;
    for layer in &head.phi.layers[1..] {
        x = layer.apply(g, x)?;
    }
    Ok(x)
}

fn check_interval(head: &FillHead, i: usize, j: usize) -> Result<()> {
    if j <= i || j - i != head.interval || !(i + j).is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "fill between steps {i} and {j} does not match interval {}",
            head.interval
        )));
    }
    Ok(())
}

/// Predict the midpoint `(i + j) / 2` from the two endpoints and `A`.
#[allow(clippy::too_many_arguments)]
pub fn fill_midpoint(
    g: &mut Graph<'_>,
    zi: Node,
    i: usize,
    zj: Node,
    j: usize,
    a: Node,
    head: &FillHead,
    table: &PositionEmbeddingTable,
) -> Result<Node> {
    check_interval(head, i, j)?;
    let block = head.agent_block(g, a)?;
    fill_with_block(g, head, table, zi, i, zj, j, block)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSource {
    Key,
    Filled(usize),
    Inherited,
}

/// A full trajectory at one granularity, indices `1..=1 + 2N` at `points[idx - 1]`.
#[derive(Clone, Debug)]
pub struct GranularityTrajectory {
    pub granularity: usize,
    pub points: Vec<Node>,
    pub provenance: Vec<StepSource>,
}

impl GranularityTrajectory {
    pub fn flat(&self, g: &mut Graph<'_>) -> Node {
        g.concat(&self.points)
    }

    pub fn flat_values(&self, g: &Graph<'_>) -> Vec<f64> {
        self.points.iter().flat_map(|p| g.value(*p).iter().copied()).collect()
    }

    pub fn values(&self, g: &Graph<'_>) -> Vec<TrajPoint> {
        self.points
            .iter()
            .map(|p| {
                let v = g.value(*p);
                TrajPoint::new(v[0], v[1])
            })
            .collect()
    }
}

/// Order in which midpoints of one level are visited. Fills of a level only
/// read steps from earlier levels, so the order never changes the result.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LevelOrder {
    #[default]
    Forward,
    Reverse,
}

/// Coarse-to-fine generation for one group: place the keys, fill midpoints
/// level by level with interval halving, then copy any uncovered tail from
/// the donor trajectory.
pub fn generate_trajectory(
    g: &mut Graph<'_>,
    group: &KeyStepGroup,
    keys: &[Node],
    a: Node,
    heads: &FillHeadParams,
    table: &PositionEmbeddingTable,
    traj_len: usize,
    donor: Option<&GranularityTrajectory>,
) -> Result<GranularityTrajectory> {
    let mut cache = FillCache::new(a);
    generate_trajectory_cached(
        g,
        group,
        keys,
        &mut cache,
        heads,
        table,
        traj_len,
        donor,
        LevelOrder::Forward,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn generate_trajectory_cached(
    g: &mut Graph<'_>,
    group: &KeyStepGroup,
    keys: &[Node],
    cache: &mut FillCache,
    heads: &FillHeadParams,
    table: &PositionEmbeddingTable,
    traj_len: usize,
    donor: Option<&GranularityTrajectory>,
    order: LevelOrder,
) -> Result<GranularityTrajectory> {
    if keys.len() != group.indices.len() {
        return Err(Error::ShapeMismatch(format!(
            "group {} has {} keys, got {}",
            group.granularity,
            group.indices.len(),
            keys.len()
        )));
    }
    if group.covered_until > traj_len {
        return Err(Error::InvalidArgument(format!(
            "group reaches step {} beyond trajectory length {traj_len}",
            group.covered_until
        )));
    }
    let mut slots: Vec<Option<(Node, StepSource)>> = vec![None; traj_len];
    for (&idx, &k) in group.indices.iter().zip(keys) {
        slots[idx - 1] = Some((k, StepSource::Key));
    }

    let mut defined = group.indices.clone();
    let mut l = group.granularity;
    while l >= 2 {
        let head = heads.head(l)?;
        let block = cache.block(g, head)?;
        let mut pairs: Vec<(usize, usize)> = defined.windows(2).map(|w| (w[0], w[1])).collect();
        if order == LevelOrder::Reverse {
            pairs.reverse();
        }
        let mut filled = Vec::with_capacity(pairs.len());
        for (i, j) in pairs {
            check_interval(head, i, j)?;
            let zi = slots[i - 1].expect("endpoint defined").0;
            let zj = slots[j - 1].expect("endpoint defined").0;
            let m = fill_with_block(g, head, table, zi, i, zj, j, block)?;
            filled.push(((i + j) / 2, m));
        }
        for (idx, node) in filled {
            slots[idx - 1] = Some((node, StepSource::Filled(l)));
            defined.push(idx);
        }
        defined.sort_unstable();
        l /= 2;
    }

    if group.covered_until < traj_len {
        let want = group.inherits_tail_from;
        let donor = match donor {
            Some(d) if Some(d.granularity) == want && d.points.len() == traj_len => d,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "granularity {} needs its tail from granularity {:?}",
                    group.granularity, want
                )))
            }
        };
        for idx in group.covered_until + 1..=traj_len {
            slots[idx - 1] = Some((donor.points[idx - 1], StepSource::Inherited));
        }
    }

    let (points, provenance) = slots
        .into_iter()
        .map(|s| s.expect("every step defined once"))
        .unzip();
    Ok(GranularityTrajectory {
        granularity: group.granularity,
        points,
        provenance,
    })
}
