use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::finite_diff_check;

fn cfg() -> ModelConfig {
    ModelConfig {
        d_embed: 6,
        d_agent: 5,
        hidden: 9,
        ..Default::default()
    }
}

fn setup(cfg: &ModelConfig, seed: u64) -> (ParamStore, Vec<KeyStepGroup>, G2lParams) {
    let groups = build_key_groups(cfg.t_f, &cfg.granularities).unwrap();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = G2lParams::init(cfg, &groups, &mut store, &mut rng).unwrap();
    (store, groups, p)
}

fn agent(d: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn pt(x: f64, y: f64) -> TrajPoint {
    TrajPoint::new(x, y)
}

#[test]
fn key_shape_and_zero_weights() {
    let c = cfg();
    let (mut store, _, p) = setup(&c, 0);
    {
        let mut g = Graph::new(&store);
        let a = g.input(agent(c.d_agent, 1));
        let k = predict_keys(&mut g, &p.key_head, a).unwrap();
        assert_eq!(k.keys.len(), 7);
        assert!(k.keys.iter().all(|n| g.value(*n).len() == 2));
    }
    for l in &p.key_head.layers {
        store.get_mut(l.weight).values.fill(0.0);
    }
    let bias = p.key_head.layers[1].bias;
    let pattern: Vec<f64> = (0..14).map(|i| i as f64 - 3.0).collect();
    store.get_mut(bias).values.copy_from_slice(&pattern);
    let mut g = Graph::new(&store);
    let a = g.input(agent(c.d_agent, 1));
    let k = predict_keys(&mut g, &p.key_head, a).unwrap();
    assert_eq!(g.value(k.flat), &pattern[..]);
}

#[test]
fn key_head_gradcheck() {
    let c = cfg();
    let (store, _, p) = setup(&c, 2);
    let target: Vec<f64> = (0..14).map(|i| 0.3 * i as f64).collect();
    let r = finite_diff_check(
        |g| {
            let a = g.input(agent(c.d_agent, 3));
            let k = predict_keys(g, &p.key_head, a)?;
            let t = g.input(target.clone());
            g.mse(k.flat, t)
        },
        &store,
        1e-6,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

fn spatial_value(keys: &[TrajPoint], truth: &[TrajPoint], group: &KeyStepGroup, tail: GtTail) -> Result<f64> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let nodes: Vec<Node> = keys.iter().map(|k| g.input(vec![k.x, k.y])).collect();
    let l = spatial_loss(&mut g, &nodes, truth, group, LossKind::Mse, None, tail)?;
    Ok(g.scalar(l))
}

#[test]
fn spatial_loss_hand_example() {
    let group = &build_key_groups(5, &[2]).unwrap()[0];
    // truth at steps 1..5; keys sit at 1, 3, 5
    let truth = [pt(0.0, 0.0), pt(0.5, 0.5), pt(1.0, 1.0), pt(1.5, 1.5), pt(2.0, 2.0)];
    let keys = [pt(0.0, 0.0), pt(1.0, 0.0), pt(2.0, 0.0)];
    let v = spatial_value(&keys, &truth, group, GtTail::Extrapolate).unwrap();
    assert_abs_diff_eq!(v, 0.5, epsilon = 1e-15);
}

#[test]
fn spatial_loss_identity_and_offset() {
    let groups = build_key_groups(12, &[2, 4, 8]).unwrap();
    let truth: Vec<TrajPoint> = (1..=13).map(|i| pt(0.4 * i as f64, (i as f64).sin())).collect();
    for group in &groups {
        let keys: Vec<TrajPoint> = group.indices.iter().map(|i| truth[i - 1]).collect();
        assert_eq!(spatial_value(&keys, &truth, group, GtTail::Extrapolate).unwrap(), 0.0);
        let shifted: Vec<TrajPoint> = keys.iter().map(|k| *k + pt(0.25, -4.0)).collect();
        let v = spatial_value(&shifted, &truth, group, GtTail::Extrapolate).unwrap();
        assert!(v < 1e-28, "{v}");
    }
}

#[test]
fn spatial_loss_translation_invariance_exact_on_dyadic_values() {
    let group = &build_key_groups(12, &[2]).unwrap()[0];
    let truth: Vec<TrajPoint> = (1..=13).map(|i| pt(0.5 * i as f64, -0.25 * i as f64)).collect();
    let keys: Vec<TrajPoint> = (0..7).map(|p| pt(p as f64, 0.75 * p as f64)).collect();
    let a = spatial_value(&keys, &truth, group, GtTail::Extrapolate).unwrap();
    let shifted: Vec<TrajPoint> = keys.iter().map(|k| *k + pt(8.0, -2.0)).collect();
    assert_eq!(a, spatial_value(&shifted, &truth, group, GtTail::Extrapolate).unwrap());
}

#[test]
fn spatial_loss_tail_modes() {
    let groups = build_key_groups(12, &[2, 4, 8]).unwrap();
    let truth: Vec<TrajPoint> = (1..=12).map(|i| pt(i as f64, 0.0)).collect();
    let keys: Vec<TrajPoint> = groups[0].indices.iter().map(|&i| pt(i as f64, 0.0)).collect();
    assert!(spatial_value(&keys, &truth, &groups[0], GtTail::Extrapolate).is_err());
    assert_eq!(spatial_value(&keys, &truth, &groups[0], GtTail::Cap).unwrap(), 0.0);
    // the single G_8 section 1 -> 9 is covered either way
    let k8 = [pt(1.0, 0.0), pt(9.0, 1.0)];
    let v = spatial_value(&k8, &truth, &groups[2], GtTail::Cap).unwrap();
    assert_abs_diff_eq!(v, 0.5, epsilon = 1e-15);
}

#[test]
fn spatial_loss_gradcheck_nll() {
    let c = ModelConfig {
        loss_kind: LossKind::NllGaussian,
        ..cfg()
    };
    let (mut store, groups, p) = setup(&c, 7);
    store.get_mut(p.spatial_logvar.unwrap()).values.copy_from_slice(&[0.3, -0.2]);
    let truth: Vec<TrajPoint> = (1..=13).map(|i| pt(0.4 * i as f64, 0.1 * (i as f64).cos())).collect();
    let r = finite_diff_check(
        |g| {
            let a = g.input(agent(c.d_agent, 8));
            let k = predict_keys(g, &p.key_head, a)?;
            let parts = groups
                .iter()
                .map(|grp| spatial_loss(g, &k.for_group(grp), &truth, grp, c.loss_kind, p.spatial_logvar, GtTail::Extrapolate))
                .collect::<Result<Vec<_>>>()?;
            g.sum_of(&parts)
        },
        &store,
        1e-6,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn fill_zero_weights_give_bias() {
    let c = cfg();
    let (mut store, _, p) = setup(&c, 0);
    let head = p.fill[0].head(4).unwrap().clone();
    for l in &head.phi.layers {
        store.get_mut(l.weight).values.fill(0.0);
    }
    store.get_mut(head.phi.layers[1].bias).values.copy_from_slice(&[0.7, -1.1]);
    let mut g = Graph::new(&store);
    let zi = g.input(vec![3.0, 4.0]);
    let zj = g.input(vec![-8.0, 2.0]);
    let a = g.input(agent(c.d_agent, 0));
    let m = fill_midpoint(&mut g, zi, 5, zj, 9, a, &head, &p.embedding).unwrap();
    assert_eq!(g.value(m), &[0.7, -1.1]);
}

#[test]
fn fill_interval_mismatch() {
    let c = cfg();
    let (store, _, p) = setup(&c, 0);
    let head = p.fill[0].head(2).unwrap();
    let mut g = Graph::new(&store);
    let z = g.input(vec![0.0, 0.0]);
    let a = g.input(agent(c.d_agent, 0));
    assert!(fill_midpoint(&mut g, z, 1, z, 5, a, head, &p.embedding).is_err());
    assert!(fill_midpoint(&mut g, z, 3, z, 1, a, head, &p.embedding).is_err());
}

#[test]
fn fill_gradcheck_all_inputs() {
    let c = cfg();
    let (mut store, _, p) = setup(&c, 11);
    let zi = store.add("zi", vec![2], vec![0.4, -0.9]).unwrap();
    let zj = store.add("zj", vec![2], vec![1.3, 0.2]).unwrap();
    let a = store.add("a", vec![c.d_agent], agent(c.d_agent, 12)).unwrap();
    let head = p.fill[0].head(2).unwrap().clone();
    let r = finite_diff_check(
        |g| {
            let (zi, zj, a) = (g.param(zi), g.param(zj), g.param(a));
            let m = fill_midpoint(g, zi, 3, zj, 5, a, &head, &p.embedding)?;
            let t = g.input(vec![0.5, 0.5]);
            g.mse(m, t)
        },
        &store,
        1e-6,
    )
    .unwrap();
    assert!(r.relu_margin >= 1e-3, "pick another seed: {r:?}");
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

struct Run {
    trajs: Vec<Vec<[f64; 2]>>,
    provenance: Vec<Vec<StepSource>>,
}

fn run_all(store: &ParamStore, c: &ModelConfig, groups: &[KeyStepGroup], p: &G2lParams, keys: &[[f64; 2]], a: &[f64], order: LevelOrder) -> Run {
    let mut g = Graph::new(store);
    let key_nodes: Vec<Node> = keys.iter().map(|k| g.input(k.to_vec())).collect();
    let kp = KeyPrediction {
        flat: g.input(keys.concat()),
        keys: key_nodes,
    };
    let a = g.input(a.to_vec());
    let mut cache = FillCache::new(a);
    let mut out: Vec<GranularityTrajectory> = Vec::new();
    for (m, group) in groups.iter().enumerate() {
        let donor = group.inherits_tail_from.and_then(|l| out.iter().find(|t| t.granularity == l));
        let t = generate_trajectory_cached(&mut g, group, &kp.for_group(group), &mut cache, p.heads_for(m), &p.embedding, c.traj_len(), donor, order).unwrap();
        out.push(t);
    }
    Run {
        trajs: out
            .iter()
            .map(|t| t.points.iter().map(|n| [g.value(*n)[0], g.value(*n)[1]]).collect())
            .collect(),
        provenance: out.iter().map(|t| t.provenance.clone()).collect(),
    }
}

fn random_keys(seed: u64) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..7).map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]).collect()
}

#[test]
fn fill_order_and_provenance() {
    let c = cfg();
    let (store, groups, p) = setup(&c, 5);
    let keys = random_keys(1);
    let run = run_all(&store, &c, &groups, &p, &keys, &agent(c.d_agent, 2), LevelOrder::Forward);
    use StepSource::*;
    let g2: Vec<StepSource> = (1..=13).map(|i| if i % 2 == 1 { Key } else { Filled(2) }).collect();
    assert_eq!(run.provenance[0], g2);
    let g8 = vec![
        Key, Filled(2), Filled(4), Filled(2), Filled(8), Filled(2), Filled(4), Filled(2), Key,
        Inherited, Inherited, Inherited, Inherited,
    ];
    assert_eq!(run.provenance[2], g8);
    for (m, group) in groups.iter().enumerate() {
        for &idx in &group.indices {
            let k = keys[(idx - 1) / 2];
            assert_eq!(run.trajs[m][idx - 1], k, "granularity {} step {idx}", group.granularity);
        }
    }
    // G_8 tail steps 10..13 are the G_4 values
    assert_eq!(run.trajs[2][9..], run.trajs[1][9..]);
}

#[test]
fn level_order_does_not_matter() {
    let c = cfg();
    for seed in 0..5 {
        let (store, groups, p) = setup(&c, seed);
        let keys = random_keys(seed + 100);
        let a = agent(c.d_agent, seed + 200);
        let f = run_all(&store, &c, &groups, &p, &keys, &a, LevelOrder::Forward);
        let r = run_all(&store, &c, &groups, &p, &keys, &a, LevelOrder::Reverse);
        assert_eq!(f.trajs, r.trajs);
    }
}

#[test]
fn perturbing_a_key_is_section_local() {
    let c = cfg();
    let (store, groups, p) = setup(&c, 3);
    let a = agent(c.d_agent, 4);
    let keys = random_keys(9);
    let base = run_all(&store, &c, &groups, &p, &keys, &a, LevelOrder::Forward);
    for pos in 0..keys.len() {
        let step = 1 + 2 * pos;
        let mut k2 = keys.clone();
        k2[pos][0] += 0.37;
        let pert = run_all(&store, &c, &groups, &p, &k2, &a, LevelOrder::Forward);
        for (m, group) in groups.iter().enumerate() {
            if !group.indices.contains(&step) {
                continue;
            }
            let l = group.granularity;
            for idx in 1..=group.covered_until {
                if group.indices.contains(&idx) {
                    continue;
                }
                let inside = idx + l > step && idx < step + l;
                if !inside {
                    assert_eq!(base.trajs[m][idx - 1], pert.trajs[m][idx - 1], "L={l} key {step} idx {idx}");
                }
            }
        }
    }
}

#[test]
fn missing_donor_is_error() {
    let c = cfg();
    let (store, groups, p) = setup(&c, 0);
    let mut g = Graph::new(&store);
    let keys: Vec<Node> = (0..2).map(|_| g.input(vec![0.0, 0.0])).collect();
    let a = g.input(agent(c.d_agent, 0));
    let r = generate_trajectory(&mut g, &groups[2], &keys, a, p.heads_for(2), &p.embedding, 13, None);
    assert!(r.is_err());
}

#[test]
fn unshared_heads_have_distinct_names() {
    let c = ModelConfig {
        share_fill_heads: false,
        ..cfg()
    };
    let (store, groups, p) = setup(&c, 0);
    assert_eq!(p.fill.len(), 3);
    assert!(store.id("g2l.fill.g8.l8.wh").is_ok());
    assert!(store.id("g2l.fill.g2.l2.phi.0.w").is_ok());
    let keys = random_keys(0);
    let run = run_all(&store, &c, &groups, &p, &keys, &agent(c.d_agent, 0), LevelOrder::Forward);
    assert_eq!(run.trajs.len(), 3);
}

#[test]
fn generation_gradcheck() {
    let c = cfg();
    let (store, groups, p) = setup(&c, 21);
    let truth: Vec<f64> = (1..=13).flat_map(|i| [0.4 * i as f64, 0.05 * (i * i) as f64]).collect();
    let mut checked = 0;
    for seed in 0..6 {
        let a_vals = agent(c.d_agent, seed);
        let r = finite_diff_check(
            |g| {
                let a = g.input(a_vals.clone());
                let k = predict_keys(g, &p.key_head, a)?;
                let mut cache = FillCache::new(a);
                let trajs = generate_all(g, &c, &groups, &p, &k, &mut cache)?;
                let t = g.input(truth.clone());
                let mut parts = Vec::new();
                for tr in &trajs {
                    let f = tr.flat(g);
                    parts.push(g.mse(f, t)?);
                }
                g.sum_of(&parts)
            },
            &store,
            // deep composite: a wider step keeps roundoff below the tolerance
            1e-5,
        )
        .unwrap();
        if r.relu_margin < 1e-3 {
            continue;
        }
        assert!(r.max_rel_error < 1e-4, "seed {seed}: {r:?}");
        checked += 1;
    }
    assert!(checked > 0);
}
