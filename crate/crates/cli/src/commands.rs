use std::collections::BTreeMap;
use std::path::Path;

use keystep_core::data::{load_ethucy, gen_synthetic, SynthConfig};
use keystep_core::evalkit::{curves_csv, evaluate, MetricsReport, StepErrorCurve};
use keystep_core::gradsuite::gradient_suite;
use keystep_core::inference::{forecast, predict_multimodal, Predictor};
use keystep_core::io::write_atomic;
use keystep_core::trainer::{load_checkpoint, save_checkpoint, train_model, Checkpoint, TrainConfig};
use keystep_core::{Error, HeadKind, Model, Result, Scene, SceneSet, TrajPoint};
use serde_json::json;

use crate::{invalid, Command};

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { config, out, seed } => {
            let cfg: SynthConfig = match config {
                Some(p) => serde_json::from_str(&read(&p)?)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
                None => SynthConfig::default(),
            };
            let set = gen_synthetic(&cfg, seed)?;
            set.write_jsonl(&out)?;
            println!("{}", json!({ "scenes": set.len(), "out": out }));
            Ok(())
        }
        Command::Train {
            data,
            config,
            out,
            preset,
            verbose,
        } => {
            let base = TrainConfig::preset(&preset)?;
            let tc = match config {
                Some(p) => TrainConfig::from_json_over(&base, &read(&p)?)?,
                None => base,
            };
            let set = read_scenes(&data)?;
            let model = Model::init(tc.model_config(), tc.seed)?;
            let ckpt = train_model(&tc, &set, model, |r| {
                if verbose {
                    eprintln!("epoch {} loss {:.6}", r.epoch + 1, r.mean_loss);
                }
            })?;
            save_checkpoint(&ckpt, &out)?;
            println!(
                "{}",
                json!({ "epochs": ckpt.loss_trace.len(), "final_loss": ckpt.loss_trace.last(), "out": out })
            );
            Ok(())
        }
        Command::Eval {
            data,
            ckpt,
            out,
            baseline,
            k,
            mr_threshold,
        } => {
            if k.contains(&0) {
                return Err(invalid("--k values must be at least 1"));
            }
            if !(mr_threshold > 0.0 && mr_threshold.is_finite()) {
                return Err(invalid("--mr-threshold must be positive"));
            }
            let baselines = baseline
                .iter()
                .map(|b| match b.as_str() {
                    "cv" | "recursive" | "kalman" | "simultaneous" => Predictor::parse(b),
                    other => Err(invalid(format!("unknown baseline `{other}`"))),
                })
                .collect::<Result<Vec<_>>>()?;
            let ckpt = load_checkpoint(&ckpt)?;
            let set = read_scenes(&data)?;
            let model = checked_model(&ckpt, &set)?;
            let gts: Vec<Vec<TrajPoint>> = set.scenes.iter().map(|s| s.future.clone()).collect();
            let score = |p: Predictor| -> Result<MetricsReport> {
                require_head(&ckpt, p)?;
                let preds = predict_multimodal(&model, &set.scenes, p)?;
                let modes = preds[0].k();
                let ks: Vec<usize> = k.iter().map(|&k| k.min(modes)).collect();
                let mut r = evaluate(&preds, &gts, &ks, mr_threshold)?;
                // report under the requested k even when fewer modes exist
                for (asked, used) in k.iter().zip(&ks) {
                    if asked != used {
                        let v = r.min_ade[&used.to_string()];
                        r.min_ade.insert(asked.to_string(), v);
                        let v = r.mr[&used.to_string()];
                        r.mr.insert(asked.to_string(), v);
                    }
                }
                r.min_ade.retain(|key, _| k.iter().any(|x| x.to_string() == *key));
                r.mr.retain(|key, _| k.iter().any(|x| x.to_string() == *key));
                Ok(r)
            };
            let head = ckpt.config.head;
            let model_report = score(Predictor::Head(head))?;
            let mut base_reports = BTreeMap::new();
            for p in baselines {
                base_reports.insert(p.name(), score(p)?);
            }
            let doc = json!({
                "head": head,
                "modes": model.config.k_modes,
                "model": model_report,
                "baselines": base_reports,
            });
            write_atomic(&out, format!("{}\n", serde_json::to_string_pretty(&doc)?).as_bytes())
        }
        Command::Predict { ckpt, past, prune } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let model = ckpt.model()?;
            let past = parse_past(&past)?;
            if past.len() != model.config.t_p {
                return Err(invalid(format!(
                    "--past has {} points, the model observes {}",
                    past.len(),
                    model.config.t_p
                )));
            }
            let scene = Scene {
                id: "predict".into(),
                past,
                future: Vec::new(),
                neighbors: Vec::new(),
                timestep: 1.0,
            };
            let f = forecast(&model, &scene, ckpt.config.head, prune)?;
            println!("{}", serde_json::to_string(&f)?);
            Ok(())
        }
        Command::Curves { ckpt, data, out, heads } => {
            let ckpt = load_checkpoint(&ckpt)?;
            let set = read_scenes(&data)?;
            let model = checked_model(&ckpt, &set)?;
            let heads = if heads.is_empty() {
                [HeadKind::G2l, HeadKind::Recursive, HeadKind::Simultaneous]
                    .into_iter()
                    .filter(|h| ckpt.config.trains(*h))
                    .collect()
            } else {
                heads.iter().map(|h| HeadKind::parse(h)).collect::<Result<Vec<_>>>()?
            };
            let gts: Vec<Vec<TrajPoint>> = set.scenes.iter().map(|s| s.future.clone()).collect();
            let mut curves = Vec::new();
            for h in heads {
                require_head(&ckpt, Predictor::Head(h))?;
                let preds = predict_multimodal(&model, &set.scenes, Predictor::Head(h))?;
                curves.push(StepErrorCurve::compute(h.name(), &preds, &gts)?);
            }
            write_atomic(&out, curves_csv(&curves).as_bytes())
        }
        Command::Gradcheck { seed, eps } => {
            let r = gradient_suite(seed, eps)?;
            if !r.max_rel_error.is_finite() {
                return Err(Error::NonFinite("gradient check".into()));
            }
            println!("{}", serde_json::to_string(&r)?);
            Ok(())
        }
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// JSON lines, or an ETH/UCY text file when the extension is `.txt`.
fn read_scenes(path: &Path) -> Result<SceneSet> {
    if path.extension().is_some_and(|e| e == "txt") {
        load_ethucy(path)
    } else {
        SceneSet::read_jsonl(path)
    }
}

fn checked_model(ckpt: &Checkpoint, set: &SceneSet) -> Result<Model> {
    let model = ckpt.model()?;
    if set.t_p != model.config.t_p || set.t_f != model.config.t_f {
        return Err(invalid(format!(
            "data has t_p={} t_f={}, checkpoint expects t_p={} t_f={}",
            set.t_p, set.t_f, model.config.t_p, model.config.t_f
        )));
    }
    if set.is_empty() {
        return Err(Error::EmptyInput("evaluation data"));
    }
    Ok(model)
}

fn require_head(ckpt: &Checkpoint, p: Predictor) -> Result<()> {
    match p.head() {
        Some(h) if !ckpt.config.trains(h) => Err(invalid(format!(
            "`{}` needs the {} head, which this checkpoint did not train (add it to `baselines`)",
            p.name(),
            h.name()
        ))),
        _ => Ok(()),
    }
}

fn parse_past(s: &str) -> Result<Vec<TrajPoint>> {
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let mut it = p.split(',').map(|v| v.trim().parse::<f64>());
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(x)), Some(Ok(y)), None) if x.is_finite() && y.is_finite() => Ok(TrajPoint::new(x, y)),
                _ => Err(invalid(format!("bad point `{p}` in --past (expected `x,y`)"))),
            }
        })
        .collect()
}
