//! Displacement-error metrics over K mode-conditioned trajectory samples.
//!
//! Aggregation order is fixed: per agent, take min/avg over the K samples,
//! then mean over all agents of all scenes. The ratio factor RF compares
//! average to minimum final displacement; an exact minimum of zero is
//! reported as a sentinel instead of dividing.

use serde::Serialize;

use crate::decoder::{Select, TrajectorySample};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scene::Scene;

/// Average displacement error between two [T, 2] tracks, meters.
pub fn ade(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() || pred.len() % 2 != 0 || pred.is_empty() {
        return Err(Error::Dimension(format!(
            "ade over mismatched tracks: {} vs {} values",
            pred.len(),
            gt.len()
        )));
    }
    let t = pred.len() / 2;
    let mut sum = 0.0;
    for i in 0..t {
        let dx = pred[i * 2] - gt[i * 2];
        let dy = pred[i * 2 + 1] - gt[i * 2 + 1];
        sum += (dx * dx + dy * dy).sqrt();
    }
    Ok(sum / t as f64)
}

/// Final displacement error: distance at the last step, meters.
pub fn fde(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() || pred.len() % 2 != 0 || pred.is_empty() {
        return Err(Error::Dimension(format!(
            "fde over mismatched tracks: {} vs {} values",
            pred.len(),
            gt.len()
        )));
    }
    let i = pred.len() - 2;
    let (dx, dy) = (pred[i] - gt[i], pred[i + 1] - gt[i + 1]);
    Ok((dx * dx + dy * dy).sqrt())
}

/// Per-agent min and avg over K samples, then mean over agents. Each inner
/// vector holds one agent's K per-sample errors.
pub fn aggregate(per_agent_errors: &[Vec<f64>]) -> Result<(f64, f64)> {
    if per_agent_errors.is_empty() {
        return Err(Error::Contract("aggregate over zero agents".into()));
    }
    let mut min_sum = 0.0;
    let mut avg_sum = 0.0;
    for errs in per_agent_errors {
        if errs.is_empty() {
            return Err(Error::Contract("aggregate needs K >= 1 samples".into()));
        }
        let mn = errs.iter().cloned().fold(f64::INFINITY, f64::min);
        let avg = errs.iter().sum::<f64>() / errs.len() as f64;
        min_sum += mn;
        avg_sum += avg;
    }
    let n = per_agent_errors.len() as f64;
    Ok((min_sum / n, avg_sum / n))
}

/// Ratio factor avgFDE / minFDE, with a sentinel when the minimum is an
/// exact hit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Rf {
    Ratio(f64),
    ExactHit,
}

pub fn rf(avg_fde: f64, min_fde: f64) -> Result<Rf> {
    if min_fde < 0.0 || avg_fde < 0.0 {
        return Err(Error::Contract(format!(
            "displacement errors cannot be negative: {avg_fde}, {min_fde}"
        )));
    }
    if min_fde == 0.0 {
        Ok(Rf::ExactHit)
    } else {
        Ok(Rf::Ratio(avg_fde / min_fde))
    }
}

// ─── report ─────────────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct SceneEval {
    pub id: String,
    pub agents: usize,
    pub min_ade: f64,
    pub avg_ade: f64,
    pub min_fde: f64,
    pub avg_fde: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub k: usize,
    /// "mode-mean" or "sampled".
    pub provenance: String,
    pub scenes: usize,
    pub agents: usize,
    pub min_ade: f64,
    pub avg_ade: f64,
    pub min_fde: f64,
    pub avg_fde: f64,
    pub rf: Rf,
    pub per_scene: Vec<SceneEval>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("report serialization failed: {e}")))
    }

    pub fn text_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "K={} samples ({}), {} scenes, {} agents\n",
            self.k, self.provenance, self.scenes, self.agents
        ));
        out.push_str(&format!(
            "{:<14} {:>9} {:>9} {:>9} {:>9}\n",
            "scene", "minADE", "avgADE", "minFDE", "avgFDE"
        ));
        for s in &self.per_scene {
            out.push_str(&format!(
                "{:<14} {:>9.4} {:>9.4} {:>9.4} {:>9.4}\n",
                s.id, s.min_ade, s.avg_ade, s.min_fde, s.avg_fde
            ));
        }
        let rf_text = match self.rf {
            Rf::Ratio(v) => format!("{v:.2}"),
            Rf::ExactHit => "exact-hit".to_string(),
        };
        out.push_str(&format!(
            "{:<14} {:>9.4} {:>9.4} {:>9.4} {:>9.4}   RF {}\n",
            "aggregate", self.min_ade, self.avg_ade, self.min_fde, self.avg_fde, rf_text
        ));
        out
    }
}

/// Evaluate a sampler over scenes. `sample_fn` must return K samples per
/// scene; metrics follow the fixed aggregation order.
pub fn evaluate_samples(
    scenes: &[Scene],
    k: usize,
    provenance: &str,
    sample_fn: &dyn Fn(&Scene) -> Result<Vec<TrajectorySample>>,
) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::Contract("evaluation over zero scenes".into()));
    }
    if k < 1 {
        return Err(Error::Contract("evaluation needs K >= 1".into()));
    }
    let mut per_scene = Vec::with_capacity(scenes.len());
    let mut all_ade: Vec<Vec<f64>> = Vec::new();
    let mut all_fde: Vec<Vec<f64>> = Vec::new();
    for scene in scenes {
        let samples = sample_fn(scene)?;
        if samples.len() != k {
            return Err(Error::Contract(format!(
                "sampler returned {} samples for scene {}, expected {k}",
                samples.len(),
                scene.id
            )));
        }
        let a = scene.agents.len();
        let mut scene_ade: Vec<Vec<f64>> = vec![Vec::with_capacity(k); a];
        let mut scene_fde: Vec<Vec<f64>> = vec![Vec::with_capacity(k); a];
        for sample in &samples {
            if sample.a != a {
                return Err(Error::Dimension(format!(
                    "sample covers {} agents, scene {} has {a}",
                    sample.a, scene.id
                )));
            }
            for (ai, agent) in scene.agents.iter().enumerate() {
                let mut gt = Vec::with_capacity(agent.future.len() * 2);
                for p in &agent.future {
                    gt.push(p[0]);
                    gt.push(p[1]);
                }
                let pred = &sample.points[ai * sample.t * 2..(ai + 1) * sample.t * 2];
                scene_ade[ai].push(ade(pred, &gt)?);
                scene_fde[ai].push(fde(pred, &gt)?);
            }
        }
        let (min_ade, avg_ade) = aggregate(&scene_ade)?;
        let (min_fde, avg_fde) = aggregate(&scene_fde)?;
        per_scene.push(SceneEval {
            id: scene.id.clone(),
            agents: a,
            min_ade,
            avg_ade,
            min_fde,
            avg_fde,
        });
        all_ade.extend(scene_ade);
        all_fde.extend(scene_fde);
    }
    let (min_ade, avg_ade) = aggregate(&all_ade)?;
    let (min_fde, avg_fde) = aggregate(&all_fde)?;
    let report = EvalReport {
        k,
        provenance: provenance.to_string(),
        scenes: scenes.len(),
        agents: all_ade.len(),
        min_ade,
        avg_ade,
        min_fde,
        avg_fde,
        rf: rf(avg_fde, min_fde)?,
        per_scene,
    };
    if report.min_ade > report.avg_ade || report.min_fde > report.avg_fde {
        return Err(Error::Contract(format!(
            "metric ordering violated: minADE {} vs avgADE {}, minFDE {} vs avgFDE {}",
            report.min_ade, report.avg_ade, report.min_fde, report.avg_fde
        )));
    }
    Ok(report)
}

/// K samples for one scene: deterministic mode-mean rollouts, or sampled
/// rollouts with a per-mode seed when `sampled` is set.
pub fn scene_samples(
    model: &Model,
    scene: &Scene,
    k: usize,
    sampled: bool,
    seed: u64,
) -> Result<Vec<TrajectorySample>> {
    if !sampled {
        return model.predict(scene, k);
    }
    let sc = model.encode_scene(scene)?;
    let a = sc.obs.a;
    let mut out = Vec::with_capacity(k);
    for mode in 0..k {
        let z = crate::latent::ModeConfig::new(vec![mode; a], model.cfg.k_modes)?;
        let (points, dec_out) = model.decode_ar(&sc, &z, Select::Sample, seed ^ (mode as u64))?;
        out.push(TrajectorySample {
            points,
            a,
            t: dec_out.t,
            mode_config: z,
        });
    }
    Ok(out)
}

/// Evaluate a model: K samples per scene via [`scene_samples`].
pub fn evaluate(
    model: &Model,
    scenes: &[Scene],
    k: usize,
    sampled: bool,
    seed: u64,
) -> Result<EvalReport> {
    let provenance = if sampled { "sampled" } else { "mode-mean" };
    evaluate_samples(scenes, k, provenance, &|scene| {
        scene_samples(model, scene, k, sampled, seed)
    })
}
