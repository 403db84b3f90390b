use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{iqm, stratified_bootstrap_ci};
use crate::trainer::EvalPoint;
use crate::{Error, Result};

/// Evaluation curve of one seed plus the labels it is grouped by.
#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub variant: String,
    pub objective: String,
    pub mode: String,
    pub seed: u64,
    pub points: Vec<EvalPoint>,
}

#[derive(Deserialize)]
struct RunMeta {
    variant: String,
    objective: String,
    mode: String,
    seed: u64,
}

#[derive(Deserialize)]
struct EvalRow {
    step: usize,
    episode: usize,
    #[serde(rename = "return")]
    ret: f64,
}

impl RunResult {
    /// Reads `run.json` and `eval.csv` from a training output directory.
    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("run.json");
        let text = std::fs::read_to_string(&meta_path)?;
        let meta: RunMeta = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", meta_path.display())))?;
        let eval_path = dir.join("eval.csv");
        let mut reader = csv::Reader::from_path(&eval_path)
            .map_err(|e| Error::Format(format!("{}: {e}", eval_path.display())))?;
        let mut points: Vec<EvalPoint> = Vec::new();
        for row in reader.deserialize() {
            let row: EvalRow =
                row.map_err(|e| Error::Format(format!("{}: {e}", eval_path.display())))?;
            match points.last_mut() {
                Some(p) if p.step == row.step => p.returns.push(row.ret),
                _ => points.push(EvalPoint {
                    step: row.step,
                    returns: vec![row.ret],
                }),
            }
            let n = points.last().map_or(0, |p| p.returns.len());
            if row.episode + 1 != n {
                return Err(Error::Format(format!(
                    "{}: episode {} at step {} is out of order",
                    eval_path.display(),
                    row.episode,
                    row.step
                )));
            }
        }
        Ok(RunResult {
            variant: meta.variant,
            objective: meta.objective,
            mode: meta.mode,
            seed: meta.seed,
            points,
        })
    }

    /// Mean return at each evaluation point.
    pub fn curve(&self) -> Vec<(usize, f64)> {
        self.points
            .iter()
            .map(|p| {
                (
                    p.step,
                    p.returns.iter().sum::<f64>() / p.returns.len() as f64,
                )
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub variant: String,
    pub objective: String,
    pub step: usize,
    pub iqm: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Convention line written above the aggregate table.
pub const AGGREGATE_NOTE: &str =
    "# iqm drops floor(n/4) seed scores from each end; ci is a 95% percentile bootstrap resampling seeds within each variant";

/// Per `(variant, objective, step)`: IQM over seeds of the mean eval
/// return, with a bootstrap interval. When several variants share an
/// objective, an extra `all` row pools them stratified by variant.
/// Seeds of one group must share evaluation steps.
pub fn aggregate(runs: &[RunResult], resamples: usize, seed: u64) -> Result<Vec<AggregateRow>> {
    if runs.is_empty() {
        return Err(Error::Usage("aggregate needs at least one run".into()));
    }
    // objective -> variant -> seed curves
    let mut groups: BTreeMap<&str, BTreeMap<&str, Vec<Vec<(usize, f64)>>>> = BTreeMap::new();
    for r in runs {
        groups
            .entry(&r.objective)
            .or_default()
            .entry(&r.variant)
            .or_default()
            .push(r.curve());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for (objective, variants) in &groups {
        let mut shared_steps: Option<Vec<usize>> = None;
        let mut aligned = true;
        let mut per_variant: Vec<(&str, Vec<usize>, Vec<Vec<f64>>)> = Vec::new();
        for (variant, curves) in variants {
            let steps: Vec<usize> = curves[0].iter().map(|c| c.0).collect();
            if curves
                .iter()
                .any(|c| c.iter().map(|p| p.0).ne(steps.iter().copied()))
            {
                return Err(Error::Usage(format!(
                    "runs of {variant}/{objective} evaluate at different steps"
                )));
            }
            // scores[k] holds every seed's score at steps[k]
            let scores: Vec<Vec<f64>> = (0..steps.len())
                .map(|k| curves.iter().map(|c| c[k].1).collect())
                .collect();
            for (k, &step) in steps.iter().enumerate() {
                let (lo, hi) = stratified_bootstrap_ci(
                    std::slice::from_ref(&scores[k]),
                    resamples,
                    0.95,
                    &mut rng,
                )?;
                rows.push(AggregateRow {
                    variant: variant.to_string(),
                    objective: objective.to_string(),
                    step,
                    iqm: iqm(&scores[k])?,
                    ci_low: lo,
                    ci_high: hi,
                });
            }
            match &shared_steps {
                None => shared_steps = Some(steps.clone()),
                Some(s) if *s != steps => aligned = false,
                Some(_) => {}
            }
            per_variant.push((variant, steps, scores));
        }
        if per_variant.len() > 1 && aligned {
            let steps = shared_steps.unwrap_or_default();
            for (k, &step) in steps.iter().enumerate() {
                let strata: Vec<Vec<f64>> = per_variant.iter().map(|v| v.2[k].clone()).collect();
                let pooled: Vec<f64> = strata.iter().flatten().copied().collect();
                let (lo, hi) = stratified_bootstrap_ci(&strata, resamples, 0.95, &mut rng)?;
                rows.push(AggregateRow {
                    variant: "all".into(),
                    objective: objective.to_string(),
                    step,
                    iqm: iqm(&pooled)?,
                    ci_low: lo,
                    ci_high: hi,
                });
            }
        }
    }
    Ok(rows)
}

/// `variant,objective,step,iqm,ci_low,ci_high` under [`AGGREGATE_NOTE`].
pub fn aggregate_csv(rows: &[AggregateRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
        .map_err(|e| Error::Format(e.to_string()))?;
    let mut s = String::new();
    let _ = writeln!(s, "{AGGREGATE_NOTE}");
    if rows.is_empty() {
        s.push_str("variant,objective,step,iqm,ci_low,ci_high\n");
    }
    s.push_str(&body);
    Ok(s)
}
