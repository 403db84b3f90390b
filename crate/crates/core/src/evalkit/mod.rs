//! Evaluation protocol, robust aggregation, saliency maps, a ground-truth
//! probe decoder, and the command-line entry point.

mod cli;
mod probe;
mod runs;
mod saliency;

use rand::Rng;

use crate::trainer::{run_episode, Policy};
use crate::worlds::Environment;
use crate::{Error, Result};

pub use cli::cli_run;
pub use probe::{collect_probe_data, train_probe_decoder, ProbeConfig, ProbeData, ProbeResult};
pub use runs::{aggregate, aggregate_csv, AggregateRow, RunResult, AGGREGATE_NOTE};
pub use saliency::{saliency_map, SaliencyMap, SaliencyMethod};

/// Returns of `n` episodes seeded `first_seed, first_seed + 1, ...`, in
/// episode order.
pub fn evaluate_policy(
    env: &mut dyn Environment,
    policy: &mut dyn Policy,
    n: usize,
    first_seed: u64,
) -> Result<Vec<f64>> {
    (0..n as u64)
        .map(|k| Ok(run_episode(env, policy, first_seed + k)?.total_reward()))
        .collect()
}

/// Interquartile mean with floor trimming: drops `floor(n / 4)` values
/// from each end and averages the rest.
pub fn iqm(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Usage("iqm of an empty set".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len() / 4;
    let kept = &v[k..v.len() - k];
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

/// Linear-interpolation quantile of sorted data, `q` in `[0, 1]`.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile interval of the pooled IQM under resampling with
/// replacement inside every stratum.
pub fn stratified_bootstrap_ci(
    strata: &[Vec<f64>],
    resamples: usize,
    level: f64,
    rng: &mut impl Rng,
) -> Result<(f64, f64)> {
    if strata.is_empty() || strata.iter().any(Vec::is_empty) {
        return Err(Error::Usage(
            "bootstrap needs at least one nonempty stratum".into(),
        ));
    }
    if resamples == 0 || !(level > 0.0 && level < 1.0) {
        return Err(Error::Usage(format!(
            "need resamples > 0 and level in (0, 1), got {resamples}, {level}"
        )));
    }
    let total: usize = strata.iter().map(Vec::len).sum();
    let mut pooled = Vec::with_capacity(total);
    let mut stats = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        pooled.clear();
        for s in strata {
            pooled.extend((0..s.len()).map(|_| s[rng.random_range(0..s.len())]));
        }
        stats.push(iqm(&pooled)?);
    }
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((quantile(&stats, tail), quantile(&stats, 1.0 - tail)))
}
