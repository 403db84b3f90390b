//! Named-tensor checkpoints of the model, its optimizer and the agent.
//! Tensor names are `<group>/<parameter>`; optimizer moments live under
//! `<group>.adam/m/...` and `<group>.adam/v/...` with a `steps` row.

use std::collections::BTreeMap;
use std::path::Path;

use super::policy::Agent;
use crate::diffgraph::{load_tensors, save_tensors, Adam, Manifest, ParamStore, Tensor};
use crate::rssm::Rssm;
use crate::{Error, Result};

fn store_entries(prefix: &str, store: &ParamStore, out: &mut Vec<(String, Tensor)>) {
    for (name, t) in store.iter() {
        out.push((format!("{prefix}/{name}"), t.clone()));
    }
}

fn adam_entries(prefix: &str, opt: &Adam, store: &ParamStore, out: &mut Vec<(String, Tensor)>) {
    let (m, v, steps) = opt.state();
    for ((name, _), (m, v)) in store.iter().zip(m.iter().zip(v)) {
        out.push((format!("{prefix}.adam/m/{name}"), m.clone()));
        out.push((format!("{prefix}.adam/v/{name}"), v.clone()));
    }
    let steps: Vec<f64> = steps.iter().map(|&s| s as f64).collect();
    out.push((
        format!("{prefix}.adam/steps"),
        Tensor::new(vec![1, steps.len()], steps),
    ));
}

/// Every tensor of a checkpoint, in file order.
pub fn checkpoint_entries(model: &Rssm, model_opt: &Adam, agent: &Agent) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    store_entries("model", &model.params, &mut out);
    adam_entries("model", model_opt, &model.params, &mut out);
    match agent {
        Agent::Sac(n) => {
            store_entries("sac.actor", &n.actor_params, &mut out);
            adam_entries("sac.actor", &n.actor_opt, &n.actor_params, &mut out);
            store_entries("sac.critic", &n.critic_params, &mut out);
            adam_entries("sac.critic", &n.critic_opt, &n.critic_params, &mut out);
            store_entries("sac.target", &n.target_params, &mut out);
            out.push(("sac.log_alpha".into(), Tensor::scalar(n.log_alpha)));
        }
        Agent::Imagination(n) => {
            store_entries("imagination.actor", &n.actor_params, &mut out);
            adam_entries("imagination.actor", &n.actor_opt, &n.actor_params, &mut out);
            store_entries("imagination.value", &n.value_params, &mut out);
            adam_entries("imagination.value", &n.value_opt, &n.value_params, &mut out);
            store_entries("imagination.slow", &n.slow_params, &mut out);
        }
    }
    out
}

pub fn save_checkpoint(
    stem: &Path,
    model: &Rssm,
    model_opt: &Adam,
    agent: &Agent,
    metadata: serde_json::Value,
) -> Result<()> {
    let entries = checkpoint_entries(model, model_opt, agent);
    let refs: Vec<(String, &Tensor)> = entries.iter().map(|(n, t)| (n.clone(), t)).collect();
    save_tensors(stem, &refs, metadata)
}

struct Source(BTreeMap<String, Tensor>);

impl Source {
    fn take(&mut self, name: &str) -> Tensor {
        self.0.remove(name).expect("validated before restoring")
    }

    fn store(&mut self, prefix: &str, store: &mut ParamStore) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = format!("{prefix}/{}", store.name(id));
            *store.get_mut(id) = self.take(&name);
        }
    }

    fn adam(&mut self, prefix: &str, opt: &mut Adam, store: &ParamStore) {
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for (name, _) in store.iter() {
            m.push(self.take(&format!("{prefix}.adam/m/{name}")));
            v.push(self.take(&format!("{prefix}.adam/v/{name}")));
        }
        let steps = self
            .take(&format!("{prefix}.adam/steps"))
            .data()
            .iter()
            .map(|&s| s as u64)
            .collect();
        opt.restore(m, v, steps);
    }
}

/// Restores a checkpoint into instances of the same architecture. Every
/// tensor is checked by name and shape before anything is overwritten.
pub fn load_checkpoint(
    stem: &Path,
    model: &mut Rssm,
    model_opt: &mut Adam,
    agent: &mut Agent,
) -> Result<Manifest> {
    let (manifest, tensors) = load_tensors(stem)?;
    let expected = checkpoint_entries(model, model_opt, agent);
    let mut found: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, t) in tensors {
        if found.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!(
                "tensor '{name}' appears twice in the checkpoint"
            )));
        }
    }
    for (name, t) in &expected {
        match found.get(name) {
            None => return Err(Error::Format(format!("checkpoint lacks tensor '{name}'"))),
            Some(f) if f.shape() != t.shape() => {
                return Err(Error::Format(format!(
                    "tensor '{name}' has shape {:?} in the checkpoint but {:?} in the model",
                    f.shape(),
                    t.shape()
                )))
            }
            Some(_) => {}
        }
    }
    if found.len() != expected.len() {
        let extra = found
            .keys()
            .find(|k| !expected.iter().any(|(n, _)| n == *k))
            .cloned()
            .unwrap_or_default();
        return Err(Error::Format(format!(
            "checkpoint holds unexpected tensor '{extra}'"
        )));
    }
    let mut src = Source(found);
    src.store("model", &mut model.params);
    src.adam("model", model_opt, &model.params);
    match agent {
        Agent::Sac(n) => {
            src.store("sac.actor", &mut n.actor_params);
            src.adam("sac.actor", &mut n.actor_opt, &n.actor_params);
            src.store("sac.critic", &mut n.critic_params);
            src.adam("sac.critic", &mut n.critic_opt, &n.critic_params);
            src.store("sac.target", &mut n.target_params);
            n.log_alpha = src.take("sac.log_alpha").data()[0];
        }
        Agent::Imagination(n) => {
            src.store("imagination.actor", &mut n.actor_params);
            src.adam("imagination.actor", &mut n.actor_opt, &n.actor_params);
            src.store("imagination.value", &mut n.value_params);
            src.adam("imagination.value", &mut n.value_opt, &n.value_params);
            src.store("imagination.slow", &mut n.slow_params);
        }
    }
    Ok(manifest)
}
