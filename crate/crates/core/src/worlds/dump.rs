use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::reacher::{reset, step, WorldConfig};
use crate::rssm::Observation;
use crate::{Error, Result};

/// Metadata written next to the raw frame buffer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameManifest {
    pub frames: usize,
    pub size: usize,
    pub channels: usize,
    pub variant: String,
    pub seed: u64,
}

/// Rolls one episode with `policy` and writes `states.csv` (one row per
/// agent step, including the reset state), `frames.bin` (concatenated HWC
/// u8 images) and `frames.json`.
pub fn dump_episode(
    config: &WorldConfig,
    seed: u64,
    policy: &mut dyn FnMut(usize) -> Vec<f64>,
    dir: &Path,
) -> Result<FrameManifest> {
    config.validate()?;
    fs::create_dir_all(dir)?;
    let (mut state, mut bundle) = reset(config, seed);
    let mut csv = String::from(
        "step,theta1,theta2,vel1,vel2,target_x,target_y,tip_x,tip_y,action1,action2,reward\n",
    );
    let mut frames: Vec<u8> = Vec::new();
    let mut count = 0;
    let mut reward = 0.0;
    for t in 0..=config.agent_steps() {
        let img = match bundle.get(super::reacher::IMAGE_ID) {
            Some(Observation::Image(img)) => img,
            _ => return Err(Error::Format("episode bundle lacks an image".into())),
        };
        frames.extend_from_slice(&img.pixels);
        count += 1;
        let tip = state.fingertip();
        let last = t == config.agent_steps();
        let action = if last { vec![f64::NAN; 2] } else { policy(t) };
        if action.len() != 2 {
            return Err(Error::Shape {
                op: "dump_episode",
                detail: format!("policy returned {} action values, expected 2", action.len()),
            });
        }
        csv.push_str(&format!(
            "{t},{},{},{},{},{},{},{},{},{},{},{reward}\n",
            state.theta[0],
            state.theta[1],
            state.velocity[0],
            state.velocity[1],
            state.target[0],
            state.target[1],
            tip[0],
            tip[1],
            action[0],
            action[1]
        ));
        if !last {
            let (next, b, r) = step(config, &state, &action);
            state = next;
            bundle = b;
            reward = r;
        }
    }
    fs::write(dir.join("states.csv"), csv)?;
    fs::File::create(dir.join("frames.bin"))?.write_all(&frames)?;
    let manifest = FrameManifest {
        frames: count,
        size: config.precrop_size,
        channels: config.channels,
        variant: config.variant.name().to_string(),
        seed,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("frames.json"), text)?;
    Ok(manifest)
}
