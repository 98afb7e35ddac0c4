//! Trainer checkpoints.
//!
//! Binary layout (little endian): magic `OIRLCKPT`, `u32` version, `u64`
//! iteration, `u64` seed, three `u64` Adam step counters (actor, critic,
//! discriminator), `u32` array count, then per array a `u32` name length,
//! the UTF-8 name, a `u64` length and the `f64` values. The file ends with
//! the SHA-256 of everything before it. A JSON sidecar carries the config
//! hash and array shapes for inspection.

use crate::config::RunConfig;
use crate::env::Environment;
use crate::trainer::TrainState;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"OIRLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub iteration: usize,
    pub adam_steps: [u64; 3],
    pub arrays: Vec<(String, usize)>,
    pub sha256: String,
}

fn arrays(state: &TrainState) -> Vec<(String, &[f64])> {
    let n = &state.nets;
    let mut out: Vec<(String, &[f64])> = vec![
        ("policy.intra".into(), &n.intra.params),
        ("policy.termination".into(), &n.termination.params),
        ("policy.master".into(), &n.master.params),
        ("policy.critic".into(), &n.critic.params),
    ];
    for (i, net) in state.disc.reward_nets.iter().enumerate() {
        out.push((format!("disc.reward.{i}"), &net.params));
    }
    out.push(("disc.shaping".into(), &state.disc.shaping_net.params));
    for (name, adam) in [
        ("adam.actor", &state.ppoc_opt.actor),
        ("adam.critic", &state.ppoc_opt.critic),
        ("adam.disc", &state.disc_opt),
    ] {
        out.push((format!("{name}.m"), &adam.m));
        out.push((format!("{name}.v"), &adam.v));
    }
    out
}

fn arrays_mut(state: &mut TrainState) -> Vec<(String, &mut Vec<f64>)> {
    let mut out: Vec<(String, &mut Vec<f64>)> = Vec::new();
    let n = &mut state.nets;
    out.push(("policy.intra".into(), &mut n.intra.params));
    out.push(("policy.termination".into(), &mut n.termination.params));
    out.push(("policy.master".into(), &mut n.master.params));
    out.push(("policy.critic".into(), &mut n.critic.params));
    for (i, net) in state.disc.reward_nets.iter_mut().enumerate() {
        out.push((format!("disc.reward.{i}"), &mut net.params));
    }
    out.push(("disc.shaping".into(), &mut state.disc.shaping_net.params));
    let (actor, critic) = (&mut state.ppoc_opt.actor, &mut state.ppoc_opt.critic);
    for (name, adam) in [("adam.actor", actor), ("adam.critic", critic), ("adam.disc", &mut state.disc_opt)] {
        out.push((format!("{name}.m"), &mut adam.m));
        out.push((format!("{name}.v"), &mut adam.v));
    }
    out
}

pub fn encode(state: &TrainState) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(state.iteration as u64).to_le_bytes());
    buf.extend_from_slice(&state.seed.to_le_bytes());
    for step in [state.ppoc_opt.actor.step, state.ppoc_opt.critic.step, state.disc_opt.step] {
        buf.extend_from_slice(&step.to_le_bytes());
    }
    let arrs = arrays(state);
    buf.extend_from_slice(&(arrs.len() as u32).to_le_bytes());
    for (name, data) in arrs {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(data.len() as u64).to_le_bytes());
        for x in data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Overwrites `state` (freshly initialized for the same config) with the
/// checkpoint contents. Every array name and length must match.
pub fn decode_into(bytes: &[u8], state: &mut TrainState) -> Result<()> {
    if bytes.len() < 8 + 32 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let iteration = r.u64()? as usize;
    let seed = r.u64()?;
    if seed != state.seed {
        return Err(Error::Checkpoint(format!("checkpoint seed {seed} != run seed {}", state.seed)));
    }
    let steps = [r.u64()?, r.u64()?, r.u64()?];
    let count = r.u32()? as usize;
    let mut targets = arrays_mut(state);
    if count != targets.len() {
        return Err(Error::Checkpoint(format!("expected {} arrays, found {count}", targets.len())));
    }
    for (want, dst) in targets.iter_mut() {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if name != want {
            return Err(Error::Checkpoint(format!("expected array {want}, found {name}")));
        }
        let n = r.u64()? as usize;
        if n != dst.len() {
            return Err(Error::Checkpoint(format!("{name}: expected {} values, found {n}", dst.len())));
        }
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        for (d, chunk) in dst.iter_mut().zip(raw.chunks_exact(8)) {
            *d = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    state.iteration = iteration;
    state.ppoc_opt.actor.step = steps[0];
    state.ppoc_opt.critic.step = steps[1];
    state.disc_opt.step = steps[2];
    Ok(())
}

pub fn sidecar(state: &TrainState, cfg: &RunConfig, bytes: &[u8]) -> Sidecar {
    Sidecar {
        version: CHECKPOINT_VERSION,
        config_hash: cfg.run_hash(),
        seed: state.seed,
        iteration: state.iteration,
        adam_steps: [state.ppoc_opt.actor.step, state.ppoc_opt.critic.step, state.disc_opt.step],
        arrays: arrays(state).into_iter().map(|(n, a)| (n, a.len())).collect(),
        sha256: hex::encode(&bytes[bytes.len() - 32..]),
    }
}

/// Writes `<path>` and `<path>.json`, each through a temporary file.
pub fn save(path: &Path, state: &TrainState, cfg: &RunConfig) -> Result<()> {
    let bytes = encode(state);
    let meta = serde_json::to_string_pretty(&sidecar(state, cfg, &bytes))?;
    write_atomic(path, &bytes)?;
    write_atomic(&sidecar_path(path), meta.as_bytes())
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    p.into()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads a checkpoint for `cfg`, refusing one written under another config.
pub fn load(path: &Path, cfg: &RunConfig, env: &Environment, seed: u64) -> Result<TrainState> {
    let side = sidecar_path(path);
    if side.exists() {
        let meta: Sidecar = serde_json::from_str(&std::fs::read_to_string(&side)?)?;
        if meta.config_hash != cfg.run_hash() {
            return Err(Error::Checkpoint(format!(
                "checkpoint config {} does not match run config {}",
                meta.config_hash,
                cfg.run_hash()
            )));
        }
    }
    let bytes = std::fs::read(path)?;
    let mut state = TrainState::init(cfg, env, seed);
    decode_into(&bytes, &mut state)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_exact() {
        let cfg = RunConfig::default();
        let env = cfg.env.build().unwrap();
        let mut state = TrainState::init(&cfg, &env, 3);
        state.iteration = 7;
        state.disc_opt.step = 5;
        state.disc_opt.m.iter_mut().enumerate().for_each(|(i, x)| *x = i as f64 * 1e-3);
        let bytes = encode(&state);
        let mut back = TrainState::init(&cfg, &env, 3);
        decode_into(&bytes, &mut back).unwrap();
        assert_eq!(back, state);
    }

    #[test]
    fn corruption_is_detected() {
        let cfg = RunConfig::default();
        let env = cfg.env.build().unwrap();
        let state = TrainState::init(&cfg, &env, 0);
        let mut bytes = encode(&state);
        bytes[100] ^= 1;
        let mut back = TrainState::init(&cfg, &env, 0);
        assert!(decode_into(&bytes, &mut back).is_err());
        let short = &encode(&state)[..50];
        assert!(decode_into(short, &mut back).is_err());
    }
}
