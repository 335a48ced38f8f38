//! Checkpoint files: network snapshot plus everything needed to continue a
//! run bit-identically (optimizer moments, learning rate, counters, and the
//! environment state that keys all random streams).
//!
//! Layout (little-endian): `EPGC`, u32 version, config hash, network
//! snapshot bytes, three Adam states, lr, iteration, env steps, env state,
//! last returns.

use std::path::Path;

use log::warn;

use crate::envs::EnvState;
use crate::error::{Error, Result};
use crate::nets::snapshot::{BinReader, BinWriter, NetsSnapshot};
use crate::optim::Adam;

use super::{EnsembleConfig, RunState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EPGC";
pub const CHECKPOINT_VERSION: u32 = 1;

fn write_adam(w: &mut BinWriter, a: &Adam) {
    w.u64(a.steps);
    w.f64_vec(&a.m);
    w.f64_vec(&a.v);
}

fn read_adam(r: &mut BinReader<'_>) -> Result<Adam> {
    let steps = r.u64()?;
    let m = r.f64_vec()?;
    let v = r.f64_vec()?;
    if m.len() != v.len() {
        return Err(Error::Integrity("optimizer moment lengths differ".into()));
    }
    Ok(Adam { m, v, steps })
}

fn u64_list(w: &mut BinWriter, values: impl ExactSizeIterator<Item = u64>) {
    w.u64(values.len() as u64);
    for v in values {
        w.u64(v);
    }
}

fn read_u64_list(r: &mut BinReader<'_>) -> Result<Vec<u64>> {
    let n = r.u64()? as usize;
    if n > 1 << 32 {
        return Err(Error::Integrity(format!("implausible list length {n}")));
    }
    (0..n).map(|_| r.u64()).collect()
}

pub fn encode(state: &RunState, config_hash: &str) -> Vec<u8> {
    let mut w = BinWriter::default();
    w.buf.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.bytes(config_hash.as_bytes());
    let snap = NetsSnapshot {
        policy: state.policy.clone(),
        value: state.value.clone(),
        disc: state.disc.clone(),
    };
    w.bytes(&snap.to_bytes());
    for a in [&state.policy_adam, &state.value_adam, &state.disc_adam] {
        write_adam(&mut w, a);
    }
    w.f64(state.lr);
    w.u64(state.iteration);
    w.u64(state.env_steps);
    let e = &state.envs;
    w.u64(e.master_seed);
    let flat = |v: &[[f64; 2]]| v.iter().flatten().copied().collect::<Vec<f64>>();
    w.f64_vec(&flat(&e.pos));
    w.f64_vec(&flat(&e.vel));
    u64_list(&mut w, e.step.iter().map(|&s| s as u64));
    u64_list(&mut w, e.episode.iter().copied());
    w.f64_vec(&e.running_return);
    w.u64(state.last_returns.len() as u64);
    for r in &state.last_returns {
        match r {
            Some(v) => {
                w.u32(1);
                w.f64(*v);
            }
            None => w.u32(0),
        }
    }
    w.buf
}

/// Decodes a checkpoint; returns the state and the stored config hash.
pub fn decode(bytes: &[u8]) -> Result<(RunState, String)> {
    let mut r = BinReader::new(bytes);
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
        )));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (this build reads {CHECKPOINT_VERSION})"
        )));
    }
    let hash =
        String::from_utf8(r.bytes()?.to_vec()).map_err(|_| Error::Integrity("config hash is not UTF-8".into()))?;
    let snap = NetsSnapshot::from_bytes(r.bytes()?)?;
    let policy_adam = read_adam(&mut r)?;
    let value_adam = read_adam(&mut r)?;
    let disc_adam = read_adam(&mut r)?;
    let lr = r.f64()?;
    let iteration = r.u64()?;
    let env_steps = r.u64()?;
    let master_seed = r.u64()?;
    let pairs = |v: Vec<f64>| -> Result<Vec<[f64; 2]>> {
        if !v.len().is_multiple_of(2) {
            return Err(Error::Integrity("odd-length position/velocity list".into()));
        }
        Ok(v.chunks_exact(2).map(|c| [c[0], c[1]]).collect())
    };
    let pos = pairs(r.f64_vec()?)?;
    let vel = pairs(r.f64_vec()?)?;
    let step = read_u64_list(&mut r)?
        .into_iter()
        .map(|s| u32::try_from(s).map_err(|_| Error::Integrity(format!("step counter {s} overflows"))))
        .collect::<Result<Vec<_>>>()?;
    let episode = read_u64_list(&mut r)?;
    let running_return = r.f64_vec()?;
    let n = pos.len();
    if vel.len() != n || step.len() != n || episode.len() != n || running_return.len() != n {
        return Err(Error::Integrity("environment state lists differ in length".into()));
    }
    let k = r.u64()? as usize;
    if k > 1 << 20 {
        return Err(Error::Integrity(format!("implausible agent count {k}")));
    }
    let mut last_returns = Vec::with_capacity(k);
    for _ in 0..k {
        last_returns.push(match r.u32()? {
            0 => None,
            1 => Some(r.f64()?),
            flag => return Err(Error::Integrity(format!("bad optional flag {flag}"))),
        });
    }
    r.finish()?;
    if policy_adam.len() != snap.policy.len()
        || value_adam.len() != snap.value.len()
        || disc_adam.len() != snap.disc.len()
    {
        return Err(Error::Integrity(
            "optimizer state does not match parameter sizes".into(),
        ));
    }
    let state = RunState {
        iteration,
        policy: snap.policy,
        value: snap.value,
        disc: snap.disc,
        policy_adam,
        value_adam,
        disc_adam,
        lr,
        envs: EnvState {
            master_seed,
            pos,
            vel,
            step,
            episode,
            running_return,
        },
        env_steps,
        last_returns,
    };
    Ok((state, hash))
}

/// Writes atomically (temp file, then rename).
pub fn checkpoint(state: &RunState, cfg: &EnsembleConfig, path: &Path) -> Result<()> {
    let bytes = encode(state, &cfg.hash());
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint for `cfg`. A config-hash mismatch is only a warning;
/// the returned flag reports it. Shape mismatches with `cfg` are errors.
pub fn restore(path: &Path, cfg: &EnsembleConfig) -> Result<(RunState, bool)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (state, stored) = decode(&bytes)?;
    let current = cfg.hash();
    let mismatch = stored != current;
    if mismatch {
        warn!(
            "checkpoint {} was written with config hash {stored}, current config hash is {current}",
            path.display()
        );
    }
    let nets = super::networks(cfg);
    if state.policy.len() != nets.policy.param_count()
        || state.value.len() != nets.value.param_count()
        || state.disc.len() != nets.disc.param_count()
        || state.envs.num_envs() != cfg.num_envs()
    {
        return Err(Error::Config(format!(
            "checkpoint {} does not fit the configured networks or env count",
            path.display()
        )));
    }
    Ok((state, mismatch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{networks, RunState};

    fn small() -> EnsembleConfig {
        let mut c = EnsembleConfig::default();
        c.envs_per_agent = 2;
        c.hidden = vec![4];
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let cfg = small();
        let mut s = RunState::new(&cfg, &networks(&cfg)).unwrap();
        s.policy_adam.m[0] = 0.123_456_789_012_345_67;
        s.lr = 3.3e-4;
        s.last_returns[2] = Some(7.25);
        s.envs.step[1] = 9;
        let bytes = encode(&s, &cfg.hash());
        let (back, hash) = decode(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(hash, cfg.hash());
    }

    #[test]
    fn corrupt_and_truncated_files() {
        let cfg = small();
        let s = RunState::new(&cfg, &networks(&cfg)).unwrap();
        let mut bytes = encode(&s, &cfg.hash());
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Integrity(_))), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(Error::Integrity(_))));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
        let mut v = encode(&s, &cfg.hash());
        v[4] = 9;
        assert!(matches!(decode(&v), Err(Error::Format(_))));
    }

    #[test]
    fn restore_flags_hash_mismatch() {
        let cfg = small();
        let s = RunState::new(&cfg, &networks(&cfg)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        checkpoint(&s, &cfg, &path).unwrap();
        let (back, mismatch) = restore(&path, &cfg).unwrap();
        assert!(!mismatch);
        assert_eq!(back, s);
        let mut other = cfg.clone();
        other.lambda_f = 0.5;
        assert!(restore(&path, &other).unwrap().1);
        let mut wrong = cfg.clone();
        wrong.hidden = vec![5];
        assert!(matches!(restore(&path, &wrong), Err(Error::Config(_))));
    }
}
