//! Versioned binary checkpoints: config hash, little-endian f64 parameter
//! and moment arrays, counters, and a trailing FNV-1a 64 checksum.
//! Restoring and continuing reproduces an uninterrupted run bit-exactly
//! when local search is off (buffers are not serialized).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ndgrad::AdamState;

use super::{fnv1a64, TrainConfig, Trainer};

const MAGIC: &[u8; 8] = b"DSCKPT01";

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        self.u64(vs.len() as u64);
        for &v in vs {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }
}

fn write_adam(w: &mut Writer, a: &AdamState) {
    let (m, v) = a.moments();
    w.f64s(m);
    w.f64s(v);
    w.u64(a.step_count());
    w.u64(a.skipped);
}

fn read_adam(r: &mut Reader) -> Result<AdamState> {
    let m = r.f64s()?;
    let v = r.f64s()?;
    let step = r.u64()?;
    let skipped = r.u64()?;
    if m.len() != v.len() {
        return Err(Error::Checkpoint("moment arrays disagree in length".into()));
    }
    Ok(AdamState::restore_raw(m, v, step, skipped))
}

impl Trainer {
    /// Serialize the full optimizer state. Written atomically
    /// (temp file + rename).
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new();
        w.buf.extend_from_slice(MAGIC);
        w.u64(self.cfg.config_hash());
        w.u64(self.iteration as u64);
        w.u64(self.cfg.seed);
        w.f64(self.eta);
        w.u64(self.nan_drops);
        w.u64(self.forward_fallbacks);
        let flags = u8::from(self.log_z.is_some()) | (u8::from(self.flow.is_some()) << 1);
        w.buf.push(flags);
        w.f64s(self.policy.store.values());
        write_adam(&mut w, &self.adam_policy);
        if let Some(z) = &self.log_z {
            w.f64s(z.store.values());
            write_adam(&mut w, self.adam_logz.as_ref().unwrap());
        }
        if let Some(f) = &self.flow {
            w.f64s(f.store.values());
            write_adam(&mut w, self.adam_flow.as_ref().unwrap());
        }
        let sum = fnv1a64(&w.buf);
        w.u64(sum);

        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &w.buf)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Rebuild a trainer from `cfg` and a checkpoint written for the same
    /// configuration. Fails on checksum mismatch (truncation/corruption)
    /// or a config-hash mismatch.
    pub fn restore_checkpoint(cfg: TrainConfig, path: &Path) -> Result<Trainer> {
        let bytes = fs::read(path)?;
        if bytes.len() < MAGIC.len() + 8 {
            return Err(Error::Checkpoint("file too short".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        if fnv1a64(body) != stored {
            return Err(Error::Checkpoint(
                "checksum mismatch (truncated or corrupt)".into(),
            ));
        }
        let mut r = Reader::new(body);
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let hash = r.u64()?;
        if hash != cfg.config_hash() {
            return Err(Error::Checkpoint("config hash mismatch".into()));
        }
        let iteration = r.u64()? as usize;
        let seed = r.u64()?;
        if seed != cfg.seed {
            return Err(Error::Checkpoint("seed mismatch".into()));
        }
        let eta = r.f64()?;
        let nan_drops = r.u64()?;
        let forward_fallbacks = r.u64()?;
        let flags = r.take(1)?[0];

        let mut t = Trainer::new(cfg)?;
        let params = r.f64s()?;
        if params.len() != t.policy.store.len() {
            return Err(Error::Checkpoint("policy parameter count mismatch".into()));
        }
        t.policy.store.values_mut().copy_from_slice(&params);
        t.adam_policy = read_adam(&mut r)?;
        if flags & 1 != 0 {
            let z = t.log_z.as_mut().ok_or_else(|| {
                Error::Checkpoint("checkpoint carries log Z but config does not".into())
            })?;
            let vals = r.f64s()?;
            z.store.values_mut().copy_from_slice(&vals);
            t.adam_logz = Some(read_adam(&mut r)?);
        }
        if flags & 2 != 0 {
            let f = t.flow.as_mut().ok_or_else(|| {
                Error::Checkpoint("checkpoint carries a flow but config does not".into())
            })?;
            let vals = r.f64s()?;
            if vals.len() != f.store.len() {
                return Err(Error::Checkpoint("flow parameter count mismatch".into()));
            }
            f.store.values_mut().copy_from_slice(&vals);
            t.adam_flow = Some(read_adam(&mut r)?);
        }
        t.iteration = iteration;
        t.eta = eta;
        t.nan_drops = nan_drops;
        t.forward_fallbacks = forward_fallbacks;
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{train, LocalSearchConfig, TrainConfig, Trainer};
    use crate::error::Error;
    use crate::explore::MalaConfig;
    use crate::objectives::Objective;

    fn cfg() -> TrainConfig {
        TrainConfig {
            energy: "gauss1d".into(),
            t_scale: 2.0,
            t_steps: 4,
            batch: 8,
            iterations: 12,
            hidden: 8,
            eval_period: 2,
            eval_samples: 16,
            seed: 3,
            objective: Objective::Tb,
            ..Default::default()
        }
    }

    #[test]
    fn resume_reproduces_the_tail_bit_exactly() {
        let dir = std::env::temp_dir().join(format!("ckpt_test_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("mid.ckpt");

        // straight run
        let (full, _) = train(cfg()).unwrap();

        // interrupted: stop at 6, checkpoint, restore, continue
        let mut first = Trainer::new(cfg()).unwrap();
        first.run_until(6).unwrap();
        first.save_checkpoint(&path).unwrap();
        let mut resumed = Trainer::restore_checkpoint(cfg(), &path).unwrap();
        assert_eq!(resumed.iteration(), 6);
        let tail = resumed.run().unwrap();
        let full_tail: Vec<_> = full
            .rows
            .iter()
            .filter(|r| r.iteration >= 6)
            .cloned()
            .collect();
        assert_eq!(tail.rows.len(), full_tail.len());
        for (a, b) in tail.rows.iter().zip(full_tail.iter()) {
            assert!(a.same_results(b), "{a:?} vs {b:?}");
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn mismatched_config_and_truncation_are_rejected() {
        let dir = std::env::temp_dir().join(format!("ckpt_test2_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.ckpt");
        let mut t = Trainer::new(cfg()).unwrap();
        t.run().unwrap();
        t.save_checkpoint(&path).unwrap();

        // different config -> hash mismatch
        let other = TrainConfig {
            t_scale: 3.0,
            ..cfg()
        };
        assert!(matches!(
            Trainer::restore_checkpoint(other, &path),
            Err(Error::Checkpoint(_))
        ));

        // truncation -> checksum failure
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 13]).unwrap();
        assert!(matches!(
            Trainer::restore_checkpoint(cfg(), &path),
            Err(Error::Checkpoint(_))
        ));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn local_search_checkpoint_roundtrip_restores_counters() {
        let dir = std::env::temp_dir().join(format!("ckpt_test3_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ls.ckpt");
        let mut c = cfg();
        c.local_search = Some(LocalSearchConfig {
            mala: MalaConfig {
                steps: 6,
                burn_in: 2,
                step_size: 0.3,
                ..Default::default()
            },
            refresh_period: 2,
        });
        let mut t = Trainer::new(c.clone()).unwrap();
        t.run().unwrap();
        t.save_checkpoint(&path).unwrap();
        let r = Trainer::restore_checkpoint(c, &path).unwrap();
        assert_eq!(r.iteration, 12);
        assert_eq!(r.eta, t.eta);
        std::fs::remove_dir_all(&dir).ok();
    }
}
