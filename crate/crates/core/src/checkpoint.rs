//! Binary checkpoints: `CTPCKPT1`, a u32 version, then tagged sections.
//!
//! Each section is a 4-byte ASCII tag, a u64 little-endian byte length and the
//! payload. Floats are stored as their little-endian IEEE-754 bits, so a
//! save/load round trip is bit-exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CtpError, Result};
use crate::mixer::Cursor;
use crate::model::{ModelConfig, Params};
use crate::optim::OptimState;
use crate::schedule::{Phase, ScheduleKind, ScheduleSpec};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CTPCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Step and token totals across every phase trained so far.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub global_step: u64,
    pub tokens: u64,
    pub phases: u64,
}

/// Where training stopped within its learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleMark {
    pub spec: ScheduleSpec,
    /// Schedule step the next update would use.
    pub next_t: u64,
    pub phase: Phase,
}

impl ScheduleMark {
    pub fn new(spec: ScheduleSpec, next_t: u64) -> Result<Self> {
        let clamped = spec.total_steps().map_or(next_t, |end| next_t.min(end));
        Ok(Self { spec, next_t, phase: spec.phase_of(clamped)? })
    }

    /// True once at least one annealing (or final decay) step has been taken.
    pub fn is_annealed(&self) -> bool {
        self.spec.kind.is_infinite() && self.spec.t_ann().is_some_and(|t| self.next_t > t)
    }

    /// True if the mark lies in the constant phase of an infinite schedule,
    /// including the pre-annealing step itself.
    pub fn in_constant_phase(&self) -> bool {
        self.spec.kind.is_infinite()
            && self.next_t >= self.spec.t_const()
            && self.spec.t_ann().is_none_or(|t| self.next_t <= t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Params,
    pub optim: Option<OptimState>,
    pub rngs: BTreeMap<String, [u64; 4]>,
    pub counters: Counters,
    pub schedule: Option<ScheduleMark>,
    pub cursors: BTreeMap<String, Cursor>,
}

impl Checkpoint {
    pub fn fresh(params: Params) -> Self {
        Self {
            params,
            optim: None,
            rngs: BTreeMap::new(),
            counters: Counters::default(),
            schedule: None,
            cursors: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        self.params.config()
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let cfg = self.config();
        let mut sections: Vec<(&[u8; 4], Vec<u8>)> = Vec::new();

        let mut conf = Enc::default();
        for v in [cfg.vocab_size, cfg.context_length, cfg.embed_dim, cfg.hidden_dim] {
            conf.u64(v as u64);
        }
        conf.u64(cfg.init_seed);
        sections.push((b"CONF", conf.0));

        let mut modl = Enc::default();
        modl.floats(self.params.as_slice());
        sections.push((b"MODL", modl.0));

        if let Some(opt) = &self.optim {
            let mut optm = Enc::default();
            optm.u64(opt.t);
            optm.floats(opt.m.as_slice());
            optm.floats(opt.v.as_slice());
            sections.push((b"OPTM", optm.0));
        }

        let mut rngs = Enc::default();
        rngs.u64(self.rngs.len() as u64);
        for (name, state) in &self.rngs {
            rngs.str(name);
            state.iter().for_each(|&w| rngs.u64(w));
        }
        sections.push((b"RNGS", rngs.0));

        let mut cntr = Enc::default();
        cntr.u64(self.counters.global_step);
        cntr.u64(self.counters.tokens);
        cntr.u64(self.counters.phases);
        sections.push((b"CNTR", cntr.0));

        if let Some(mark) = &self.schedule {
            let s = &mark.spec;
            let mut schd = Enc::default();
            schd.u8(kind_code(s.kind));
            for f in [s.eta_max, s.eta_min, s.eta_const, s.invsqrt_steepness] {
                schd.f64(f);
            }
            schd.u64(s.warmup_steps);
            schd.u64(s.cooldown_steps);
            schd.u8(s.constant_steps.is_some() as u8);
            schd.u64(s.constant_steps.unwrap_or(0));
            schd.u64(s.anneal_steps);
            schd.u64(mark.next_t);
            schd.u8(mark.phase.code());
            sections.push((b"SCHD", schd.0));
        }

        let mut curs = Enc::default();
        curs.u64(self.cursors.len() as u64);
        for (name, c) in &self.cursors {
            curs.str(name);
            curs.u64(c.next_window);
            curs.u64(c.wraps);
        }
        sections.push((b"CURS", curs.0));

        for (tag, body) in sections {
            out.write_all(tag)?;
            out.write_all(&(body.len() as u64).to_le_bytes())?;
            out.write_all(&body)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Dec { buf: bytes, pos: 0 };
        if d.take(8)? != CHECKPOINT_MAGIC {
            return Err(CtpError::Format("not a checkpoint (bad magic)".into()));
        }
        let version = d.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CtpError::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut sections: BTreeMap<[u8; 4], &[u8]> = BTreeMap::new();
        while d.pos < bytes.len() {
            let tag: [u8; 4] = d.take(4)?.try_into().unwrap();
            let len = d.u64()? as usize;
            let body = d.take(len)?;
            if sections.insert(tag, body).is_some() {
                return Err(CtpError::Format(format!("duplicate section {}", String::from_utf8_lossy(&tag))));
            }
        }
        let section = |tag: &[u8; 4]| -> Result<Dec> {
            sections
                .get(tag)
                .map(|b| Dec { buf: b, pos: 0 })
                .ok_or_else(|| CtpError::Format(format!("missing section {}", String::from_utf8_lossy(tag))))
        };

        let mut conf = section(b"CONF")?;
        let mut dims = [0usize; 4];
        for v in dims.iter_mut() {
            *v = conf.u64()? as usize;
        }
        let config = ModelConfig {
            vocab_size: dims[0],
            context_length: dims[1],
            embed_dim: dims[2],
            hidden_dim: dims[3],
            init_seed: conf.u64()?,
        };
        config.validate()?;
        conf.finish()?;
        let n = config.param_count();

        let mut modl = section(b"MODL")?;
        let params = Params::from_vec(config, modl.floats(n)?)?;
        modl.finish()?;

        let optim = match sections.contains_key(b"OPTM") {
            true => {
                let mut o = section(b"OPTM")?;
                let t = o.u64()?;
                let m = Params::from_vec(config, o.floats(n)?)?;
                let v = Params::from_vec(config, o.floats(n)?)?;
                o.finish()?;
                Some(OptimState { m, v, t })
            }
            false => None,
        };

        let mut r = section(b"RNGS")?;
        let mut rngs = BTreeMap::new();
        for _ in 0..r.u64()? {
            let name = r.str()?;
            let mut st = [0u64; 4];
            for w in st.iter_mut() {
                *w = r.u64()?;
            }
            rngs.insert(name, st);
        }
        r.finish()?;

        let mut c = section(b"CNTR")?;
        let counters = Counters { global_step: c.u64()?, tokens: c.u64()?, phases: c.u64()? };
        c.finish()?;

        let schedule = match sections.contains_key(b"SCHD") {
            true => {
                let mut s = section(b"SCHD")?;
                let kind = kind_from_code(s.u8()?)?;
                let (eta_max, eta_min, eta_const, invsqrt_steepness) = (s.f64()?, s.f64()?, s.f64()?, s.f64()?);
                let (warmup_steps, cooldown_steps) = (s.u64()?, s.u64()?);
                let bounded = s.u8()? != 0;
                let constant = s.u64()?;
                let spec = ScheduleSpec {
                    kind,
                    eta_max,
                    eta_min,
                    eta_const,
                    warmup_steps,
                    cooldown_steps,
                    constant_steps: bounded.then_some(constant),
                    anneal_steps: s.u64()?,
                    invsqrt_steepness,
                };
                let next_t = s.u64()?;
                let phase = Phase::from_code(s.u8()?).ok_or_else(|| CtpError::Format("bad phase tag".into()))?;
                s.finish()?;
                Some(ScheduleMark { spec, next_t, phase })
            }
            false => None,
        };

        let mut cu = section(b"CURS")?;
        let mut cursors = BTreeMap::new();
        for _ in 0..cu.u64()? {
            let name = cu.str()?;
            cursors.insert(name, Cursor { next_window: cu.u64()?, wraps: cu.u64()? });
        }
        cu.finish()?;

        Ok(Self { params, optim, rngs, counters, schedule, cursors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn kind_code(kind: ScheduleKind) -> u8 {
    match kind {
        ScheduleKind::CosineDecay => 0,
        ScheduleKind::InfiniteCosine => 1,
        ScheduleKind::InfiniteInvSqrt => 2,
        ScheduleKind::Constant => 3,
    }
}

fn kind_from_code(code: u8) -> Result<ScheduleKind> {
    Ok(match code {
        0 => ScheduleKind::CosineDecay,
        1 => ScheduleKind::InfiniteCosine,
        2 => ScheduleKind::InfiniteInvSqrt,
        3 => ScheduleKind::Constant,
        _ => return Err(CtpError::Format(format!("unknown schedule kind {code}"))),
    })
}

#[derive(Default)]
struct Enc(Vec<u8>);

impl Enc {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn floats(&mut self, v: &[f64]) {
        v.iter().for_each(|&x| self.f64(x));
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CtpError::Format("truncated checkpoint".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
    fn str(&mut self) -> Result<String> {
        let len = self.u64()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|e| CtpError::Format(e.to_string()))
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(CtpError::Format("trailing bytes in checkpoint section".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleKind;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig { vocab_size: 5, context_length: 2, embed_dim: 3, hidden_dim: 4, init_seed: 9 };
        let params = Params::init(cfg).unwrap();
        let mut optim = OptimState::new(cfg);
        optim.t = 17;
        optim.m.as_mut_slice().iter_mut().enumerate().for_each(|(i, x)| *x = (i as f64).sin() * 1e-3);
        optim.v.as_mut_slice().iter_mut().enumerate().for_each(|(i, x)| *x = f64::from_bits(0x3e00_0000_0000_0001 + i as u64));
        let spec = ScheduleSpec::infinite(ScheduleKind::InfiniteInvSqrt, 3e-4, 3e-5, 1.65e-4, 10, 60, Some(25), 5);
        Checkpoint {
            params,
            optim: Some(optim),
            rngs: [("mixture".to_string(), [1, 2, u64::MAX, 4])].into_iter().collect(),
            counters: Counters { global_step: 100, tokens: 100 * 32 * 3, phases: 2 },
            schedule: Some(ScheduleMark::new(spec, 95).unwrap()),
            cursors: [("d0".to_string(), Cursor { next_window: 12, wraps: 1 })].into_iter().collect(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let bits = |p: &Params| p.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.params), bits(&ck.params));
    }

    #[test]
    fn optional_sections() {
        let mut ck = sample();
        ck.optim = None;
        ck.schedule = None;
        assert_eq!(Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), ck);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(CtpError::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = bytes;
        bad[8] = 2;
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }

    #[test]
    fn schedule_marks() {
        let spec = ScheduleSpec::infinite(ScheduleKind::InfiniteCosine, 3e-4, 3e-5, 1.65e-4, 10, 60, Some(25), 5);
        let pre = ScheduleMark::new(spec, 95).unwrap();
        assert!(pre.in_constant_phase() && !pre.is_annealed());
        let post = ScheduleMark::new(spec, 100).unwrap();
        assert!(post.is_annealed() && !post.in_constant_phase());
        assert_eq!(post.phase, Phase::Annealing);
        let cos = ScheduleMark::new(ScheduleSpec::cosine(1.0, 0.1, 5, 10), 15).unwrap();
        assert!(!cos.is_annealed() && !cos.in_constant_phase());
        assert_eq!(cos.phase, Phase::Decay);
    }
}
