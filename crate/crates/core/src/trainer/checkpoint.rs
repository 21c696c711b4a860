use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{MetricsRow, Stage, TrainConfig, TrainState};
use crate::detector::ParameterSet;
use crate::error::{Error, Result};
use crate::refine::ScalingSet;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TMRC";
pub const CHECKPOINT_VERSION: u32 = 1;

const GROUPS: [&str; 4] = ["teacher", "student", "omega_t", "omega_s"];

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("value {v} exceeds u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.u32(b.len())?;
        self.0.extend_from_slice(b);
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("name is not UTF-8".into()))
    }
}

fn tensors(state: &TrainState) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    for (name, t) in state.teacher.iter() {
        out.push((format!("teacher/{name}"), t));
    }
    for (name, t) in state.student.iter() {
        out.push((format!("student/{name}"), t));
    }
    for (name, t) in state.omega_t.iter() {
        out.push((format!("omega_t/{name}"), t));
    }
    for (name, t) in state.omega_s.iter() {
        out.push((format!("omega_s/{name}"), t));
    }
    out
}

/// Serializes the config echo, every tensor, counters, the metrics log and
/// the RNG position.
pub fn encode_checkpoint(cfg: &TrainConfig, state: &TrainState) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.0.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    w.bytes(cfg.to_text().as_bytes())?;

    let ts = tensors(state);
    w.u32(ts.len())?;
    for (name, t) in ts {
        w.bytes(name.as_bytes())?;
        w.u32(t.ndim())?;
        for &d in t.shape() {
            w.u32(d)?;
        }
        for &v in t.data() {
            w.f64(v);
        }
    }

    w.u64(state.iteration as u64);
    w.u8(state.stage.code());
    w.u32(state.refinements.len())?;
    for &r in &state.refinements {
        w.u64(r as u64);
    }
    w.u32(state.history.len())?;
    for row in &state.history {
        w.u64(row.iteration as u64);
        w.u8(row.stage.map_or(u8::MAX, Stage::code));
        for v in row.values() {
            match v {
                Some(v) => {
                    w.u8(1);
                    w.f64(v);
                }
                None => w.u8(0),
            }
        }
    }

    w.0.extend_from_slice(&state.rng.get_seed());
    w.u64(state.rng.get_stream());
    w.0.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    Ok(w.0)
}

/// Inverse of [`encode_checkpoint`].
pub fn decode_checkpoint(buf: &[u8]) -> Result<(TrainConfig, TrainState)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")));
    }
    let cfg = TrainConfig::from_text(&r.string()?)?;

    let mut groups: [BTreeMap<String, Tensor>; 4] = Default::default();
    for _ in 0..r.u32()? {
        let full = r.string()?;
        let (group, name) =
            full.split_once('/').ok_or_else(|| Error::Format(format!("tensor name `{full}` has no group")))?;
        let gi = GROUPS
            .iter()
            .position(|g| *g == group)
            .ok_or_else(|| Error::Format(format!("unknown tensor group `{group}`")))?;
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n.saturating_mul(8) > buf.len() {
            return Err(Error::Format(format!("tensor `{full}` larger than the file")));
        }
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor `{full}`: {e}")))?;
        if groups[gi].insert(name.to_string(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor `{full}`")));
        }
    }
    let [teacher, student, omega_t, omega_s] = groups;
    let to_params = |m: BTreeMap<String, Tensor>| -> Result<ParameterSet> {
        let mut p = ParameterSet::new();
        for (k, v) in m {
            p.insert(k, v)?;
        }
        Ok(p)
    };
    let teacher = to_params(teacher)?;
    let student = to_params(student)?;
    teacher.check_aligned(&student)?;
    let omega_t = ScalingSet::from_map(&teacher, omega_t)?;
    let omega_s = ScalingSet::from_map(&student, omega_s)?;

    let iteration = r.u64()? as usize;
    let stage = Stage::from_code(r.u8()?).ok_or_else(|| Error::Format("bad stage tag".into()))?;
    let refinements = (0..r.u32()?).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
    let rows = r.u32()?;
    let mut history = Vec::with_capacity(rows.min(1 << 20));
    for _ in 0..rows {
        let mut row = MetricsRow { iteration: r.u64()? as usize, ..MetricsRow::default() };
        let code = r.u8()?;
        row.stage = if code == u8::MAX {
            None
        } else {
            Some(Stage::from_code(code).ok_or_else(|| Error::Format("bad stage tag".into()))?)
        };
        let mut v = [None; 8];
        for slot in v.iter_mut() {
            *slot = match r.u8()? {
                0 => None,
                1 => Some(r.f64()?),
                f => return Err(Error::Format(format!("bad option flag {f}"))),
            };
        }
        row.set_values(v);
        history.push(row);
    }

    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
    if r.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    Ok((cfg, TrainState { teacher, student, omega_t, omega_s, iteration, stage, rng, history, refinements }))
}

pub fn checkpoint_save(cfg: &TrainConfig, state: &TrainState, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(cfg, state)?)?;
    Ok(())
}

pub fn checkpoint_load(path: &Path) -> Result<(TrainConfig, TrainState)> {
    decode_checkpoint(&std::fs::read(path)?)
}
