//! Binary checkpoint container.
//!
//! ```text
//! "BMOE1" | u32 version | u32 section count | sections...
//! section := u32 name length | name | u64 payload length | payload
//! ```
//!
//! Everything is little-endian. Matrices carry their dimensions and are
//! stored row-major as raw `f64` bits, so a load followed by a save
//! reproduces the file byte for byte.

use std::path::Path;

use biomoe_core::lifecycle::{
    ComposedExpert, DenseTaskModel, Provenance, StageOneBundle, StageOneMeta, StageOneTask, TaskExpert, TaskId,
    TaskRegistry, TaskSlot, UnifiedModel,
};
use biomoe_core::moe::{ExpertFfn, Linear, LoraExpert, LoraFactors, MoeConfig};
use biomoe_core::{Error, Matrix, Result};

pub const MAGIC: &[u8; 5] = b"BMOE1";
pub const FORMAT_VERSION: u32 = 1;

const KIND_UNIFIED: &str = "unified";
const KIND_STAGE1: &str = "stage1";

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

#[derive(Default)]
struct Enc {
    buf: Vec<u8>,
}

impl Enc {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_bits().to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn vec(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|x| self.f64(*x));
    }

    fn matrix(&mut self, m: &Matrix) {
        self.u64(m.rows() as u64);
        self.u64(m.cols() as u64);
        m.data().iter().for_each(|x| self.f64(*x));
    }

    fn linear(&mut self, l: &Linear) {
        self.matrix(&l.weight);
        self.vec(&l.bias);
    }

    fn ffn(&mut self, f: &ExpertFfn) {
        self.matrix(&f.w1);
        self.vec(&f.b1);
        self.matrix(&f.w2);
        self.vec(&f.b2);
    }

    fn lora(&mut self, l: &LoraExpert) {
        for f in [&l.layer1, &l.layer2] {
            self.matrix(&f.a);
            self.matrix(&f.b);
        }
        self.vec(&l.bias1);
        self.vec(&l.bias2);
    }

    fn section(&mut self, name: &str, body: Enc) {
        self.str(name);
        self.u64(body.buf.len() as u64);
        self.buf.extend_from_slice(&body.buf);
    }
}

struct Dec<'a> {
    buf: &'a [u8],
}

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(corrupt("checkpoint is truncated"));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
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

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| corrupt("length does not fit in memory"))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("string is not UTF-8"))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        if n.checked_mul(8).is_none_or(|bytes| bytes > self.buf.len()) {
            return Err(corrupt("checkpoint is truncated"));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    fn vec(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        self.floats(n)
    }

    fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.usize()?;
        let cols = self.usize()?;
        let n = rows.checked_mul(cols).ok_or_else(|| corrupt("matrix dimensions overflow"))?;
        Matrix::from_vec(rows, cols, self.floats(n)?)
    }

    fn linear(&mut self) -> Result<Linear> {
        Ok(Linear {
            weight: self.matrix()?,
            bias: self.vec()?,
        })
    }

    fn ffn(&mut self) -> Result<ExpertFfn> {
        Ok(ExpertFfn {
            w1: self.matrix()?,
            b1: self.vec()?,
            w2: self.matrix()?,
            b2: self.vec()?,
        })
    }

    fn factors(&mut self) -> Result<LoraFactors> {
        let a = self.matrix()?;
        let b = self.matrix()?;
        LoraFactors::new(a, b)
    }

    fn lora(&mut self) -> Result<LoraExpert> {
        Ok(LoraExpert {
            layer1: self.factors()?,
            layer2: self.factors()?,
            bias1: self.vec()?,
            bias2: self.vec()?,
        })
    }

    /// Reads the next section and checks its name.
    fn section(&mut self, expected: &str) -> Result<Dec<'a>> {
        let name = self.str()?;
        if name != expected {
            return Err(corrupt(format!("expected section `{expected}`, found `{name}`")));
        }
        let len = self.usize()?;
        Ok(Dec { buf: self.take(len)? })
    }

    fn finish(self, what: &str) -> Result<()> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(corrupt(format!("{} trailing bytes in {what}", self.buf.len())))
        }
    }
}

fn header(sections: u32) -> Enc {
    let mut e = Enc::default();
    e.buf.extend_from_slice(MAGIC);
    e.u32(FORMAT_VERSION);
    e.u32(sections);
    e
}

fn open<'a>(bytes: &'a [u8], kind: &str) -> Result<(Dec<'a>, u32)> {
    let mut d = Dec { buf: bytes };
    if d.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
        return Err(corrupt("not a checkpoint (bad magic)"));
    }
    let version = d.u32()?;
    if version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported checkpoint version {version}")));
    }
    let count = d.u32()?;
    let mut s = d.section("kind")?;
    let found = s.str()?;
    s.finish("kind")?;
    if found != kind {
        return Err(corrupt(format!("checkpoint holds a `{found}` model, expected `{kind}`")));
    }
    Ok((d, count))
}

fn encode_config(c: &MoeConfig) -> Enc {
    let mut e = Enc::default();
    for v in [c.d_model, c.d_inner, c.num_experts, c.top_k, c.width_factor, c.num_landmarks] {
        e.u64(v as u64);
    }
    e.f64(c.tau);
    e.f64(c.noise_std);
    e.u64(c.seed);
    e
}

fn decode_config(d: &mut Dec<'_>) -> Result<MoeConfig> {
    let mut dims = [0usize; 6];
    for v in &mut dims {
        *v = d.usize()?;
    }
    let [d_model, d_inner, num_experts, top_k, width_factor, num_landmarks] = dims;
    Ok(MoeConfig {
        d_model,
        d_inner,
        num_experts,
        top_k,
        width_factor,
        num_landmarks,
        tau: d.f64()?,
        noise_std: d.f64()?,
        seed: d.u64()?,
    })
}

fn encode_slot(slot: &TaskSlot) -> Enc {
    let mut e = Enc::default();
    e.str(slot.id.as_str());
    match &slot.provenance {
        Provenance::Trained => e.u8(0),
        Provenance::ClonedFrom(p) => {
            e.u8(1);
            e.str(p.as_str());
        }
        Provenance::ComposedOf(a, b) => {
            e.u8(2);
            e.str(a.as_str());
            e.str(b.as_str());
        }
    }
    e.linear(&slot.router);
    e.linear(&slot.projection);
    match &slot.expert {
        TaskExpert::Lora(l) => {
            e.u8(0);
            e.lora(l);
        }
        TaskExpert::Composed(c) => {
            e.u8(1);
            e.str(c.parents[0].as_str());
            e.str(c.parents[1].as_str());
            e.lora(&c.experts[0]);
            e.lora(&c.experts[1]);
            e.linear(&c.mixer);
        }
    }
    e
}

fn decode_slot(d: &mut Dec<'_>) -> Result<TaskSlot> {
    let id = TaskId::new(d.str()?);
    let provenance = match d.u8()? {
        0 => Provenance::Trained,
        1 => Provenance::ClonedFrom(TaskId::new(d.str()?)),
        2 => Provenance::ComposedOf(TaskId::new(d.str()?), TaskId::new(d.str()?)),
        t => return Err(corrupt(format!("unknown provenance tag {t}"))),
    };
    let router = d.linear()?;
    let projection = d.linear()?;
    let expert = match d.u8()? {
        0 => TaskExpert::Lora(d.lora()?),
        1 => {
            let parents = [TaskId::new(d.str()?), TaskId::new(d.str()?)];
            let experts = [d.lora()?, d.lora()?];
            TaskExpert::Composed(ComposedExpert {
                parents,
                experts,
                mixer: d.linear()?,
            })
        }
        t => return Err(corrupt(format!("unknown task expert tag {t}"))),
    };
    Ok(TaskSlot {
        id,
        router,
        expert,
        projection,
        provenance,
    })
}

fn kind_section(kind: &str) -> Enc {
    let mut e = Enc::default();
    e.str(kind);
    e
}

pub fn encode_unified(model: &UnifiedModel) -> Vec<u8> {
    let cfg = model.config();
    let n_sections = 4 + cfg.num_experts + model.tasks().len();
    let mut out = header(n_sections as u32);
    out.section("kind", kind_section(KIND_UNIFIED));
    out.section("config", encode_config(cfg));
    let mut flags = Enc::default();
    flags.u8(model.routed_enabled() as u8);
    out.section("routed_enabled", flags);
    let mut g = Enc::default();
    g.ffn(model.global());
    out.section("global", g);
    for (i, r) in model.routed().iter().enumerate() {
        let mut e = Enc::default();
        e.ffn(r);
        out.section(&format!("routed.{i}"), e);
    }
    for slot in model.tasks().slots() {
        out.section(&format!("task.{}", slot.id), encode_slot(slot));
    }
    out.buf
}

pub fn decode_unified(bytes: &[u8]) -> Result<UnifiedModel> {
    let (mut d, count) = open(bytes, KIND_UNIFIED)?;
    let mut s = d.section("config")?;
    let cfg = decode_config(&mut s)?;
    s.finish("config")?;
    cfg.validate().map_err(|e| corrupt(format!("stored config is invalid: {e}")))?;
    let mut s = d.section("routed_enabled")?;
    let routed_enabled = match s.u8()? {
        0 => false,
        1 => true,
        v => return Err(corrupt(format!("bad flag value {v}"))),
    };
    s.finish("routed_enabled")?;
    let mut s = d.section("global")?;
    let global = s.ffn()?;
    s.finish("global")?;
    let mut routed = Vec::with_capacity(cfg.num_experts);
    for i in 0..cfg.num_experts {
        let mut s = d.section(&format!("routed.{i}"))?;
        routed.push(s.ffn()?);
        s.finish("routed expert")?;
    }
    let fixed = 4 + cfg.num_experts;
    let n_tasks = (count as usize)
        .checked_sub(fixed)
        .ok_or_else(|| corrupt("section count is too small"))?;
    let mut tasks = TaskRegistry::new();
    for _ in 0..n_tasks {
        let name = Dec { buf: d.buf }.str()?;
        let mut s = d.section(&name)?;
        let slot = decode_slot(&mut s)?;
        s.finish("task slot")?;
        if name != format!("task.{}", slot.id) {
            return Err(corrupt(format!("section `{name}` holds task `{}`", slot.id)));
        }
        tasks.insert(slot).map_err(|e| corrupt(e.to_string()))?;
    }
    d.finish("checkpoint")?;
    UnifiedModel::from_parts(cfg, global, routed, routed_enabled, tasks).map_err(|e| corrupt(e.to_string()))
}

pub fn encode_stage1(bundle: &StageOneBundle) -> Vec<u8> {
    let mut out = header(2 + bundle.tasks.len() as u32);
    out.section("kind", kind_section(KIND_STAGE1));
    let mut s = Enc::default();
    s.u64(bundle.seed);
    out.section("seed", s);
    for t in &bundle.tasks {
        let mut e = Enc::default();
        e.str(t.id.as_str());
        e.linear(&t.model.projection);
        e.ffn(&t.model.ffn);
        e.u64(t.meta.steps as u64);
        e.f64(t.meta.initial_loss);
        e.f64(t.meta.final_loss);
        e.f64(t.meta.probe_grad_norm);
        out.section(&format!("task.{}", t.id), e);
    }
    out.buf
}

pub fn decode_stage1(bytes: &[u8]) -> Result<StageOneBundle> {
    let (mut d, count) = open(bytes, KIND_STAGE1)?;
    let mut s = d.section("seed")?;
    let seed = s.u64()?;
    s.finish("seed")?;
    let n = (count as usize).checked_sub(2).ok_or_else(|| corrupt("section count is too small"))?;
    let mut tasks = Vec::with_capacity(n);
    for _ in 0..n {
        let name = Dec { buf: d.buf }.str()?;
        let mut s = d.section(&name)?;
        let id = TaskId::new(s.str()?);
        let model = DenseTaskModel {
            projection: s.linear()?,
            ffn: s.ffn()?,
        };
        let meta = StageOneMeta {
            steps: s.usize()?,
            initial_loss: s.f64()?,
            final_loss: s.f64()?,
            probe_grad_norm: s.f64()?,
        };
        s.finish("stage-1 task")?;
        if name != format!("task.{id}") {
            return Err(corrupt(format!("section `{name}` holds task `{id}`")));
        }
        tasks.push(StageOneTask { id, model, meta });
    }
    d.finish("checkpoint")?;
    let bundle = StageOneBundle { seed, tasks };
    bundle.validate().map_err(|e| corrupt(e.to_string()))?;
    Ok(bundle)
}

pub fn save_unified(model: &UnifiedModel, path: &Path) -> Result<()> {
    Ok(std::fs::write(path, encode_unified(model))?)
}

pub fn load_unified(path: &Path) -> Result<UnifiedModel> {
    decode_unified(&std::fs::read(path)?)
}

pub fn save_stage1(bundle: &StageOneBundle, path: &Path) -> Result<()> {
    Ok(std::fs::write(path, encode_stage1(bundle))?)
}

pub fn load_stage1(path: &Path) -> Result<StageOneBundle> {
    decode_stage1(&std::fs::read(path)?)
}
