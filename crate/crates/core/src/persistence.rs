//! Bit-exact binary serialization for models and training checkpoints.
//!
//! Model file (`.drbn`), version 1, little-endian throughout:
//!
//! ```text
//! magic  b"DRBN"
//! u32    version = 1
//! u32    layer count L >= 1
//! L x layer:
//!   u8   kind: 0 dense, 1 conv
//!   dense: u32 D, u32 P,
//!          f64 x D*P  weights (row-major [D][P])
//!          f64 x D    visible biases
//!          f64 x P    hidden biases
//!   conv:  u32 in_h, u32 in_w, u32 in_c, u32 filters, u32 filter_size, u32 stride,
//!          f64 x K*Nw*Nw*C  filters (row-major [K][Nw][Nw][C])
//!          f64 x 1          visible bias (scalar)
//!          f64 x K          channel biases
//! u32    CRC-32 (IEEE) of every preceding byte
//! ```
//!
//! Checkpoint file (`.drbnck`), version 1: magic b"DRBK", u32 version, then
//! tagged sections (4-byte tag, u32 payload length, payload) — `MODL` (a
//! complete model file), `CONF` (training config), `ADAM` (per-layer moment
//! tensors and step counts), `PCDP` (particle states), `RNGS` (data-pass and
//! per-particle stream states), `PROG` (epoch/step counters) — and the same
//! trailing CRC-32. Restoring a checkpoint and continuing training produces
//! a bitwise-identical trajectory to the uninterrupted run.

use crate::adam::{AdamParams, AdamState};
use crate::conv::ConvGeometry;
use crate::conv_rbm::ConvRbmParams;
use crate::layer::Layer;
use crate::net::Drbn;
use crate::rbm::RbmParams;
use crate::rng::{RngState, RngStream};
use crate::tensor::{Real, Tensor};
use crate::trainer::{PcdState, TrainConfig, Trainer};
use crate::{data, Error, Result};
use std::path::Path;

pub const MODEL_MAGIC: &[u8; 4] = b"DRBN";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DRBK";
pub const FORMAT_VERSION: u32 = 1;

const KIND_DENSE: u8 = 0;
const KIND_CONV: u8 = 1;

/// CRC-32 (IEEE 802.3, reflected, polynomial 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, entry) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *entry = c;
    }
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFF_FFFF
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: &[u8; 4]) -> Writer {
        let mut buf = Vec::new();
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        Writer { buf }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn tensor(&mut self, t: &Tensor) {
        for &x in t.data() {
            self.f64(x as f64);
        }
    }

    fn finish(mut self) -> Vec<u8> {
        let crc = crc32(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Reader<'a> {
        Reader { buf, pos: 0 }
    }

    fn bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated(format!(
                "{what}: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.bytes(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().unwrap()))
    }

    fn u128(&mut self, what: &str) -> Result<u128> {
        Ok(u128::from_le_bytes(self.bytes(16, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8, what)?.try_into().unwrap()))
    }

    fn tensor(&mut self, shape: &[usize], what: &str) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let raw = self.bytes(n * 8, what)?;
        for chunk in raw.chunks_exact(8) {
            let v = f64::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::Format(format!("{what}: non-finite value {v}")));
            }
            data.push(v as Real);
        }
        Tensor::from_vec(shape, data)
    }
}

/// Checks magic + version, verifies the trailing checksum, and returns the
/// payload between them.
fn open_envelope<'a>(bytes: &'a [u8], magic: &[u8; 4]) -> Result<Reader<'a>> {
    if bytes.len() < 12 {
        return Err(Error::Truncated("file shorter than any valid envelope".into()));
    }
    if &bytes[..4] != magic {
        return Err(Error::BadMagic {
            offset: 0,
            expected: if magic == MODEL_MAGIC {
                "DRBN (model file)"
            } else {
                "DRBK (checkpoint file)"
            },
            found: u32::from_le_bytes(bytes[..4].try_into().unwrap()),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let computed = crc32(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    let mut r = Reader::new(&bytes[..body_end]);
    r.pos = 8;
    Ok(r)
}

pub fn model_to_bytes(net: &Drbn) -> Vec<u8> {
    let mut w = Writer::new(MODEL_MAGIC);
    w.u32(net.depth() as u32);
    for layer in net.layers() {
        match layer {
            Layer::Dense(p) => {
                w.u8(KIND_DENSE);
                w.u32(p.visible_len() as u32);
                w.u32(p.hidden_len() as u32);
                w.tensor(&p.weights);
                w.tensor(&p.visible_bias);
                w.tensor(&p.hidden_bias);
            }
            Layer::Conv(p) => {
                w.u8(KIND_CONV);
                w.u32(p.in_shape[0] as u32);
                w.u32(p.in_shape[1] as u32);
                w.u32(p.in_shape[2] as u32);
                w.u32(p.filters.shape()[0] as u32);
                w.u32(p.filters.shape()[1] as u32);
                w.u32(p.stride as u32);
                w.tensor(&p.filters);
                w.f64(p.visible_bias as f64);
                w.tensor(&p.hidden_bias);
            }
        }
    }
    w.finish()
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Drbn> {
    let mut r = open_envelope(bytes, MODEL_MAGIC)?;
    let net = read_model_body(&mut r)?;
    if r.pos != r.buf.len() {
        return Err(Error::Format(format!(
            "model file has {} trailing bytes",
            r.buf.len() - r.pos
        )));
    }
    Ok(net)
}

fn read_model_body(r: &mut Reader) -> Result<Drbn> {
    let count = r.u32("layer count")? as usize;
    if count == 0 {
        return Err(Error::Format("model file declares zero layers".into()));
    }
    let mut layers = Vec::with_capacity(count);
    for l in 0..count {
        let kind = r.u8("layer kind")?;
        match kind {
            KIND_DENSE => {
                let d = r.u32("dense visible size")? as usize;
                let p = r.u32("dense hidden size")? as usize;
                if d == 0 || p == 0 {
                    return Err(Error::Format(format!("layer {l}: zero-sized dense layer")));
                }
                layers.push(Layer::Dense(RbmParams {
                    weights: r.tensor(&[d, p], "dense weights")?,
                    visible_bias: r.tensor(&[d], "dense visible biases")?,
                    hidden_bias: r.tensor(&[p], "dense hidden biases")?,
                }));
            }
            KIND_CONV => {
                let in_h = r.u32("conv in_h")? as usize;
                let in_w = r.u32("conv in_w")? as usize;
                let in_c = r.u32("conv in_c")? as usize;
                let k = r.u32("conv filters")? as usize;
                let nw = r.u32("conv filter size")? as usize;
                let stride = r.u32("conv stride")? as usize;
                let geometry = ConvGeometry::new([in_h, in_w, in_c], k, nw, stride)?;
                layers.push(Layer::Conv(ConvRbmParams {
                    filters: r.tensor(&geometry.filter_shape(), "conv filters")?,
                    visible_bias: r.f64("conv visible bias")? as Real,
                    hidden_bias: r.tensor(&[k], "conv channel biases")?,
                    stride,
                    in_shape: [in_h, in_w, in_c],
                }));
            }
            other => {
                return Err(Error::Format(format!("layer {l}: unknown kind tag {other}")));
            }
        }
    }
    // from_layers re-validates the chain invariants.
    Drbn::from_layers(layers)
}

pub fn save_model(net: &Drbn, path: &Path) -> Result<()> {
    data::write_atomic(path, &model_to_bytes(net))
}

pub fn load_model(path: &Path) -> Result<Drbn> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    model_from_bytes(&bytes)
}

fn write_section(w: &mut Writer, tag: &[u8; 4], payload: &[u8]) {
    w.buf.extend_from_slice(tag);
    w.u32(payload.len() as u32);
    w.buf.extend_from_slice(payload);
}

fn read_sections<'a>(r: &mut Reader<'a>) -> Result<Vec<([u8; 4], &'a [u8])>> {
    let mut sections = Vec::new();
    while r.pos < r.buf.len() {
        let tag: [u8; 4] = r.bytes(4, "section tag")?.try_into().unwrap();
        let len = r.u32("section length")? as usize;
        sections.push((tag, r.bytes(len, "section payload")?));
    }
    Ok(sections)
}

fn require_section<'a>(
    sections: &[([u8; 4], &'a [u8])],
    tag: &[u8; 4],
) -> Result<&'a [u8]> {
    sections
        .iter()
        .find(|(t, _)| t == tag)
        .map(|(_, payload)| *payload)
        .ok_or_else(|| {
            Error::Format(format!(
                "checkpoint missing {} section",
                String::from_utf8_lossy(tag)
            ))
        })
}

pub fn checkpoint_to_bytes(trainer: &Trainer) -> Vec<u8> {
    let mut w = Writer::new(CHECKPOINT_MAGIC);

    write_section(&mut w, b"MODL", &model_to_bytes(trainer.net()));

    let cfg = trainer.config();
    let mut conf = Vec::new();
    conf.extend_from_slice(&(cfg.gibbs_steps as u32).to_le_bytes());
    conf.extend_from_slice(&(cfg.n_particles as u32).to_le_bytes());
    conf.extend_from_slice(&(cfg.minibatch as u32).to_le_bytes());
    conf.extend_from_slice(&(cfg.epochs as u32).to_le_bytes());
    conf.extend_from_slice(&(cfg.adam.step_size as f64).to_le_bytes());
    conf.extend_from_slice(&(cfg.adam.beta1 as f64).to_le_bytes());
    conf.extend_from_slice(&(cfg.adam.beta2 as f64).to_le_bytes());
    conf.extend_from_slice(&(cfg.adam.epsilon as f64).to_le_bytes());
    conf.extend_from_slice(&cfg.seed.to_le_bytes());
    conf.extend_from_slice(&cfg.log_every.to_le_bytes());
    conf.extend_from_slice(&cfg.eval_every.to_le_bytes());
    write_section(&mut w, b"CONF", &conf);

    let mut adam = Writer {
        buf: Vec::new(),
    };
    adam.u32(trainer.opt.len() as u32);
    for state in &trainer.opt {
        adam.u64(state.step_count());
        let (m, v) = state.moments();
        adam.u32(m.len() as u32);
        for slot in 0..m.len() {
            adam.u32(m[slot].shape().len() as u32);
            for &dim in m[slot].shape() {
                adam.u32(dim as u32);
            }
            adam.tensor(&m[slot]);
            adam.tensor(&v[slot]);
        }
    }
    write_section(&mut w, b"ADAM", &adam.buf);

    let pcd = trainer.pcd();
    let mut pcdp = Writer { buf: Vec::new() };
    pcdp.u32(pcd.n_particles() as u32);
    pcdp.u32((pcd.particles().len() / pcd.n_particles()) as u32);
    pcdp.u64(pcd.updates());
    for &x in pcd.particles().data() {
        pcdp.u8(if x != 0.0 { 1 } else { 0 });
    }
    write_section(&mut w, b"PCDP", &pcdp.buf);

    let mut rngs = Writer { buf: Vec::new() };
    let particle_states = pcd.rng_states();
    rngs.u32(1 + particle_states.len() as u32);
    for state in std::iter::once(trainer.data_stream.state()).chain(particle_states) {
        rngs.buf.extend_from_slice(&state.key);
        rngs.u128(state.word_pos);
    }
    write_section(&mut w, b"RNGS", &rngs.buf);

    let mut prog = Writer { buf: Vec::new() };
    prog.u64(trainer.epoch);
    prog.u64(trainer.step_in_epoch);
    prog.u64(trainer.global_step);
    write_section(&mut w, b"PROG", &prog.buf);

    w.finish()
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Trainer> {
    let mut r = open_envelope(bytes, CHECKPOINT_MAGIC)?;
    let sections = read_sections(&mut r)?;

    let net = model_from_bytes(require_section(&sections, b"MODL")?)?;

    let mut conf = Reader::new(require_section(&sections, b"CONF")?);
    let config = TrainConfig {
        gibbs_steps: conf.u32("conf k")? as usize,
        n_particles: conf.u32("conf N")? as usize,
        minibatch: conf.u32("conf M")? as usize,
        epochs: conf.u32("conf epochs")? as usize,
        adam: AdamParams {
            step_size: conf.f64("conf step size")? as Real,
            beta1: conf.f64("conf beta1")? as Real,
            beta2: conf.f64("conf beta2")? as Real,
            epsilon: conf.f64("conf epsilon")? as Real,
        },
        seed: conf.u64("conf seed")?,
        log_every: conf.u64("conf log_every")?,
        eval_every: conf.u64("conf eval_every")?,
    };
    config.validate()?;

    let mut adam = Reader::new(require_section(&sections, b"ADAM")?);
    let n_layers = adam.u32("adam layer count")? as usize;
    if n_layers != net.depth() {
        return Err(Error::Format(format!(
            "checkpoint has {n_layers} optimizer states for {} layers",
            net.depth()
        )));
    }
    let mut opt = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let t = adam.u64("adam step count")?;
        let slots = adam.u32("adam slot count")? as usize;
        let mut m = Vec::with_capacity(slots);
        let mut v = Vec::with_capacity(slots);
        for _ in 0..slots {
            let rank = adam.u32("adam slot rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(adam.u32("adam slot dim")? as usize);
            }
            m.push(adam.tensor(&shape, "adam first moment")?);
            v.push(adam.tensor(&shape, "adam second moment")?);
        }
        let state = AdamState::from_parts(m, v, t)?;
        let expect = net.layers()[l].adam_state();
        let (em, _) = expect.moments();
        let (gm, _) = state.moments();
        if em.len() != gm.len()
            || em.iter().zip(gm).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Format(format!(
                "checkpoint optimizer state for layer {l} does not match the layer's shape"
            )));
        }
        opt.push(state);
    }

    let mut pcdp = Reader::new(require_section(&sections, b"PCDP")?);
    let n_particles = pcdp.u32("pcd particle count")? as usize;
    let visible_len = pcdp.u32("pcd visible length")? as usize;
    if visible_len != net.visible_len() {
        return Err(Error::Format(format!(
            "checkpoint particles are {visible_len}-dimensional, model wants {}",
            net.visible_len()
        )));
    }
    if n_particles != config.n_particles {
        return Err(Error::Format(format!(
            "checkpoint has {n_particles} particles, config says {}",
            config.n_particles
        )));
    }
    let updates = pcdp.u64("pcd update count")?;
    let raw = pcdp.bytes(n_particles * visible_len, "pcd particle payload")?;
    let particles = Tensor::from_vec(
        &[n_particles, visible_len],
        raw.iter().map(|&b| if b != 0 { 1.0 } else { 0.0 }).collect(),
    )?;

    let mut rngs = Reader::new(require_section(&sections, b"RNGS")?);
    let n_streams = rngs.u32("rng stream count")? as usize;
    if n_streams != 1 + n_particles {
        return Err(Error::Format(format!(
            "checkpoint has {n_streams} rng streams for {n_particles} particles"
        )));
    }
    let mut states = Vec::with_capacity(n_streams);
    for _ in 0..n_streams {
        let key: [u8; 32] = rngs.bytes(32, "rng key")?.try_into().unwrap();
        let word_pos = rngs.u128("rng word position")?;
        states.push(RngState { key, word_pos });
    }
    let data_stream = RngStream::restore(&states[0]);
    let pcd = PcdState::from_parts(particles, &states[1..], updates)?;

    let mut prog = Reader::new(require_section(&sections, b"PROG")?);
    let epoch = prog.u64("progress epoch")?;
    let step_in_epoch = prog.u64("progress step in epoch")?;
    let global_step = prog.u64("progress global step")?;

    Ok(Trainer {
        net,
        pcd,
        opt,
        data_stream,
        config,
        epoch,
        step_in_epoch,
        global_step,
    })
}

pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    data::write_atomic(path, &checkpoint_to_bytes(trainer))
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    checkpoint_from_bytes(&bytes)
}
