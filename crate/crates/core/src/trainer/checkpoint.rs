//! Binary checkpoints: magic "STRT", version, rng position, model config,
//! length-prefixed parameter and moment blobs, trailing CRC-32.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::AdamState;
use crate::objective::{ModelConfig, ModelState, MixerKind};
use crate::trainer::TrainingState;

const MAGIC: &[u8; 4] = b"STRT";
const VERSION: u16 = 1;

fn crc32(bytes: &[u8]) -> u32 {
    // IEEE reflected polynomial
    let mut table = [0u32; 256];
    for (i, slot) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *slot = c;
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
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    fn u128(&mut self, v: u128) {
        self.bytes(&v.to_le_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) {
        self.u64(vs.len() as u64);
        for v in vs {
            self.bytes(&v.to_le_bytes());
        }
    }

    fn str_(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn str_(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid string".into()))
    }
}

pub fn save_checkpoint(state: &TrainingState, path: &Path) -> Result<()> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u16(VERSION);
    w.u64(state.iteration);
    w.bytes(&state.rng.get_seed());
    w.u64(state.rng.get_stream());
    w.u128(state.rng.get_word_pos());

    let config_json = serde_json::to_string(&state.model.config)
        .map_err(|e| Error::Checkpoint(format!("config serialization failed: {e}")))?;
    w.str_(&config_json);

    let mut params: Vec<(String, &[f64], Vec<usize>)> = Vec::new();
    state.model.for_each(&mut |name, t| {
        params.push((name, t.data(), t.shape().to_vec()));
    });
    w.u32(params.len() as u32);
    for (name, data, shape) in &params {
        w.str_(name);
        w.buf.push(shape.len() as u8);
        for &d in shape {
            w.u32(d as u32);
        }
        w.f64s(data);
    }

    let adam = &state.adam;
    w.bytes(&adam.lr.to_le_bytes());
    w.bytes(&adam.beta1.to_le_bytes());
    w.bytes(&adam.beta2.to_le_bytes());
    w.bytes(&adam.eps.to_le_bytes());
    w.u64(adam.step);
    for (m, v) in adam.m.iter().zip(&adam.v) {
        w.f64s(m);
        w.f64s(v);
    }

    let crc = crc32(&w.buf);
    w.u32(crc);

    let mut file = std::fs::File::create(path)?;
    file.write_all(&w.buf)?;
    file.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainingState> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 10 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (body, tail) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32(body) != stored {
        return Err(Error::Checkpoint("checksum mismatch: file is corrupt".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let iteration = r.u64()?;
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let stream = r.u64()?;
    let word_pos = r.u128()?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    let config: ModelConfig = serde_json::from_str(&r.str_()?)
        .map_err(|e| Error::Checkpoint(format!("bad model config: {e}")))?;

    let n_params = r.u32()? as usize;
    let mut params: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = r.str_()?;
        let ndim = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let data = r.f64s()?;
        params.push((name, shape, data));
    }

    // rebuild the model skeleton from the stored config and shapes
    let (t, k) = {
        let s = params
            .iter()
            .find(|(n, _, _)| n == "s")
            .ok_or_else(|| Error::Checkpoint("missing source matrix".into()))?;
        (s.1[0], s.1[1])
    };
    if k != config.k {
        return Err(Error::Checkpoint("source count disagrees with config".into()));
    }
    let m = match config.mixer {
        MixerKind::Affine => {
            params
                .iter()
                .find(|(n, _, _)| n == "mixer.weight")
                .ok_or_else(|| Error::Checkpoint("missing mixer weight".into()))?
                .1[0]
        }
        MixerKind::Mlp => {
            params
                .iter()
                .find(|(n, _, _)| n == "mixer.w2")
                .ok_or_else(|| Error::Checkpoint("missing mixer weight".into()))?
                .1[1]
        }
    };
    let mut skeleton_rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = ModelState::init(t, m, &config, &mut skeleton_rng)?;
    restore_model(&mut model, &params)?;

    let lr = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let beta1 = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let beta2 = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let eps = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let step = r.u64()?;
    let mut adam = AdamState::new(lr, &[]);
    adam.beta1 = beta1;
    adam.beta2 = beta2;
    adam.eps = eps;
    adam.step = step;
    for _ in 0..n_params {
        adam.m.push(r.f64s()?);
        adam.v.push(r.f64s()?);
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after payload".into()));
    }
    for ((_, shape, _), m) in params.iter().zip(&adam.m) {
        if m.len() != shape.iter().product::<usize>() {
            return Err(Error::Checkpoint("moment shape mismatch".into()));
        }
    }

    Ok(TrainingState {
        iteration,
        model,
        adam,
        rng,
    })
}

fn restore_model(model: &mut ModelState, params: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
    let mut idx = 0usize;
    let mut failure: Option<String> = None;
    model.for_each_mut(&mut |name, tensor| {
        if failure.is_some() {
            return;
        }
        let Some((stored_name, shape, data)) = params.get(idx) else {
            failure = Some("parameter count mismatch".into());
            return;
        };
        if *stored_name != name {
            failure = Some(format!("parameter order mismatch: {stored_name} vs {name}"));
            return;
        }
        if shape != tensor.shape() {
            failure = Some(format!("parameter {name} shape mismatch"));
            return;
        }
        tensor.data_mut().copy_from_slice(data);
        idx += 1;
    });
    if let Some(msg) = failure {
        return Err(Error::Checkpoint(msg));
    }
    if idx != params.len() {
        return Err(Error::Checkpoint("parameter count mismatch".into()));
    }
    Ok(())
}
