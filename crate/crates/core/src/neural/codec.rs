//! Little-endian binary format for models and optimizer state.
//!
//! ```text
//! magic "RLNN" | version u16 | n_layers u32 | sizes (n_layers+1)×u32
//! | activation codes n_layers×u8 | squash u8 | n_params u64 | params f64…
//! | has_adam u8 [ step u64 | lr β1 β2 ε f64 | len u64 | m f64… | v f64… ]
//! ```

use super::{Activation, AdamHyper, AdamState, MlpModel, NeuralError, Squash};

pub const FORMAT_VERSION: u16 = 1;
const MAGIC: &[u8; 4] = b"RLNN";

#[derive(Debug, Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        self.u64(vs.len() as u64);
        for v in vs {
            self.f64(*v);
        }
    }

    pub fn model(&mut self, model: &MlpModel, adam: Option<&AdamState>) {
        self.bytes(MAGIC);
        self.u16(FORMAT_VERSION);
        self.u32(model.num_layers() as u32);
        for &s in model.sizes() {
            self.u32(s as u32);
        }
        for a in model.activations() {
            self.u8(a.code());
        }
        self.u8(match model.squash() {
            Squash::None => 0,
            Squash::Tanh => 1,
        });
        self.f64s(model.params());
        match adam {
            None => self.u8(0),
            Some(state) => {
                self.u8(1);
                self.u64(state.step);
                let h = state.hyper;
                for v in [h.lr, h.beta1, h.beta2, h.eps] {
                    self.f64(v);
                }
                self.f64s(&state.first_moment);
                self.f64s(&state.second_moment);
            }
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], NeuralError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            NeuralError::CorruptPayload(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, NeuralError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, NeuralError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self) -> Result<u32, NeuralError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64, NeuralError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64, NeuralError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>, NeuralError> {
        let n = self.u64()? as usize;
        if n > (self.buf.len() - self.pos) / 8 {
            return Err(NeuralError::CorruptPayload(format!("array of {n} values overruns payload")));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn model(&mut self) -> Result<(MlpModel, Option<AdamState>), NeuralError> {
        if self.take(4)? != MAGIC {
            return Err(NeuralError::CorruptPayload("bad magic".into()));
        }
        let version = self.u16()?;
        if version != FORMAT_VERSION {
            return Err(NeuralError::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let n_layers = self.u32()? as usize;
        if n_layers == 0 || n_layers > 64 {
            return Err(NeuralError::CorruptPayload(format!("implausible layer count {n_layers}")));
        }
        let sizes = (0..=n_layers).map(|_| self.u32().map(|s| s as usize)).collect::<Result<Vec<_>, _>>()?;
        let activations = (0..n_layers)
            .map(|_| {
                let c = self.u8()?;
                Activation::from_code(c).ok_or_else(|| NeuralError::CorruptPayload(format!("activation code {c}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let squash = match self.u8()? {
            0 => Squash::None,
            1 => Squash::Tanh,
            c => return Err(NeuralError::CorruptPayload(format!("squash code {c}"))),
        };
        let params = self.f64s()?;
        let model = MlpModel::from_parts(sizes, activations, squash, params)
            .map_err(|e| NeuralError::CorruptPayload(e.to_string()))?;
        let adam = match self.u8()? {
            0 => None,
            1 => {
                let step = self.u64()?;
                let hyper = AdamHyper { lr: self.f64()?, beta1: self.f64()?, beta2: self.f64()?, eps: self.f64()? };
                let first_moment = self.f64s()?;
                let second_moment = self.f64s()?;
                if first_moment.len() != second_moment.len() {
                    return Err(NeuralError::CorruptPayload("moment lengths differ".into()));
                }
                Some(AdamState { hyper, step, first_moment, second_moment })
            }
            c => return Err(NeuralError::CorruptPayload(format!("adam flag {c}"))),
        };
        Ok((model, adam))
    }

    pub fn is_finished(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn expect_end(&self) -> Result<(), NeuralError> {
        if self.is_finished() {
            Ok(())
        } else {
            Err(NeuralError::CorruptPayload(format!("{} trailing bytes", self.buf.len() - self.pos)))
        }
    }
}

/// Encodes a model and, optionally, its optimizer state.
pub fn serialize(model: &MlpModel, adam: Option<&AdamState>) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.model(model, adam);
    w.finish()
}

pub fn deserialize(bytes: &[u8]) -> Result<(MlpModel, Option<AdamState>), NeuralError> {
    let mut r = ByteReader::new(bytes);
    let out = r.model()?;
    r.expect_end()?;
    Ok(out)
}
