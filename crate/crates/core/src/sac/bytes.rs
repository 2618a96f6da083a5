use crate::autodiff::{AdamState, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::rng::RngState;

/// Little-endian binary writer.
#[derive(Debug, Default)]
pub struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bool(&mut self, v: bool) {
        self.u8(v as u8);
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.usize(b.len());
        self.buf.extend_from_slice(b);
    }

    pub fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }

    pub fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        v.iter().for_each(|&x| self.f64(x));
    }

    pub fn f32s(&mut self, v: &[f32]) {
        self.usize(v.len());
        v.iter().for_each(|&x| self.f32(x));
    }

    pub fn store(&mut self, store: &ParamStore) {
        self.usize(store.len());
        for id in store.ids() {
            self.str(store.name(id));
            let t = store.get(id);
            self.usize(t.shape().len());
            t.shape().iter().for_each(|&d| self.usize(d));
            t.data().iter().for_each(|&x| self.f64(x));
        }
    }

    pub fn adam_states(&mut self, step: u64, states: &[AdamState]) {
        self.u64(step);
        self.usize(states.len());
        for s in states {
            self.f64s(&s.m);
            self.f64s(&s.v);
        }
    }

    pub fn rng(&mut self, r: &RngState) {
        self.buf.extend_from_slice(&r.seed);
        self.u64(r.stream);
        self.buf.extend_from_slice(&r.word_pos.to_le_bytes());
    }
}

/// Reader matching [`ByteWriter`].
#[derive(Debug)]
pub struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.data.len()
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }

    /// Length prefix bounded by the remaining bytes.
    fn len(&mut self, elem: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(elem) > self.data.len() - self.pos {
            return Err(Error::Checkpoint(format!("length {n} exceeds remaining data")));
        }
        Ok(n)
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    pub fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Checkpoint(format!("invalid flag byte {b}"))),
        }
    }

    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len(1)?;
        self.take(n)
    }

    pub fn str(&mut self) -> Result<&'a str> {
        std::str::from_utf8(self.bytes()?).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = self.len(4)?;
        (0..n).map(|_| self.f32()).collect()
    }

    /// Reads tensors into `store`, which must already have the same names
    /// and shapes.
    pub fn store_into(&mut self, store: &mut ParamStore) -> Result<()> {
        let n = self.usize()?;
        if n != store.len() {
            return Err(Error::Checkpoint(format!("checkpoint has {n} tensors, model has {}", store.len())));
        }
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = self.str()?;
            if name != store.name(id) {
                return Err(Error::Checkpoint(format!("tensor '{name}' where '{}' expected", store.name(id))));
            }
            let nd = self.len(8)?;
            let shape = (0..nd).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
            if shape != store.get(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' has shape {shape:?}, model expects {:?}",
                    store.get(id).shape()
                )));
            }
            let len = store.get(id).len();
            let data = (0..len).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
            *store.get_mut(id) = Tensor::new(shape, data)?;
        }
        Ok(())
    }

    pub fn adam_states(&mut self, states: &mut [AdamState]) -> Result<u64> {
        let step = self.u64()?;
        if self.usize()? != states.len() {
            return Err(Error::Checkpoint("optimizer group size mismatch".into()));
        }
        for s in states {
            let (m, v) = (self.f64s()?, self.f64s()?);
            if m.len() != s.m.len() || v.len() != s.v.len() {
                return Err(Error::Checkpoint("optimizer state size mismatch".into()));
            }
            *s = AdamState { m, v };
        }
        Ok(step)
    }

    pub fn rng(&mut self) -> Result<RngState> {
        let seed = self.array()?;
        let stream = self.u64()?;
        let word_pos = u128::from_le_bytes(self.array()?);
        Ok(RngState { seed, stream, word_pos })
    }
}
