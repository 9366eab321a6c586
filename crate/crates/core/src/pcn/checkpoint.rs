use std::io::Write;
use std::path::Path;

use crate::error::{LmnError, Result};
use crate::numcore::{DenseMatrix, ParamStore};
use crate::pcn::{PcnMode, PcnModel};
use crate::Scalar;

const MAGIC: &[u8; 4] = b"LMN1";

/// Decoded checkpoint: header plus named `f64` blocks in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub mode: PcnMode,
    pub num_classes: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub blocks: Vec<(String, DenseMatrix<f64>)>,
}

impl Checkpoint {
    pub fn from_pcn<T: Scalar>(model: &PcnModel<T>) -> Self {
        let s = model.shape();
        let mut ck = Self {
            mode: s.mode,
            num_classes: s.num_classes,
            input_dim: s.input_dim,
            hidden_dim: s.hidden_dim,
            blocks: Vec::new(),
        };
        ck.push_params(model.params());
        ck
    }

    pub fn push_params<T: Scalar>(&mut self, store: &ParamStore<T>) {
        for p in store.params() {
            let (r, c) = p.value.shape();
            let vals = p.value.as_slice().iter().map(|v| v.as_f64()).collect();
            self.blocks.push((
                p.name.clone(),
                DenseMatrix::from_vec(r, c, vals).expect("parameter values are finite"),
            ));
        }
    }

    pub fn block(&self, name: &str) -> Option<&DenseMatrix<f64>> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    /// Parameter store holding the blocks whose names start with `prefix`.
    pub fn params_with_prefix<T: Scalar>(&self, prefix: &str) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        for (name, m) in self.blocks.iter().filter(|(n, _)| n.starts_with(prefix)) {
            let vals = m.as_slice().iter().map(|&v| T::lit(v)).collect();
            store
                .insert(name.clone(), DenseMatrix::from_vec(m.rows(), m.cols(), vals)?)
                .map_err(|e| LmnError::Schema(e.to_string()))?;
        }
        Ok(store)
    }

    /// Rebuilds the PCN, checking the header against the stored blocks.
    pub fn to_pcn<T: Scalar>(&self) -> Result<PcnModel<T>> {
        let store = self.params_with_prefix("pcn.")?;
        let model = PcnModel::from_params(self.mode, store)
            .map_err(|e| LmnError::Schema(e.to_string()))?;
        let s = model.shape();
        if (s.num_classes, s.input_dim, s.hidden_dim)
            != (self.num_classes, self.input_dim, self.hidden_dim)
        {
            return Err(LmnError::Schema(format!(
                "header (V={}, d_e={}, d={}) disagrees with blocks (V={}, d_e={}, d={})",
                self.num_classes,
                self.input_dim,
                self.hidden_dim,
                s.num_classes,
                s.input_dim,
                s.hidden_dim
            )));
        }
        Ok(model)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(match self.mode {
            PcnMode::Stateful => 0,
            PcnMode::Stateless => 1,
        });
        for v in [self.num_classes, self.input_dim, self.hidden_dim, self.blocks.len()] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for (name, m) in &self.blocks {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(r.err_at(0, "bad magic, expected LMN1"));
        }
        let mode = match r.take(1, "mode")?[0] {
            0 => PcnMode::Stateful,
            1 => PcnMode::Stateless,
            m => return Err(r.err_at(4, format!("unknown mode byte {m}"))),
        };
        let num_classes = r.usize("V")?;
        let input_dim = r.usize("d_e")?;
        let hidden_dim = r.usize("d")?;
        let count = r.usize("block count")?;
        let mut blocks = Vec::new();
        for _ in 0..count {
            let at = r.pos;
            let len = u32::from_le_bytes(r.take(4, "name length")?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(len, "block name")?)
                .map_err(|_| r.err_at(at + 4, "block name is not UTF-8"))?
                .to_string();
            let rows = r.usize("rows")?;
            let cols = r.usize("cols")?;
            let n = rows
                .checked_mul(cols)
                .filter(|n| n.checked_mul(8).is_some())
                .ok_or_else(|| r.err_at(r.pos, "block size overflows"))?;
            let data_at = r.pos;
            let raw = r.take(n * 8, "block values")?;
            let vals: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let m = DenseMatrix::from_vec(rows, cols, vals)
                .map_err(|_| r.err_at(data_at, format!("block `{name}` has non-finite values")))?;
            if blocks.iter().any(|(n, _)| n == &name) {
                return Err(r.err_at(at, format!("duplicate block `{name}`")));
            }
            blocks.push((name, m));
        }
        if r.pos != bytes.len() {
            return Err(r.err_at(r.pos, "trailing bytes after last block"));
        }
        Ok(Self {
            mode,
            num_classes,
            input_dim,
            hidden_dim,
            blocks,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err_at(&self, offset: usize, message: impl Into<String>) -> LmnError {
        LmnError::Parse {
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err_at(self.pos, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| self.err_at(at, format!("{what} does not fit in memory")))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::decode(&std::fs::read(path)?)
}

/// Writes through a temporary file in the same directory and renames it
/// into place, so an existing file is never left half-written.
pub fn write_checkpoint_atomic(ck: &Checkpoint, path: &Path) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&ck.encode())?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| LmnError::Io(e.error))?;
    Ok(())
}

pub fn pcn_save<T: Scalar>(model: &PcnModel<T>, path: &Path) -> Result<()> {
    write_checkpoint_atomic(&Checkpoint::from_pcn(model), path)
}

pub fn pcn_load<T: Scalar>(path: &Path) -> Result<PcnModel<T>> {
    read_checkpoint(path)?.to_pcn()
}
