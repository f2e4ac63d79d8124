//! Binary dump of a [`FiniteMdp`].
//!
//! Layout (little-endian):
//!
//! ```text
//! magic   8 bytes  "NETABSMD"
//! version u32
//! meta    u64 length + UTF-8 JSON {grids, kind, kernel?}
//! stored kind only:
//!   n_rows u64, nnz u64
//!   row_ptr (n_rows+1) x u64
//!   cols    nnz x u32
//!   probs   nnz x f64
//!   sink    n_rows x f64
//! ```

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{FiniteMdp, GaussianKernel, SparseRows, Transitions};
use crate::error::{Error, Result};
use crate::grid::Grid;

pub const MDP_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"NETABSMD";

#[derive(Serialize, Deserialize)]
struct Meta {
    state_grid: Grid,
    input_grid: Grid,
    internal_grid: Grid,
    kind: String,
    kernel: Option<GaussianKernel>,
}

pub fn dump<W: Write>(mdp: &FiniteMdp, mut w: W) -> Result<()> {
    let (kind, kernel) = match &mdp.transitions {
        Transitions::Stored(_) => ("stored", None),
        Transitions::Gaussian(k) => ("gaussian", Some(k.clone())),
    };
    let meta = Meta {
        state_grid: mdp.state_grid.clone(),
        input_grid: mdp.input_grid.clone(),
        internal_grid: mdp.internal_grid.clone(),
        kind: kind.to_string(),
        kernel,
    };
    let meta = serde_json::to_vec(&meta).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(MDP_FORMAT_VERSION)?;
    w.write_u64::<LittleEndian>(meta.len() as u64)?;
    w.write_all(&meta)?;
    if let Transitions::Stored(rows) = &mdp.transitions {
        let (row_ptr, cols, probs, sink) = rows.raw();
        w.write_u64::<LittleEndian>(sink.len() as u64)?;
        w.write_u64::<LittleEndian>(cols.len() as u64)?;
        for p in row_ptr {
            w.write_u64::<LittleEndian>(*p as u64)?;
        }
        for c in cols {
            w.write_u32::<LittleEndian>(*c)?;
        }
        for p in probs {
            w.write_f64::<LittleEndian>(*p)?;
        }
        for s in sink {
            w.write_f64::<LittleEndian>(*s)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load<R: Read>(mut r: R) -> Result<FiniteMdp> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != MDP_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version} (expected {MDP_FORMAT_VERSION})"
        )));
    }
    let meta_len = r.read_u64::<LittleEndian>()? as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta)?;
    let meta: Meta = serde_json::from_slice(&meta).map_err(|e| Error::Format(e.to_string()))?;
    let transitions = match (meta.kind.as_str(), meta.kernel) {
        ("gaussian", Some(k)) => Transitions::Gaussian(k),
        ("stored", None) => {
            let n_rows = r.read_u64::<LittleEndian>()? as usize;
            let nnz = r.read_u64::<LittleEndian>()? as usize;
            let expected = meta.state_grid.len() * meta.input_grid.len() * meta.internal_grid.len();
            if n_rows != expected {
                return Err(Error::Format(format!("{n_rows} rows but grids imply {expected}")));
            }
            let mut row_ptr = vec![0u64; n_rows + 1];
            r.read_u64_into::<LittleEndian>(&mut row_ptr)?;
            let mut cols = vec![0u32; nnz];
            r.read_u32_into::<LittleEndian>(&mut cols)?;
            let mut probs = vec![0f64; nnz];
            r.read_f64_into::<LittleEndian>(&mut probs)?;
            let mut sink = vec![0f64; n_rows];
            r.read_f64_into::<LittleEndian>(&mut sink)?;
            if cols.iter().any(|c| *c as usize >= meta.state_grid.len()) {
                return Err(Error::Format("cell index out of range".into()));
            }
            Transitions::Stored(SparseRows::from_raw(
                row_ptr.into_iter().map(|p| p as usize).collect(),
                cols,
                probs,
                sink,
            )?)
        }
        (kind, _) => return Err(Error::Format(format!("unknown transition kind `{kind}`"))),
    };
    Ok(FiniteMdp::from_parts(
        meta.state_grid,
        meta.input_grid,
        meta.internal_grid,
        transitions,
    ))
}
