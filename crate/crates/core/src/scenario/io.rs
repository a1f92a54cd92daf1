//! Time-series CSV and binary snapshots.
//!
//! Snapshot layout, all little-endian:
//!
//! ```text
//! magic     8 bytes  "KSSNAP\0\0"
//! version   u32
//! ndim      u32
//! extents   ndim x u64
//! lengths   ndim x f64
//! t         f64
//! steps     u64
//! samples   u64      index of the last written CSV row
//! cum_reaction, cum_dissipation_m, clamped_mass   3 x f64
//! arrays    rho, m, c, u_0 .. u_{ndim-1}, P   each n_cells x f64, row-major
//! ```

use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::diagnostics::DiagnosticsRecord;
use crate::domain::{BoundaryCondition, Grid, ScalarField, VectorField};
use crate::error::{Error, Result};
use crate::model::SimState;

pub const SNAPSHOT_MAGIC: [u8; 8] = *b"KSSNAP\0\0";
pub const SNAPSHOT_VERSION: u32 = 1;

/// Column names in file order.
pub const CSV_COLUMNS: [&str; 19] = [
    "t",
    "mass_rho",
    "mass_m",
    "mass_diff",
    "linf_rho",
    "linf_m",
    "linf_c",
    "linf_u",
    "l2_rho_dev",
    "l2_m_dev",
    "l2_c_dev",
    "l2_u",
    "l2_grad_c",
    "l2_grad_u",
    "cum_reaction",
    "Y",
    "G",
    "l2_m",
    "cum_dissipation_m",
];

/// Append-only CSV sink, flushed after every row.
pub struct CsvSink {
    writer: csv::Writer<File>,
}

impl CsvSink {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        writer.write_record(CSV_COLUMNS)?;
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(CsvSink { writer })
    }

    /// Keeps the header and the first `keep` rows of an existing file and
    /// appends after them.
    pub fn resume(path: &Path, keep: usize) -> Result<Self> {
        let rows = read_csv(path)?;
        if rows.len() < keep {
            return Err(Error::Format(format!(
                "{} holds {} rows, restart needs {keep}",
                path.display(),
                rows.len()
            )));
        }
        let mut sink = CsvSink::create(path)?;
        for r in &rows[..keep] {
            sink.append(r)?;
        }
        drop(sink);
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        Ok(CsvSink { writer })
    }

    pub fn append(&mut self, r: &DiagnosticsRecord) -> Result<()> {
        self.writer.serialize(r)?;
        self.writer
            .flush()
            .map_err(|e| Error::io("csv output", e))
    }
}

/// Reads every row. Files without the two trailing extra columns are
/// accepted; those fields come back as NaN.
pub fn read_csv(path: &Path) -> Result<Vec<DiagnosticsRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let headers = reader.headers()?.clone();
    for (i, name) in CSV_COLUMNS[..17].iter().enumerate() {
        if headers.get(i) != Some(name) {
            return Err(Error::Format(format!(
                "{}: column {} should be {name:?}, found {:?}",
                path.display(),
                i + 1,
                headers.get(i).unwrap_or("")
            )));
        }
    }
    reader
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Writes `state` plus the index of the last CSV sample taken.
pub fn write_snapshot(state: &SimState, sample_index: u64, path: &Path) -> Result<()> {
    let grid = state.grid();
    let n = grid.n_cells();
    let mut buf = Vec::with_capacity(128 + 8 * n * (4 + grid.ndim()));
    buf.extend_from_slice(&SNAPSHOT_MAGIC);
    put_u32(&mut buf, SNAPSHOT_VERSION);
    put_u32(&mut buf, grid.ndim() as u32);
    for d in grid.dims() {
        put_u64(&mut buf, *d as u64);
    }
    put_f64s(&mut buf, grid.lengths());
    put_f64s(&mut buf, &[state.t]);
    put_u64(&mut buf, state.steps);
    put_u64(&mut buf, sample_index);
    put_f64s(
        &mut buf,
        &[state.cum_reaction, state.cum_dissipation_m, state.clamped_mass],
    );
    put_f64s(&mut buf, state.rho.values());
    put_f64s(&mut buf, state.m.values());
    put_f64s(&mut buf, state.c.values());
    for comp in state.u.components() {
        put_f64s(&mut buf, comp);
    }
    put_f64s(&mut buf, state.p.values());

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // write to a sibling and rename so a crash never leaves a torn snapshot
    let tmp = path.with_extension("partial");
    let mut f = BufWriter::new(File::create(&tmp).map_err(|e| Error::io(&tmp, e))?);
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.into_inner()
        .map_err(|e| Error::io(&tmp, e.into_error()))?
        .sync_all()
        .map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format(format!(
                "snapshot truncated: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("array too long".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Reads a snapshot, returning the state and the stored sample index.
pub fn read_snapshot(path: &Path) -> Result<(SimState, u64)> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(8)? != SNAPSHOT_MAGIC {
        return Err(Error::Format(format!("{} is not a snapshot", path.display())));
    }
    let version = cur.u32()?;
    if version != SNAPSHOT_VERSION {
        return Err(Error::Format(format!(
            "snapshot version {version}, this build reads {SNAPSHOT_VERSION}"
        )));
    }
    let ndim = cur.u32()? as usize;
    if !(2..=3).contains(&ndim) {
        return Err(Error::Format(format!("snapshot has {ndim} axes")));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = usize::try_from(cur.u64()?).map_err(|_| Error::Format("extent overflow".into()))?;
        dims.push(d);
    }
    let lengths = cur.f64s(ndim)?;
    let grid = Grid::new(&dims, &lengths).map_err(|e| Error::Format(e.to_string()))?;
    let t = cur.f64()?;
    let steps = cur.u64()?;
    let sample_index = cur.u64()?;
    let cum_reaction = cur.f64()?;
    let cum_dissipation_m = cur.f64()?;
    let clamped_mass = cur.f64()?;
    let n = grid.n_cells();
    let rho = cur.f64s(n)?;
    let m = cur.f64s(n)?;
    let c = cur.f64s(n)?;
    let mut u = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        u.push(cur.f64s(n)?);
    }
    let p = cur.f64s(n)?;
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after snapshot arrays",
            bytes.len() - cur.pos
        )));
    }
    let scalar = |v: Vec<f64>| ScalarField::neumann(grid, v).map_err(|e| Error::Format(e.to_string()));
    let state = SimState {
        rho: scalar(rho)?,
        m: scalar(m)?,
        c: scalar(c)?,
        // stored velocities always come from a projection
        u: VectorField::from_raw(grid, u, BoundaryCondition::DirichletZero, true),
        p: scalar(p)?,
        t,
        cum_reaction,
        cum_dissipation_m,
        clamped_mass,
        steps,
    };
    state.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok((state, sample_index))
}
