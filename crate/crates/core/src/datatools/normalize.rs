use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::DataError;

pub const NORMALIZER_TABLE_VERSION: u32 = 1;
pub const CLIP: f64 = 1.5;
const LOWER_Q: f64 = 0.02;
const UPPER_Q: f64 = 0.98;

/// Percentile of sorted data by linear interpolation between order
/// statistics at rank `q·(n−1)`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p02: f64,
    pub p98: f64,
}

/// Denormalized value; `lossy` when the input sat on the clip boundary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Denormalized {
    pub value: f64,
    pub lossy: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub source_id: String,
    pub dims: usize,
    pub timesteps: usize,
    pub exempt_dims: BTreeSet<usize>,
    /// Keyed by `(dim, timestep)`; exempt dims have no entry.
    pub cells: BTreeMap<(usize, usize), Percentiles>,
}

/// Fits 2nd/98th percentiles per (dim, timestep). `samples[i][t][d]` is
/// dimension `d` at timestep `t` of sample `i`.
pub fn fit_normalizer(
    source_id: &str,
    samples: &[Vec<Vec<f64>>],
    exempt_dims: &BTreeSet<usize>,
) -> Result<Normalizer, DataError> {
    let first = samples.first().ok_or(DataError::EmptyDataset)?;
    let timesteps = first.len();
    let dims = first.first().map_or(0, Vec::len);
    if timesteps == 0 || dims == 0 {
        return Err(DataError::EmptyDataset);
    }
    for (i, s) in samples.iter().enumerate() {
        if s.len() != timesteps || s.iter().any(|row| row.len() != dims) {
            return Err(DataError::RaggedSample(i));
        }
    }
    if let Some(&d) = exempt_dims.iter().find(|&&d| d >= dims) {
        return Err(DataError::UnknownCell { dim: d, timestep: 0 });
    }
    let mut cells = BTreeMap::new();
    let mut column = Vec::with_capacity(samples.len());
    for d in (0..dims).filter(|d| !exempt_dims.contains(d)) {
        for t in 0..timesteps {
            column.clear();
            column.extend(samples.iter().map(|s| s[t][d]));
            if column.iter().any(|x| !x.is_finite()) {
                return Err(DataError::NonFinite { dim: d, timestep: t });
            }
            column.sort_by(f64::total_cmp);
            let p = Percentiles {
                p02: percentile_sorted(&column, LOWER_Q),
                p98: percentile_sorted(&column, UPPER_Q),
            };
            if !(p.p98 > p.p02) {
                return Err(DataError::ConstantCell { dim: d, timestep: t });
            }
            cells.insert((d, t), p);
        }
    }
    Ok(Normalizer {
        source_id: source_id.to_string(),
        dims,
        timesteps,
        exempt_dims: exempt_dims.clone(),
        cells,
    })
}

/// `clip(2(x − p02)/(p98 − p02) − 1, −1.5, 1.5)`.
pub fn normalize_value(x: f64, p: Percentiles) -> f64 {
    (2.0 * (x - p.p02) / (p.p98 - p.p02) - 1.0).clamp(-CLIP, CLIP)
}

pub fn denormalize_value(y: f64, p: Percentiles) -> Denormalized {
    let yc = y.clamp(-CLIP, CLIP);
    Denormalized {
        value: (yc + 1.0) / 2.0 * (p.p98 - p.p02) + p.p02,
        lossy: y.abs() >= CLIP,
    }
}

impl Normalizer {
    fn check_cell(&self, dim: usize, timestep: usize) -> Result<Option<Percentiles>, DataError> {
        if dim >= self.dims || timestep >= self.timesteps {
            return Err(DataError::UnknownCell { dim, timestep });
        }
        if self.exempt_dims.contains(&dim) {
            return Ok(None);
        }
        Ok(Some(self.cells[&(dim, timestep)]))
    }

    pub fn normalize(&self, x: f64, dim: usize, timestep: usize) -> Result<f64, DataError> {
        Ok(match self.check_cell(dim, timestep)? {
            Some(p) => normalize_value(x, p),
            None => x,
        })
    }

    pub fn denormalize(&self, y: f64, dim: usize, timestep: usize) -> Result<Denormalized, DataError> {
        Ok(match self.check_cell(dim, timestep)? {
            Some(p) => denormalize_value(y, p),
            None => Denormalized { value: y, lossy: false },
        })
    }

    fn check_source(&self, source_id: &str) -> Result<(), DataError> {
        if source_id != self.source_id {
            return Err(DataError::SourceMismatch {
                normalizer: self.source_id.clone(),
                data: source_id.to_string(),
            });
        }
        Ok(())
    }

    /// Normalizes a `[timestep][dim]` chunk drawn from `source_id`.
    pub fn normalize_chunk(&self, source_id: &str, chunk: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, DataError> {
        self.check_source(source_id)?;
        chunk
            .iter()
            .enumerate()
            .map(|(t, row)| row.iter().enumerate().map(|(d, &x)| self.normalize(x, d, t)).collect())
            .collect()
    }

    /// Inverse of [`Normalizer::normalize_chunk`]; the flag reports whether
    /// any value was clipped.
    pub fn denormalize_chunk(&self, source_id: &str, chunk: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, bool), DataError> {
        self.check_source(source_id)?;
        let mut lossy = false;
        let out = chunk
            .iter()
            .enumerate()
            .map(|(t, row)| {
                row.iter()
                    .enumerate()
                    .map(|(d, &y)| {
                        let r = self.denormalize(y, d, t)?;
                        lossy |= r.lossy;
                        Ok(r.value)
                    })
                    .collect::<Result<Vec<_>, DataError>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok((out, lossy))
    }
}

/// Normalizers keyed by data source. Lookups never fall back to another
/// source.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NormalizerRegistry {
    by_source: BTreeMap<String, Normalizer>,
}

impl NormalizerRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, nz: Normalizer) -> Result<(), DataError> {
        if self.by_source.contains_key(&nz.source_id) {
            return Err(DataError::DuplicateSource(nz.source_id));
        }
        self.by_source.insert(nz.source_id.clone(), nz);
        Ok(())
    }

    pub fn get(&self, source_id: &str) -> Result<&Normalizer, DataError> {
        self.by_source
            .get(source_id)
            .ok_or_else(|| DataError::UnknownSource(source_id.to_string()))
    }

    pub fn sources(&self) -> impl Iterator<Item = &str> {
        self.by_source.keys().map(String::as_str)
    }

    pub fn normalize_chunk(&self, source_id: &str, chunk: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, DataError> {
        self.get(source_id)?.normalize_chunk(source_id, chunk)
    }

    pub fn denormalize_chunk(&self, source_id: &str, chunk: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, bool), DataError> {
        self.get(source_id)?.denormalize_chunk(source_id, chunk)
    }

    /// Writes every normalizer as rows of `source_id,dim,timestep,p02,p98`.
    /// Exempt dims appear once per timestep with empty percentiles.
    pub fn write_table<W: Write>(&self, w: W) -> Result<(), DataError> {
        let mut w = w;
        writeln!(w, "# evalkit normalizer table v{NORMALIZER_TABLE_VERSION}").map_err(DataError::Write)?;
        let mut wtr = csv::Writer::from_writer(w);
        for nz in self.by_source.values() {
            for d in 0..nz.dims {
                for t in 0..nz.timesteps {
                    let p = nz.cells.get(&(d, t));
                    wtr.serialize(TableRow {
                        source_id: nz.source_id.clone(),
                        dim: d,
                        timestep: t,
                        p02: p.map(|p| p.p02),
                        p98: p.map(|p| p.p98),
                    })?;
                }
            }
        }
        wtr.flush().map_err(DataError::Write)?;
        Ok(())
    }

    pub fn read_table<R: Read>(r: R) -> Result<Self, DataError> {
        let mut text = String::new();
        let mut r = r;
        r.read_to_string(&mut text).map_err(DataError::Write)?;
        let header = text.lines().next().unwrap_or_default();
        let version = header
            .strip_prefix("# evalkit normalizer table v")
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| DataError::TableVersion(header.to_string()))?;
        if version != NORMALIZER_TABLE_VERSION {
            return Err(DataError::TableVersion(header.to_string()));
        }
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let mut grouped: BTreeMap<String, Vec<TableRow>> = BTreeMap::new();
        for row in rdr.deserialize() {
            let row: TableRow = row?;
            grouped.entry(row.source_id.clone()).or_default().push(row);
        }
        let mut reg = NormalizerRegistry::new();
        for (source_id, rows) in grouped {
            let dims = rows.iter().map(|r| r.dim + 1).max().unwrap_or(0);
            let timesteps = rows.iter().map(|r| r.timestep + 1).max().unwrap_or(0);
            if rows.len() != dims * timesteps {
                return Err(DataError::IncompleteTable(source_id));
            }
            let mut exempt = BTreeSet::new();
            let mut cells = BTreeMap::new();
            for r in rows {
                match (r.p02, r.p98) {
                    (Some(p02), Some(p98)) => {
                        cells.insert((r.dim, r.timestep), Percentiles { p02, p98 });
                    }
                    (None, None) => {
                        exempt.insert(r.dim);
                    }
                    _ => return Err(DataError::IncompleteTable(source_id)),
                }
            }
            if cells.keys().any(|(d, _)| exempt.contains(d)) {
                return Err(DataError::IncompleteTable(source_id));
            }
            reg.insert(Normalizer {
                source_id,
                dims,
                timesteps,
                exempt_dims: exempt,
                cells,
            })?;
        }
        Ok(reg)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TableRow {
    source_id: String,
    dim: usize,
    timestep: usize,
    p02: Option<f64>,
    p98: Option<f64>,
}
