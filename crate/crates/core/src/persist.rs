//! Chain files and delimited-text data.
//!
//! A chain file starts with the magic `HDSIMCH\0`, a little-endian `u32`
//! version and a draw-kind byte, followed by records of the form
//! `tag: u8, length: u64, payload`. Floats are stored as raw IEEE bits so
//! a round trip is exact. A JSON sidecar next to the file describes the run.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::linalg::RowMatrix;
use crate::model::{Dataset, ModelState, Observation};
use crate::polar::PolarAngles;
use crate::priors::{DPMixtureState, DpHyper, InclusionIndicators};
use crate::sampler::Chain;
use crate::splines::{MonotoneTimeFn, SurfaceCoefficients};
use crate::experiments::LinearDraw;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"HDSIMCH\0";
pub const VERSION: u32 = 1;

const TAG_META: u8 = 1;
const TAG_DRAW: u8 = 2;
const TAG_TRACE: u8 = 3;
const TAG_ACCEPT: u8 = 4;
const TAG_COUNTS: u8 = 5;
const TAG_END: u8 = 0xff;

/// Little-endian byte sink.
#[derive(Default)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    pub fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }

    pub fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        v.iter().for_each(|&x| self.f64(x));
    }

    pub fn bools(&mut self, v: &[bool]) {
        self.usize(v.len());
        v.iter().for_each(|&b| self.u8(b as u8));
    }

    pub fn str(&mut self, s: &str) {
        self.usize(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

/// Reader over one record's payload.
pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Decoder { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("record truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    pub fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflows usize".into()))
    }

    /// A length that must fit in the remaining bytes at `width` bytes each.
    fn len(&mut self, width: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(width) > self.buf.len() - self.pos {
            return Err(Error::Format(format!("length {n} exceeds record size")));
        }
        Ok(n)
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn bools(&mut self) -> Result<Vec<bool>> {
        let n = self.len(1)?;
        (0..n)
            .map(|_| match self.u8()? {
                0 => Ok(false),
                1 => Ok(true),
                b => Err(Error::Format(format!("invalid boolean byte {b}"))),
            })
            .collect()
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.len(1)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes in record", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

/// A draw type that can be stored in a chain file.
pub trait ChainDraw: Sized {
    const KIND: u8;
    fn encode(&self, e: &mut Encoder);
    fn decode(d: &mut Decoder<'_>) -> Result<Self>;
}

fn encode_surface(e: &mut Encoder, s: &SurfaceCoefficients) {
    e.usize(s.k_u());
    e.usize(s.k_v());
    e.f64s(s.free());
}

fn decode_surface(d: &mut Decoder<'_>) -> Result<SurfaceCoefficients> {
    let (k_u, k_v) = (d.usize()?, d.usize()?);
    SurfaceCoefficients::from_free(k_u, k_v, d.f64s()?)
}

fn encode_many<T>(e: &mut Encoder, items: &[T], f: impl Fn(&mut Encoder, &T)) {
    e.usize(items.len());
    items.iter().for_each(|it| f(e, it));
}

fn decode_many<T>(d: &mut Decoder<'_>, f: impl Fn(&mut Decoder<'_>) -> Result<T>) -> Result<Vec<T>> {
    let n = d.len(1)?;
    (0..n).map(|_| f(d)).collect()
}

impl ChainDraw for ModelState {
    const KIND: u8 = 0;

    fn encode(&self, e: &mut Encoder) {
        match &self.theta {
            Some(t) => {
                e.u8(1);
                e.f64s(t.as_slice());
            }
            None => e.u8(0),
        }
        match &self.gamma {
            Some(g) => {
                e.u8(1);
                e.bools(g.as_slice());
            }
            None => e.u8(0),
        }
        encode_many(e, &self.alpha, |e, a| e.f64s(a.as_slice()));
        encode_many(e, &self.intercept, encode_surface);
        encode_many(e, &self.slope, encode_surface);
        e.f64s(self.timefn.deltas());
        e.f64(self.sigma2);
        e.f64s(&self.random_effects);
        e.f64(self.offset);
        match &self.dp {
            Some(dp) => {
                e.u8(1);
                e.f64(dp.hyper.concentration);
                e.f64(dp.hyper.scale_shape);
                e.f64(dp.hyper.scale_rate);
                e.usize(dp.hyper.truncation);
                e.f64s(&dp.sticks);
                e.f64s(&dp.weights);
                e.f64s(&dp.scales);
                encode_many(e, &dp.assignments, |e, &a| e.usize(a));
            }
            None => e.u8(0),
        }
    }

    fn decode(d: &mut Decoder<'_>) -> Result<Self> {
        let theta = match d.u8()? {
            0 => None,
            _ => Some(PolarAngles::new(d.f64s()?)?),
        };
        let gamma = match d.u8()? {
            0 => None,
            _ => Some(InclusionIndicators::new(d.bools()?)),
        };
        let alpha = decode_many(d, |d| PolarAngles::new(d.f64s()?))?;
        let intercept = decode_many(d, decode_surface)?;
        let slope = decode_many(d, decode_surface)?;
        let timefn = MonotoneTimeFn::new(d.f64s()?)?;
        let sigma2 = d.f64()?;
        let random_effects = d.f64s()?;
        let offset = d.f64()?;
        let dp = match d.u8()? {
            0 => None,
            _ => {
                let hyper = DpHyper {
                    concentration: d.f64()?,
                    scale_shape: d.f64()?,
                    scale_rate: d.f64()?,
                    truncation: d.usize()?,
                };
                Some(DPMixtureState {
                    hyper,
                    sticks: d.f64s()?,
                    weights: d.f64s()?,
                    scales: d.f64s()?,
                    assignments: decode_many(d, |d| d.usize())?,
                })
            }
        };
        Ok(ModelState {
            theta,
            gamma,
            alpha,
            intercept,
            slope,
            timefn,
            sigma2,
            random_effects,
            offset,
            dp,
        })
    }
}

impl ChainDraw for LinearDraw {
    const KIND: u8 = 1;

    fn encode(&self, e: &mut Encoder) {
        e.f64s(&self.beta);
        e.f64s(&self.coefficients);
        e.f64s(&self.random_effects);
        e.f64(self.sigma2);
        e.f64(self.scale);
    }

    fn decode(d: &mut Decoder<'_>) -> Result<Self> {
        Ok(LinearDraw {
            beta: d.f64s()?,
            coefficients: d.f64s()?,
            random_effects: d.f64s()?,
            sigma2: d.f64()?,
            scale: d.f64()?,
        })
    }
}

fn write_record<W: Write>(w: &mut W, tag: u8, payload: &[u8]) -> Result<()> {
    w.write_all(&[tag])?;
    w.write_all(&(payload.len() as u64).to_le_bytes())?;
    w.write_all(payload)?;
    Ok(())
}

/// Serializes a chain to bytes.
pub fn encode_chain<S: ChainDraw>(chain: &Chain<S>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(S::KIND);
    let mut e = Encoder::default();
    e.str(&chain.config_json);
    encode_many(&mut e, &chain.block_names, |e, s| e.str(s));
    write_record(&mut out, TAG_META, &e.into_bytes())?;
    for draw in &chain.draws {
        let mut e = Encoder::default();
        draw.encode(&mut e);
        write_record(&mut out, TAG_DRAW, &e.into_bytes())?;
    }
    let mut e = Encoder::default();
    e.f64s(&chain.log_posterior);
    write_record(&mut out, TAG_TRACE, &e.into_bytes())?;
    let mut e = Encoder::default();
    encode_many(&mut e, &chain.acceptance, |e, row| e.bools(row));
    write_record(&mut out, TAG_ACCEPT, &e.into_bytes())?;
    let mut e = Encoder::default();
    encode_many(&mut e, &chain.inclusion_counts, |e, &c| e.u64(c));
    write_record(&mut out, TAG_COUNTS, &e.into_bytes())?;
    write_record(&mut out, TAG_END, &[])?;
    Ok(out)
}

/// Parses bytes written by [`encode_chain`].
pub fn decode_chain<S: ChainDraw>(bytes: &[u8]) -> Result<Chain<S>> {
    let mut d = Decoder::new(bytes);
    if d.take(8)? != MAGIC {
        return Err(Error::Format("not a chain file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(d.take(4)?.try_into().expect("four bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported chain version {version}, expected {VERSION}")));
    }
    let kind = d.u8()?;
    if kind != S::KIND {
        return Err(Error::Format(format!("chain holds draw kind {kind}, expected {}", S::KIND)));
    }
    let mut chain = Chain {
        draws: Vec::new(),
        log_posterior: Vec::new(),
        block_names: Vec::new(),
        acceptance: Vec::new(),
        inclusion_counts: Vec::new(),
        config_json: String::new(),
    };
    let mut seen_meta = false;
    loop {
        let tag = d.u8()?;
        let len = d.usize()?;
        let mut rec = Decoder::new(d.take(len)?);
        match tag {
            TAG_META => {
                chain.config_json = rec.str()?;
                chain.block_names = decode_many(&mut rec, |r| r.str())?;
                seen_meta = true;
            }
            TAG_DRAW => chain.draws.push(S::decode(&mut rec)?),
            TAG_TRACE => chain.log_posterior = rec.f64s()?,
            TAG_ACCEPT => chain.acceptance = decode_many(&mut rec, |r| r.bools())?,
            TAG_COUNTS => chain.inclusion_counts = decode_many(&mut rec, |r| r.u64())?,
            TAG_END => break,
            other => return Err(Error::Format(format!("unknown record tag {other}"))),
        }
        rec.finish()?;
    }
    d.finish()?;
    if !seen_meta {
        return Err(Error::Format("chain file has no metadata record".into()));
    }
    Ok(chain)
}

/// Path of the JSON sidecar belonging to a chain file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Serialize)]
struct Sidecar<'a> {
    format_version: u32,
    draw_kind: u8,
    draws: usize,
    iterations: usize,
    block_names: &'a [String],
    config: serde_json::Value,
}

/// Writes the chain and its sidecar.
pub fn save_chain<S: ChainDraw>(chain: &Chain<S>, path: &Path) -> Result<()> {
    let bytes = encode_chain(chain)?;
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&bytes)?;
    f.flush()?;
    let config = serde_json::from_str(&chain.config_json).unwrap_or(serde_json::Value::Null);
    let meta = Sidecar {
        format_version: VERSION,
        draw_kind: S::KIND,
        draws: chain.draws.len(),
        iterations: chain.log_posterior.len(),
        block_names: &chain.block_names,
        config,
    };
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(sidecar_path(path), text)?;
    Ok(())
}

pub fn load_chain<S: ChainDraw>(path: &Path) -> Result<Chain<S>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_chain(&bytes)
}

fn delimiter_for(path: &Path) -> u8 {
    match path.extension().and_then(|e| e.to_str()) {
        Some("tsv") | Some("tab") => b'\t',
        _ => b',',
    }
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    Ok(csv::ReaderBuilder::new()
        .delimiter(delimiter_for(path))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_error)?)
}

fn csv_error(e: csv::Error) -> Error {
    let row = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => Error::Parse {
            row,
            column: String::new(),
            message: format!("{kind:?}"),
        },
    }
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, headers: &csv::StringRecord, c: usize, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let column = headers.get(c).unwrap_or("").to_string();
    let raw = rec.get(c).ok_or_else(|| Error::Parse {
        row: line,
        column: column.clone(),
        message: "missing field".into(),
    })?;
    raw.parse().map_err(|e: T::Err| Error::Parse {
        row: line,
        column,
        message: format!("cannot parse '{raw}': {e}"),
    })
}

/// Reads a headered numeric table with one row per subject.
pub fn read_matrix(path: &Path) -> Result<RowMatrix> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(csv_error)?.clone();
    let cols = headers.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map_or(rows + 2, |p| p.line() as usize);
        if rec.len() != cols {
            return Err(Error::Parse {
                row: line,
                column: headers.get(rec.len().min(cols.saturating_sub(1))).unwrap_or("").to_string(),
                message: format!("expected {cols} fields, found {}", rec.len()),
            });
        }
        for c in 0..cols {
            let v: f64 = parse_field(&rec, &headers, c, line)?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row: line,
                    column: headers[c].to_string(),
                    message: format!("non-finite value {v}"),
                });
            }
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Empty(format!("{} has no data rows", path.display())));
    }
    RowMatrix::from_vec(rows, cols, data)
}

/// Writes a table with a header `prefix0, prefix1, ...`.
pub fn write_matrix(path: &Path, m: &RowMatrix, prefix: &str) -> Result<()> {
    let mut w = csv::WriterBuilder::new().delimiter(delimiter_for(path)).from_path(path).map_err(csv_error)?;
    w.write_record((0..m.cols()).map(|c| format!("{prefix}{c}"))).map_err(csv_error)?;
    for i in 0..m.rows() {
        w.write_record(m.row(i).iter().map(|v| format!("{v:?}"))).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub const OBSERVATION_COLUMNS: [&str; 5] = ["subject_id", "region_id", "time_raw", "time_scaled", "value"];

/// Reads observations; columns are located by header name.
pub fn read_observations(path: &Path) -> Result<Vec<Observation>> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(csv_error)?.clone();
    let mut idx = [0usize; 5];
    for (k, name) in OBSERVATION_COLUMNS.iter().enumerate() {
        idx[k] = headers.iter().position(|h| h == *name).ok_or_else(|| Error::Parse {
            row: 1,
            column: name.to_string(),
            message: "missing column in header".into(),
        })?;
    }
    let mut obs = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map_or(obs.len() + 2, |p| p.line() as usize);
        let time: f64 = parse_field(&rec, &headers, idx[3], line)?;
        let value: f64 = parse_field(&rec, &headers, idx[4], line)?;
        for (c, v) in [(idx[3], time), (idx[4], value)] {
            if !v.is_finite() {
                return Err(Error::Parse {
                    row: line,
                    column: headers[c].to_string(),
                    message: format!("non-finite value {v}"),
                });
            }
        }
        obs.push(Observation {
            subject: parse_field(&rec, &headers, idx[0], line)?,
            region: parse_field(&rec, &headers, idx[1], line)?,
            time_raw: parse_field(&rec, &headers, idx[2], line)?,
            time,
            value,
        });
    }
    Ok(obs)
}

pub fn write_observations(path: &Path, obs: &[Observation]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().delimiter(delimiter_for(path)).from_path(path).map_err(csv_error)?;
    w.write_record(OBSERVATION_COLUMNS).map_err(csv_error)?;
    for o in obs {
        w.write_record([
            o.subject.to_string(),
            o.region.to_string(),
            format!("{:?}", o.time_raw),
            format!("{:?}", o.time),
            format!("{:?}", o.value),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes one value per line under a header.
pub fn write_column(path: &Path, header: &str, values: &[f64]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().delimiter(delimiter_for(path)).from_path(path).map_err(csv_error)?;
    w.write_record([header]).map_err(csv_error)?;
    for v in values {
        w.write_record([format!("{v:?}")]).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Builds a dataset from files. The number of regions defaults to one more
/// than the largest region id.
pub fn load_dataset(x: Option<&Path>, z: &Path, observations: &Path, regions: Option<usize>) -> Result<Dataset> {
    let x = x.map(read_matrix).transpose()?;
    let z = read_matrix(z)?;
    if let Some(x) = &x {
        if x.rows() != z.rows() {
            return Err(Error::dim("subjects in the high-dimensional covariates", z.rows(), x.rows()));
        }
    }
    let obs = read_observations(observations)?;
    let regions = match regions {
        Some(r) => r,
        None => obs
            .iter()
            .map(|o| o.region + 1)
            .max()
            .ok_or_else(|| Error::Empty("no observations".into()))?,
    };
    Dataset::new(obs, x, z, regions)
}

/// Writes `x`, `z` and observation files of a dataset.
pub fn save_dataset(data: &Dataset, x: Option<&Path>, z: &Path, observations: &Path) -> Result<()> {
    if let (Some(path), Some(m)) = (x, data.x()) {
        write_matrix(path, m, "x")?;
    }
    write_matrix(z, data.z(), "z")?;
    write_observations(observations, data.observations())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::toy_data;
    use crate::model::{VariantKind, VariantSpec};
    use crate::sampler::{run_chain, ChainConfig};

    fn small_chain(kind: VariantKind, p: usize) -> Chain<ModelState> {
        let data = toy_data(6, p, 2, 2, 3, 4);
        let cfg = ChainConfig::new(VariantSpec::new(kind, 4, 4), 12, 4, 9);
        run_chain(&data, &cfg).unwrap()
    }

    #[test]
    fn model_chains_round_trip_exactly() {
        for (kind, p) in [(VariantKind::Base, 5), (VariantKind::RandomEffectRegionwise, 5), (VariantKind::NoSnp, 0)] {
            let chain = small_chain(kind, p);
            let bytes = encode_chain(&chain).unwrap();
            let back: Chain<ModelState> = decode_chain(&bytes).unwrap();
            assert_eq!(back, chain);
            assert_eq!(encode_chain(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn linear_chain_round_trip_and_kind_check() {
        let chain = Chain {
            draws: vec![LinearDraw {
                beta: vec![f64::MIN_POSITIVE, -0.0, 1.0 / 3.0],
                coefficients: vec![1e300],
                random_effects: vec![],
                sigma2: 0.7,
                scale: 2.5,
            }],
            log_posterior: vec![-1.0, f64::NEG_INFINITY],
            block_names: vec![],
            acceptance: vec![],
            inclusion_counts: vec![],
            config_json: "{}".into(),
        };
        let bytes = encode_chain(&chain).unwrap();
        let back: Chain<LinearDraw> = decode_chain(&bytes).unwrap();
        assert_eq!(back.draws[0].beta[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(back, chain);
        assert!(decode_chain::<ModelState>(&bytes).is_err());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let chain = small_chain(VariantKind::Base, 5);
        let bytes = encode_chain(&chain).unwrap();
        assert!(decode_chain::<ModelState>(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_chain::<ModelState>(&bad).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(decode_chain::<ModelState>(&bad).unwrap_err().to_string().contains("version"));
        let mut long = bytes;
        long.push(0);
        assert!(decode_chain::<ModelState>(&long).is_err());
    }

    #[test]
    fn files_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let chain = small_chain(VariantKind::Base, 5);
        let path = dir.path().join("chain.bin");
        save_chain(&chain, &path).unwrap();
        let back: Chain<ModelState> = load_chain(&path).unwrap();
        assert_eq!(back, chain);
        let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(sidecar_path(&path)).unwrap()).unwrap();
        assert_eq!(meta["draws"], chain.len());
        assert_eq!(meta["format_version"], VERSION);
    }

    #[test]
    fn dataset_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = toy_data(5, 7, 2, 3, 4, 2);
        let (x, z, o) = (dir.path().join("x.csv"), dir.path().join("z.tsv"), dir.path().join("obs.csv"));
        save_dataset(&data, Some(&x), &z, &o).unwrap();
        let back = load_dataset(Some(&x), &z, &o, Some(3)).unwrap();
        // rows are renormalized on load, so covariates agree to rounding
        assert_eq!(back.observations(), data.observations());
        let close = |a: &RowMatrix, b: &RowMatrix| a.as_slice().iter().zip(b.as_slice()).all(|(u, v)| (u - v).abs() < 1e-15);
        assert!(close(back.x().unwrap(), data.x().unwrap()));
        assert!(close(back.z(), data.z()));
        assert!(std::fs::read_to_string(&z).unwrap().starts_with("z0\tz1"));
        let inferred = load_dataset(Some(&x), &z, &o, None).unwrap();
        assert_eq!(inferred.regions(), 3);
    }

    #[test]
    fn parse_errors_name_row_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.csv");
        std::fs::write(&p, "a,b\n1,2\n3,oops\n").unwrap();
        match read_matrix(&p).unwrap_err() {
            Error::Parse { row, column, .. } => assert_eq!((row, column.as_str()), (3, "b")),
            e => panic!("unexpected {e}"),
        }
        std::fs::write(&p, "a,b\n1,2\n3\n").unwrap();
        assert!(matches!(read_matrix(&p).unwrap_err(), Error::Parse { row: 3, .. }));
        let o = dir.path().join("obs.csv");
        std::fs::write(&o, "subject_id,region_id,time_raw,time_scaled,value\n0,0,0,0,1.5\n0,x,0,0,1\n").unwrap();
        match read_observations(&o).unwrap_err() {
            Error::Parse { row, column, .. } => assert_eq!((row, column.as_str()), (3, "region_id")),
            e => panic!("unexpected {e}"),
        }
        std::fs::write(&o, "subject_id,region_id,time_raw,value\n").unwrap();
        assert!(matches!(read_observations(&o).unwrap_err(), Error::Parse { row: 1, .. }));
    }
}
