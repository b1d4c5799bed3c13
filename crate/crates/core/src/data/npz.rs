use std::fs::File;
use std::io::{BufReader, Read, Seek, Write};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use zip::result::ZipError;
use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, ZipArchive, ZipWriter};

use super::synth::DSPRITES_CARDINALITIES;
use super::Dataset;
use crate::error::{Error, Result};
use crate::metrics::FactorTable;
use crate::tensor::Tensor;

const NPY_MAGIC: &[u8] = b"\x93NUMPY";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NpyDtype {
    U8,
    I64,
}

impl NpyDtype {
    fn parse(descr: &str) -> Result<Self> {
        match descr {
            "|u1" | "<u1" | ">u1" | "u1" => Ok(NpyDtype::U8),
            "<i8" => Ok(NpyDtype::I64),
            other => Err(Error::Format(format!("unsupported npy dtype {other:?}"))),
        }
    }

    fn descr(self) -> &'static str {
        match self {
            NpyDtype::U8 => "|u1",
            NpyDtype::I64 => "<i8",
        }
    }

    fn width(self) -> usize {
        match self {
            NpyDtype::U8 => 1,
            NpyDtype::I64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub dtype: NpyDtype,
    /// Little-endian element bytes in C order.
    pub bytes: Vec<u8>,
}

impl NpyArray {
    pub fn to_i64(&self) -> Vec<i64> {
        match self.dtype {
            NpyDtype::U8 => self.bytes.iter().map(|&b| b as i64).collect(),
            NpyDtype::I64 => self.bytes.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
        }
    }
}

fn header_value<'a>(header: &'a str, key: &str) -> Result<&'a str> {
    let pat = format!("'{key}':");
    let at = header.find(&pat).ok_or_else(|| Error::Format(format!("npy header lacks {key}")))?;
    Ok(header[at + pat.len()..].trim_start())
}

struct NpyHeader {
    shape: Vec<usize>,
    dtype: NpyDtype,
}

fn read_npy_header(r: &mut impl Read) -> Result<NpyHeader> {
    let mut pre = [0u8; 8];
    r.read_exact(&mut pre).map_err(|_| Error::Length("npy: truncated preamble".into()))?;
    if &pre[..6] != NPY_MAGIC {
        return Err(Error::Format("npy: bad magic".into()));
    }
    let len = match pre[6] {
        1 => {
            let mut b = [0u8; 2];
            r.read_exact(&mut b).map_err(|_| Error::Length("npy: truncated header length".into()))?;
            u16::from_le_bytes(b) as usize
        }
        2 | 3 => {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| Error::Length("npy: truncated header length".into()))?;
            u32::from_le_bytes(b) as usize
        }
        v => return Err(Error::Format(format!("npy: unsupported version {v}"))),
    };
    let mut raw = vec![0u8; len];
    r.read_exact(&mut raw).map_err(|_| Error::Length("npy: truncated header".into()))?;
    let header = String::from_utf8(raw).map_err(|_| Error::Format("npy: header is not text".into()))?;

    let descr = header_value(&header, "descr")?;
    let quote = descr.chars().next().filter(|c| *c == '\'' || *c == '"').ok_or_else(|| Error::Format("npy: bad descr".into()))?;
    let end = descr[1..].find(quote).ok_or_else(|| Error::Format("npy: bad descr".into()))?;
    let dtype = NpyDtype::parse(&descr[1..1 + end])?;

    let fortran = header_value(&header, "fortran_order")?;
    let shape_txt = header_value(&header, "shape")?;
    let close = shape_txt.find(')').ok_or_else(|| Error::Format("npy: bad shape".into()))?;
    let shape = shape_txt[1..close]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| Error::Format(format!("npy: bad extent {s:?}"))))
        .collect::<Result<Vec<_>>>()?;
    if fortran.starts_with("True") && shape.iter().filter(|&&d| d > 1).count() > 1 {
        return Err(Error::Format("npy: fortran-ordered arrays are not supported".into()));
    }
    Ok(NpyHeader { shape, dtype })
}

fn zip_err(e: ZipError, name: &str) -> Error {
    match e {
        ZipError::FileNotFound => Error::Format(format!("npz: missing array {name:?}")),
        ZipError::Io(io) => Error::Io(io),
        other => Error::Format(format!("npz: {other}")),
    }
}

/// Reads `.npy` members of a ZIP archive.
pub struct NpzReader<R: Read + Seek> {
    archive: ZipArchive<R>,
}

impl NpzReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self> {
        Self::new(BufReader::new(File::open(path)?))
    }
}

impl<R: Read + Seek> NpzReader<R> {
    pub fn new(reader: R) -> Result<Self> {
        Ok(NpzReader { archive: ZipArchive::new(reader).map_err(|e| zip_err(e, ""))? })
    }

    /// Array names (member names without the `.npy` suffix).
    pub fn names(&self) -> Vec<String> {
        self.archive.file_names().map(|n| n.trim_end_matches(".npy").to_string()).collect()
    }

    pub fn read_array(&mut self, name: &str) -> Result<NpyArray> {
        let member = format!("{name}.npy");
        let mut f = self.archive.by_name(&member).map_err(|e| zip_err(e, name))?;
        let h = read_npy_header(&mut f)?;
        let len = h.shape.iter().product::<usize>() * h.dtype.width();
        let mut bytes = Vec::with_capacity(len);
        (&mut f).take(len as u64).read_to_end(&mut bytes)?;
        if bytes.len() != len {
            return Err(Error::Length(format!("npz: array {name:?} expected {len} bytes, found {}", bytes.len())));
        }
        Ok(NpyArray { shape: h.shape, dtype: h.dtype, bytes })
    }

    /// Streams a u8 array row by row (along the first axis), handing the
    /// rows listed in ascending `keep` to `visit`. Returns the array shape.
    pub fn stream_u8_rows(&mut self, name: &str, keep: &[usize], mut visit: impl FnMut(usize, &[u8])) -> Result<Vec<usize>> {
        let member = format!("{name}.npy");
        let mut f = self.archive.by_name(&member).map_err(|e| zip_err(e, name))?;
        let h = read_npy_header(&mut f)?;
        if h.dtype != NpyDtype::U8 || h.shape.is_empty() {
            return Err(Error::Format(format!("npz: array {name:?} is not a u8 stack")));
        }
        let row_len: usize = h.shape[1..].iter().product();
        let mut row = vec![0u8; row_len];
        let mut next = keep.iter().peekable();
        for i in 0..h.shape[0] {
            let Some(&&want) = next.peek() else { break };
            f.read_exact(&mut row).map_err(|_| Error::Length(format!("npz: array {name:?} truncated at row {i}")))?;
            if want == i {
                visit(i, &row);
                next.next();
            }
        }
        if next.peek().is_some() {
            return Err(Error::Contract(format!("npz: requested rows beyond {} in {name:?}", h.shape[0])));
        }
        Ok(h.shape)
    }
}

/// Loads the full DSprites archive.
pub fn load_dsprites_npz(path: &Path) -> Result<Dataset> {
    load_dsprites_from(NpzReader::open(path)?, None)
}

/// Loads a seeded uniform subset without materializing the whole image stack.
pub fn load_dsprites_npz_subset(path: &Path, n: usize, seed: u64) -> Result<Dataset> {
    load_dsprites_from(NpzReader::open(path)?, Some((n, seed)))
}

pub(crate) fn load_dsprites_from<R: Read + Seek>(mut npz: NpzReader<R>, subset: Option<(usize, u64)>) -> Result<Dataset> {
    let classes = npz.read_array("latents_classes")?;
    if classes.shape.len() != 2 || classes.shape[1] != 6 {
        return Err(Error::Validation(format!("latents_classes must be n×6, got {:?}", classes.shape)));
    }
    let total = classes.shape[0];
    let keep: Vec<usize> = match subset {
        None => (0..total).collect(),
        Some((n, seed)) => {
            if n > total {
                return Err(Error::Contract(format!("cannot subsample {n} of {total} samples")));
            }
            let mut idx = index::sample(&mut ChaCha8Rng::seed_from_u64(seed), total, n).into_vec();
            idx.sort_unstable();
            idx
        }
    };

    let values = classes.to_i64();
    let mut columns: Vec<Vec<usize>> = (0..5).map(|_| Vec::with_capacity(keep.len())).collect();
    for &i in &keep {
        for (c, col) in columns.iter_mut().enumerate() {
            let v = values[i * 6 + c + 1];
            if v < 0 || v as usize >= DSPRITES_CARDINALITIES[c] {
                return Err(Error::Validation(format!(
                    "factor {} value {v} outside cardinality {}",
                    c + 1,
                    DSPRITES_CARDINALITIES[c]
                )));
            }
            col.push(v as usize);
        }
    }
    let factors = FactorTable::from_columns(columns, DSPRITES_CARDINALITIES.to_vec())?;

    let mut pixels = Vec::new();
    let mut bad = None;
    let shape = npz.stream_u8_rows("imgs", &keep, |i, row| {
        if bad.is_none() {
            if let Some(&v) = row.iter().find(|&&v| v > 1) {
                bad = Some((i, v));
            }
        }
        pixels.extend(row.iter().map(|&b| b as f64));
    })?;
    if let Some((i, v)) = bad {
        return Err(Error::Validation(format!("imgs row {i} has non-binary pixel {v}")));
    }
    if shape.len() != 3 || shape[0] != total {
        return Err(Error::Validation(format!("imgs shape {shape:?} does not match {total} factor rows")));
    }
    let images = Tensor::new(&[keep.len(), 1, shape[1], shape[2]], pixels)?;
    Dataset::new("dsprites", images, Some(factors))
}

fn npy_bytes(shape: &[usize], dtype: NpyDtype, payload: &[u8]) -> Vec<u8> {
    let dims = match shape {
        [d] => format!("({d},)"),
        _ => format!("({})", shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")),
    };
    let mut header = format!("{{'descr': '{}', 'fortran_order': False, 'shape': {dims}, }}", dtype.descr());
    let unpadded = NPY_MAGIC.len() + 2 + 2 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');
    let mut out = Vec::with_capacity(10 + header.len() + payload.len());
    out.extend_from_slice(NPY_MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(payload);
    out
}

/// Writes `imgs` (u8 n×H×W) and `latents_classes` (i64 n×6, constant colour
/// column first) in the DSprites layout. Requires five-factor datasets.
pub fn write_dsprites_npz<W: Write + Seek>(w: W, ds: &Dataset) -> Result<()> {
    let factors = ds
        .factors
        .as_ref()
        .filter(|f| f.num_factors() == 5)
        .ok_or_else(|| Error::Contract("dsprites export needs five factor columns".into()))?;
    let (h, wd) = ds.image_size();
    let n = ds.len();
    let imgs: Vec<u8> = ds.images.data().iter().map(|&v| u8::from(v >= 0.5)).collect();
    let mut classes = Vec::with_capacity(n * 6 * 8);
    for i in 0..n {
        classes.extend_from_slice(&0i64.to_le_bytes());
        for v in factors.row(i) {
            classes.extend_from_slice(&(v as i64).to_le_bytes());
        }
    }
    let mut zip = ZipWriter::new(w);
    let opts = SimpleFileOptions::default().compression_method(CompressionMethod::Stored).large_file(imgs.len() > u32::MAX as usize / 2);
    let write = |zip: &mut ZipWriter<W>, name: &str, bytes: Vec<u8>| -> Result<()> {
        zip.start_file(name, opts).map_err(|e| zip_err(e, name))?;
        zip.write_all(&bytes)?;
        Ok(())
    };
    write(&mut zip, "imgs.npy", npy_bytes(&[n, h, wd], NpyDtype::U8, &imgs))?;
    write(&mut zip, "latents_classes.npy", npy_bytes(&[n, 6], NpyDtype::I64, &classes))?;
    zip.finish().map_err(|e| zip_err(e, ""))?;
    Ok(())
}
