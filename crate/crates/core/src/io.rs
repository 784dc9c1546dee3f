//! On-disk formats: raw little-endian arrays with a JSON sidecar, dataset
//! manifests, run configuration and CSV tables.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSpec, VolumeCoeffs};
use crate::error::{Error, Result};
use crate::geometry::Rotation;
use crate::imaging::{CtfParams, ImageStack, ImagingOperator};
use crate::kernel::Precision;

pub trait Element: Copy {
    const DTYPE: &'static str;
    const SIZE: usize;
    fn put(self, out: &mut Vec<u8>);
    fn get(bytes: &[u8]) -> Self;
}

impl Element for f64 {
    const DTYPE: &'static str = "f64";
    const SIZE: usize = 8;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

impl Element for f32 {
    const DTYPE: &'static str = "f32";
    const SIZE: usize = 4;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayHeader {
    pub dtype: String,
    pub shape: Vec<usize>,
    /// CRC32 of the payload bytes.
    pub checksum: u32,
}

/// `<path>.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| missing_or_io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })
}

fn missing_or_io(path: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::MissingInput(path.display().to_string())
    } else {
        Error::io(path, e)
    }
}

/// Writes `data` in C order with its sidecar.
pub fn write_array<T: Element>(path: &Path, data: &[T], shape: &[usize]) -> Result<()> {
    let count: usize = shape.iter().product();
    if count != data.len() {
        return Err(Error::Dimension(format!(
            "shape {shape:?} holds {count} values, got {}",
            data.len()
        )));
    }
    let mut bytes = Vec::with_capacity(data.len() * T::SIZE);
    for &x in data {
        x.put(&mut bytes);
    }
    let header = ArrayHeader {
        dtype: T::DTYPE.into(),
        shape: shape.to_vec(),
        checksum: crc32fast::hash(&bytes),
    };
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    write_json(&sidecar_path(path), &header)
}

/// Reads an array and its shape, verifying dtype, length and checksum.
pub fn read_array<T: Element>(path: &Path) -> Result<(Vec<T>, Vec<usize>)> {
    let header: ArrayHeader = read_json(&sidecar_path(path))?;
    let corrupt = |reason: String| Error::CorruptFile {
        path: path.into(),
        reason,
    };
    if header.dtype != T::DTYPE {
        return Err(corrupt(format!("dtype {} where {} was expected", header.dtype, T::DTYPE)));
    }
    let bytes = fs::read(path).map_err(|e| missing_or_io(path, e))?;
    let count: usize = header.shape.iter().product();
    if bytes.len() != count * T::SIZE {
        return Err(corrupt(format!(
            "payload has {} bytes, shape {:?} needs {}",
            bytes.len(),
            header.shape,
            count * T::SIZE
        )));
    }
    if crc32fast::hash(&bytes) != header.checksum {
        return Err(corrupt("checksum mismatch".into()));
    }
    Ok((bytes.chunks_exact(T::SIZE).map(T::get).collect(), header.shape))
}

/// Reads an array whose shape must equal `shape`.
pub fn read_array_shaped<T: Element>(path: &Path, shape: &[usize]) -> Result<Vec<T>> {
    let (data, got) = read_array(path)?;
    if got != shape {
        return Err(Error::Dimension(format!(
            "{} has shape {got:?}, expected {shape:?}",
            path.display()
        )));
    }
    Ok(data)
}

pub fn write_stack(path: &Path, stack: &ImageStack) -> Result<()> {
    write_array(path, stack.as_slice(), &[stack.len(), stack.edge(), stack.edge()])
}

pub fn read_stack(path: &Path) -> Result<ImageStack> {
    let (data, shape) = read_array::<f64>(path)?;
    if shape.len() != 3 || shape[1] != shape[2] {
        return Err(Error::Dimension(format!("{} is not an image stack: {shape:?}", path.display())));
    }
    ImageStack::from_vec(shape[0], shape[1], data)
}

/// Writes volumes as a `[count, p]` array.
pub fn write_volumes(path: &Path, volumes: &[VolumeCoeffs]) -> Result<()> {
    let p = volumes.first().map_or(0, |v| v.len());
    if volumes.iter().any(|v| v.len() != p) {
        return Err(Error::Dimension("volumes differ in length".into()));
    }
    let flat: Vec<f64> = volumes.iter().flat_map(|v| v.iter().copied()).collect();
    write_array(path, &flat, &[volumes.len(), p])
}

pub fn read_volumes(path: &Path, p: usize) -> Result<Vec<VolumeCoeffs>> {
    let (data, shape) = read_array::<f64>(path)?;
    if shape.len() != 2 || shape[1] != p {
        return Err(Error::Dimension(format!(
            "{} has shape {shape:?}, expected [count, {p}]",
            path.display()
        )));
    }
    Ok(data.chunks_exact(p.max(1)).map(VolumeCoeffs::from_column_slice).collect())
}

/// Shortest round-trip decimal form; non-finite values are an error.
pub fn fmt_f64(x: f64) -> Result<String> {
    if !x.is_finite() {
        return Err(Error::NonFinite(format!("CSV value {x}")));
    }
    Ok(format!("{x}"))
}

/// CSV with a header row.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        if r.len() != header.len() {
            return Err(Error::Dimension(format!("CSV row of {} cells for {} columns", r.len(), header.len())));
        }
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Numeric table with a leading integer index column.
pub fn write_indexed_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> Result<()> {
    let rows = rows
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let mut out = vec![i.to_string()];
            for x in r {
                out.push(fmt_f64(x)?);
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    write_csv(path, header, &rows)
}

pub const MANIFEST_VERSION: &str = "cryocov-dataset/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    /// Row-major rotation matrix.
    pub rotation: [f64; 9],
    /// Index into the manifest's CTF table.
    pub ctf: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub rotations: u64,
    pub assignments: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthFiles {
    /// `[states, p]` array of ground-truth volumes.
    pub states: String,
    pub probabilities: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_images: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub n: usize,
    pub basis: BasisSpec,
    /// Image stack path, relative to the manifest.
    pub images: String,
    pub records: Vec<ImageRecord>,
    pub ctfs: Vec<CtfParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Seeds>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<TruthFiles>,
}

/// A manifest together with the directory its paths are relative to.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub dir: PathBuf,
}

impl Dataset {
    /// Loads and validates a manifest, including that every referenced
    /// file exists and the image count matches the records.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest: DatasetManifest = read_json(path)?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let ds = Self { manifest, dir };
        ds.validate()?;
        Ok(ds)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if m.version != MANIFEST_VERSION {
            return Err(Error::InvalidParameter(format!("unsupported manifest version {}", m.version)));
        }
        if m.basis.n() != m.n {
            return Err(Error::Dimension(format!("basis grid {} but manifest N = {}", m.basis.n(), m.n)));
        }
        if m.ctfs.is_empty() {
            return Err(Error::InvalidParameter("empty CTF table".into()));
        }
        for c in &m.ctfs {
            c.validate()?;
        }
        if let Some(s) = m.sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::InvalidParameter(format!("sigma {s} must be >= 0")));
            }
        }
        let states = m.truth.as_ref().map(|t| t.probabilities.len());
        for (i, r) in m.records.iter().enumerate() {
            if r.ctf >= m.ctfs.len() {
                return Err(Error::InvalidParameter(format!("record {i}: CTF index {} out of range", r.ctf)));
            }
            Rotation::from_row_major(&r.rotation)?;
            if let (Some(a), Some(c)) = (r.state, states) {
                if a >= c {
                    return Err(Error::InvalidParameter(format!("record {i}: state {a} out of range")));
                }
            }
        }
        let header: ArrayHeader = read_json(&sidecar_path(&self.path(&m.images)))?;
        let want = [m.records.len(), m.n, m.n];
        if header.shape != want {
            return Err(Error::Dimension(format!(
                "image file has shape {:?}, manifest implies {want:?}",
                header.shape
            )));
        }
        if !self.path(&m.images).exists() {
            return Err(Error::MissingInput(self.path(&m.images).display().to_string()));
        }
        if let Some(t) = &m.truth {
            for f in std::iter::once(&t.states).chain(t.clean_images.as_ref()) {
                let p = self.path(f);
                if !p.exists() {
                    return Err(Error::MissingInput(p.display().to_string()));
                }
            }
        }
        Ok(())
    }

    pub fn operators(&self) -> Result<Vec<ImagingOperator>> {
        let grid = self.manifest.basis.grid();
        self.manifest
            .records
            .iter()
            .map(|r| Ok(ImagingOperator::new(Rotation::from_row_major(&r.rotation)?, self.manifest.ctfs[r.ctf], grid)))
            .collect()
    }

    pub fn rotations(&self) -> Result<Vec<Rotation>> {
        self.manifest.records.iter().map(|r| Rotation::from_row_major(&r.rotation)).collect()
    }

    pub fn images(&self) -> Result<ImageStack> {
        read_stack(&self.path(&self.manifest.images))
    }

    /// Ground-truth states, if recorded.
    pub fn truth_states(&self) -> Result<Option<Vec<VolumeCoeffs>>> {
        match &self.manifest.truth {
            Some(t) => Ok(Some(read_volumes(&self.path(&t.states), self.manifest.basis.p())?)),
            None => Ok(None),
        }
    }

    /// Per-image truth state indices, if every record has one.
    pub fn truth_assignments(&self) -> Option<Vec<usize>> {
        self.manifest.records.iter().map(|r| r.state).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceKind {
    Euclidean,
    CommonLines,
}

/// Solver and analysis settings shared by the pipeline stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub nu: f64,
    /// `None` selects the default scaled to the mean kernel.
    pub xi: Option<f64>,
    pub tol: f64,
    pub maxiter: usize,
    pub precondition: bool,
    pub shrink: bool,
    pub rank: Option<usize>,
    pub precision: Precision,
    /// Recorded in reports; computation is single-threaded.
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub clusters: Option<usize>,
    pub restarts: usize,
    pub distance: DistanceKind,
    pub eps: Option<f64>,
    pub tau: f64,
    pub dim: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            nu: 0.0,
            xi: None,
            tol: 1e-6,
            maxiter: 500,
            precondition: true,
            shrink: false,
            rank: None,
            precision: Precision::F64,
            threads: None,
            out: None,
            seed: 0,
            clusters: None,
            restarts: crate::analysis::DEFAULT_RESTARTS,
            distance: DistanceKind::Euclidean,
            eps: None,
            tau: 1.0,
            dim: 2,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = read_json(path)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.tol > 0.0) {
            return bad(format!("tol {} must be > 0", self.tol));
        }
        if self.maxiter < 1 {
            return bad("maxiter must be >= 1".into());
        }
        if !(self.nu >= 0.0) {
            return bad(format!("nu {} must be >= 0", self.nu));
        }
        if let Some(xi) = self.xi {
            if !(xi >= 0.0) {
                return bad(format!("xi {xi} must be >= 0"));
            }
        }
        if self.rank == Some(0) {
            return bad("rank must be >= 1".into());
        }
        if self.threads == Some(0) {
            return bad("threads must be >= 1".into());
        }
        if self.restarts < 1 {
            return bad("restarts must be >= 1".into());
        }
        if !(self.tau >= 0.0) || self.dim < 1 {
            return bad("need tau >= 0 and dim >= 1".into());
        }
        Ok(())
    }

    pub fn solver(&self) -> crate::estimators::SolverOptions {
        crate::estimators::SolverOptions {
            tol: self.tol,
            maxiter: self.maxiter,
            precondition: self.precondition,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn array_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.f64");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..24).map(|_| rng.random::<f64>() * 1e300 - 5e299).collect();
        write_array(&p, &data, &[2, 3, 4]).unwrap();
        let (back, shape) = read_array::<f64>(&p).unwrap();
        assert_eq!(shape, vec![2, 3, 4]);
        assert!(data.iter().zip(&back).all(|(a, b)| a.to_bits() == b.to_bits()));

        let q = dir.path().join("b.f32");
        let small: Vec<f32> = data.iter().map(|&x| (x * 1e-300) as f32).collect();
        write_array(&q, &small, &[24]).unwrap();
        assert_eq!(read_array::<f32>(&q).unwrap().0, small);
        assert!(matches!(read_array::<f64>(&q), Err(Error::CorruptFile { .. })));
        assert!(matches!(read_array_shaped::<f64>(&p, &[6, 4]), Err(Error::Dimension(_))));
        assert!(matches!(write_array(&p, &data, &[5]), Err(Error::Dimension(_))));
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.f64");
        write_array(&p, &[1.0, 2.0, 3.0], &[3]).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..20]).unwrap();
        assert!(matches!(read_array::<f64>(&p), Err(Error::CorruptFile { .. })));
        let mut flipped = bytes.clone();
        flipped[3] ^= 1;
        fs::write(&p, &flipped).unwrap();
        assert!(matches!(read_array::<f64>(&p), Err(Error::CorruptFile { .. })));
        assert!(matches!(read_array::<f64>(&dir.path().join("none")), Err(Error::MissingInput(_))));
    }

    #[test]
    fn empty_array() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.f64");
        write_array::<f64>(&p, &[], &[0]).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 0);
        let (d, s) = read_array::<f64>(&p).unwrap();
        assert!(d.is_empty());
        assert_eq!(s, vec![0]);
    }

    #[test]
    fn csv_rejects_nan() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        write_indexed_csv(&p, &["i", "x"], vec![vec![0.5], vec![1.0]]).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "i,x\n0,0.5\n1,1\n");
        assert!(matches!(
            write_indexed_csv(&p, &["i", "x"], vec![vec![f64::NAN]]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn config_defaults_and_validation() {
        let c: RunConfig = serde_json::from_str(r#"{"tol": 1e-8, "shrink": true}"#).unwrap();
        assert_eq!(c.tol, 1e-8);
        assert!(c.shrink);
        assert_eq!(c.maxiter, RunConfig::default().maxiter);
        assert!(c.validate().is_ok());
        let bad = RunConfig {
            tol: 0.0,
            ..RunConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = RunConfig {
            maxiter: 0,
            ..RunConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"tolerance": 1}"#).is_err());
    }
}
