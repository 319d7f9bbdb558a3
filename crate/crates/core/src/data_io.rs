//! Datasets: IDX image files, feature CSVs, and synthetic Gaussian mixtures.
//!
//! Ground-truth labels travel with a [`Dataset`] but are only readable
//! inside this crate, and only the evaluation code reads them.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::networks::DataMode;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub data_mode: DataMode,
    features: Tensor,
    labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, features: Tensor, labels: Option<Vec<usize>>, data_mode: DataMode) -> Result<Self> {
        let (n, _) = features.dims2()?;
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::shape(format!("{} labels for {n} rows", l.len())));
            }
        }
        if data_mode == DataMode::Pixel && features.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::format("pixel-mode features must lie in [0, 1]"));
        }
        Ok(Dataset { name: name.into(), data_mode, features, labels })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn has_labels(&self) -> bool {
        self.labels.is_some()
    }

    /// Number of ground-truth classes (largest label + 1).
    pub fn num_classes(&self) -> Option<usize> {
        self.labels.as_ref().map(|l| l.iter().max().map_or(0, |m| m + 1))
    }

    pub(crate) fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// The same dataset with labels removed.
    pub fn without_labels(&self) -> Dataset {
        Dataset { labels: None, ..self.clone() }
    }

    /// The first `n` rows.
    pub fn head(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        Ok(Dataset {
            name: self.name.clone(),
            data_mode: self.data_mode,
            features: self.features.select_rows(&idx)?,
            labels: self.labels.as_ref().map(|l| l[..n].to_vec()),
        })
    }

    /// Rows reordered by `perm` (labels follow their rows).
    pub fn permuted(&self, perm: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            name: self.name.clone(),
            data_mode: self.data_mode,
            features: self.features.select_rows(perm)?,
            labels: self.labels.as_ref().map(|l| perm.iter().map(|&i| l[i]).collect()),
        })
    }
}

/// Header of an IDX file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxHeader {
    pub magic: u32,
    pub dims: Vec<usize>,
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format("truncated IDX header"))
}

/// Parses an IDX header and checks the unsigned-byte payload length.
/// Returns the header and the payload slice.
pub fn parse_idx(bytes: &[u8], expected_magic: u32) -> Result<(IdxHeader, &[u8])> {
    let magic = be_u32(bytes, 0)?;
    if magic != expected_magic {
        return Err(Error::format(format!(
            "bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )));
    }
    let ndims = (magic & 0xff) as usize;
    let dims = (0..ndims)
        .map(|i| be_u32(bytes, 4 + 4 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let offset = 4 + 4 * ndims;
    let expected: usize = dims.iter().product();
    let payload = &bytes[offset.min(bytes.len())..];
    if payload.len() != expected {
        return Err(Error::format(format!(
            "IDX payload has {} bytes, header promises {expected}",
            payload.len()
        )));
    }
    Ok((IdxHeader { magic, dims }, payload))
}

/// Reads just the header of an IDX image file.
pub fn read_idx_header(path: &Path) -> Result<IdxHeader> {
    let bytes = fs::read(path)?;
    Ok(parse_idx(&bytes, IDX_IMAGES_MAGIC)?.0)
}

/// Loads IDX images (scaled by 1/255 and flattened) and optional labels.
pub fn load_idx(images: &Path, labels: Option<&Path>) -> Result<Dataset> {
    load_idx_limit(images, labels, None)
}

/// [`load_idx`] keeping only the first `limit` images.
pub fn load_idx_limit(images: &Path, labels: Option<&Path>, limit: Option<usize>) -> Result<Dataset> {
    let bytes = fs::read(images)?;
    let (header, payload) = parse_idx(&bytes, IDX_IMAGES_MAGIC)?;
    if header.dims.len() != 3 {
        return Err(Error::format(format!("image file has {} dimensions, expected 3", header.dims.len())));
    }
    let (n_all, rows, cols) = (header.dims[0], header.dims[1], header.dims[2]);
    let n = limit.map_or(n_all, |l| l.min(n_all));
    let dim = rows * cols;
    let features: Vec<f64> = payload[..n * dim].iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels = match labels {
        Some(path) => {
            let lb = fs::read(path)?;
            let (lh, lp) = parse_idx(&lb, IDX_LABELS_MAGIC)?;
            if lh.dims.len() != 1 || lh.dims[0] != n_all {
                return Err(Error::format(format!(
                    "label file holds {:?} entries for {n_all} images",
                    lh.dims
                )));
            }
            Some(lp[..n].iter().map(|&b| b as usize).collect())
        }
        None => None,
    };
    let name = images.file_name().map_or_else(|| "idx".into(), |s| s.to_string_lossy().into_owned());
    Dataset::new(name, Tensor::new(vec![n, dim], features)?, labels, DataMode::Pixel)
}

/// Writes images as an IDX file (`n × rows × cols`, unsigned bytes).
pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let per = rows * cols;
    if per == 0 || pixels.len() % per != 0 {
        return Err(Error::shape("pixel buffer is not a whole number of images"));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [pixels.len() / per, rows, cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    fs::write(path, out)?;
    Ok(())
}

/// Writes labels as an IDX file.
pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out)?;
    Ok(())
}

/// Whether `path` starts with the IDX image magic.
pub fn is_idx_images(path: &Path) -> Result<bool> {
    use std::io::Read;
    let mut head = [0u8; 4];
    let mut f = fs::File::open(path)?;
    Ok(f.read_exact(&mut head).is_ok() && u32::from_be_bytes(head) == IDX_IMAGES_MAGIC)
}

/// Writes a binary greyscale PGM (P5), mapping `[0, 1]` to `0..=255`.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::shape(format!("{} values for a {width}x{height} image", values.len())));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, out)?;
    Ok(())
}

/// Loads a headerless numeric CSV; with `has_labels` the final column
/// holds integer class labels.
pub fn load_features_csv(path: &Path, has_labels: bool) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        let n_feat = if has_labels { record.len().saturating_sub(1) } else { record.len() };
        if n_feat == 0 {
            return Err(Error::format(format!("row {} has no feature columns", line + 1)));
        }
        match width {
            None => width = Some(n_feat),
            Some(w) if w != n_feat => {
                return Err(Error::format(format!("row {} has {n_feat} features, expected {w}", line + 1)))
            }
            _ => {}
        }
        for (col, cell) in record.iter().take(n_feat).enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                Error::format(format!("row {}, column {}: {cell:?} is not a number", line + 1, col + 1))
            })?;
            data.push(v);
        }
        if has_labels {
            let cell = &record[n_feat];
            let l: usize = cell
                .parse()
                .map_err(|_| Error::format(format!("row {}: label {cell:?} is not a class index", line + 1)))?;
            labels.push(l);
        }
    }
    let width = width.ok_or_else(|| Error::format(format!("{} contains no rows", path.display())))?;
    let n = data.len() / width;
    let name = path.file_name().map_or_else(|| "csv".into(), |s| s.to_string_lossy().into_owned());
    Dataset::new(name, Tensor::new(vec![n, width], data)?, has_labels.then_some(labels), DataMode::Feature)
}

/// Writes rows as CSV using shortest round-trip float formatting, with
/// an optional trailing label column.
pub fn write_features_csv(path: &Path, features: &Tensor, labels: Option<&[usize]>) -> Result<()> {
    let (n, _) = features.dims2()?;
    let mut out = String::new();
    for i in 0..n {
        let mut first = true;
        for v in features.row(i) {
            if !first {
                out.push(',');
            }
            first = false;
            out.push_str(&v.to_string());
        }
        if let Some(l) = labels {
            out.push(',');
            out.push_str(&l[i].to_string());
        }
        out.push('\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Writes a dataset (with its labels, if any) as CSV.
pub fn write_dataset_csv(path: &Path, dataset: &Dataset) -> Result<()> {
    write_features_csv(path, dataset.features(), dataset.labels())
}

/// Per-column min-max scaling to `[0, 1]`; constant columns become 0.
pub fn scale_unit(features: &Tensor) -> Result<Tensor> {
    let (n, m) = features.dims2()?;
    let mut lo = vec![f64::INFINITY; m];
    let mut hi = vec![f64::NEG_INFINITY; m];
    for i in 0..n {
        for (j, &v) in features.row(i).iter().enumerate() {
            lo[j] = lo[j].min(v);
            hi[j] = hi[j].max(v);
        }
    }
    let mut out = features.clone();
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        let j = k % m;
        let range = hi[j] - lo[j];
        *v = if range > 0.0 { ((*v - lo[j]) / range).clamp(0.0, 1.0) } else { 0.0 };
    }
    Ok(out)
}

/// Parameters of [`synth_gmm`].
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GmmSpec {
    pub k: usize,
    pub dim: usize,
    pub n_per_cluster: usize,
    pub separation: f64,
    pub cluster_std: f64,
    pub seed: u64,
}

/// Isotropic Gaussian mixture with cluster `k` centred at
/// `separation · (1 + k / dim)` on coordinate `k mod dim`, rows shuffled.
/// Pixel mode min-max scales the features into `[0, 1]`.
pub fn synth_gmm(spec: &GmmSpec, data_mode: DataMode) -> Result<Dataset> {
    if spec.k == 0 || spec.dim == 0 {
        return Err(Error::config("synthetic mixture needs k >= 1 and dim >= 1"));
    }
    if spec.n_per_cluster == 0 {
        return Err(Error::config("synthetic mixture needs at least one point per cluster"));
    }
    let noise = Normal::new(0.0, spec.cluster_std)
        .map_err(|e| Error::config(format!("cluster_std {}: {e}", spec.cluster_std)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.k * spec.n_per_cluster;
    let mut rows: Vec<(Vec<f64>, usize)> = Vec::with_capacity(n);
    for c in 0..spec.k {
        let mut mean = vec![0.0; spec.dim];
        mean[c % spec.dim] = spec.separation * (1 + c / spec.dim) as f64;
        for _ in 0..spec.n_per_cluster {
            let x: Vec<f64> = mean.iter().map(|m| m + noise.sample(&mut rng)).collect();
            rows.push((x, c));
        }
    }
    rows.shuffle(&mut rng);
    let labels: Vec<usize> = rows.iter().map(|r| r.1).collect();
    let data: Vec<f64> = rows.into_iter().flat_map(|r| r.0).collect();
    let mut features = Tensor::new(vec![n, spec.dim], data)?;
    if data_mode == DataMode::Pixel {
        features = scale_unit(&features)?;
    }
    Dataset::new(format!("gmm-k{}-d{}", spec.k, spec.dim), features, Some(labels), data_mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gmm(k: usize, seed: u64) -> GmmSpec {
        GmmSpec { k, dim: 10, n_per_cluster: 50, separation: 6.0, cluster_std: 1.0, seed }
    }

    #[test]
    fn idx_round_trip_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        let pixels: Vec<u8> = (0..3 * 4).map(|i| if i == 5 { 255 } else { i as u8 }).collect();
        write_idx_images(&img, 2, 2, &pixels).unwrap();
        write_idx_labels(&lab, &[3, 1, 4]).unwrap();
        let hdr = read_idx_header(&img).unwrap();
        assert_eq!(hdr, IdxHeader { magic: IDX_IMAGES_MAGIC, dims: vec![3, 2, 2] });
        let ds = load_idx(&img, Some(&lab)).unwrap();
        assert_eq!(ds.features().shape(), &[3, 4]);
        assert_eq!(ds.features().data()[5], 1.0);
        assert_eq!(ds.labels(), Some(&[3usize, 1, 4][..]));
        let two = load_idx_limit(&img, Some(&lab), Some(2)).unwrap();
        assert_eq!(two.len(), 2);
    }

    #[test]
    fn idx_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        write_idx_images(&img, 2, 2, &[0; 8]).unwrap();
        // labels file passed as images
        let lab = dir.path().join("lab");
        write_idx_labels(&lab, &[0, 1]).unwrap();
        assert!(matches!(load_idx(&lab, None), Err(Error::Format(_))));
        // corrupted magic
        let mut bytes = fs::read(&img).unwrap();
        bytes[3] = 0x02;
        fs::write(&img, &bytes).unwrap();
        let err = load_idx(&img, None).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
        // truncated payload
        bytes[3] = 0x03;
        bytes.truncate(bytes.len() - 1);
        fs::write(&img, &bytes).unwrap();
        assert!(matches!(load_idx(&img, None), Err(Error::Format(_))));
    }

    #[test]
    fn csv_with_labels_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        fs::write(&p, "1,2,3,4,0\n5,6,7,8,1\n9,10,11,12,1\n").unwrap();
        let ds = load_features_csv(&p, true).unwrap();
        assert_eq!(ds.features().shape(), &[3, 4]);
        assert_eq!(ds.labels().unwrap().len(), 3);
        assert_eq!(ds.data_mode, DataMode::Feature);

        fs::write(&p, "1,2,3\n4,5\n").unwrap();
        assert!(matches!(load_features_csv(&p, false), Err(Error::Format(_))));
        fs::write(&p, "1,2,x\n").unwrap();
        assert!(matches!(load_features_csv(&p, false), Err(Error::Format(_))));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Tensor::randn(&[20, 7], 3.0, &mut rng);
        write_features_csv(&p, &t, None).unwrap();
        let back = load_features_csv(&p, false).unwrap();
        for (a, b) in t.data().iter().zip(back.features().data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn pgm_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        write_pgm(&p, 2, 1, &[0.0, 1.0]).unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"P5\n2 1\n255\n\x00\xff");
        assert!(write_pgm(&p, 2, 2, &[0.0]).is_err());
        assert!(!is_idx_images(&p).unwrap());
    }

    #[test]
    fn scale_unit_cases() {
        let t = Tensor::from_rows(&[vec![2.0, 5.0, -1.0], vec![4.0, 5.0, 3.0], vec![3.0, 5.0, 0.0]]).unwrap();
        let s = scale_unit(&t).unwrap();
        let col = |j: usize| (0..3).map(|i| s.get2(i, j)).collect::<Vec<_>>();
        assert_eq!(col(0), vec![0.0, 1.0, 0.5]);
        assert_eq!(col(1), vec![0.0, 0.0, 0.0]);
        let c2 = col(2);
        assert_eq!(c2.iter().cloned().fold(f64::INFINITY, f64::min), 0.0);
        assert_eq!(c2.iter().cloned().fold(f64::NEG_INFINITY, f64::max), 1.0);
    }

    #[test]
    fn gmm_counts_and_determinism() {
        let a = synth_gmm(&gmm(4, 3), DataMode::Feature).unwrap();
        let b = synth_gmm(&gmm(4, 3), DataMode::Feature).unwrap();
        assert_eq!(a, b);
        let mut counts = [0; 4];
        for &l in a.labels().unwrap() {
            counts[l] += 1;
        }
        assert_eq!(counts, [50; 4]);
        let one = synth_gmm(&gmm(1, 0), DataMode::Pixel).unwrap();
        assert!(one.labels().unwrap().iter().all(|&l| l == 0));
        assert!(one.features().data().iter().all(|v| (0.0..=1.0).contains(v)));
        // more clusters than dimensions still separates means
        let wide = GmmSpec { k: 12, ..gmm(12, 1) };
        assert_eq!(synth_gmm(&wide, DataMode::Feature).unwrap().num_classes(), Some(12));
    }
}
