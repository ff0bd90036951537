//! Dataset synthesis and loading.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Feature matrix with optional class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Option<Vec<usize>>,
    pub class_count: usize,
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        features: Matrix,
        labels: Option<Vec<usize>>,
        class_count: usize,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::InvalidInput("dataset has no samples".into()));
        }
        if !features.is_finite() {
            return Err(Error::InvalidInput(
                "dataset features must be finite".into(),
            ));
        }
        if let Some(l) = &labels {
            if l.len() != features.rows() {
                return Err(Error::shape("Dataset labels", features.rows(), l.len()));
            }
            if let Some(bad) = l.iter().find(|&&c| c >= class_count) {
                return Err(Error::InvalidInput(format!(
                    "label {bad} out of range for {class_count} classes"
                )));
            }
        }
        Ok(Dataset {
            features,
            labels,
            class_count,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    /// Keeps the samples whose label is in `classes`, relabelled by their
    /// position in `classes`, up to `limit` samples.
    pub fn filter_classes(&self, classes: &[usize], limit: Option<usize>) -> Result<Dataset> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("class filter needs labels".into()))?;
        let mut keep = Vec::new();
        let mut relabel = Vec::new();
        for (n, l) in labels.iter().enumerate() {
            if let Some(pos) = classes.iter().position(|c| c == l) {
                keep.push(n);
                relabel.push(pos);
                if limit.is_some_and(|m| keep.len() >= m) {
                    break;
                }
            }
        }
        Dataset::new(
            self.features.select_rows(&keep),
            Some(relabel),
            classes.len(),
            format!("{} classes={classes:?}", self.provenance),
        )
    }
}

/// Isotropic Gaussian blobs around centres placed at `separation` times a
/// random unit direction. Samples are grouped by cluster and labelled with
/// their generating cluster.
pub fn gen_blobs(
    k: usize,
    input_dim: usize,
    per_cluster: usize,
    separation: f64,
    sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if k < 2 {
        return Err(Error::InvalidInput(
            "blobs need at least two clusters".into(),
        ));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::InvalidInput("separation must be positive".into()));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidInput("sigma must be non-negative".into()));
    }
    if input_dim == 0 || per_cluster == 0 {
        return Err(Error::InvalidInput(
            "blobs need a positive dimension and cluster size".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..k)
        .map(|_| loop {
            let v: Vec<f64> = (0..input_dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| separation * x / norm).collect();
            }
        })
        .collect();
    let mut data = Vec::with_capacity(k * per_cluster * input_dim);
    let mut labels = Vec::with_capacity(k * per_cluster);
    for (label, c) in centers.iter().enumerate() {
        for _ in 0..per_cluster {
            for &m in c {
                let e: f64 = rng.sample(StandardNormal);
                data.push(m + sigma * e);
            }
            labels.push(label);
        }
    }
    Dataset::new(
        Matrix::from_vec(k * per_cluster, input_dim, data)?,
        Some(labels),
        k,
        format!("blobs k={k} dim={input_dim} per={per_cluster} sep={separation} sigma={sigma} seed={seed}"),
    )
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Downsample {
    #[default]
    #[serde(rename = "none")]
    None,
    /// Non-overlapping 2×2 mean pooling.
    #[serde(rename = "2x")]
    X2,
}

struct IdxReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> IdxReader<'a> {
    fn err(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            location: format!("byte offset {offset}"),
            message: message.into(),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        let b = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| self.err(self.pos, format!("truncated while reading {what}")))?;
        self.pos = end;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos + len;
        let b = self.bytes.get(self.pos..end).ok_or_else(|| {
            self.err(
                self.bytes.len(),
                format!(
                    "truncated {what}: need {len} bytes from offset {}",
                    self.pos
                ),
            )
        })?;
        self.pos = end;
        Ok(b)
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let m = self.u32("magic number")?;
        if m != expected {
            return Err(self.err(0, format!("magic {m:#010x}, expected {expected:#010x}")));
        }
        Ok(())
    }
}

/// Parses IDX image bytes into `(count, rows, cols, pixels)`.
fn parse_idx_images(
    bytes: &[u8],
    path: &Path,
    limit: Option<usize>,
) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut r = IdxReader {
        bytes,
        pos: 0,
        path,
    };
    r.magic(IDX_IMAGES_MAGIC)?;
    let count = r.u32("image count")? as usize;
    let rows = r.u32("row count")? as usize;
    let cols = r.u32("column count")? as usize;
    if rows == 0 || cols == 0 {
        return Err(r.err(8, "zero image dimension"));
    }
    let n = limit.map_or(count, |l| l.min(count));
    let pixels = r.take(n * rows * cols, "pixel data")?.to_vec();
    Ok((n, rows, cols, pixels))
}

fn parse_idx_labels(bytes: &[u8], path: &Path, limit: Option<usize>) -> Result<Vec<u8>> {
    let mut r = IdxReader {
        bytes,
        pos: 0,
        path,
    };
    r.magic(IDX_LABELS_MAGIC)?;
    let count = r.u32("label count")? as usize;
    let n = limit.map_or(count, |l| l.min(count));
    Ok(r.take(n, "label data")?.to_vec())
}

/// Pixels scaled to `[0, 1]`, optionally 2×2 mean pooled, flattened row-major.
fn image_features(pixels: &[u8], rows: usize, cols: usize, downsample: Downsample) -> Vec<f64> {
    match downsample {
        Downsample::None => pixels.iter().map(|&p| p as f64 / 255.0).collect(),
        Downsample::X2 => {
            let mut out = Vec::with_capacity(rows * cols / 4);
            for r in (0..rows).step_by(2) {
                for c in (0..cols).step_by(2) {
                    let s = pixels[r * cols + c] as f64
                        + pixels[r * cols + c + 1] as f64
                        + pixels[(r + 1) * cols + c] as f64
                        + pixels[(r + 1) * cols + c + 1] as f64;
                    out.push(s / (4.0 * 255.0));
                }
            }
            out
        }
    }
}

/// Decodes an IDX image/label pair already in memory.
pub fn decode_idx(
    images: &[u8],
    labels: &[u8],
    images_path: &Path,
    labels_path: &Path,
    downsample: Downsample,
    limit: Option<usize>,
) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(images, images_path, limit)?;
    let label_bytes = parse_idx_labels(labels, labels_path, limit)?;
    if label_bytes.len() != n {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            location: "header".into(),
            message: format!("{} labels for {n} images", label_bytes.len()),
        });
    }
    if downsample == Downsample::X2 && (rows % 2 != 0 || cols % 2 != 0) {
        return Err(Error::Format {
            path: images_path.to_path_buf(),
            location: "header".into(),
            message: format!("2x downsampling needs even dimensions, got {rows}x{cols}"),
        });
    }
    let dim = match downsample {
        Downsample::None => rows * cols,
        Downsample::X2 => rows * cols / 4,
    };
    let mut data = Vec::with_capacity(n * dim);
    for img in pixels.chunks_exact(rows * cols) {
        data.extend(image_features(img, rows, cols, downsample));
    }
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(
        Matrix::from_vec(n, dim, data)?,
        Some(labels),
        class_count,
        format!("idx {}", images_path.display()),
    )
}

pub fn load_idx_images(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    downsample: Downsample,
    limit: Option<usize>,
) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = fs::read(ip).map_err(|e| Error::io(ip, e))?;
    let labels = fs::read(lp).map_err(|e| Error::io(lp, e))?;
    decode_idx(&images, &labels, ip, lp, downsample, limit)
}

/// Parses a delimited numeric table; the last column is the class label
/// when `has_labels` is set.
pub fn parse_dense_features(
    text: &str,
    path: &Path,
    has_labels: bool,
    delimiter: char,
) -> Result<Dataset> {
    let fmt_err = |line: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        location: format!("line {line}"),
        message,
    };
    let mut width = None;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(delimiter).map(str::trim).collect();
        let w = *width.get_or_insert(cells.len());
        if cells.len() != w {
            return Err(fmt_err(
                line_no,
                format!("{} columns, expected {w}", cells.len()),
            ));
        }
        let mut values = cells
            .iter()
            .enumerate()
            .map(|(c, s)| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| {
                        fmt_err(
                            line_no,
                            format!("column {}: not a finite number: {s:?}", c + 1),
                        )
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        if has_labels {
            let l = values
                .pop()
                .ok_or_else(|| fmt_err(line_no, "missing label column".into()))?;
            if l < 0.0 || l.fract() != 0.0 {
                return Err(fmt_err(
                    line_no,
                    format!("label {l} is not a non-negative integer"),
                ));
            }
            labels.push(l as usize);
        }
        data.extend(values);
        rows += 1;
    }
    let width = width.ok_or_else(|| fmt_err(1, "file contains no rows".into()))?;
    let dim = if has_labels { width - 1 } else { width };
    if dim == 0 {
        return Err(fmt_err(1, "no feature columns".into()));
    }
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(
        Matrix::from_vec(rows, dim, data)?,
        has_labels.then_some(labels),
        class_count,
        format!("dense {}", path.display()),
    )
}

pub fn load_dense_features(
    path: impl AsRef<Path>,
    has_labels: bool,
    delimiter: char,
) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dense_features(&text, path, has_labels, delimiter)
}

/// Writes the layout read by [`load_dense_features`]; values use the
/// shortest representation that parses back exactly.
pub fn write_dense_features(
    dataset: &Dataset,
    path: impl AsRef<Path>,
    delimiter: char,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for (n, row) in dataset.features.iter_rows().enumerate() {
        let mut cells: Vec<String> = row.iter().map(f64::to_string).collect();
        if let Some(l) = &dataset.labels {
            cells.push(l[n].to_string());
        }
        out.push_str(&cells.join(&delimiter.to_string()));
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
