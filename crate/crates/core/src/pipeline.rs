//! Image pipeline for the digit translation experiment: IDX ingestion, PCA
//! embedding and reconstruction, and PGM export.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{sym_eigen, LinalgError, JACOBI_TOL};
use crate::nn::checkpoint::{CheckpointError, Container};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { found: u32, expected: u32 },
    #[error("IDX data truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("IDX payload has {extra} trailing bytes")]
    TrailingBytes { extra: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at index {index} is not a digit")]
    BadLabel { index: usize, label: u8 },
    #[error("cannot fit {k} components: at most {max} available")]
    TooManyComponents { k: usize, max: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("malformed PGM: {0}")]
    Pgm(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Grayscale images as rows of a matrix with pixels in `[0, 1]`, plus labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub rows: usize,
    pub cols: usize,
    pub images: Array2<f64>,
    pub labels: Vec<u8>,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Splits into the images whose label satisfies `first` and the rest.
    pub fn split_by_label(&self, first: impl Fn(u8) -> bool) -> (Array2<f64>, Array2<f64>) {
        let (a, b): (Vec<usize>, Vec<usize>) = (0..self.len()).partition(|&i| first(self.labels[i]));
        (self.images.select(Axis(0), &a), self.images.select(Axis(0), &b))
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32, PipelineError> {
    let s = bytes.get(at..at + 4).ok_or(PipelineError::Truncated {
        needed: at + 4,
        have: bytes.len(),
    })?;
    Ok(u32::from_be_bytes(s.try_into().expect("4 bytes")))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<(), PipelineError> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(PipelineError::BadMagic { found, expected });
    }
    Ok(())
}

fn check_len(bytes: &[u8], needed: usize) -> Result<(), PipelineError> {
    match bytes.len().cmp(&needed) {
        std::cmp::Ordering::Less => Err(PipelineError::Truncated {
            needed,
            have: bytes.len(),
        }),
        std::cmp::Ordering::Greater => Err(PipelineError::TrailingBytes {
            extra: bytes.len() - needed,
        }),
        std::cmp::Ordering::Equal => Ok(()),
    }
}

/// Parses an IDX image file: returns `(rows, cols, pixels / 255)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Array2<f64>), PipelineError> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let px = rows * cols;
    check_len(bytes, 16 + n * px)?;
    let images = Array2::from_shape_fn((n, px), |(i, j)| bytes[16 + i * px + j] as f64 / 255.0);
    Ok((rows, cols, images))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, PipelineError> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    check_len(bytes, 8 + n)?;
    let labels = bytes[8..].to_vec();
    if let Some(index) = labels.iter().position(|&l| l > 9) {
        return Err(PipelineError::BadLabel {
            index,
            label: labels[index],
        });
    }
    Ok(labels)
}

/// Encodes images with pixels in `[0, 1]` (rounded to bytes) as an IDX file.
pub fn encode_idx_images(rows: usize, cols: usize, images: ArrayView2<'_, f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len());
    for v in [IDX_IMAGES_MAGIC, images.nrows() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(images.iter().map(|&p| to_byte(p)));
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<ImageSet, PipelineError> {
    let ip = images_path.as_ref();
    let lp = labels_path.as_ref();
    let (rows, cols, images) = parse_idx_images(&std::fs::read(ip).map_err(io_err(ip))?)?;
    let labels = parse_idx_labels(&std::fs::read(lp).map_err(io_err(lp))?)?;
    if images.nrows() != labels.len() {
        return Err(PipelineError::CountMismatch {
            images: images.nrows(),
            labels: labels.len(),
        });
    }
    Ok(ImageSet {
        rows,
        cols,
        images,
        labels,
    })
}

/// Principal components of a data set: `components` rows are orthonormal,
/// sorted by decreasing variance. `eigenvalues` holds the whole covariance
/// spectrum, descending.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    pub mean: Array1<f64>,
    pub components: Array2<f64>,
    pub eigenvalues: Array1<f64>,
}

#[derive(Serialize, Deserialize)]
struct PcaHeader {
    kind: String,
    dim: usize,
    k: usize,
}

/// Fits `k` components (one sample per row) by eigendecomposition of the
/// sample covariance. Each component's largest-magnitude entry is positive.
pub fn fit_pca(data: ArrayView2<'_, f64>, k: usize) -> Result<PcaModel, PipelineError> {
    let (n, dim) = data.dim();
    let max = n.min(dim);
    if k > max || n == 0 {
        return Err(PipelineError::TooManyComponents { k, max });
    }
    let mean = data.mean_axis(Axis(0)).expect("nonempty");
    let centered = &data - &mean.view().insert_axis(Axis(0));
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let cov = centered.t().dot(&centered) / denom;
    let cov = (&cov + &cov.t()) * 0.5;
    let eig = sym_eigen(&cov, JACOBI_TOL)?;
    let mut components = eig.vectors.t().slice(ndarray::s![..k, ..]).to_owned();
    for mut row in components.rows_mut() {
        let lead = row
            .iter()
            .fold(0.0f64, |best, &v| if v.abs() > best.abs() { v } else { best });
        if lead < 0.0 {
            row.mapv_inplace(|v| -v);
        }
    }
    Ok(PcaModel {
        mean,
        components,
        eigenvalues: eig.values.mapv(|l| l.max(0.0)),
    })
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn k(&self) -> usize {
        self.components.nrows()
    }

    fn check(&self, got: usize, expected: usize) -> Result<(), PipelineError> {
        if got != expected {
            return Err(PipelineError::Dimension { expected, got });
        }
        Ok(())
    }

    pub fn embed(&self, image: ArrayView1<'_, f64>) -> Result<Array1<f64>, PipelineError> {
        self.check(image.len(), self.dim())?;
        Ok(self.components.dot(&(&image - &self.mean)))
    }

    /// Unclipped reconstruction `mean + components^T code`.
    pub fn reconstruct(&self, code: ArrayView1<'_, f64>) -> Result<Array1<f64>, PipelineError> {
        self.check(code.len(), self.k())?;
        Ok(&self.mean + &self.components.t().dot(&code))
    }

    pub fn embed_batch(&self, images: ArrayView2<'_, f64>) -> Result<Array2<f64>, PipelineError> {
        self.check(images.ncols(), self.dim())?;
        let centered = &images - &self.mean.view().insert_axis(Axis(0));
        Ok(centered.dot(&self.components.t()))
    }

    pub fn reconstruct_batch(&self, codes: ArrayView2<'_, f64>) -> Result<Array2<f64>, PipelineError> {
        self.check(codes.ncols(), self.k())?;
        Ok(codes.dot(&self.components) + self.mean.view().insert_axis(Axis(0)))
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        let header = PcaHeader {
            kind: "pca".into(),
            dim: self.dim(),
            k: self.k(),
        };
        c.push_json(&serde_json::to_string(&header).expect("serializable"));
        c.push_f64s(self.mean.as_slice().expect("contiguous"));
        c.push_f64s(&self.components.iter().copied().collect::<Vec<_>>());
        c.push_f64s(self.eigenvalues.as_slice().expect("contiguous"));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, PipelineError> {
        let malformed = |reason: &str| CheckpointError::Malformed {
            offset: 0,
            reason: reason.into(),
        };
        let header: PcaHeader =
            serde_json::from_str(&c.json(0)?).map_err(|e| malformed(&format!("PCA header: {e}")))?;
        if header.kind != "pca" {
            return Err(malformed("not a PCA model").into());
        }
        let mean = Array1::from(c.f64s(0)?);
        let comps = c.f64s(1)?;
        let eigenvalues = Array1::from(c.f64s(2)?);
        if mean.len() != header.dim || comps.len() != header.k * header.dim {
            return Err(malformed("PCA shapes disagree with header").into());
        }
        Ok(Self {
            mean,
            components: Array2::from_shape_vec((header.k, header.dim), comps).expect("checked"),
            eigenvalues,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PipelineError> {
        Ok(self.to_container().save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        Self::from_container(&Container::load(path)?)
    }
}

fn to_byte(p: f64) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a binary (P5) PGM with maxval 255; pixels are clipped to `[0, 1]`.
pub fn export_pgm(
    pixels: ArrayView1<'_, f64>,
    width: usize,
    height: usize,
    path: impl AsRef<Path>,
) -> Result<(), PipelineError> {
    if pixels.len() != width * height {
        return Err(PipelineError::Dimension {
            expected: width * height,
            got: pixels.len(),
        });
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|&p| to_byte(p)));
    let path = path.as_ref();
    std::fs::write(path, out).map_err(io_err(path))
}

/// Tiles equally sized images into a grid of `cols` columns and writes it.
pub fn export_pgm_grid(
    images: ArrayView2<'_, f64>,
    width: usize,
    height: usize,
    cols: usize,
    path: impl AsRef<Path>,
) -> Result<(), PipelineError> {
    let n = images.nrows();
    let cols = cols.max(1).min(n.max(1));
    let rows = n.div_ceil(cols);
    let (gw, gh) = (cols * width, rows.max(1) * height);
    let mut grid = Array1::zeros(gw * gh);
    for (i, img) in images.rows().into_iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        for y in 0..height {
            for x in 0..width {
                grid[(r * height + y) * gw + c * width + x] = img[y * width + x];
            }
        }
    }
    export_pgm(grid.view(), gw, gh, path)
}

/// Reads a P5 PGM with maxval 255: `(width, height, pixels / 255)`.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Array1<f64>), PipelineError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(PipelineError::Pgm("truncated header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(PipelineError::Pgm(format!("unsupported format {}", fields[0])));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| PipelineError::Pgm(format!("bad number {s:?}")))
    };
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(PipelineError::Pgm(format!("unsupported maxval {max}")));
    }
    let data = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| PipelineError::Pgm("truncated pixel data".into()))?;
    Ok((w, h, data.iter().map(|&b| b as f64 / 255.0).collect()))
}
