//! Token-level weighting matrices.
//!
//! Every token of an EDU receives that EDU's row of the distribution, so all
//! sub-word positions of one EDU share the same multiplication factor.
//! Positions outside the document region are zero.

use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::distribution::RstDistribution;
use crate::error::{config_err, shape_err, Error, Result};
use crate::parser_io::EduSegmentation;
use crate::scalar::Scalar;

pub const GAMMA_MAGIC: &[u8; 4] = b"RSTG";
pub const GAMMA_VERSION: u16 = 1;

/// How the `k` relation channels of a label-aware distribution fill the
/// model width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelLayout {
    /// Column `c` carries channel `c mod k`.
    #[default]
    Tile,
    /// Column `c` carries channel `floor(c * k / d_model)`.
    Band,
}

impl FromStr for ChannelLayout {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tile" => Ok(ChannelLayout::Tile),
            "band" => Ok(ChannelLayout::Band),
            other => Err(config_err(format!("unknown channel layout `{other}`"))),
        }
    }
}

impl ChannelLayout {
    fn channel(self, column: usize, k: usize, d_model: usize) -> usize {
        match self {
            ChannelLayout::Tile => column % k,
            ChannelLayout::Band => (column * k / d_model).min(k - 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammaMatrix<T> {
    /// `seq_len × d_model`.
    pub values: Array2<T>,
    /// Half-open range of rows covered by the source document.
    pub doc_region: (usize, usize),
}

impl<T: Scalar> GammaMatrix<T> {
    pub fn seq_len(&self) -> usize {
        self.values.nrows()
    }

    pub fn d_model(&self) -> usize {
        self.values.ncols()
    }

    /// Rows `[0, seq_len)` of a longer or shorter sequence; new rows are zero.
    pub fn resized(&self, seq_len: usize) -> Self {
        let mut values = Array2::zeros((seq_len, self.d_model()));
        let rows = seq_len.min(self.seq_len());
        values
            .slice_mut(ndarray::s![..rows, ..])
            .assign(&self.values.slice(ndarray::s![..rows, ..]));
        GammaMatrix {
            values,
            doc_region: (self.doc_region.0.min(seq_len), self.doc_region.1.min(seq_len)),
        }
    }

    /// List violated invariants (negative entries, mass outside the document).
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let (start, end) = self.doc_region;
        if start > end || end > self.seq_len() {
            out.push(format!("doc_region {:?} outside 0..{}", self.doc_region, self.seq_len()));
        }
        if self.values.iter().any(|v| !(v.is_finite() && *v >= T::zero())) {
            out.push("negative or non-finite entry".into());
        }
        let outside = self
            .values
            .outer_iter()
            .enumerate()
            .filter(|(r, _)| *r < start || *r >= end)
            .any(|(_, row)| row.iter().any(|v| *v != T::zero()));
        if outside {
            out.push("nonzero entry outside doc_region".into());
        }
        out
    }

    /// Rows within each EDU span (shifted by `offset`) are identical.
    pub fn is_edu_constant(&self, seg: &EduSegmentation, offset: usize) -> bool {
        seg.spans.iter().all(|&(s, e)| {
            let first = self.values.row(offset + s);
            (offset + s..offset + e).all(|r| self.values.row(r) == first)
        })
    }

    pub fn cast<U: Scalar>(&self) -> GammaMatrix<U> {
        GammaMatrix {
            values: self.values.mapv(|v| U::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN))),
            doc_region: self.doc_region,
        }
    }
}

/// Broadcast an EDU-level distribution to token rows.
pub fn project_gamma<T: Scalar>(
    dist: &RstDistribution<T>,
    seg: &EduSegmentation,
    seq_len: usize,
    d_model: usize,
    doc_offset: usize,
) -> Result<GammaMatrix<T>> {
    project_gamma_with(dist, seg, seq_len, d_model, doc_offset, ChannelLayout::Tile)
}

pub fn project_gamma_with<T: Scalar>(
    dist: &RstDistribution<T>,
    seg: &EduSegmentation,
    seq_len: usize,
    d_model: usize,
    doc_offset: usize,
    layout: ChannelLayout,
) -> Result<GammaMatrix<T>> {
    if d_model == 0 {
        return Err(shape_err("d_model must be at least 1"));
    }
    if doc_offset + seg.token_count > seq_len {
        return Err(shape_err(format!(
            "document of {} tokens at offset {doc_offset} overruns seq_len {seq_len}",
            seg.token_count
        )));
    }
    if dist.values.nrows() != seg.n_edu() {
        return Err(shape_err(format!(
            "distribution has {} rows but segmentation has {} EDUs",
            dist.values.nrows(),
            seg.n_edu()
        )));
    }
    if dist.values.iter().any(|v| *v < T::zero()) {
        return Err(Error::Contract("distribution has a negative entry".into()));
    }
    let k = dist.width();
    let mut values = Array2::<T>::zeros((seq_len, d_model));
    for (edu, &(start, end)) in seg.spans.iter().enumerate() {
        let source = dist.values.row(edu);
        for t in start..end {
            let mut row = values.row_mut(doc_offset + t);
            for (c, cell) in row.iter_mut().enumerate() {
                *cell = if k == 1 {
                    source[0]
                } else {
                    source[layout.channel(c, k, d_model)]
                };
            }
        }
    }
    Ok(GammaMatrix {
        values,
        doc_region: (doc_offset, doc_offset + seg.token_count),
    })
}

pub fn zero_gamma<T: Scalar>(seq_len: usize, d_model: usize) -> GammaMatrix<T> {
    GammaMatrix {
        values: Array2::zeros((seq_len, d_model)),
        doc_region: (0, seq_len),
    }
}

// ---------------------------------------------------------------------------
// binary format

pub fn write_gamma<W: Write, T: Scalar>(mut w: W, gamma: &GammaMatrix<T>) -> std::io::Result<()> {
    let to_u32 = |v: usize| u32::try_from(v).unwrap_or(u32::MAX);
    w.write_all(GAMMA_MAGIC)?;
    w.write_all(&GAMMA_VERSION.to_le_bytes())?;
    for v in [gamma.seq_len(), gamma.d_model(), gamma.doc_region.0, gamma.doc_region.1] {
        w.write_all(&to_u32(v).to_le_bytes())?;
    }
    for v in gamma.values.iter() {
        w.write_all(&v.to_le_f32_bytes())?;
    }
    Ok(())
}

pub fn read_gamma<R: Read, T: Scalar>(mut r: R) -> Result<GammaMatrix<T>> {
    let fmt_err = |e: std::io::Error| Error::Format(format!("truncated gamma file: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(fmt_err)?;
    if &magic != GAMMA_MAGIC {
        return Err(Error::Format(format!("bad gamma magic {magic:?}")));
    }
    let mut v16 = [0u8; 2];
    r.read_exact(&mut v16).map_err(fmt_err)?;
    let version = u16::from_le_bytes(v16);
    if version != GAMMA_VERSION {
        return Err(Error::Format(format!("unsupported gamma version {version}")));
    }
    let mut header = [0usize; 4];
    for h in header.iter_mut() {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(fmt_err)?;
        *h = u32::from_le_bytes(b) as usize;
    }
    let [seq_len, d_model, doc_start, doc_end] = header;
    let count = seq_len
        .checked_mul(d_model)
        .ok_or_else(|| Error::Format("gamma dimensions overflow".into()))?;
    let mut raw = vec![0u8; count * 4];
    r.read_exact(&mut raw).map_err(fmt_err)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| T::from_f64_lossy(f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))))
        .collect();
    let values = Array2::from_shape_vec((seq_len, d_model), data).map_err(|e| Error::Format(e.to_string()))?;
    let gamma = GammaMatrix {
        values,
        doc_region: (doc_start, doc_end),
    };
    let bad = gamma.violations();
    if !bad.is_empty() {
        return Err(Error::Format(format!("invalid gamma: {}", bad.join("; "))));
    }
    Ok(gamma)
}

pub fn save_gamma<T: Scalar>(path: impl AsRef<Path>, gamma: &GammaMatrix<T>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_gamma(&mut buf, gamma).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_gamma<T: Scalar>(path: impl AsRef<Path>) -> Result<GammaMatrix<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_gamma(bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distribution::Variant;
    use ndarray::array;

    fn dist(values: Array2<f64>, variant: Variant) -> RstDistribution<f64> {
        RstDistribution {
            variant,
            n_edu: values.nrows(),
            k_relations: values.ncols(),
            values,
        }
    }

    #[test]
    fn broadcast_label_agnostic() {
        let d = dist(array![[0.7], [0.1], [0.0]], Variant::ProbWithoutLabels);
        let seg = EduSegmentation::from_lengths("d", &[3, 2, 1]);
        let g = project_gamma(&d, &seg, 7, 3, 0).unwrap();
        for r in 0..3 {
            assert!(g.values.row(r).iter().all(|&v| v == 0.7));
        }
        for r in 3..5 {
            assert!(g.values.row(r).iter().all(|&v| v == 0.1));
        }
        for r in 5..7 {
            assert!(g.values.row(r).iter().all(|&v| v == 0.0));
        }
        assert_eq!(g.doc_region, (0, 6));
        assert!(g.violations().is_empty());
        assert!(g.is_edu_constant(&seg, 0));
    }

    #[test]
    fn tiles_channels() {
        let d = dist(array![[0.7, 0.0]], Variant::ProbWithLabels);
        let seg = EduSegmentation::from_lengths("d", &[1]);
        let g4 = project_gamma(&d, &seg, 1, 4, 0).unwrap();
        assert_eq!(g4.values.row(0).to_vec(), vec![0.7, 0.0, 0.7, 0.0]);
        let g3 = project_gamma(&d, &seg, 1, 3, 0).unwrap();
        assert_eq!(g3.values.row(0).to_vec(), vec![0.7, 0.0, 0.7]);
    }

    #[test]
    fn bands_channels() {
        let d = dist(array![[0.7, 0.2]], Variant::ProbWithLabels);
        let seg = EduSegmentation::from_lengths("d", &[1]);
        let g = project_gamma_with(&d, &seg, 1, 4, 0, ChannelLayout::Band).unwrap();
        assert_eq!(g.values.row(0).to_vec(), vec![0.7, 0.7, 0.2, 0.2]);
    }

    #[test]
    fn offset_and_overrun() {
        let d = dist(array![[0.5], [0.25]], Variant::ProbWithoutLabels);
        let seg = EduSegmentation::from_lengths("d", &[2, 1]);
        let g = project_gamma(&d, &seg, 6, 2, 1).unwrap();
        assert_eq!(g.doc_region, (1, 4));
        assert_eq!(g.values.row(0).to_vec(), vec![0.0, 0.0]);
        assert_eq!(g.values.row(3).to_vec(), vec![0.25, 0.25]);
        assert!(g.values.row(4).iter().all(|&v| v == 0.0));
        assert!(matches!(project_gamma(&d, &seg, 3, 2, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_gamma_is_valid() {
        let g = zero_gamma::<f32>(4, 2);
        assert_eq!(g.values.dim(), (4, 2));
        assert!(g.values.iter().all(|&v| v == 0.0));
        assert!(g.violations().is_empty());
    }

    #[test]
    fn binary_round_trip_and_header() {
        let d = dist(array![[0.75], [0.125]], Variant::ProbWithoutLabels);
        let seg = EduSegmentation::from_lengths("d", &[2, 1]);
        let g = project_gamma(&d, &seg, 5, 3, 1).unwrap();
        let mut buf = Vec::new();
        write_gamma(&mut buf, &g).unwrap();
        assert_eq!(&buf[..4], b"RSTG");
        assert_eq!(u16::from_le_bytes([buf[4], buf[5]]), 1);
        assert_eq!(u32::from_le_bytes(buf[6..10].try_into().unwrap()), 5);
        assert_eq!(u32::from_le_bytes(buf[10..14].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(buf[14..18].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[18..22].try_into().unwrap()), 4);
        assert_eq!(buf.len(), 22 + 15 * 4);
        let back: GammaMatrix<f64> = read_gamma(buf.as_slice()).unwrap();
        assert_eq!(back, g);
        assert!(read_gamma::<_, f64>(&buf[..30]).is_err());
    }
}
