//! Centered kernel alignment between layer representations.
//!
//! For sample matrices X (n x p) and Y (n x q) over the same n samples:
//! Gram matrices K = XXᵀ and L = YYᵀ are centered with H = I − (1/n)11ᵀ and
//! compared as ⟨K̃, L̃⟩_F / (‖K̃‖_F ‖L̃‖_F). The score is invariant to
//! orthogonal transforms of either representation and to nonzero isotropic
//! scaling; 1 means identical structure, 0 means none shared.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::calib::CalibSet;
use crate::model::{Model, ModelError};
use crate::tensor::Matrix;

/// Below this centered-Gram norm a representation is considered constant.
const DEGENERATE_NORM: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum CkaError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("sample counts differ: {a} vs {b}")]
    SampleCountMismatch { a: usize, b: usize },
    #[error("centering requires a square matrix, got {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },
    #[error("degenerate (constant) representation; centered Gram norm below 1e-10")]
    DegenerateRepresentation,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// n x d matrix of per-sample representations taken at one layer boundary.
#[derive(Debug, Clone)]
pub struct ActivationMatrix {
    pub data: Matrix,
    pub source_layer: usize,
}

impl ActivationMatrix {
    pub fn new(data: Matrix, source_layer: usize) -> Result<Self, CkaError> {
        if data.rows() < 2 {
            return Err(CkaError::TooFewSamples(data.rows()));
        }
        Ok(Self { data, source_layer })
    }

    pub fn samples(&self) -> usize {
        self.data.rows()
    }
}

/// Pairwise layer-boundary CKA heatmap. `values` is (L+1) x (L+1) with row 0
/// the post-embedding state. Boundaries whose representation was degenerate
/// are recorded in `degenerate_layers` and their entries forced to 0.
#[derive(Debug, Clone)]
pub struct CkaMatrix {
    pub values: Matrix,
    pub degenerate_layers: Vec<usize>,
}

impl CkaMatrix {
    pub fn dim(&self) -> usize {
        self.values.rows()
    }
}

/// Gram matrix K = XXᵀ. Both triangles are filled from the same f64 dot
/// product, so the result is symmetric bitwise.
pub fn gram(x: &ActivationMatrix) -> Matrix {
    let n = x.data.rows();
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut dot = 0.0f64;
            for (a, b) in x.data.row(i).iter().zip(x.data.row(j)) {
                dot += (*a as f64) * (*b as f64);
            }
            let v = dot as f32;
            k.set(i, j, v);
            k.set(j, i, v);
        }
    }
    k
}

/// Double centering K̃ = HKH, computed as K̃ᵢⱼ = Kᵢⱼ − r̄ᵢ − c̄ⱼ + m̄ with f64
/// means. Idempotent up to rounding.
pub fn center(k: &Matrix) -> Result<Matrix, CkaError> {
    if k.rows() != k.cols() {
        return Err(CkaError::NonSquare {
            rows: k.rows(),
            cols: k.cols(),
        });
    }
    let n = k.rows();
    let mut row_mean = vec![0.0f64; n];
    let mut col_mean = vec![0.0f64; n];
    let mut total = 0.0f64;
    for (i, rm) in row_mean.iter_mut().enumerate() {
        for (j, cm) in col_mean.iter_mut().enumerate() {
            let v = k.get(i, j) as f64;
            *rm += v;
            *cm += v;
            total += v;
        }
    }
    for v in row_mean.iter_mut().chain(col_mean.iter_mut()) {
        *v /= n as f64;
    }
    total /= (n * n) as f64;
    let mut out = Matrix::zeros(n, n);
    for (i, rm) in row_mean.iter().enumerate() {
        for (j, cm) in col_mean.iter().enumerate() {
            let v = k.get(i, j) as f64 - rm - cm + total;
            out.set(i, j, v as f32);
        }
    }
    Ok(out)
}

fn cka_from_centered(kc: &Matrix, lc: &Matrix) -> Result<f64, CkaError> {
    let nk = kc.frobenius_norm();
    let nl = lc.frobenius_norm();
    if nk < DEGENERATE_NORM || nl < DEGENERATE_NORM {
        return Err(CkaError::DegenerateRepresentation);
    }
    let inner = kc.frobenius_inner(lc).expect("same shape by construction");
    Ok((inner / (nk * nl)).clamp(0.0, 1.0))
}

/// CKA between two activation matrices over the same samples. The feature
/// dimensions may differ.
pub fn cka(x: &ActivationMatrix, y: &ActivationMatrix) -> Result<f64, CkaError> {
    if x.samples() != y.samples() {
        return Err(CkaError::SampleCountMismatch {
            a: x.samples(),
            b: y.samples(),
        });
    }
    let kc = center(&gram(x))?;
    let lc = center(&gram(y))?;
    cka_from_centered(&kc, &lc)
}

/// Deterministic uniform-stride subsample of `0..n` down to at most `cap` indices.
fn stride_indices(n: usize, cap: usize) -> Vec<usize> {
    assert!(cap > 0, "token cap must be positive");
    if n <= cap {
        return (0..n).collect();
    }
    let stride = n.div_ceil(cap);
    (0..n).step_by(stride).collect()
}

/// Full pairwise heatmap over the residual-stream boundaries x₀..x_L.
///
/// Rows are individual token positions pooled over all calibration sequences
/// in (sequence, position) order; the same uniform-stride subset of at most
/// `token_cap` rows is used at every boundary. Degenerate boundaries score 0
/// against everything and are flagged rather than silently dropped.
pub fn layer_cka_matrix(
    model: &Model,
    calib: &CalibSet,
    token_cap: usize,
) -> Result<CkaMatrix, CkaError> {
    let boundaries = model.layer_count() + 1;
    let traces: Vec<_> = calib
        .sequences()
        .par_iter()
        .map(|seq| model.forward(seq))
        .collect::<Result<_, _>>()?;

    let total: usize = calib.sequences().iter().map(|s| s.len()).sum();
    if total < 2 {
        return Err(CkaError::TooFewSamples(total));
    }
    let keep = stride_indices(total, token_cap);

    let centered: Vec<Option<Matrix>> = (0..boundaries)
        .into_par_iter()
        .map(|b| {
            let mut rows = Vec::with_capacity(keep.len());
            let mut flat = 0usize;
            let mut keep_it = keep.iter().peekable();
            for trace in &traces {
                let m = &trace.per_layer[b];
                for r in 0..m.rows() {
                    if keep_it.peek() == Some(&&flat) {
                        rows.push(m.row(r).to_vec());
                        keep_it.next();
                    }
                    flat += 1;
                }
            }
            let act = ActivationMatrix::new(Matrix::from_rows(&rows).expect("uniform width"), b)
                .expect("keep set has >= 2 rows");
            let kc = center(&gram(&act)).expect("gram is square");
            if kc.frobenius_norm() < DEGENERATE_NORM {
                None
            } else {
                Some(kc)
            }
        })
        .collect();

    let degenerate_layers: Vec<usize> = centered
        .iter()
        .enumerate()
        .filter_map(|(b, c)| c.is_none().then_some(b))
        .collect();

    let cells: Vec<(usize, usize, f64)> = (0..boundaries)
        .flat_map(|i| (i..boundaries).map(move |j| (i, j)))
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(i, j)| {
            let v = match (&centered[i], &centered[j]) {
                (Some(a), Some(b)) => cka_from_centered(a, b).expect("norms checked"),
                _ => 0.0,
            };
            (i, j, v)
        })
        .collect();

    let mut values = Matrix::zeros(boundaries, boundaries);
    for (i, j, v) in cells {
        values.set(i, j, v as f32);
        values.set(j, i, v as f32);
    }
    Ok(CkaMatrix {
        values,
        degenerate_layers,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapFormat {
    Csv,
    Pgm,
}

/// Writes the heatmap as CSV (header row of layer ids, 6 decimal places) or
/// binary PGM ("P5", maxval 255, pixel = round(cka * 255), row 0 = layer 0).
pub fn export_heatmap(
    m: &CkaMatrix,
    path: impl AsRef<Path>,
    format: HeatmapFormat,
) -> Result<(), CkaError> {
    let mut w = BufWriter::new(File::create(path)?);
    match format {
        HeatmapFormat::Csv => write_heatmap_csv(m, &mut w)?,
        HeatmapFormat::Pgm => write_heatmap_pgm(m, &mut w)?,
    }
    w.flush()?;
    Ok(())
}

pub fn write_heatmap_csv(m: &CkaMatrix, w: &mut impl Write) -> std::io::Result<()> {
    let dim = m.dim();
    write!(w, "layer")?;
    for j in 0..dim {
        write!(w, ",{j}")?;
    }
    writeln!(w)?;
    for i in 0..dim {
        write!(w, "{i}")?;
        for j in 0..dim {
            write!(w, ",{:.6}", m.values.get(i, j))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn write_heatmap_pgm(m: &CkaMatrix, w: &mut impl Write) -> std::io::Result<()> {
    let dim = m.dim();
    write!(w, "P5\n{dim} {dim}\n255\n")?;
    let mut pixels = Vec::with_capacity(dim * dim);
    for i in 0..dim {
        for j in 0..dim {
            let v = (m.values.get(i, j) as f64 * 255.0)
                .round()
                .clamp(0.0, 255.0);
            pixels.push(v as u8);
        }
    }
    w.write_all(&pixels)
}
