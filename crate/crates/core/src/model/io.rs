//! Bit-exact model file format.
//!
//! Layout: magic `SWM1` (4 bytes) | format version, u32 LE | header length,
//! u32 LE | header (UTF-8 JSON: config, ordered tensor manifest of
//! (name, rows, cols), original_index list) | payload: tensors in manifest
//! order as raw little-endian f32, row-major, no padding.
//!
//! The per-layer residual_scale scalar travels as a 1x1 tensor in the
//! payload so the whole parameter bundle round-trips bitwise.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::Matrix;

use super::{LayerParams, Model, ModelConfig, ModelError};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: [u8; 4] = *b"SWM1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    original_indices: Vec<usize>,
}

fn layer_tensor_names(i: usize) -> [String; 10] {
    [
        format!("layers.{i}.attn_norm_gamma"),
        format!("layers.{i}.wq"),
        format!("layers.{i}.wk"),
        format!("layers.{i}.wv"),
        format!("layers.{i}.wo"),
        format!("layers.{i}.ffn_norm_gamma"),
        format!("layers.{i}.w_gate"),
        format!("layers.{i}.w_up"),
        format!("layers.{i}.w_down"),
        format!("layers.{i}.residual_scale"),
    ]
}

/// Checks every manifest entry against the shapes the config dictates
/// before any payload byte is read, so a tampered header surfaces as a
/// shape inconsistency rather than a downstream truncation.
fn check_manifest_shapes(entries: &[TensorEntry], cfg: &ModelConfig) -> Result<(), ModelError> {
    let d = cfg.d_model;
    let hd = cfg.d_model / cfg.n_heads.max(1);
    let err = |e: &TensorEntry| {
        Err(ModelError::ShapeInconsistency {
            name: e.name.clone(),
            rows: e.rows,
            cols: e.cols,
        })
    };
    let mut qkv_cols = None;
    let mut ffn_cols = None;
    for e in entries {
        let leaf = e.name.rsplit('.').next().unwrap_or(&e.name);
        let ok = match leaf {
            "tok_embed" => e.rows == cfg.vocab_size && e.cols == d,
            "pos_embed" => e.rows == cfg.max_seq && e.cols == d,
            "attn_norm_gamma" | "ffn_norm_gamma" | "final_norm_gamma" => e.rows == 1 && e.cols == d,
            "residual_scale" => e.rows == 1 && e.cols == 1,
            "lm_head" => e.rows == d && e.cols == cfg.vocab_size,
            "wq" => {
                qkv_cols = Some(e.cols);
                e.rows == d && e.cols > 0 && hd > 0 && e.cols.is_multiple_of(hd)
            }
            "wk" | "wv" => e.rows == d && Some(e.cols) == qkv_cols,
            "wo" => Some(e.rows) == qkv_cols && e.cols == d,
            "w_gate" => {
                ffn_cols = Some(e.cols);
                e.rows == d && e.cols > 0
            }
            "w_up" => e.rows == d && Some(e.cols) == ffn_cols,
            "w_down" => Some(e.rows) == ffn_cols && e.cols == d,
            _ => false,
        };
        if !ok {
            return err(e);
        }
    }
    Ok(())
}

fn write_f32s(w: &mut impl Write, data: &[f32]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_f32s(r: &mut impl Read, count: usize, name: &str) -> Result<Vec<f32>, ModelError> {
    let mut buf = vec![0u8; count * 4];
    r.read_exact(&mut buf)
        .map_err(|_| ModelError::TruncatedTensor {
            name: name.to_string(),
        })?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

impl Model {
    /// Ordered (name, rows, cols, data) view of every tensor, matching the
    /// on-disk manifest order.
    fn tensor_views(&self) -> Vec<(String, usize, usize, Vec<f32>)> {
        let mut out = Vec::new();
        let mat =
            |name: &str, m: &Matrix| (name.to_string(), m.rows(), m.cols(), m.data().to_vec());
        let row = |name: String, v: &[f32]| (name, 1usize, v.len(), v.to_vec());
        out.push(mat("tok_embed", &self.tok_embed));
        out.push(mat("pos_embed", &self.pos_embed));
        for (i, layer) in self.layers.iter().enumerate() {
            let names = layer_tensor_names(i);
            out.push(row(names[0].clone(), &layer.attn_norm_gamma));
            out.push(mat(&names[1], &layer.wq));
            out.push(mat(&names[2], &layer.wk));
            out.push(mat(&names[3], &layer.wv));
            out.push(mat(&names[4], &layer.wo));
            out.push(row(names[5].clone(), &layer.ffn_norm_gamma));
            out.push(mat(&names[6], &layer.w_gate));
            out.push(mat(&names[7], &layer.w_up));
            out.push(mat(&names[8], &layer.w_down));
            out.push((names[9].clone(), 1, 1, vec![layer.residual_scale]));
        }
        out.push(row("final_norm_gamma".to_string(), &self.final_norm_gamma));
        out.push(mat("lm_head", &self.lm_head));
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let views = self.tensor_views();
        let header = Header {
            config: self.config.clone(),
            tensors: views
                .iter()
                .map(|(name, rows, cols, _)| TensorEntry {
                    name: name.clone(),
                    rows: *rows,
                    cols: *cols,
                })
                .collect(),
            original_indices: self.layers.iter().map(|l| l.original_index).collect(),
        };
        let header_json =
            serde_json::to_vec(&header).map_err(|e| ModelError::InvalidHeader(e.to_string()))?;

        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(header_json.len() as u32).to_le_bytes())?;
        w.write_all(&header_json)?;
        for (_, _, _, data) in &views {
            write_f32s(&mut w, data)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Model, ModelError> {
        let mut r = BufReader::new(File::open(path)?);

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| ModelError::InvalidHeader("file shorter than magic".into()))?;
        if magic != MAGIC {
            return Err(ModelError::BadMagic(magic));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)
            .map_err(|_| ModelError::InvalidHeader("missing version field".into()))?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(ModelError::UnsupportedVersion(version));
        }
        r.read_exact(&mut word)
            .map_err(|_| ModelError::InvalidHeader("missing header length".into()))?;
        let header_len = u32::from_le_bytes(word) as usize;
        let mut header_bytes = vec![0u8; header_len];
        r.read_exact(&mut header_bytes)
            .map_err(|_| ModelError::InvalidHeader("header shorter than declared length".into()))?;
        let header: Header = serde_json::from_slice(&header_bytes)
            .map_err(|e| ModelError::InvalidHeader(e.to_string()))?;

        let cfg = header.config;
        let n_layers = cfg.n_layers;
        let mut expected_names: Vec<String> = vec!["tok_embed".into(), "pos_embed".into()];
        for i in 0..n_layers {
            expected_names.extend(layer_tensor_names(i));
        }
        expected_names.push("final_norm_gamma".into());
        expected_names.push("lm_head".into());

        if header.tensors.len() != expected_names.len() {
            return Err(ModelError::InvalidHeader(format!(
                "manifest lists {} tensors, config implies {}",
                header.tensors.len(),
                expected_names.len()
            )));
        }
        for (entry, want) in header.tensors.iter().zip(&expected_names) {
            if &entry.name != want {
                return Err(ModelError::InvalidHeader(format!(
                    "manifest entry {} where {} was expected",
                    entry.name, want
                )));
            }
        }
        if header.original_indices.len() != n_layers {
            return Err(ModelError::InvalidHeader(format!(
                "{} original_index values for {} layers",
                header.original_indices.len(),
                n_layers
            )));
        }
        check_manifest_shapes(&header.tensors, &cfg)?;

        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let data = read_f32s(&mut r, entry.rows * entry.cols, &entry.name)?;
            tensors
                .push(Matrix::new(entry.rows, entry.cols, data).expect("length matches manifest"));
        }
        let mut trailing = Vec::new();
        r.read_to_end(&mut trailing)?;
        if !trailing.is_empty() {
            return Err(ModelError::TrailingData(trailing.len()));
        }

        let mut it = tensors.into_iter().zip(header.tensors.iter());
        let mut next = |_: &str| it.next().expect("count checked above");

        let shape_err = |entry: &TensorEntry| ModelError::ShapeInconsistency {
            name: entry.name.clone(),
            rows: entry.rows,
            cols: entry.cols,
        };

        let (tok_embed, e) = next("tok_embed");
        if tok_embed.rows() != cfg.vocab_size || tok_embed.cols() != cfg.d_model {
            return Err(shape_err(e));
        }
        let (pos_embed, e) = next("pos_embed");
        if pos_embed.rows() != cfg.max_seq || pos_embed.cols() != cfg.d_model {
            return Err(shape_err(e));
        }

        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let (attn_norm, e) = next("attn_norm_gamma");
            if attn_norm.rows() != 1 || attn_norm.cols() != cfg.d_model {
                return Err(shape_err(e));
            }
            let (wq, _) = next("wq");
            let (wk, _) = next("wk");
            let (wv, _) = next("wv");
            let (wo, _) = next("wo");
            let (ffn_norm, e) = next("ffn_norm_gamma");
            if ffn_norm.rows() != 1 || ffn_norm.cols() != cfg.d_model {
                return Err(shape_err(e));
            }
            let (w_gate, _) = next("w_gate");
            let (w_up, _) = next("w_up");
            let (w_down, _) = next("w_down");
            let (scale, e) = next("residual_scale");
            if scale.rows() != 1 || scale.cols() != 1 {
                return Err(shape_err(e));
            }
            layers.push(LayerParams {
                wq,
                wk,
                wv,
                wo,
                w_gate,
                w_up,
                w_down,
                attn_norm_gamma: attn_norm.data().to_vec(),
                ffn_norm_gamma: ffn_norm.data().to_vec(),
                original_index: header.original_indices[i],
                residual_scale: scale.data()[0],
            });
        }

        let (final_norm, e) = next("final_norm_gamma");
        if final_norm.rows() != 1 || final_norm.cols() != cfg.d_model {
            return Err(shape_err(e));
        }
        let (lm_head, e) = next("lm_head");
        if lm_head.rows() != cfg.d_model || lm_head.cols() != cfg.vocab_size {
            return Err(shape_err(e));
        }

        let model = Model {
            config: cfg,
            tok_embed,
            pos_embed,
            layers,
            final_norm_gamma: final_norm.data().to_vec(),
            lm_head,
        };
        // Per-layer shape consistency (head partition, FFN coupling) reuses
        // the in-memory validator; failures surface as ShapeInconsistency.
        model.validate().map_err(|e| match e {
            ModelError::InvalidConfig(msg) => ModelError::InvalidHeader(msg),
            other => other,
        })?;
        Ok(model)
    }
}
