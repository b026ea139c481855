use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthworld::{CondToken, World};

const CHECKPOINT_MAGIC: &str = "erasure-params";
const CHECKPOINT_VERSION: u32 = 1;

/// Dimensions of a parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamShape {
    pub image_vocab_size: usize,
    pub cond_vocab_size: usize,
    pub seq_len: usize,
    pub drop_token: CondToken,
}

/// The four parameter blocks, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamBlock {
    /// `W_prev[u][v]`: previous image token `u` to logit `v`.
    Prev,
    /// `W_cond[c][v]`: condition token `c` (at any prompt position) to logit `v`.
    Cond,
    Bias,
    /// Logit contribution at the first position, where there is no previous token.
    Bos,
}

impl ParamBlock {
    pub const ALL: [ParamBlock; 4] = [
        ParamBlock::Prev,
        ParamBlock::Cond,
        ParamBlock::Bias,
        ParamBlock::Bos,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamBlock::Prev => "w_prev",
            ParamBlock::Cond => "w_cond",
            ParamBlock::Bias => "bias",
            ParamBlock::Bos => "bos_row",
        }
    }

    fn rows(self, shape: &ParamShape) -> usize {
        match self {
            ParamBlock::Prev => shape.image_vocab_size,
            ParamBlock::Cond => shape.cond_vocab_size,
            ParamBlock::Bias | ParamBlock::Bos => 1,
        }
    }
}

impl ParamShape {
    pub fn for_world(world: &World) -> ParamShape {
        ParamShape {
            image_vocab_size: world.vocab.image_vocab_size,
            cond_vocab_size: world.vocab.cond_vocab_size,
            seq_len: world.vocab.seq_len,
            drop_token: world.vocab.drop_token,
        }
    }

    pub fn len(&self) -> usize {
        (self.image_vocab_size + self.cond_vocab_size + 2) * self.image_vocab_size
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn block_range(&self, block: ParamBlock) -> Range<usize> {
        let v = self.image_vocab_size;
        let prev = v * v;
        let cond = self.cond_vocab_size * v;
        match block {
            ParamBlock::Prev => 0..prev,
            ParamBlock::Cond => prev..prev + cond,
            ParamBlock::Bias => prev + cond..prev + cond + v,
            ParamBlock::Bos => prev + cond + v..prev + cond + 2 * v,
        }
    }
}

/// Parameters of the log-linear next-token model, stored contiguously so
/// optimisers and gradient checks can treat them as one flat vector.
/// Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    shape: ParamShape,
    data: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(shape: ParamShape) -> ModelParams {
        ModelParams {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn for_world(world: &World) -> ModelParams {
        ModelParams::zeros(ParamShape::for_world(world))
    }

    pub fn from_vec(shape: ParamShape, data: Vec<f64>) -> Result<ModelParams> {
        if data.len() != shape.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a parameter set of {}",
                data.len(),
                shape.len()
            )));
        }
        Ok(ModelParams { shape, data })
    }

    pub fn shape(&self) -> &ParamShape {
        &self.shape
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn block(&self, block: ParamBlock) -> &[f64] {
        &self.data[self.shape.block_range(block)]
    }

    pub fn block_mut(&mut self, block: ParamBlock) -> &mut [f64] {
        let r = self.shape.block_range(block);
        &mut self.data[r]
    }

    pub fn prev_row(&self, token: u32) -> &[f64] {
        let v = self.shape.image_vocab_size;
        let start = token as usize * v;
        &self.block(ParamBlock::Prev)[start..start + v]
    }

    pub fn prev_row_mut(&mut self, token: u32) -> &mut [f64] {
        let v = self.shape.image_vocab_size;
        let start = token as usize * v;
        &mut self.block_mut(ParamBlock::Prev)[start..start + v]
    }

    pub fn cond_row(&self, token: CondToken) -> &[f64] {
        let v = self.shape.image_vocab_size;
        let start = token as usize * v;
        &self.block(ParamBlock::Cond)[start..start + v]
    }

    pub fn cond_row_mut(&mut self, token: CondToken) -> &mut [f64] {
        let v = self.shape.image_vocab_size;
        let start = token as usize * v;
        &mut self.block_mut(ParamBlock::Cond)[start..start + v]
    }

    pub fn bias(&self) -> &[f64] {
        self.block(ParamBlock::Bias)
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        self.block_mut(ParamBlock::Bias)
    }

    pub fn bos_row(&self) -> &[f64] {
        self.block(ParamBlock::Bos)
    }

    pub fn bos_row_mut(&mut self) -> &mut [f64] {
        self.block_mut(ParamBlock::Bos)
    }

    pub fn check_same_shape(&self, other: &ModelParams) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::DimensionMismatch(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|x| *x *= factor);
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// FNV-1a over the bit patterns; equal checksums for bit-identical sets.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for x in &self.data {
            for byte in x.to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    /// Text checkpoint: a header carrying the format version and dimensions,
    /// then each block as row-major lines of shortest round-trip decimals.
    pub fn to_checkpoint_string(&self) -> String {
        let s = &self.shape;
        let mut out = String::new();
        let _ = writeln!(out, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}");
        let _ = writeln!(out, "image_vocab_size {}", s.image_vocab_size);
        let _ = writeln!(out, "cond_vocab_size {}", s.cond_vocab_size);
        let _ = writeln!(out, "seq_len {}", s.seq_len);
        let _ = writeln!(out, "drop_token {}", s.drop_token);
        for block in ParamBlock::ALL {
            let _ = writeln!(out, "{}", block.name());
            for row in self.block(block).chunks(s.image_vocab_size) {
                let line: Vec<String> = row.iter().map(|x| format!("{x:?}")).collect();
                let _ = writeln!(out, "{}", line.join(" "));
            }
        }
        out
    }

    pub fn from_checkpoint_str(text: &str) -> Result<ModelParams> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| Error::Parse {
                line: 0,
                message: format!("unexpected end of checkpoint, expected {what}"),
            })
        };

        let (ln, magic) = next("header")?;
        let version = magic
            .strip_prefix(CHECKPOINT_MAGIC)
            .map(str::trim)
            .ok_or_else(|| Error::Parse {
                line: ln,
                message: "not a parameter checkpoint".into(),
            })?;
        if version != CHECKPOINT_VERSION.to_string() {
            return Err(Error::Parse {
                line: ln,
                message: format!("unsupported checkpoint version {version}"),
            });
        }
        let mut header = |key: &str| -> Result<usize> {
            let (ln, line) = next(key)?;
            let value = line
                .strip_prefix(key)
                .map(str::trim)
                .ok_or_else(|| Error::Parse {
                    line: ln,
                    message: format!("expected `{key}`"),
                })?;
            value.parse().map_err(|_| Error::Parse {
                line: ln,
                message: format!("bad value for {key}: {value}"),
            })
        };
        let shape = ParamShape {
            image_vocab_size: header("image_vocab_size")?,
            cond_vocab_size: header("cond_vocab_size")?,
            seq_len: header("seq_len")?,
            drop_token: header("drop_token")? as CondToken,
        };
        if shape.image_vocab_size == 0 || shape.drop_token as usize >= shape.cond_vocab_size {
            return Err(Error::DimensionMismatch(format!(
                "invalid checkpoint dimensions {shape:?}"
            )));
        }

        let mut data = Vec::with_capacity(shape.len());
        for block in ParamBlock::ALL {
            let (ln, name) = next(block.name())?;
            if name != block.name() {
                return Err(Error::Parse {
                    line: ln,
                    message: format!("expected block `{}`, found `{name}`", block.name()),
                });
            }
            for _ in 0..block.rows(&shape) {
                let (ln, row) = next("matrix row")?;
                let values: Vec<f64> = row
                    .split_whitespace()
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Parse {
                        line: ln,
                        message: format!("{}: {e}", block.name()),
                    })?;
                if values.len() != shape.image_vocab_size {
                    return Err(Error::DimensionMismatch(format!(
                        "line {ln}: {} row has {} values, expected {}",
                        block.name(),
                        values.len(),
                        shape.image_vocab_size
                    )));
                }
                if let Some(bad) = values.iter().find(|x| !x.is_finite()) {
                    return Err(Error::Parse {
                        line: ln,
                        message: format!("non-finite parameter {bad}"),
                    });
                }
                data.extend(values);
            }
        }
        if let Some((ln, extra)) = lines.find(|(_, l)| !l.is_empty()) {
            return Err(Error::Parse {
                line: ln,
                message: format!("trailing content `{extra}`"),
            });
        }
        ModelParams::from_vec(shape, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ModelParams> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ModelParams::from_checkpoint_str(&text)
    }
}
