//! Attention-based MIL model: attention pooling over instances followed by a
//! linear softmax classifier.
//!
//! For a bag `X` (N×d):
//!
//! ```text
//! a = softmax_j( w_att · tanh(V_att x_j) )     attention, length N
//! z = Σ_j a_j x_j                              bag embedding, length d
//! p = softmax( W_cls z + b_cls )               class probabilities, length C
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Matrix, NodeId, Tape};

pub const DEFAULT_HIDDEN_DIM: usize = 128;

/// Scale of the classifier's initial weights relative to `1/√d`. A large
/// random head can start anti-aligned with the class signal; at small
/// learning rates the attention then fits noise before the head recovers.
pub const CLASSIFIER_INIT_GAIN: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct MilParams {
    /// `h×d` attention projection.
    pub v_att: Matrix,
    /// `h×1` attention scorer.
    pub w_att: Matrix,
    /// `C×d` classifier weights.
    pub w_cls: Matrix,
    /// `1×C` classifier bias.
    pub b_cls: Matrix,
}

/// Names of the parameter tensors in their declared (checkpoint) order.
pub const PARAM_NAMES: [&str; 4] = ["v_att", "w_att", "w_cls", "b_cls"];

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub label: usize,
    pub confidence: f64,
    pub attention: Vec<f64>,
}

impl Prediction {
    fn from_parts(probs: Vec<f64>, attention: Vec<f64>) -> Self {
        let (label, confidence) = argmax(&probs);
        Prediction {
            probs,
            label,
            confidence,
            attention,
        }
    }
}

/// Index and value of the maximum; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    (best, values[best])
}

/// Parameter leaves and outputs of one recorded forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    pub params: [NodeId; 4],
    pub attention: NodeId,
    pub probs: NodeId,
}

impl MilParams {
    /// Uniform `±gain/√fan_in` weights from a seeded stream; zero bias. The
    /// classifier head uses gain [`CLASSIFIER_INIT_GAIN`], the attention
    /// layers gain 1.
    pub fn init(d: usize, h: usize, c: usize, seed: u64) -> Result<Self> {
        if d == 0 || h == 0 || c == 0 {
            return Err(Error::Domain(format!("model shape d={d} h={h} C={c}")));
        }
        let mut rng = seed::rng(seed);
        let mut uniform = |rows: usize, cols: usize, fan_in: usize, gain: f64| {
            let bound = gain / (fan_in as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
            Matrix::new(rows, cols, data).expect("positive shape")
        };
        let v_att = uniform(h, d, d, 1.0);
        let w_att = uniform(h, 1, h, 1.0);
        let w_cls = uniform(c, d, d, CLASSIFIER_INIT_GAIN);
        Ok(MilParams {
            v_att,
            w_att,
            w_cls,
            b_cls: Matrix::zeros(1, c),
        })
    }

    pub fn dim(&self) -> usize {
        self.v_att.cols()
    }

    pub fn hidden(&self) -> usize {
        self.v_att.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.w_cls.rows()
    }

    pub fn tensors(&self) -> [&Matrix; 4] {
        [&self.v_att, &self.w_att, &self.w_cls, &self.b_cls]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 4] {
        [&mut self.v_att, &mut self.w_att, &mut self.w_cls, &mut self.b_cls]
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|m| m.data().len()).sum()
    }

    /// All parameters flattened in declared order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|m| m.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, index: usize, value: f64) {
        let mut offset = index;
        for m in self.tensors_mut() {
            let n = m.data().len();
            if offset < n {
                m.data_mut()[offset] = value;
                return;
            }
            offset -= n;
        }
        panic!("parameter index {index} out of range");
    }

    fn check_shapes(&self) -> Result<()> {
        let (h, d) = self.v_att.shape();
        let c = self.w_cls.rows();
        if self.w_att.shape() != (h, 1) || self.w_cls.cols() != d || self.b_cls.shape() != (1, c) {
            return Err(Error::Dimension("inconsistent parameter shapes".into()));
        }
        Ok(())
    }

    fn check_input(&self, features: &Matrix) -> Result<()> {
        if features.cols() != self.dim() {
            return Err(Error::Dimension(format!(
                "features have dim {}, model expects {}",
                features.cols(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Records the parameters as leaves of `tape`, in declared order.
    pub fn leaves(&self, tape: &mut Tape) -> [NodeId; 4] {
        [
            tape.leaf(self.v_att.clone()),
            tape.leaf(self.w_att.clone()),
            tape.leaf(self.w_cls.clone()),
            tape.leaf(self.b_cls.clone()),
        ]
    }

    /// Records the forward pass on `tape` with the parameters as fresh leaves.
    pub fn forward_on_tape(&self, tape: &mut Tape, features: &Matrix) -> Result<ForwardNodes> {
        let params = self.leaves(tape);
        self.forward_with(tape, params, features)
    }

    /// Records the forward pass reusing existing parameter leaves, so several
    /// bags on one tape share their parameter gradients.
    pub fn forward_with(&self, tape: &mut Tape, params: [NodeId; 4], features: &Matrix) -> Result<ForwardNodes> {
        self.check_input(features)?;
        let [v_att, w_att, w_cls, b_cls] = params;
        let x = tape.leaf(features.clone());
        let v_t = tape.transpose(v_att);
        let hidden = tape.matmul(x, v_t)?;
        let hidden = tape.tanh(hidden);
        let scores = tape.matmul(hidden, w_att)?;
        let scores = tape.transpose(scores);
        let attention = tape.softmax_rows(scores)?;
        let z = tape.weighted_sum_rows(attention, x)?;
        let w_t = tape.transpose(w_cls);
        let logits = tape.matmul(z, w_t)?;
        let logits = tape.add_bias(logits, b_cls)?;
        let probs = tape.softmax_rows(logits)?;
        Ok(ForwardNodes {
            params,
            attention,
            probs,
        })
    }

    /// Inference forward pass.
    pub fn forward(&self, features: &Matrix) -> Result<Prediction> {
        self.check_input(features)?;
        let hidden = features.matmul(&self.v_att.transpose())?.tanh();
        let scores = hidden.matmul(&self.w_att)?.transpose();
        let attention = scores.softmax_rows()?;
        let z = Matrix::weighted_sum_rows(&attention, features)?;
        let logits = z.matmul(&self.w_cls.transpose())?.add_bias(&self.b_cls)?;
        let probs = logits.softmax_rows()?;
        Ok(Prediction::from_parts(probs.into_data(), attention.into_data()))
    }

    /// Per-instance attention logits `w_att · tanh(V_att x_j)`.
    pub fn attention_logits(&self, features: &Matrix) -> Result<Vec<f64>> {
        self.check_input(features)?;
        let hidden = features.matmul(&self.v_att.transpose())?.tanh();
        Ok(hidden.matmul(&self.w_att)?.into_data())
    }

    /// Class probabilities for a bag embedding `z`.
    pub fn classify_embedding(&self, z: &[f64]) -> Result<Vec<f64>> {
        let z = Matrix::row_vector(z.to_vec())?;
        let logits = z.matmul(&self.w_cls.transpose())?.add_bias(&self.b_cls)?;
        Ok(logits.softmax_rows()?.into_data())
    }

    /// Rounds every parameter to `f32`, the checkpoint precision.
    pub fn to_storage_precision(&self) -> MilParams {
        let mut out = self.clone();
        for m in out.tensors_mut() {
            for v in m.data_mut() {
                *v = f64::from(*v as f32);
            }
        }
        out
    }
}

pub fn init_params(d: usize, h: usize, c: usize, seed: u64) -> Result<MilParams> {
    MilParams::init(d, h, c, seed)
}

/// `θ_t ← decay·θ_t + (1−decay)·θ_s` for every coordinate.
pub fn ema_update(teacher: &MilParams, student: &MilParams, decay: f64) -> Result<MilParams> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::Domain(format!("EMA decay {decay} outside [0, 1]")));
    }
    let mut out = teacher.clone();
    for (t, s) in out.tensors_mut().into_iter().zip(student.tensors()) {
        if t.shape() != s.shape() {
            return Err(Error::Dimension(format!(
                "teacher {:?} vs student {:?}",
                t.shape(),
                s.shape()
            )));
        }
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = decay * *tv + (1.0 - decay) * sv;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub dim: usize,
    pub hidden: usize,
    pub classes: usize,
    pub seed: u64,
    pub round: usize,
    pub tensors: Vec<TensorHeader>,
}

pub const CHECKPOINT_FORMAT: &str = "sws-mil-checkpoint";

/// Serializes a checkpoint: one line of JSON header terminated by `\n`,
/// followed by every tensor as little-endian `f32`, in declared order.
pub fn encode_checkpoint(params: &MilParams, seed: u64, round: usize) -> Vec<u8> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        dim: params.dim(),
        hidden: params.hidden(),
        classes: params.num_classes(),
        seed,
        round,
        tensors: PARAM_NAMES
            .iter()
            .zip(params.tensors())
            .map(|(name, m)| TensorHeader {
                name: (*name).into(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    for m in params.tensors() {
        for v in m.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, MilParams)> {
    let nl = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| Error::Format("checkpoint header is not terminated".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT || header.version != 1 {
        return Err(Error::Format(format!("unsupported checkpoint {} v{}", header.format, header.version)));
    }
    let expected = [
        (header.hidden, header.dim),
        (header.hidden, 1),
        (header.classes, header.dim),
        (1, header.classes),
    ];
    if header.tensors.len() != 4
        || header
            .tensors
            .iter()
            .zip(PARAM_NAMES.iter().zip(expected))
            .any(|(t, (name, shape))| t.name != *name || (t.rows, t.cols) != shape)
    {
        return Err(Error::Format("checkpoint tensor table does not match model layout".into()));
    }
    let payload = &bytes[nl + 1..];
    let total: usize = expected.iter().map(|(r, c)| r * c).sum();
    if payload.len() != total * 4 {
        return Err(Error::Integrity(format!(
            "checkpoint payload has {} bytes, expected {}",
            payload.len(),
            total * 4
        )));
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])));
    let mut take = |(r, c): (usize, usize)| {
        let data: Vec<f64> = values.by_ref().take(r * c).collect();
        Matrix::new(r, c, data)
    };
    let params = MilParams {
        v_att: take(expected[0])?,
        w_att: take(expected[1])?,
        w_cls: take(expected[2])?,
        b_cls: take(expected[3])?,
    };
    params.check_shapes()?;
    if params.tensors().iter().any(|m| !m.is_finite()) {
        return Err(Error::Data("checkpoint holds non-finite parameters".into()));
    }
    Ok((header, params))
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &MilParams, seed: u64, round: usize) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&encode_checkpoint(params, seed, round))
        .map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(CheckpointHeader, MilParams)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
