//! The policy architectures: a two-layer CNN backbone feeding either an MLP
//! (512, 256) or a 256-unit LSTM head, with an optional scalar value head.
//!
//! Forward passes can record a trace; `backward` consumes one trace and
//! accumulates exact parameter gradients.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::{
    conv2d_backward, conv2d_forward, dense_backward, dense_forward, layer_norm_backward,
    layer_norm_forward, lstm_step_backward, lstm_step_forward, relu_backward, relu_forward,
    LstmCache, LstmParams,
};
use super::tensor::{NnError, Tensor};

pub const CONV1_FILTERS: usize = 64;
pub const CONV1_KERNEL: usize = 5;
pub const CONV2_FILTERS: usize = 128;
pub const CONV2_KERNEL: usize = 3;
pub const MLP_UNITS: [usize; 2] = [512, 256];
pub const LSTM_UNITS: usize = 256;
/// Width of the feature vector feeding the output (and value) layer.
pub const HEAD_FEATURES: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Mlp,
    Lstm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub in_channels: usize,
    pub n_fg: usize,
    pub n_fs: usize,
    pub head: HeadKind,
    pub n_outputs: usize,
    pub with_value_head: bool,
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.n_outputs < 2 {
            return Err(NnError::Contract("policy needs at least 2 outputs".into()));
        }
        if self.in_channels == 0 || self.n_fg == 0 || self.n_fs == 0 {
            return Err(NnError::Contract("policy dims must be positive".into()));
        }
        Ok(())
    }

    fn plane(&self) -> usize {
        self.n_fg * self.n_fs
    }

    fn conv_flat(&self) -> usize {
        CONV2_FILTERS * self.plane()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadParams {
    Mlp {
        w1: Tensor,
        b1: Tensor,
        ln3_gain: Tensor,
        ln3_off: Tensor,
        w2: Tensor,
        b2: Tensor,
        ln4_gain: Tensor,
        ln4_off: Tensor,
    },
    Lstm(LstmParams),
}

/// All learnable tensors, in checkpoint declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub conv1_k: Tensor,
    pub conv1_b: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_off: Tensor,
    pub conv2_k: Tensor,
    pub conv2_b: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_off: Tensor,
    pub head: HeadParams,
    pub out_w: Tensor,
    pub out_b: Tensor,
    pub value_w: Option<Tensor>,
    pub value_b: Option<Tensor>,
}

fn uniform(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.gen_range(-scale..scale))
        .collect();
    Tensor::from_vec(shape, data).expect("sized by shape")
}

impl NetParams {
    /// Fan-in scaled uniform init; the output and value layers start small so
    /// the initial policy is near-uniform.
    pub fn init(cfg: &PolicyConfig, seed: u64) -> NetParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plane = cfg.plane();
        let f1 = CONV1_FILTERS * plane;
        let f2 = cfg.conv_flat();
        let s1 = 1.0 / ((cfg.in_channels * CONV1_KERNEL * CONV1_KERNEL) as f64).sqrt();
        let s2 = 1.0 / ((CONV1_FILTERS * CONV2_KERNEL * CONV2_KERNEL) as f64).sqrt();
        let head = match cfg.head {
            HeadKind::Mlp => {
                let sw1 = 1.0 / (f2 as f64).sqrt();
                let sw2 = 1.0 / (MLP_UNITS[0] as f64).sqrt();
                HeadParams::Mlp {
                    w1: uniform(&[MLP_UNITS[0], f2], sw1, &mut rng),
                    b1: Tensor::zeros(&[MLP_UNITS[0]]),
                    ln3_gain: Tensor::full(&[MLP_UNITS[0]], 1.0),
                    ln3_off: Tensor::zeros(&[MLP_UNITS[0]]),
                    w2: uniform(&[MLP_UNITS[1], MLP_UNITS[0]], sw2, &mut rng),
                    b2: Tensor::zeros(&[MLP_UNITS[1]]),
                    ln4_gain: Tensor::full(&[MLP_UNITS[1]], 1.0),
                    ln4_off: Tensor::zeros(&[MLP_UNITS[1]]),
                }
            }
            HeadKind::Lstm => {
                let si = 1.0 / (f2 as f64).sqrt();
                let sh = 1.0 / (LSTM_UNITS as f64).sqrt();
                HeadParams::Lstm(LstmParams {
                    w_ih: uniform(&[4 * LSTM_UNITS, f2], si, &mut rng),
                    w_hh: uniform(&[4 * LSTM_UNITS, LSTM_UNITS], sh, &mut rng),
                    b: Tensor::zeros(&[4 * LSTM_UNITS]),
                })
            }
        };
        let s_out = 1e-3 / (HEAD_FEATURES as f64).sqrt();
        NetParams {
            conv1_k: uniform(&[CONV1_FILTERS, cfg.in_channels, CONV1_KERNEL, CONV1_KERNEL], s1, &mut rng),
            conv1_b: Tensor::zeros(&[CONV1_FILTERS]),
            ln1_gain: Tensor::full(&[f1], 1.0),
            ln1_off: Tensor::zeros(&[f1]),
            conv2_k: uniform(&[CONV2_FILTERS, CONV1_FILTERS, CONV2_KERNEL, CONV2_KERNEL], s2, &mut rng),
            conv2_b: Tensor::zeros(&[CONV2_FILTERS]),
            ln2_gain: Tensor::full(&[f2], 1.0),
            ln2_off: Tensor::zeros(&[f2]),
            head,
            out_w: uniform(&[cfg.n_outputs, HEAD_FEATURES], s_out, &mut rng),
            out_b: Tensor::zeros(&[cfg.n_outputs]),
            value_w: cfg
                .with_value_head
                .then(|| uniform(&[1, HEAD_FEATURES], s_out, &mut rng)),
            value_b: cfg.with_value_head.then(|| Tensor::zeros(&[1])),
        }
    }

    /// Zero tensors in the same layout, for gradient accumulation.
    pub fn zeros_like(&self) -> NetParams {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        z
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![
            &self.conv1_k,
            &self.conv1_b,
            &self.ln1_gain,
            &self.ln1_off,
            &self.conv2_k,
            &self.conv2_b,
            &self.ln2_gain,
            &self.ln2_off,
        ];
        match &self.head {
            HeadParams::Mlp {
                w1,
                b1,
                ln3_gain,
                ln3_off,
                w2,
                b2,
                ln4_gain,
                ln4_off,
            } => out.extend([w1, b1, ln3_gain, ln3_off, w2, b2, ln4_gain, ln4_off]),
            HeadParams::Lstm(p) => out.extend([&p.w_ih, &p.w_hh, &p.b]),
        }
        out.push(&self.out_w);
        out.push(&self.out_b);
        if let Some(w) = &self.value_w {
            out.push(w);
        }
        if let Some(b) = &self.value_b {
            out.push(b);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.conv1_k,
            &mut self.conv1_b,
            &mut self.ln1_gain,
            &mut self.ln1_off,
            &mut self.conv2_k,
            &mut self.conv2_b,
            &mut self.ln2_gain,
            &mut self.ln2_off,
        ];
        match &mut self.head {
            HeadParams::Mlp {
                w1,
                b1,
                ln3_gain,
                ln3_off,
                w2,
                b2,
                ln4_gain,
                ln4_off,
            } => out.extend([w1, b1, ln3_gain, ln3_off, w2, b2, ln4_gain, ln4_off]),
            HeadParams::Lstm(p) => out.extend([&mut p.w_ih, &mut p.w_hh, &mut p.b]),
        }
        out.push(&mut self.out_w);
        out.push(&mut self.out_b);
        if let Some(w) = &mut self.value_w {
            out.push(w);
        }
        if let Some(b) = &mut self.value_b {
            out.push(b);
        }
        out
    }

    pub fn add_assign(&mut self, other: &NetParams) {
        let theirs = other.tensors();
        for (mine, t) in self.tensors_mut().into_iter().zip(theirs) {
            mine.add_assign(t);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

/// Recurrent hidden state `(h, c)` for the LSTM head.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmState {
    pub fn zeros(batch: usize) -> LstmState {
        LstmState {
            h: Tensor::zeros(&[batch, LSTM_UNITS]),
            c: Tensor::zeros(&[batch, LSTM_UNITS]),
        }
    }

    /// Zeroes the state rows flagged true (episode starts in a batch).
    pub fn reset_rows(&mut self, rows: &[bool]) {
        for (i, &reset) in rows.iter().enumerate() {
            if reset {
                self.h.data_mut()[i * LSTM_UNITS..(i + 1) * LSTM_UNITS].fill(0.0);
                self.c.data_mut()[i * LSTM_UNITS..(i + 1) * LSTM_UNITS].fill(0.0);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct PolicyOutput {
    /// Q-values (DQN) or action logits (PPO), `(N, n_outputs)`.
    pub outputs: Tensor,
    /// Scalar state value per sample, `(N, 1)`, when configured.
    pub value: Option<Tensor>,
    /// Advanced hidden state, LSTM head only.
    pub hidden: Option<LstmState>,
}

#[derive(Debug)]
enum HeadTrace {
    Mlp {
        d1: Tensor,
        n3: Tensor,
        r3: Tensor,
        d2: Tensor,
        n4: Tensor,
    },
    Lstm(Box<LstmCache>),
}

/// Intermediate activations of one forward pass.
#[derive(Debug)]
pub struct ForwardTrace {
    x: Tensor,
    a1: Tensor,
    n1: Tensor,
    r1: Tensor,
    a2: Tensor,
    n2: Tensor,
    r2: Tensor,
    head: HeadTrace,
    feat: Tensor,
}

#[derive(Debug, Clone)]
pub struct PolicyNet {
    pub cfg: PolicyConfig,
    pub params: NetParams,
}

impl PolicyNet {
    pub fn new(cfg: PolicyConfig, seed: u64) -> Result<PolicyNet, NnError> {
        cfg.validate()?;
        let params = NetParams::init(&cfg, seed);
        Ok(PolicyNet { cfg, params })
    }

    /// Inference-only forward pass.
    pub fn forward(
        &self,
        x: &Tensor,
        hidden: Option<&LstmState>,
    ) -> Result<PolicyOutput, NnError> {
        self.forward_traced(x, hidden).map(|(out, _)| out)
    }

    /// Forward pass that also returns the trace needed by [`Self::backward`].
    pub fn forward_traced(
        &self,
        x: &Tensor,
        hidden: Option<&LstmState>,
    ) -> Result<(PolicyOutput, ForwardTrace), NnError> {
        let p = &self.params;
        let n = *x
            .shape()
            .first()
            .ok_or_else(|| NnError::Shape("input must be batched".into()))?;
        if x.shape() != [n, self.cfg.in_channels, self.cfg.n_fg, self.cfg.n_fs] {
            return Err(NnError::Shape(format!(
                "state shape {:?} does not match policy config (C={}, {}x{})",
                x.shape(),
                self.cfg.in_channels,
                self.cfg.n_fg,
                self.cfg.n_fs
            )));
        }
        let a1 = conv2d_forward(x, &p.conv1_k, &p.conv1_b)?;
        let n1 = layer_norm_forward(&a1, &p.ln1_gain, &p.ln1_off)?;
        let r1 = relu_forward(&n1);
        let a2 = conv2d_forward(&r1, &p.conv2_k, &p.conv2_b)?;
        let n2 = layer_norm_forward(&a2, &p.ln2_gain, &p.ln2_off)?;
        let r2 = relu_forward(&n2).into_reshaped(&[n, self.cfg.conv_flat()])?;

        let (head_trace, feat, hidden_out) = match (&p.head, self.cfg.head) {
            (
                HeadParams::Mlp {
                    w1,
                    b1,
                    ln3_gain,
                    ln3_off,
                    w2,
                    b2,
                    ln4_gain,
                    ln4_off,
                },
                HeadKind::Mlp,
            ) => {
                if hidden.is_some() {
                    return Err(NnError::Contract("MLP head takes no hidden state".into()));
                }
                let d1 = dense_forward(&r2, w1, b1)?;
                let n3 = layer_norm_forward(&d1, ln3_gain, ln3_off)?;
                let r3 = relu_forward(&n3);
                let d2 = dense_forward(&r3, w2, b2)?;
                let n4 = layer_norm_forward(&d2, ln4_gain, ln4_off)?;
                let feat = relu_forward(&n4);
                (HeadTrace::Mlp { d1, n3, r3, d2, n4 }, feat, None)
            }
            (HeadParams::Lstm(lstm), HeadKind::Lstm) => {
                let hidden = hidden.ok_or_else(|| {
                    NnError::Contract("LSTM head requires a hidden state".into())
                })?;
                let (h2, c2, cache) = lstm_step_forward(&r2, &hidden.h, &hidden.c, lstm)?;
                (
                    HeadTrace::Lstm(Box::new(cache)),
                    h2.clone(),
                    Some(LstmState { h: h2, c: c2 }),
                )
            }
            _ => return Err(NnError::Contract("head params do not match config".into())),
        };

        let outputs = dense_forward(&feat, &p.out_w, &p.out_b)?;
        let value = match (&p.value_w, &p.value_b) {
            (Some(w), Some(b)) => Some(dense_forward(&feat, w, b)?),
            _ => None,
        };
        let trace = ForwardTrace {
            x: x.clone(),
            a1,
            n1,
            r1,
            a2,
            n2,
            r2,
            head: head_trace,
            feat,
        };
        Ok((
            PolicyOutput {
                outputs,
                value,
                hidden: hidden_out,
            },
            trace,
        ))
    }

    /// Backpropagates `d_out` (and optionally `d_value`, plus incoming
    /// hidden-state gradients for BPTT) through one trace, accumulating into
    /// `grads`. Returns the gradient w.r.t. the previous hidden state when
    /// the head is recurrent.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        d_out: &Tensor,
        d_value: Option<&Tensor>,
        d_hidden: Option<&LstmState>,
        grads: &mut NetParams,
    ) -> Result<Option<LstmState>, NnError> {
        let p = &self.params;
        let n = trace.x.shape()[0];

        // Output (and value) layer.
        let (d_feat_out, dw, db) = dense_backward(&trace.feat, &p.out_w, d_out, true)?;
        grads.out_w.add_assign(&dw);
        grads.out_b.add_assign(&db);
        let mut d_feat = d_feat_out.expect("need_dx");
        if let Some(dv) = d_value {
            let (vw, gw, gb) = match (&p.value_w, &mut grads.value_w, &mut grads.value_b) {
                (Some(w), Some(gw), Some(gb)) => (w, gw, gb),
                _ => {
                    return Err(NnError::Contract(
                        "value gradient supplied but no value head configured".into(),
                    ))
                }
            };
            let (dxv, dwv, dbv) = dense_backward(&trace.feat, vw, dv, true)?;
            gw.add_assign(&dwv);
            gb.add_assign(&dbv);
            d_feat.add_assign(&dxv.expect("need_dx"));
        }

        // Head.
        let (d_r2, d_hidden_prev) = match (&p.head, &trace.head) {
            (
                HeadParams::Mlp {
                    w1,
                    w2,
                    ln3_gain,
                    ln4_gain,
                    ..
                },
                HeadTrace::Mlp { d1, n3, r3, d2, n4 },
            ) => {
                if d_hidden.is_some() {
                    return Err(NnError::Contract("MLP head has no hidden gradient".into()));
                }
                let d_n4 = relu_backward(n4, &d_feat);
                let (d_d2, dg4, do4) = layer_norm_backward(d2, ln4_gain, &d_n4)?;
                let (d_r3, dw2, db2) = dense_backward(r3, w2, &d_d2, true)?;
                let d_n3 = relu_backward(n3, &d_r3.expect("need_dx"));
                let (d_d1, dg3, do3) = layer_norm_backward(d1, ln3_gain, &d_n3)?;
                let (d_r2, dw1, db1) = dense_backward(&trace.r2, w1, &d_d1, true)?;
                match &mut grads.head {
                    HeadParams::Mlp {
                        w1: gw1,
                        b1: gb1,
                        ln3_gain: gg3,
                        ln3_off: go3,
                        w2: gw2,
                        b2: gb2,
                        ln4_gain: gg4,
                        ln4_off: go4,
                    } => {
                        gw1.add_assign(&dw1);
                        gb1.add_assign(&db1);
                        gg3.add_assign(&dg3);
                        go3.add_assign(&do3);
                        gw2.add_assign(&dw2);
                        gb2.add_assign(&db2);
                        gg4.add_assign(&dg4);
                        go4.add_assign(&do4);
                    }
                    _ => return Err(NnError::Contract("grads head kind mismatch".into())),
                }
                (d_r2.expect("need_dx"), None)
            }
            (HeadParams::Lstm(lstm), HeadTrace::Lstm(cache)) => {
                let mut dh = d_feat;
                let dc = match d_hidden {
                    Some(g) => {
                        dh.add_assign(&g.h);
                        g.c.clone()
                    }
                    None => Tensor::zeros(&[n, LSTM_UNITS]),
                };
                let glstm = match &mut grads.head {
                    HeadParams::Lstm(g) => g,
                    _ => return Err(NnError::Contract("grads head kind mismatch".into())),
                };
                let (d_x, dh_in, dc_in) = lstm_step_backward(lstm, cache, &dh, &dc, glstm)?;
                (d_x, Some(LstmState { h: dh_in, c: dc_in }))
            }
            _ => return Err(NnError::Contract("trace does not match head".into())),
        };

        // Conv stack.
        let d_r2_4d = d_r2.into_reshaped(&[n, CONV2_FILTERS, self.cfg.n_fg, self.cfg.n_fs])?;
        let n2_4d = &trace.n2;
        let d_n2 = relu_backward(n2_4d, &d_r2_4d);
        let (d_a2, dg2, do2) = layer_norm_backward(&trace.a2, &p.ln2_gain, &d_n2)?;
        grads.ln2_gain.add_assign(&dg2);
        grads.ln2_off.add_assign(&do2);
        let (d_r1, dk2, db2) = conv2d_backward(&trace.r1, &p.conv2_k, &d_a2, true)?;
        grads.conv2_k.add_assign(&dk2);
        grads.conv2_b.add_assign(&db2);
        let d_n1 = relu_backward(&trace.n1, &d_r1.expect("need_dx"));
        let (d_a1, dg1, do1) = layer_norm_backward(&trace.a1, &p.ln1_gain, &d_n1)?;
        grads.ln1_gain.add_assign(&dg1);
        grads.ln1_off.add_assign(&do1);
        let (_, dk1, db1) = conv2d_backward(&trace.x, &p.conv1_k, &d_a1, false)?;
        grads.conv1_k.add_assign(&dk1);
        grads.conv1_b.add_assign(&db1);

        Ok(d_hidden_prev)
    }
}

// ---------------------------------------------------------------------------
// Checkpoints: versioned header + flat little-endian f32 arrays
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"FPDCKPT\x01";
const CHECKPOINT_FORMAT: &str = "fpd-policy-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    policy: PolicyConfig,
    shapes: Vec<Vec<usize>>,
    /// Free-form caller context (e.g. the environment representation).
    #[serde(default)]
    tags: BTreeMap<String, String>,
}

pub fn save_checkpoint(
    path: &Path,
    net: &PolicyNet,
    tags: &BTreeMap<String, String>,
) -> Result<(), NnError> {
    let tensors = net.params.tensors();
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        policy: net.cfg.clone(),
        shapes: tensors.iter().map(|t| t.shape().to_vec()).collect(),
        tags: tags.clone(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    let mut file = fs::File::create(path)?;
    file.write_all(CHECKPOINT_MAGIC)?;
    file.write_all(&(header_json.len() as u32).to_le_bytes())?;
    file.write_all(&header_json)?;
    let mut buf = Vec::new();
    for t in tensors {
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    file.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(PolicyNet, BTreeMap<String, String>), NnError> {
    let mut file = fs::File::open(path)?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(NnError::Checkpoint("not a policy checkpoint".into()));
    }
    let mut len = [0u8; 4];
    file.read_exact(&mut len)?;
    let mut header_json = vec![0u8; u32::from_le_bytes(len) as usize];
    file.read_exact(&mut header_json)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&header_json).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
        return Err(NnError::Checkpoint(format!(
            "unsupported format {}@{}",
            header.format, header.version
        )));
    }
    header.policy.validate()?;

    // Shape list must match what the config dictates before any data is read.
    let mut net = PolicyNet::new(header.policy.clone(), 0)?;
    let expected: Vec<Vec<usize>> = net
        .params
        .tensors()
        .iter()
        .map(|t| t.shape().to_vec())
        .collect();
    if header.shapes != expected {
        return Err(NnError::Checkpoint(
            "shape list does not match the policy config".into(),
        ));
    }

    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    let want: usize = expected.iter().map(|s| s.iter().product::<usize>()).sum();
    if rest.len() != want * 4 {
        return Err(NnError::Checkpoint(format!(
            "payload holds {} bytes, expected {}",
            rest.len(),
            want * 4
        )));
    }
    let mut offset = 0;
    for t in net.params.tensors_mut() {
        for v in t.data_mut() {
            let bytes: [u8; 4] = rest[offset..offset + 4].try_into().expect("sized");
            *v = f32::from_le_bytes(bytes) as f64;
            offset += 4;
        }
    }
    Ok((net, header.tags))
}
