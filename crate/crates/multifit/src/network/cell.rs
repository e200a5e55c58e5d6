//! Recurrent cell strategies. Cells are registered by name; the QRNN is
//! the default and the LSTM exists as the reference point for the
//! per-batch speed comparison.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::NetworkError;
use crate::tensor::Tensor;

use super::{LayerState, ModelConfig, Parameters, TapeBinding};

/// One recurrent layer's forward pass and initialization, dispatched by
/// registry name so the cell family is selectable from configuration.
pub trait RecurrentCell: Sync {
    fn name(&self) -> &'static str;

    /// Create and insert the layer's parameters.
    fn init_layer(
        &self,
        params: &mut Parameters,
        layer: usize,
        in_dim: usize,
        out_dim: usize,
        width: usize,
        rng: &mut ChaCha8Rng,
    );

    /// Run the layer over a window `x: [T,B,Din]`, reading the carried
    /// state and replacing it with the detached end-of-window state.
    /// `zoneout` is an optional `[T,B,H]` mask of dropped channels
    /// (1 = carry the previous cell state through unchanged).
    fn forward(
        &self,
        tape: &mut Tape,
        binding: &TapeBinding,
        layer: usize,
        x: Var,
        state: &mut LayerState,
        zoneout: Option<&Tensor>,
    ) -> Result<Var, NetworkError>;
}

/// Quasi-recurrent layer: three causal convolutions produce candidate,
/// forget, and output gates; fo-pooling applies the only sequential part.
pub struct QrnnCell;

/// Standard LSTM layer, sequential over time.
pub struct LstmCell;

static CELLS: &[&dyn RecurrentCell] = &[&QrnnCell, &LstmCell];

pub fn cell(name: &str) -> Result<&'static dyn RecurrentCell, NetworkError> {
    CELLS
        .iter()
        .copied()
        .find(|c| c.name() == name)
        .ok_or_else(|| NetworkError::UnknownCell(name.to_string()))
}

pub fn cell_names() -> Vec<&'static str> {
    CELLS.iter().map(|c| c.name()).collect()
}

/// Resolve the configured cell for a model.
pub fn config_cell(config: &ModelConfig) -> Result<&'static dyn RecurrentCell, NetworkError> {
    cell(&config.cell)
}

fn gate_names(layer: usize) -> [(String, String); 3] {
    ["z", "f", "o"].map(|g| {
        (format!("layer{layer}.{g}.weight"), format!("layer{layer}.{g}.bias"))
    })
}

/// Last `need` input frames of the window, reaching into the previous
/// context (or zero padding) when the window is shorter than `need`.
fn carry_frames(x: &Tensor, prev: Option<&Tensor>, need: usize) -> Tensor {
    let (t, b, din) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let frame = b * din;
    let mut data = vec![0.0; need * frame];
    if t >= need {
        data.copy_from_slice(&x.data()[(t - need) * frame..]);
    } else {
        let deficit = need - t;
        if let Some(p) = prev {
            data[..deficit * frame].copy_from_slice(&p.data()[(need - deficit) * frame..]);
        }
        data[deficit * frame..].copy_from_slice(x.data());
    }
    Tensor::new(vec![need, b, din], data).expect("context shape")
}

impl RecurrentCell for QrnnCell {
    fn name(&self) -> &'static str {
        "qrnn"
    }

    fn init_layer(
        &self,
        params: &mut Parameters,
        layer: usize,
        in_dim: usize,
        out_dim: usize,
        width: usize,
        rng: &mut ChaCha8Rng,
    ) {
        let bound = 1.0 / ((width * in_dim) as f64).sqrt();
        for (wname, bname) in gate_names(layer) {
            params.insert(&wname, Tensor::uniform(vec![width, in_dim, out_dim], bound, rng));
            params.insert(&bname, Tensor::zeros(vec![out_dim]));
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        binding: &TapeBinding,
        layer: usize,
        x: Var,
        state: &mut LayerState,
        zoneout: Option<&Tensor>,
    ) -> Result<Var, NetworkError> {
        let [(zw, zb), (fw, fb), (ow, ob)] = gate_names(layer);
        let ctx = state.conv_ctx.clone();
        let conv = |tape: &mut Tape, w: &str, b: &str| -> Result<Var, NetworkError> {
            Ok(tape.causal_conv_with_context(x, binding.var(w)?, binding.var(b)?, ctx.as_ref())?)
        };
        let z_pre = conv(tape, &zw, &zb)?;
        let f_pre = conv(tape, &fw, &fb)?;
        let o_pre = conv(tape, &ow, &ob)?;
        let width = tape.value(binding.var(&zw)?).shape()[0];
        if width > 1 {
            state.conv_ctx = Some(carry_frames(
                tape.value(x),
                state.conv_ctx.as_ref(),
                width - 1,
            ));
        }
        let z = tape.tanh(z_pre)?;
        let mut f = tape.sigmoid(f_pre)?;
        let o = tape.sigmoid(o_pre)?;
        if let Some(mask) = zoneout {
            // f' = f + mask * (1 - f): dropped channels saturate the forget
            // gate so the previous cell state is carried unchanged.
            let ones = tape.leaf(Tensor::filled(mask.shape().to_vec(), 1.0));
            let mask_v = tape.leaf(mask.clone());
            let keep = tape.sub(ones, f)?;
            let raised = tape.mul(mask_v, keep)?;
            f = tape.add(f, raised)?;
        }
        let c0 = tape.leaf(state.c.clone());
        let (h, c_final) = tape.fo_pool(z, f, o, c0)?;
        state.c = c_final;
        Ok(h)
    }
}

impl RecurrentCell for LstmCell {
    fn name(&self) -> &'static str {
        "lstm"
    }

    fn init_layer(
        &self,
        params: &mut Parameters,
        layer: usize,
        in_dim: usize,
        out_dim: usize,
        _width: usize,
        rng: &mut ChaCha8Rng,
    ) {
        let wb = 1.0 / (in_dim as f64).sqrt();
        let ub = 1.0 / (out_dim as f64).sqrt();
        params.insert(&format!("layer{layer}.w"), Tensor::uniform(vec![in_dim, 4 * out_dim], wb, rng));
        params.insert(&format!("layer{layer}.u"), Tensor::uniform(vec![out_dim, 4 * out_dim], ub, rng));
        params.insert(&format!("layer{layer}.bias"), Tensor::zeros(vec![4 * out_dim]));
    }

    fn forward(
        &self,
        tape: &mut Tape,
        binding: &TapeBinding,
        layer: usize,
        x: Var,
        state: &mut LayerState,
        _zoneout: Option<&Tensor>,
    ) -> Result<Var, NetworkError> {
        let w = binding.var(&format!("layer{layer}.w"))?;
        let u = binding.var(&format!("layer{layer}.u"))?;
        let bias = binding.var(&format!("layer{layer}.bias"))?;
        let h0 = tape.leaf(state.h.clone());
        let c0 = tape.leaf(state.c.clone());
        let (h, h_final, c_final) = tape.lstm_seq(x, w, u, bias, h0, c0)?;
        state.h = h_final;
        state.c = c_final;
        Ok(h)
    }
}
