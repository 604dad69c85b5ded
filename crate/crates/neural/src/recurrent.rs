//! Dilated (bi)directional LSTM stacks and attention pooling.

use rand::Rng;

use crate::error::NeuralError;
use crate::params::{ParamId, ParamStore, ParamVars};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One LSTM direction. Gate blocks are ordered (i, f, g, o) along the last axis.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub units: usize,
    pub dilation: usize,
    pub reverse: bool,
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        units: usize,
        dilation: usize,
        reverse: bool,
        rng: &mut R,
    ) -> Self {
        let lim = 1.0 / (units as f64).sqrt();
        let wx = store.add(
            format!("{name}/input_kernel"),
            Tensor::uniform(&[inputs, 4 * units], -lim, lim, rng),
        );
        let wh = store.add(
            format!("{name}/recurrent_kernel"),
            Tensor::uniform(&[units, 4 * units], -lim, lim, rng),
        );
        let mut bias = vec![0.0; 4 * units];
        bias[units..2 * units].iter_mut().for_each(|v| *v = 1.0);
        let b = store.add(format!("{name}/bias"), Tensor::vector(bias));
        Lstm {
            wx,
            wh,
            b,
            inputs,
            units,
            dilation: dilation.max(1),
            reverse,
        }
    }

    /// `x [B, T, F]` → `[B, T, H]`. Step `t` reads the state of step `t - d`
    /// (`t + d` when reversed); states before the sequence start are zero.
    pub fn forward(&self, tape: &mut Tape, pv: &ParamVars, x: Var) -> Result<Var, NeuralError> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.inputs {
            return Err(NeuralError::ShapeMismatch(format!(
                "lstm expects [B, T, {}], got {s:?}",
                self.inputs
            )));
        }
        let (t_len, h) = (s[1], self.units);
        let d = self.dilation;
        let proj = tape.matmul(x, pv[self.wx]);
        let proj = tape.add_bias(proj, pv[self.b]);
        let mut hs: Vec<Option<Var>> = vec![None; t_len];
        let mut cs: Vec<Option<Var>> = vec![None; t_len];
        let order: Vec<usize> = if self.reverse {
            (0..t_len).rev().collect()
        } else {
            (0..t_len).collect()
        };
        for &t in &order {
            let prev = if self.reverse {
                (t + d < t_len).then_some(t + d)
            } else {
                t.checked_sub(d)
            };
            let mut gates = tape.select_time(proj, t);
            if let Some(p) = prev {
                let rec = tape.matmul(hs[p].unwrap(), pv[self.wh]);
                gates = tape.add(gates, rec);
            }
            let i = tape.slice_last(gates, 0, h);
            let i = tape.sigmoid(i);
            let f = tape.slice_last(gates, h, h);
            let f = tape.sigmoid(f);
            let g = tape.slice_last(gates, 2 * h, h);
            let g = tape.tanh(g);
            let o = tape.slice_last(gates, 3 * h, h);
            let o = tape.sigmoid(o);
            let ig = tape.mul(i, g);
            let c = match prev {
                Some(p) => {
                    let fc = tape.mul(f, cs[p].unwrap());
                    tape.add(fc, ig)
                }
                None => ig,
            };
            let tc = tape.tanh(c);
            hs[t] = Some(tape.mul(o, tc));
            cs[t] = Some(c);
        }
        let steps: Vec<Var> = hs.into_iter().map(|v| v.unwrap()).collect();
        Ok(tape.stack_time(&steps))
    }
}

/// Stack of bidirectional layers, one per dilation; each layer outputs `2H` features.
#[derive(Clone, Debug)]
pub struct BiDilatedLstm {
    pub layers: Vec<(Lstm, Lstm)>,
    pub units: usize,
}

impl BiDilatedLstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        units: usize,
        dilations: &[usize],
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::new();
        let mut fin = inputs;
        for (k, &d) in dilations.iter().enumerate() {
            let fw = Lstm::new(store, &format!("{name}/layer{k}/forward"), fin, units, d, false, rng);
            let bw = Lstm::new(store, &format!("{name}/layer{k}/backward"), fin, units, d, true, rng);
            layers.push((fw, bw));
            fin = 2 * units;
        }
        BiDilatedLstm { layers, units }
    }

    pub fn max_dilation(&self) -> usize {
        self.layers.iter().map(|(f, _)| f.dilation).max().unwrap_or(1)
    }

    pub fn forward(&self, tape: &mut Tape, pv: &ParamVars, x: Var) -> Result<Var, NeuralError> {
        let t = tape.shape(x).get(1).copied().unwrap_or(0);
        if t < self.max_dilation() {
            return Err(NeuralError::ShapeMismatch(format!(
                "sequence length {t} shorter than dilation {}",
                self.max_dilation()
            )));
        }
        let mut h = x;
        for (fw, bw) in &self.layers {
            let a = fw.forward(tape, pv, h)?;
            let b = bw.forward(tape, pv, h)?;
            h = tape.concat_last(&[a, b]);
        }
        Ok(h)
    }
}

/// Softmax attention over time with a learned score vector `Z`.
#[derive(Clone, Debug)]
pub struct Attention {
    pub z: ParamId,
    pub features: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, features: usize, rng: &mut R) -> Self {
        let lim = 1.0 / (features as f64).sqrt();
        let z = store.add(format!("{name}/score"), Tensor::uniform(&[features], -lim, lim, rng));
        Attention { z, features }
    }

    /// `h [B, T, H]` → (`[B, H]` pooled output, `[B, T]` weights).
    pub fn forward(&self, tape: &mut Tape, pv: &ParamVars, h: Var) -> (Var, Var) {
        let s = tape.shape(h).to_vec();
        let z = tape.reshape(pv[self.z], &[self.features, 1]);
        let scores = tape.matmul(h, z);
        let scores = tape.reshape(scores, &[s[0], s[1]]);
        let alpha = tape.softmax_last(scores);
        (tape.attention_pool(alpha, h), alpha)
    }
}
