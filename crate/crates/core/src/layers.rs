//! Transformer building blocks shared by the sequence encoder (bidirectional)
//! and the text decoder (causal).

use crate::autograd::{Matrix, Tape, Var};
use crate::params::{BoundParams, ParamSpec};

/// Standard sinusoidal position table, `len × width`.
pub fn sinusoidal_positions(len: usize, width: usize) -> Matrix {
    let mut pe = Matrix::zeros((len, width));
    for pos in 0..len {
        for i in 0..width {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / width as f64);
            pe[[pos, i]] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// Parameters of one pre-norm block with a 4× feedforward.
pub fn block_specs(prefix: &str, width: usize) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    specs.extend(ParamSpec::layer_norm(&format!("{prefix}.ln1"), width));
    for proj in ["q", "k", "v", "o"] {
        specs.extend(ParamSpec::linear(&format!("{prefix}.attn.{proj}"), width, width));
    }
    specs.extend(ParamSpec::layer_norm(&format!("{prefix}.ln2"), width));
    specs.extend(ParamSpec::linear(&format!("{prefix}.ff1"), width, 4 * width));
    specs.extend(ParamSpec::linear(&format!("{prefix}.ff2"), 4 * width, width));
    specs
}

pub fn linear(tape: &mut Tape, x: Var, params: &BoundParams, prefix: &str) -> Var {
    tape.linear(
        x,
        params.var(&format!("{prefix}.w")),
        params.var(&format!("{prefix}.b")),
    )
}

pub fn layer_norm(tape: &mut Tape, x: Var, params: &BoundParams, prefix: &str) -> Var {
    tape.layer_norm(
        x,
        params.var(&format!("{prefix}.g")),
        params.var(&format!("{prefix}.b")),
    )
}

/// Multi-head scaled dot-product self-attention. Returns the projected output
/// and each head's attention matrix.
pub fn self_attention(
    tape: &mut Tape,
    x: Var,
    params: &BoundParams,
    prefix: &str,
    heads: usize,
    causal: bool,
) -> (Var, Vec<Var>) {
    let width = tape.value(x).ncols();
    let head_width = width / heads;
    let scale = 1.0 / (head_width as f64).sqrt();
    let q = linear(tape, x, params, &format!("{prefix}.q"));
    let k = linear(tape, x, params, &format!("{prefix}.k"));
    let v = linear(tape, x, params, &format!("{prefix}.v"));
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * head_width, head_width);
        let kh = tape.slice_cols(k, h * head_width, head_width);
        let vh = tape.slice_cols(v, h * head_width, head_width);
        let scores = tape.matmul_t(qh, kh);
        let scores = tape.scale(scores, scale);
        let p = if causal {
            tape.causal_softmax(scores)
        } else {
            tape.softmax(scores)
        };
        probs.push(p);
        outs.push(tape.matmul(p, vh));
    }
    let joined = if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)
    };
    (linear(tape, joined, params, &format!("{prefix}.o")), probs)
}

/// `x + attn(ln1(x))`, then `+ ff(ln2(x))`.
pub fn transformer_block(
    tape: &mut Tape,
    x: Var,
    params: &BoundParams,
    prefix: &str,
    heads: usize,
    causal: bool,
) -> (Var, Vec<Var>) {
    let n1 = layer_norm(tape, x, params, &format!("{prefix}.ln1"));
    let (attn, probs) = self_attention(tape, n1, params, &format!("{prefix}.attn"), heads, causal);
    let x = tape.add(x, attn);
    let n2 = layer_norm(tape, x, params, &format!("{prefix}.ln2"));
    let h = linear(tape, n2, params, &format!("{prefix}.ff1"));
    let h = tape.gelu(h);
    let h = linear(tape, h, params, &format!("{prefix}.ff2"));
    (tape.add(x, h), probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positions_start_with_sin_zero_cos_one() {
        let pe = sinusoidal_positions(3, 4);
        assert_eq!(pe[[0, 0]], 0.0);
        assert_eq!(pe[[0, 1]], 1.0);
        assert!((pe[[1, 0]] - 1f64.sin()).abs() < 1e-15);
        assert!((pe[[1, 2]] - (0.01f64).sin()).abs() < 1e-15);
    }
}
