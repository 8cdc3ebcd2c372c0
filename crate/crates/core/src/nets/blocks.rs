use super::{add_conv, add_depthwise, conv, depthwise, Bound, ParamStore};
use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

pub(crate) fn init_mdta(p: &mut ParamStore, name: &str, c: usize, rng: &mut dyn rand::RngCore) {
    for branch in ["q", "k", "v"] {
        add_conv(p, &format!("{name}.{branch}_pw"), c, c, 1, rng);
        add_depthwise(p, &format!("{name}.{branch}_dw"), c, rng);
    }
    add_conv(p, &format!("{name}.proj"), c, c, 1, rng);
    p.insert(format!("{name}.alpha"), Tensor::scalar(1.0));
}

pub(crate) fn init_gdfn(p: &mut ParamStore, name: &str, c: usize, rng: &mut dyn rand::RngCore) {
    let hidden = 2 * c;
    for branch in ["act", "gate"] {
        add_conv(p, &format!("{name}.{branch}_pw"), c, hidden, 1, rng);
        add_depthwise(p, &format!("{name}.{branch}_dw"), hidden, rng);
    }
    add_conv(p, &format!("{name}.proj"), hidden, c, 1, rng);
}

/// Channel attention matrix `softmax(norm(Q) norm(K)^T / alpha)`,
/// `[B, C, C]`, together with `V` flattened to `[B, C, hw]`.
pub fn mdta_attention(tape: &Tape, p: &Bound, name: &str, x: Var) -> Result<(Var, Var)> {
    let s = tape.shape(x);
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    let branch = |tag: &str| -> Result<Var> {
        let pw = conv(tape, p, &format!("{name}.{tag}_pw"), x, 1)?;
        let dw = depthwise(tape, p, &format!("{name}.{tag}_dw"), pw)?;
        tape.reshape(dw, &[b, c, hw])
    };
    let q = tape.normalize_rows(branch("q")?)?;
    let k = tape.normalize_rows(branch("k")?)?;
    let v = branch("v")?;
    let logits = tape.matmul(q, tape.transpose(k)?)?;
    let logits = tape.div(logits, p.get(&format!("{name}.alpha"))?)?;
    Ok((tape.softmax(logits)?, v))
}

/// Single-head transposed (channel) attention with a residual connection.
pub fn mdta_block(tape: &Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let s = tape.shape(x);
    let (a, v) = mdta_attention(tape, p, name, x)?;
    let av = tape.reshape(tape.matmul(a, v)?, &s)?;
    let out = conv(tape, p, &format!("{name}.proj"), av, 1)?;
    tape.add(out, x)
}

/// Gated feed-forward: `proj(gelu(DW1(P1 x)) * DW2(P2 x)) + x`.
pub fn gdfn_block(tape: &Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let act = depthwise(tape, p, &format!("{name}.act_dw"), conv(tape, p, &format!("{name}.act_pw"), x, 1)?)?;
    let gate = depthwise(tape, p, &format!("{name}.gate_dw"), conv(tape, p, &format!("{name}.gate_pw"), x, 1)?)?;
    let h = tape.mul(tape.gelu(act)?, gate)?;
    let out = conv(tape, p, &format!("{name}.proj"), h, 1)?;
    tape.add(out, x)
}
