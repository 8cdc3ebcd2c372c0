use super::{add_conv, conv, fan_in_uniform, Bound, ParamStore, PotentialModel};
use crate::error::{ensure, Result};
use crate::tensor::{Tape, Tensor, Var};

const SLOPE: f64 = 0.2;

/// Strided-conv critic: four `conv3x3/2 + leaky` stages, global average
/// pooling and a linear head.
#[derive(Clone, Debug)]
pub struct PotentialNet {
    pub base: usize,
}

impl PotentialNet {
    pub fn new(base: usize) -> Self {
        PotentialNet { base }
    }
}

impl PotentialModel for PotentialNet {
    fn init(&self, rng: &mut dyn rand::RngCore) -> ParamStore {
        let mut p = ParamStore::new();
        let widths = [3, self.base, 2 * self.base, 4 * self.base, 8 * self.base];
        for i in 0..4 {
            add_conv(&mut p, &format!("phi.s{i}"), widths[i], widths[i + 1], 3, rng);
        }
        p.insert("phi.head.w", fan_in_uniform(&[widths[4], 1], widths[4], rng));
        p.insert("phi.head.b", Tensor::scalar(0.0));
        p
    }

    fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        ensure!(s.len() == 4 && s[1] == 3, "potential: expected [B,3,H,W], got {:?}", s);
        let mut h = x;
        for i in 0..4 {
            h = tape.leaky_relu(conv(tape, p, &format!("phi.s{i}"), h, 2)?, SLOPE)?;
        }
        let pooled = tape.global_avg_pool(h)?;
        let out = tape.matmul(pooled, p.get("phi.head.w")?)?;
        let out = tape.add(out, p.get("phi.head.b")?)?;
        tape.reshape(out, &[s[0]])
    }
}

/// `phi(x)` for one `3xHxW` image (shape `[]`) or a batch (shape `[B]`).
pub fn potential_forward(tape: &Tape, net: &PotentialNet, p: &Bound, x: Var) -> Result<Var> {
    let s = tape.shape(x);
    if s.len() == 3 {
        let xb = tape.reshape(x, &[1, s[0], s[1], s[2]])?;
        let out = net.forward(tape, p, xb)?;
        return tape.reshape(out, &[]);
    }
    net.forward(tape, p, x)
}
