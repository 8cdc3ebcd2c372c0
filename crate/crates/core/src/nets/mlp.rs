use super::{fan_in_uniform, Bound, ParamStore, PotentialModel, TransportModel, TransportOutput};
use crate::error::{ensure, Result};
use crate::tensor::{Tape, Tensor, Var};

fn check_column(tape: &Tape, x: Var, what: &str) -> Result<usize> {
    let s = tape.shape(x);
    ensure!(s.len() == 2 && s[1] == 1 && s[0] > 0, "{what}: expected [B,1], got {:?}", s);
    Ok(s[0])
}

/// `ones[B,1] @ b[1,n]`: row-broadcast of a bias.
fn bias_rows(tape: &Tape, b: Var, rows: usize) -> Result<Var> {
    let ones = tape.constant(Tensor::full(&[rows, 1], 1.0))?;
    tape.matmul(ones, b)
}

fn init_dense(p: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut dyn rand::RngCore) {
    p.insert(format!("{name}.w"), fan_in_uniform(&[fan_in, fan_out], fan_in, rng));
    p.insert(format!("{name}.b"), Tensor::zeros(&[1, fan_out]));
}

fn dense(tape: &Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let rows = tape.shape(x)[0];
    let h = tape.matmul(x, p.get(&format!("{name}.w"))?)?;
    tape.add(h, bias_rows(tape, p.get(&format!("{name}.b"))?, rows)?)
}

fn mlp(tape: &Tape, p: &Bound, prefix: &str, depth: usize, x: Var) -> Result<Var> {
    let mut h = x;
    for i in 0..depth {
        h = tape.gelu(dense(tape, p, &format!("{prefix}.l{i}"), h)?)?;
    }
    dense(tape, p, &format!("{prefix}.out"), h)
}

fn init_mlp(p: &mut ParamStore, prefix: &str, hidden: usize, depth: usize, rng: &mut dyn rand::RngCore) {
    let mut fan_in = 1;
    for i in 0..depth {
        init_dense(p, &format!("{prefix}.l{i}"), fan_in, hidden, rng);
        fan_in = hidden;
    }
    init_dense(p, &format!("{prefix}.out"), fan_in, 1, rng);
}

/// Unconstrained 1-D map `T(y) = y + mlp(y)` on `[B,1]` columns.
#[derive(Clone, Debug)]
pub struct Mlp1d {
    pub hidden: usize,
    pub depth: usize,
}

impl TransportModel for Mlp1d {
    fn init(&self, rng: &mut dyn rand::RngCore) -> ParamStore {
        let mut p = ParamStore::new();
        init_mlp(&mut p, "t", self.hidden, self.depth, rng);
        p
    }

    fn forward(&self, tape: &Tape, p: &Bound, y: Var) -> Result<TransportOutput> {
        check_column(tape, y, "Mlp1d")?;
        let out = mlp(tape, p, "t", self.depth, y)?;
        Ok(TransportOutput {
            restored: tape.add(y, out)?,
            task_embedding: None,
        })
    }
}

/// Scalar 1-D potential `phi(x) = mlp(x)`, output `[B]`.
#[derive(Clone, Debug)]
pub struct MlpPotential1d {
    pub hidden: usize,
    pub depth: usize,
}

impl PotentialModel for MlpPotential1d {
    fn init(&self, rng: &mut dyn rand::RngCore) -> ParamStore {
        let mut p = ParamStore::new();
        init_mlp(&mut p, "phi", self.hidden, self.depth, rng);
        p
    }

    fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Result<Var> {
        let b = check_column(tape, x, "MlpPotential1d")?;
        let out = mlp(tape, p, "phi", self.depth, x)?;
        tape.reshape(out, &[b])
    }
}

/// Strictly increasing 1-D map
/// `T(y) = a + e^s y + sum_k e^{v_k} sigmoid(e^{u_k} y + c_k)`.
#[derive(Clone, Debug)]
pub struct MonotoneMap1d {
    pub units: usize,
}

impl TransportModel for MonotoneMap1d {
    fn init(&self, rng: &mut dyn rand::RngCore) -> ParamStore {
        let k = self.units;
        let mut p = ParamStore::new();
        p.insert("t.a", Tensor::scalar(0.0));
        p.insert("t.s", Tensor::scalar(0.0));
        p.insert("t.u", fan_in_uniform(&[1, k], 1, rng));
        let spread = (0..k).map(|i| -3.0 + 6.0 * (i as f64 + 0.5) / k as f64).collect();
        p.insert("t.c", Tensor::new(vec![1, k], spread).expect("k entries"));
        p.insert("t.v", Tensor::full(&[k, 1], -3.0));
        p
    }

    fn forward(&self, tape: &Tape, p: &Bound, y: Var) -> Result<TransportOutput> {
        let rows = check_column(tape, y, "MonotoneMap1d")?;
        let slope = tape.exp(p.get("t.s")?)?;
        let lin = tape.add(tape.mul(y, slope)?, p.get("t.a")?)?;
        let pre = tape.matmul(y, tape.exp(p.get("t.u")?)?)?;
        let pre = tape.add(pre, bias_rows(tape, p.get("t.c")?, rows)?)?;
        let bumps = tape.matmul(tape.sigmoid(pre)?, tape.exp(p.get("t.v")?)?)?;
        Ok(TransportOutput {
            restored: tape.add(lin, bumps)?,
            task_embedding: None,
        })
    }
}
