//! Finite-difference gradient suite over every differentiable op, the
//! network blocks, the two-pass map and all losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::degrade::Task;
use crate::error::Result;
use crate::nets::{
    gdfn_block, mdta_block, regm_forward, two_pass_restore, Bound, Conditioning, DaRcot, NetConfig, ParamStore,
    PotentialModel, PotentialNet, TransportModel,
};
use crate::objective::{loss_potential, loss_task_contrastive, loss_transport_paired, loss_transport_unpaired, CostConfig};
use crate::tensor::{finite_diff_check, Tape, Tensor, Var};

pub const STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradRow {
    pub name: String,
    /// Number of perturbed entries.
    pub numel: usize,
    pub max_error: f64,
}

type Case = (String, Tensor, Box<dyn Fn(&Tape, Var) -> Result<Var>>);

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape product")
}

fn sq_mean(t: &Tape, v: Var) -> Result<Var> {
    t.mean(t.mul(v, v)?)
}

fn tiny() -> NetConfig {
    NetConfig {
        base_channels: 2,
        embed_channels: [4, 3, 2],
        potential_channels: 2,
        conditioning: Conditioning::Full,
    }
}

/// Random values everywhere, including zero-initialised fusions and biases,
/// so no path is trivially dead. Attention temperatures stay at 1.
fn randomize(p: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for (name, t) in p.iter_mut() {
        if name.ends_with("alpha") {
            continue;
        }
        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.4..0.4));
    }
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut r = |s: &[usize]| rand_tensor(rng, s, -1.0, 1.0);
    let wconv = r(&[4, 3, 3, 3]);
    let xconv = r(&[2, 3, 5, 4]);
    let wdw = r(&[3, 1, 3, 3]);
    let weights = r(&[2, 5]);
    let mut cases: Vec<Case> = Vec::new();
    let mut add = |name: &str, x: Tensor, f: Box<dyn Fn(&Tape, Var) -> Result<Var>>| cases.push((name.into(), x, f));
    add("add", r(&[2, 3]), Box::new(|t, x| t.sum(t.mul(t.add(x, x)?, x)?)));
    add("sub", r(&[2, 3]), Box::new(|t, x| {
        let d = t.sub(t.constant(Tensor::full(&[2, 3], 0.3))?, x)?;
        t.sum(t.mul(d, d)?)
    }));
    add("mul_broadcast", r(&[3]), Box::new(|t, x| {
        let y = t.mul(x, t.constant(Tensor::scalar(0.7))?)?;
        t.sum(t.mul(y, y)?)
    }));
    add("div", r(&[4]), Box::new(|t, x| t.sum(t.div(x, t.exp(x)?)?)));
    add("scale_add_scalar", r(&[4]), Box::new(|t, x| sq_mean(t, t.add_scalar(t.scale(x, -1.5)?, 0.2)?)));
    add("matmul", r(&[3, 4]), Box::new(|t, x| t.sum(t.gelu(t.matmul(x, t.transpose(x)?)?)?)));
    add("batched_matmul", r(&[2, 3, 3]), Box::new(|t, x| t.mean(t.sigmoid(t.matmul(x, x)?)?)));
    let w = wconv.clone();
    add("conv2d_input", r(&[2, 3, 5, 4]), Box::new(move |t, x| {
        let b = t.constant(Tensor::from_vec(vec![0.1, -0.2, 0.0, 0.3]))?;
        t.mean(t.gelu(t.conv2d(x, t.constant(w.clone())?, Some(b), 2, 1)?)?)
    }));
    add("conv2d_weight", wconv, Box::new(move |t, w| sq_mean(t, t.conv2d(t.constant(xconv.clone())?, w, None, 1, 1)?)));
    add("depthwise_conv2d", r(&[1, 3, 4, 5]), Box::new(move |t, x| {
        t.sum(t.mul(t.depthwise_conv2d(x, t.constant(wdw.clone())?, None, 1)?, x)?)
    }));
    add("upsample2x", r(&[1, 2, 2, 3]), Box::new(|t, x| sq_mean(t, t.upsample2x(x)?)));
    add("relu", r(&[6]), Box::new(|t, x| t.sum(t.mul(t.relu(x)?, x)?)));
    add("leaky_relu", r(&[6]), Box::new(|t, x| t.sum(t.mul(t.leaky_relu(x, 0.2)?, x)?)));
    add("sigmoid_log_exp", r(&[5]), Box::new(|t, x| t.sum(t.exp(t.log(t.sigmoid(x)?)?)?)));
    let ws = weights.clone();
    add("softmax", r(&[2, 5]), Box::new(move |t, x| t.sum(t.mul(t.softmax(x)?, t.constant(ws.clone())?)?)));
    add("layer_norm", r(&[2, 5]), Box::new(move |t, x| {
        t.sum(t.mul(t.layer_norm(x, 1e-5)?, t.constant(weights.clone())?)?)
    }));
    add("global_avg_pool", r(&[2, 3, 2, 2]), Box::new(|t, x| sq_mean(t, t.global_avg_pool(x)?)));
    add("concat_channels", r(&[1, 2, 2, 2]), Box::new(|t, x| {
        let y = t.concat_channels(&[x, t.scale(x, 2.0)?])?;
        t.sum(t.mul(y, y)?)
    }));
    add("reshape", r(&[2, 3]), Box::new(|t, x| t.sum(t.matmul(t.reshape(x, &[3, 2])?, x)?)));
    add("l1_l2_norms", r(&[5]), Box::new(|t, x| t.add(t.l1_norm(x)?, t.l2_norm(x)?)));
    add("per_sample_norms", r(&[3, 4]), Box::new(|t, x| {
        let s = t.add(t.l2_norm_per_sample(x)?, t.l1_norm_per_sample(x)?)?;
        t.sum(t.mul(s, t.sum_per_sample(x)?)?)
    }));
    add("normalize_rows", r(&[3, 4]), Box::new(|t, x| t.sum(t.mul(t.normalize_rows(x)?, t.constant(sin_tensor(&[3, 4]))?)?)));
    add("fft2_magnitudes", r(&[2, 4, 4]), Box::new(|t, x| {
        let m = t.fft2_magnitudes(x)?;
        t.add(t.l2_norm(m)?, t.l1_norm(m)?)
    }));
    cases
}

fn sin_tensor(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|i| (i as f64).sin()).collect()).expect("shape product")
}

/// One row per parameter tensor of `store` plus one for the input.
fn network_rows<F>(name: &str, store: &ParamStore, input: &Tensor, loss: F, rows: &mut Vec<GradRow>) -> Result<()>
where
    F: Fn(&Tape, &Bound, Var) -> Result<Var>,
{
    let e = finite_diff_check(|t, v| loss(t, &store.bind(t, false)?, v), input, STEP)?;
    rows.push(GradRow { name: format!("{name}/input"), numel: input.numel(), max_error: e });
    for (pname, p) in store.iter() {
        let f = |t: &Tape, v: Var| {
            let mut b = store.bind(t, false)?;
            b.replace(pname, v)?;
            loss(t, &b, t.constant(input.clone())?)
        };
        let e = finite_diff_check(f, p, STEP)?;
        rows.push(GradRow { name: format!("{name}/{pname}"), numel: p.numel(), max_error: e });
    }
    Ok(())
}

/// Run the whole suite. Parameter rows are reported per tensor.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for (name, x, f) in op_cases(&mut rng) {
        let e = finite_diff_check(|t, v| f(t, v), &x, STEP)?;
        rows.push(GradRow { name: format!("op/{name}"), numel: x.numel(), max_error: e });
    }

    for block in ["mdta", "gdfn"] {
        let mut p = ParamStore::new();
        if block == "mdta" {
            crate::nets::blocks::init_mdta(&mut p, "b", 3, &mut rng);
        } else {
            crate::nets::blocks::init_gdfn(&mut p, "b", 3, &mut rng);
        }
        randomize(&mut p, &mut rng);
        let x = rand_tensor(&mut rng, &[1, 3, 4, 4], -1.0, 1.0);
        network_rows(
            block,
            &p,
            &x,
            |t, b, v| {
                if block == "mdta" {
                    sq_mean(t, mdta_block(t, b, "b", v)?)
                } else {
                    sq_mean(t, gdfn_block(t, b, "b", v)?)
                }
            },
            &mut rows,
        )?;
    }

    let model = DaRcot::new(tiny());
    let mut p = model.init(&mut rng);
    randomize(&mut p, &mut rng);
    let mut regm = ParamStore::new();
    for (n, t) in p.iter().filter(|(n, _)| n.starts_with("regm.")) {
        regm.insert(n.clone(), t.clone());
    }
    let r = rand_tensor(&mut rng, &[1, 3, 8, 8], -0.5, 0.5);
    network_rows(
        "regm_chain",
        &regm,
        &r,
        |t, b, v| {
            let e = regm_forward(t, b, v)?;
            t.add(t.add(sq_mean(t, e.r1)?, t.mean(e.r2)?)?, sq_mean(t, e.r3)?)
        },
        &mut rows,
    )?;
    let y = rand_tensor(&mut rng, &[1, 3, 8, 8], 0.0, 1.0);
    network_rows("two_pass_restore", &p, &y, |t, b, v| sq_mean(t, two_pass_restore(t, b, v)?.x_hat), &mut rows)?;

    let pot = PotentialNet::new(2);
    let mut pp = pot.init(&mut rng);
    randomize(&mut pp, &mut rng);
    network_rows("potential", &pp, &y, |t, b, v| t.sum(pot.forward(t, b, v)?), &mut rows)?;

    let tasks = [Task::Noise, Task::Rain, Task::Haze];
    let cfg = CostConfig::default();
    let ys = rand_tensor(&mut rng, &[3, 3, 4, 4], 0.0, 1.0);
    let ty = rand_tensor(&mut rng, &[3, 3, 4, 4], 0.0, 1.0);
    let xs = rand_tensor(&mut rng, &[3, 3, 4, 4], 0.0, 1.0);
    let phi = rand_tensor(&mut rng, &[3], -1.0, 1.0);
    let phi_x = rand_tensor(&mut rng, &[3], -1.0, 1.0);
    let (ys2, phi2) = (ys.clone(), phi.clone());
    let cases: Vec<Case> = vec![
        ("loss/unpaired".into(), ty.clone(), Box::new(move |t, v| {
            loss_transport_unpaired(t, t.constant(ys2.clone())?, v, t.constant(phi2.clone())?, &tasks, &CostConfig::default())
        })),
        ("loss/paired".into(), ty, Box::new(move |t, v| {
            let (y, x, p) = (t.constant(ys.clone())?, t.constant(xs.clone())?, t.constant(phi.clone())?);
            loss_transport_paired(t, y, v, Some(x), p, &tasks, &cfg)
        })),
        ("loss/potential".into(), rand_tensor(&mut rng, &[3], -1.0, 1.0), Box::new(move |t, v| {
            loss_potential(t, v, t.constant(phi_x.clone())?)
        })),
        ("loss/contrastive".into(), rand_tensor(&mut rng, &[6, 4], -1.0, 1.0), Box::new(|t, v| {
            let labels = [Task::Noise, Task::Rain, Task::Haze, Task::Noise, Task::Rain, Task::Haze];
            Ok(loss_task_contrastive(t, v, &labels, 0.07)?.loss)
        })),
    ];
    for (name, x, f) in cases {
        let e = finite_diff_check(|t, v| f(t, v), &x, STEP)?;
        rows.push(GradRow { name, numel: x.numel(), max_error: e });
    }
    Ok(rows)
}
