use super::blocks::{gdfn_block, init_gdfn, init_mdta, mdta_block};
use super::{add_conv, conv, Bound, Conditioning, NetConfig, ParamStore, TransportModel, TransportOutput};
use crate::error::{ensure, Result};
use crate::tensor::{Tape, Var};

/// Multi-scale residual embeddings, NCHW.
#[derive(Clone, Copy, Debug)]
pub struct Embeddings {
    /// `C3 x H/4 x W/4`, the bottleneck (and contrastive) embedding.
    pub r1: Var,
    /// `C2 x H/2 x W/2`.
    pub r2: Var,
    /// `C1 x H x W`.
    pub r3: Var,
}

/// What the second pass sees at each generator scale: bottleneck, mid,
/// finest. Each entry is concatenated with the features there.
#[derive(Clone, Copy, Debug, Default)]
pub struct Injection {
    pub bottleneck: Option<Var>,
    pub mid: Option<Var>,
    pub fine: Option<Var>,
}

impl From<&Embeddings> for Injection {
    fn from(e: &Embeddings) -> Self {
        Injection {
            bottleneck: Some(e.r1),
            mid: Some(e.r2),
            fine: Some(e.r3),
        }
    }
}

/// Channel counts of the injected signals per scale for a conditioning mode.
fn injected_channels(cfg: &NetConfig) -> [Option<usize>; 3] {
    let [c3, c2, c1] = cfg.embed_channels;
    match cfg.conditioning {
        Conditioning::None => [None, None, None],
        Conditioning::X0 => [None, None, Some(3)],
        Conditioning::R0 => [Some(c3), None, None],
        Conditioning::Full => [Some(c3), Some(c2), Some(c1)],
    }
}

pub(crate) fn init_res(p: &mut ParamStore, name: &str, c: usize, rng: &mut dyn rand::RngCore) {
    add_conv(p, &format!("{name}.c1"), c, c, 3, rng);
    add_conv(p, &format!("{name}.c2"), c, c, 3, rng);
}

pub(crate) fn res_block(tape: &Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let h = tape.gelu(conv(tape, p, &format!("{name}.c1"), x, 1)?)?;
    let h = conv(tape, p, &format!("{name}.c2"), h, 1)?;
    tape.add(x, h)
}

/// Generator parameters under `gen.`; fusion convs start at zero.
fn init_generator(p: &mut ParamStore, cfg: &NetConfig, rng: &mut dyn rand::RngCore) {
    let c = cfg.base_channels;
    add_conv(p, "gen.stem", 3, c, 3, rng);
    init_res(p, "gen.enc1", c, rng);
    add_conv(p, "gen.down1", c, 2 * c, 3, rng);
    init_res(p, "gen.enc2", 2 * c, rng);
    add_conv(p, "gen.down2", 2 * c, 4 * c, 3, rng);
    init_res(p, "gen.enc3", 4 * c, rng);
    add_conv(p, "gen.up2", 4 * c, 2 * c, 3, rng);
    init_res(p, "gen.dec2", 2 * c, rng);
    add_conv(p, "gen.up1", 2 * c, c, 3, rng);
    init_res(p, "gen.dec1", c, rng);
    add_conv(p, "gen.out", c, 3, 3, rng);
    let widths = [4 * c, 2 * c, c];
    for (i, inj) in injected_channels(cfg).into_iter().enumerate() {
        if let Some(ci) = inj {
            add_conv(p, &format!("gen.fuse{i}"), widths[i] + ci, widths[i], 1, rng);
            p.zero_prefix(&format!("gen.fuse{i}."));
        }
    }
}

/// `feat + conv1x1(concat(feat, signal))`.
fn fuse(tape: &Tape, p: &Bound, idx: usize, feat: Var, signal: Option<Var>) -> Result<Var> {
    let Some(sig) = signal else {
        return Ok(feat);
    };
    let (fs, ss) = (tape.shape(feat), tape.shape(sig));
    ensure!(
        fs[0] == ss[0] && fs[2..] == ss[2..],
        "generator: embedding {:?} does not match features {:?} at scale {idx}",
        ss,
        fs
    );
    let name = format!("gen.fuse{idx}");
    ensure!(p.has(&format!("{name}.w")), "generator: no fusion weights for scale {idx}");
    let cat = tape.concat_channels(&[feat, sig])?;
    tape.add(feat, conv(tape, p, &name, cat, 1)?)
}

/// U-shaped generator. With an empty injection this is the unconditional
/// first pass; the conditioned pass runs the identical code path.
pub fn generator_forward(tape: &Tape, p: &Bound, y: Var, inj: &Injection) -> Result<Var> {
    let s = tape.shape(y);
    ensure!(
        s.len() == 4 && s[1] == 3 && s[2].is_multiple_of(4) && s[3].is_multiple_of(4) && s[2] > 0 && s[3] > 0,
        "generator: expected [B,3,H,W] with H, W divisible by 4, got {:?}",
        s
    );
    let e1 = res_block(tape, p, "gen.enc1", tape.gelu(conv(tape, p, "gen.stem", y, 1)?)?)?;
    let e2 = res_block(tape, p, "gen.enc2", tape.gelu(conv(tape, p, "gen.down1", e1, 2)?)?)?;
    let e3 = res_block(tape, p, "gen.enc3", tape.gelu(conv(tape, p, "gen.down2", e2, 2)?)?)?;
    let d3 = fuse(tape, p, 0, e3, inj.bottleneck)?;

    let d2 = tape.gelu(conv(tape, p, "gen.up2", tape.upsample2x(d3)?, 1)?)?;
    let d2 = fuse(tape, p, 1, tape.add(d2, e2)?, inj.mid)?;
    let d2 = res_block(tape, p, "gen.dec2", d2)?;

    let d1 = tape.gelu(conv(tape, p, "gen.up1", tape.upsample2x(d2)?, 1)?)?;
    let d1 = fuse(tape, p, 2, tape.add(d1, e1)?, inj.fine)?;
    let d1 = res_block(tape, p, "gen.dec1", d1)?;
    tape.add(conv(tape, p, "gen.out", d1, 1)?, y)
}

fn init_regm(p: &mut ParamStore, cfg: &NetConfig, rng: &mut dyn rand::RngCore) {
    let [c3, c2, c1] = cfg.embed_channels;
    add_conv(p, "regm.enc1", 3, c1, 3, rng);
    add_conv(p, "regm.enc2", c1, c2, 3, rng);
    add_conv(p, "regm.enc3", c2, c3, 3, rng);
    if cfg.conditioning != Conditioning::Full {
        return;
    }
    add_conv(p, "regm.r1.in", c3, c3, 1, rng);
    init_mdta(p, "regm.r1.mdta", c3, rng);
    init_gdfn(p, "regm.r1.gdfn", c3, rng);
    add_conv(p, "regm.r2.in", c3, c3, 1, rng);
    init_mdta(p, "regm.r2.mdta", c3, rng);
    init_gdfn(p, "regm.r2.gdfn", c3, rng);
    add_conv(p, "regm.r2.out", c3, c2, 3, rng);
    add_conv(p, "regm.r3.in", c2, c2, 1, rng);
    init_mdta(p, "regm.r3.mdta", c2, rng);
    init_gdfn(p, "regm.r3.gdfn", c2, rng);
    add_conv(p, "regm.r3.out", c2, c1, 3, rng);
}

/// Strided encoder of the first-pass residual, `C3 x H/4 x W/4`.
pub fn regm_encode(tape: &Tape, p: &Bound, r0_hat: Var) -> Result<Var> {
    let s = tape.shape(r0_hat);
    ensure!(
        s.len() == 4 && s[1] == 3 && s[2].is_multiple_of(4) && s[3].is_multiple_of(4) && s[2] > 0 && s[3] > 0,
        "regm: expected [B,3,H,W] with H, W divisible by 4, got {:?}",
        s
    );
    let h = tape.gelu(conv(tape, p, "regm.enc1", r0_hat, 1)?)?;
    let h = tape.gelu(conv(tape, p, "regm.enc2", h, 2)?)?;
    tape.gelu(conv(tape, p, "regm.enc3", h, 2)?)
}

fn chain(tape: &Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let h = conv(tape, p, &format!("{name}.in"), x, 1)?;
    let h = mdta_block(tape, p, &format!("{name}.mdta"), h)?;
    gdfn_block(tape, p, &format!("{name}.gdfn"), h)
}

/// `R1 = GDFN(MDTA(conv1x1(R0)))`, `R2 = up(conv3x3(GDFN(MDTA(conv1x1(R0)))))`,
/// `R3 = up(conv3x3(GDFN(MDTA(conv1x1(R2)))))`.
pub fn regm_forward(tape: &Tape, p: &Bound, r0_hat: Var) -> Result<Embeddings> {
    let r0 = regm_encode(tape, p, r0_hat)?;
    let r1 = chain(tape, p, "regm.r1", r0)?;
    let r2 = chain(tape, p, "regm.r2", r0)?;
    let r2 = tape.upsample2x(conv(tape, p, "regm.r2.out", r2, 1)?)?;
    let r3 = chain(tape, p, "regm.r3", r2)?;
    let r3 = tape.upsample2x(conv(tape, p, "regm.r3.out", r3, 1)?)?;
    Ok(Embeddings { r1, r2, r3 })
}

pub struct TwoPass {
    pub x_hat: Var,
    pub x0_hat: Var,
    pub r0_hat: Var,
    pub embeddings: Embeddings,
}

/// First pass, residual, embeddings, conditioned second pass (shared
/// generator weights).
pub fn two_pass_restore(tape: &Tape, p: &Bound, y: Var) -> Result<TwoPass> {
    let x0_hat = generator_forward(tape, p, y, &Injection::default())?;
    let r0_hat = tape.sub(y, x0_hat)?;
    let embeddings = regm_forward(tape, p, r0_hat)?;
    let x_hat = generator_forward(tape, p, y, &Injection::from(&embeddings))?;
    Ok(TwoPass {
        x_hat,
        x0_hat,
        r0_hat,
        embeddings,
    })
}

/// The image transport map under any [`Conditioning`] mode.
#[derive(Clone, Debug)]
pub struct DaRcot {
    pub cfg: NetConfig,
}

impl DaRcot {
    pub fn new(cfg: NetConfig) -> Self {
        DaRcot { cfg }
    }
}

impl TransportModel for DaRcot {
    fn init(&self, rng: &mut dyn rand::RngCore) -> ParamStore {
        let mut p = ParamStore::new();
        init_generator(&mut p, &self.cfg, rng);
        if matches!(self.cfg.conditioning, Conditioning::R0 | Conditioning::Full) {
            init_regm(&mut p, &self.cfg, rng);
        }
        p
    }

    fn forward(&self, tape: &Tape, p: &Bound, y: Var) -> Result<TransportOutput> {
        match self.cfg.conditioning {
            Conditioning::None => Ok(TransportOutput {
                restored: generator_forward(tape, p, y, &Injection::default())?,
                task_embedding: None,
            }),
            Conditioning::X0 => {
                let x0 = generator_forward(tape, p, y, &Injection::default())?;
                let inj = Injection {
                    fine: Some(x0),
                    ..Injection::default()
                };
                Ok(TransportOutput {
                    restored: generator_forward(tape, p, y, &inj)?,
                    task_embedding: None,
                })
            }
            Conditioning::R0 => {
                let x0 = generator_forward(tape, p, y, &Injection::default())?;
                let r0 = regm_encode(tape, p, tape.sub(y, x0)?)?;
                let inj = Injection {
                    bottleneck: Some(r0),
                    ..Injection::default()
                };
                Ok(TransportOutput {
                    restored: generator_forward(tape, p, y, &inj)?,
                    task_embedding: None,
                })
            }
            Conditioning::Full => {
                let out = two_pass_restore(tape, p, y)?;
                Ok(TransportOutput {
                    restored: out.x_hat,
                    task_embedding: Some(tape.global_avg_pool(out.embeddings.r1)?),
                })
            }
        }
    }
}
