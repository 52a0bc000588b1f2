//! Finite-difference gradient checks for every network block, the full
//! forward pass and the training objective.
//!
//! Each block runs on small random inputs with every parameter jittered away
//! from its initial value, so zero or unit initializations cannot hide a
//! missing gradient term.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::autodiff::{Tape, Var};
use crate::ecam::Ecam;
use crate::edrm::{Drs, Edrm, HfPrior, Irs};
use crate::error::Result;
use crate::gradcheck::{check_fn, check_params, GradcheckConfig, GradcheckReport};
use crate::losses::TotalLoss;
use crate::nn::{attention, BlockConfig, ChannelAttention, Conv2d, CrossAttention, DwConv3, Gffn, LayerNorm, Linear, Ss2d};
use crate::params::{Bound, ParamBuilder, ParameterTree};
use crate::pipeline::{ModelConfig, Wecdg};
use crate::sdgm::{ExposureClass, Sdgm, SdgmConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct BlockResult {
    pub block: &'static str,
    pub report: GradcheckReport,
}

/// Block names in the order [`run_suite`] checks them.
pub const BLOCKS: [&str; 18] = [
    "layer_norm",
    "attention",
    "cross_attention",
    "channel_attention",
    "gffn",
    "ss2d",
    "linear",
    "conv3x3",
    "conv3x3_stride2",
    "dwconv3x3",
    "irs",
    "hf_prior",
    "drs",
    "edrm",
    "ecam_forward",
    "full_forward",
    "total_loss",
    "sdgm_match",
];

fn block_cfg() -> BlockConfig {
    BlockConfig {
        expansion: 2.0,
        state_dim: 3,
        // Below the 8×8 token count, so key subsampling is exercised.
        token_budget: 16,
    }
}

fn random(rng: &mut Xoshiro256PlusPlus, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("sized")
}

fn jitter(tree: &mut ParameterTree, rng: &mut Xoshiro256PlusPlus, amount: f64) {
    let names: Vec<String> = tree.names().cloned().collect();
    for name in names {
        let t = tree.get_mut(&name).expect("listed");
        for v in t.data_mut() {
            *v += rng.gen_range(-amount..amount);
        }
    }
}

/// Build parameters with `build`, jitter them, add the named inputs and
/// check all of it.
fn check_block<B>(
    seed: u64,
    cfg: &GradcheckConfig,
    build: impl FnOnce(&mut ParamBuilder) -> B,
    inputs: &[(&str, Tensor)],
    forward: impl for<'t, 'p> Fn(&B, &Bound<'t, 'p>) -> Result<Var<'t>>,
) -> Result<GradcheckReport> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut tree = ParameterTree::new(seed);
    let block = build(&mut ParamBuilder::new(&mut tree, "b"));
    jitter(&mut tree, &mut rng, 0.1);
    for (name, t) in inputs {
        tree.insert(*name, t.clone());
    }
    check_params(&tree, |p| forward(&block, p), cfg)
}

fn flatten_pair<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let (na, nb) = (a.numel(), b.numel());
    Var::concat_last(&[a.reshape(&[na])?, b.reshape(&[nb])?])
}

/// Run one named block check.
pub fn run_block(block: &str, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let seed = cfg.seed;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed ^ 0xb10c);
    let bc = block_cfg();
    match block {
        "layer_norm" => check_block(
            seed,
            cfg,
            |pb| LayerNorm::new(pb, "ln", 6),
            &[("x", random(&mut rng, &[3, 4, 6], -1.0, 1.0))],
            |b, p| b.forward(p, p.get("x")),
        ),
        "attention" => check_fn(
            &[
                ("q".into(), random(&mut rng, &[3, 4], -1.0, 1.0)),
                ("k".into(), random(&mut rng, &[5, 4], -1.0, 1.0)),
                ("v".into(), random(&mut rng, &[5, 4], -1.0, 1.0)),
                ("lambda".into(), Tensor::scalar(1.3)),
            ],
            |_: &Tape, v| attention(v[0], v[1], v[2], v[3]),
            cfg,
        ),
        "cross_attention" => check_block(
            seed,
            cfg,
            |pb| CrossAttention::new(pb, "ca", 4, bc.token_budget),
            &[
                ("q", random(&mut rng, &[3, 4], -1.0, 1.0)),
                ("x", random(&mut rng, &[8, 8, 4], -1.0, 1.0)),
            ],
            |b, p| b.forward(p, p.get("q"), p.get("x")),
        ),
        "channel_attention" => check_block(
            seed,
            cfg,
            |pb| ChannelAttention::new(pb, "sa", 4),
            &[("x", random(&mut rng, &[4, 4, 4], -1.0, 1.0))],
            |b, p| b.forward(p, p.get("x")),
        ),
        "gffn" => check_block(
            seed,
            cfg,
            |pb| Gffn::new(pb, "ffn", 4, &bc),
            &[("x", random(&mut rng, &[4, 4, 4], -1.0, 1.0))],
            |b, p| b.forward(p, p.get("x")),
        ),
        "ss2d" => check_block(
            seed,
            cfg,
            |pb| Ss2d::new(pb, "ss", 4, 5, bc.state_dim),
            &[("x", random(&mut rng, &[3, 4, 4], -1.0, 1.0))],
            |b, p| b.forward(p, p.get("x")),
        ),
        "linear" => check_block(
            seed,
            cfg,
            |pb| Linear::new(pb, "fc", 4, 3, true),
            &[("x", random(&mut rng, &[2, 3, 4], -1.0, 1.0))],
            |b, p| b.forward(p, p.get("x")),
        ),
        "conv3x3" | "conv3x3_stride2" => {
            let stride = if block == "conv3x3" { 1 } else { 2 };
            check_block(
                seed,
                cfg,
                |pb| Conv2d::new(pb, "conv", (3, 4), 3, stride),
                &[("x", random(&mut rng, &[6, 6, 3], -1.0, 1.0))],
                |b, p| b.forward(p, p.get("x")),
            )
        }
        "dwconv3x3" => check_block(
            seed,
            cfg,
            |pb| DwConv3::new(pb, "dw", 4),
            &[("x", random(&mut rng, &[5, 6, 4], -1.0, 1.0))],
            |b, p| b.forward(p, p.get("x")),
        ),
        "irs" => check_block(
            seed,
            cfg,
            |pb| Irs::new(pb, "irs", 4, &bc),
            &[("x", random(&mut rng, &[8, 8, 4], -1.0, 1.0))],
            |b, p| {
                let (x_en, x_hf) = b.forward(p, p.get("x"))?;
                flatten_pair(x_en, x_hf)
            },
        ),
        "hf_prior" => check_block(
            seed,
            cfg,
            |pb| HfPrior::new(pb, "prior", 4),
            &[("xh", random(&mut rng, &[4, 4, 12], -1.0, 1.0))],
            |b, p| b.forward(p, p.get("xh")),
        ),
        "drs" => check_block(
            seed,
            cfg,
            |pb| (HfPrior::new(pb, "prior", 4), Drs::new(pb, "drs", 4, &bc)),
            &[
                ("xh", random(&mut rng, &[4, 4, 12], -1.0, 1.0)),
                ("x_en", random(&mut rng, &[8, 8, 4], -1.0, 1.0)),
            ],
            |(prior, drs), p| drs.forward(p, prior.forward(p, p.get("xh"))?, p.get("x_en")),
        ),
        "edrm" => check_block(
            seed,
            cfg,
            |pb| Edrm::new(pb, "edrm", 4, &bc),
            &[("x", random(&mut rng, &[8, 8, 4], -1.0, 1.0))],
            |b, p| b.forward(p, p.get("x")),
        ),
        "ecam_forward" => check_block(
            seed,
            cfg,
            |pb| Ecam::new(pb, "ecam", 4, 6, 2, &bc),
            &[
                ("x", random(&mut rng, &[8, 8, 4], -1.0, 1.0)),
                ("desc", random(&mut rng, &[6], -1.0, 1.0)),
            ],
            |b, p| b.forward(p, p.get("x"), p.get("desc")),
        ),
        "full_forward" => full_forward(seed, cfg, &mut rng),
        "total_loss" => {
            let loss = TotalLoss::default();
            check_fn(
                &[
                    ("out".into(), random(&mut rng, &[16, 16, 3], 0.05, 0.95)),
                    ("gt".into(), random(&mut rng, &[16, 16, 3], 0.05, 0.95)),
                    ("neg".into(), random(&mut rng, &[16, 16, 3], 0.05, 0.95)),
                ],
                |_: &Tape, v| Ok(loss.forward(v[0], v[1], v[2])?.0),
                cfg,
            )
        }
        "sdgm_match" => {
            let mut tree = ParameterTree::new(seed);
            let sdgm = Sdgm::new(
                &mut tree,
                SdgmConfig {
                    dim: 6,
                    ..SdgmConfig::default()
                },
            );
            jitter(&mut tree, &mut rng, 0.05);
            tree.insert("x", random(&mut rng, &[16, 16, 3], 0.0, 1.0));
            check_params(&tree, |p| sdgm.loss(p, p.get("x"), ExposureClass::Overexposed), cfg)
        }
        other => Err(crate::Error::InvalidConfig(format!("unknown gradcheck block `{other}`"))),
    }
}

/// Whole network at 16×16 with a small configuration, up to the final clamp
/// (checked on its own with the other elementwise ops). The output head is
/// redrawn at a larger scale than its near-zero training initialization so
/// upstream gradients stay well above finite-difference round-off.
fn full_forward(seed: u64, cfg: &GradcheckConfig, rng: &mut Xoshiro256PlusPlus) -> Result<GradcheckReport> {
    let (model, mut tree) = Wecdg::new(ModelConfig {
        base_channels: 4,
        unet_levels: 1,
        edrm_count: 1,
        descriptor_queries: 2,
        block: block_cfg(),
        sdgm: SdgmConfig {
            dim: 6,
            ..SdgmConfig::default()
        },
        seed,
        ..ModelConfig::default()
    })?;
    jitter(&mut tree, rng, 0.2);
    let head = tree.get_mut("net.head.w").expect("head weight");
    *head = random(rng, head.shape(), -0.3, 0.3);
    tree.insert("x", random(rng, &[16, 16, 3], 0.3, 0.7));
    tree.insert("desc", random(rng, &[6], -1.0, 1.0));
    check_params(&tree, |p| model.forward_unclamped(p, p.get("x"), p.get("desc")), cfg)
}

/// Check every block in [`BLOCKS`].
pub fn run_suite(cfg: &GradcheckConfig, mut on_block: impl FnMut(&BlockResult)) -> Result<Vec<BlockResult>> {
    let mut out = Vec::with_capacity(BLOCKS.len());
    for block in BLOCKS {
        let r = BlockResult {
            block,
            report: run_block(block, cfg)?,
        };
        on_block(&r);
        out.push(r);
    }
    Ok(out)
}
