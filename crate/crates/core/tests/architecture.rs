//! Parameter counts recomputed from layer shapes.

use wecdg::nn::BlockConfig;
use wecdg::pipeline::{ModelConfig, Wecdg};
use wecdg::sdgm::SdgmConfig;

fn linear(i: usize, o: usize, bias: bool) -> usize {
    i * o + if bias { o } else { 0 }
}

fn conv(k: usize, i: usize, o: usize) -> usize {
    k * k * i * o + o
}

fn layer_norm(c: usize) -> usize {
    2 * c
}

fn dwconv(c: usize) -> usize {
    9 * c + c
}

fn gffn(c: usize, e: f64) -> usize {
    let h = (c as f64 * e).ceil() as usize;
    layer_norm(c) + linear(c, 2 * h, false) + dwconv(2 * h) + linear(h, c, false)
}

fn ecam(c: usize, d: usize, t: usize, e: f64) -> usize {
    let dca = layer_norm(c) + linear(d, t * c, true) + 2 * c * c + 1 + linear(t * c, c, true);
    let sa = layer_norm(c) + 3 * c * c + 1 + c * c;
    dca + sa + gffn(c, e)
}

fn edrm(c: usize, e: f64, n: usize) -> usize {
    let h = (c as f64 * e).ceil() as usize;
    let ss2d = linear(h, h, true) + 3 * h * n + h + h * c;
    let irs = linear(c, h, true) + dwconv(h) + ss2d + layer_norm(c) + linear(c, c, true) + gffn(c, e) + linear(3 * c, 3 * c, true);
    let prior = linear(3 * c, 3 * c, true) + linear(3 * c, c, true) + layer_norm(c);
    let drs = c * c + 2 * c * c + 1 + layer_norm(c) + linear(c, c, true) + gffn(c, e);
    irs + prior + drs
}

fn expected(cfg: &ModelConfig) -> usize {
    let (c0, e, n) = (cfg.base_channels, cfg.block.expansion, cfg.block.state_dim);
    let widths: Vec<usize> = (0..=cfg.unet_levels).map(|i| c0 << i).collect();
    let mut total = conv(3, 3, c0) + 2 * ecam(c0, cfg.sdgm.dim, cfg.descriptor_queries, e) + conv(3, c0, 3);
    for i in 0..cfg.unet_levels {
        total += conv(3, widths[i], widths[i + 1]);
        total += linear(widths[i + 1] + widths[i], widths[i], true);
    }
    total + cfg.edrm_count * edrm(widths[cfg.unet_levels], e, n)
}

#[test]
fn default_config_golden_count() {
    let cfg = ModelConfig::default();
    let (_, params) = Wecdg::new(cfg.clone()).unwrap();
    assert_eq!(expected(&cfg), 835_947);
    assert_eq!(Wecdg::param_count(&params), 835_947);
}

#[test]
fn counts_follow_shapes_across_configs() {
    for (c0, levels, n_edrm, state, t, dim, e) in [
        (8, 2, 2, 4, 4, 50, 2.0),
        (4, 1, 1, 3, 2, 6, 2.0),
        (6, 3, 3, 2, 3, 10, 1.5),
        (16, 1, 4, 8, 1, 32, 2.66),
    ] {
        let cfg = ModelConfig {
            base_channels: c0,
            unet_levels: levels,
            edrm_count: n_edrm,
            descriptor_queries: t,
            block: BlockConfig {
                expansion: e,
                state_dim: state,
                ..BlockConfig::default()
            },
            sdgm: SdgmConfig {
                dim,
                ..SdgmConfig::default()
            },
            ..ModelConfig::default()
        };
        let (_, params) = Wecdg::new(cfg.clone()).unwrap();
        assert_eq!(Wecdg::param_count(&params), expected(&cfg), "{cfg:?}");
    }
}
