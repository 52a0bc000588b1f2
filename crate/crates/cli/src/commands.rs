use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use wecdg::blockcheck::{run_block, run_suite, BlockResult, BLOCKS};
use wecdg::checkpoint::Checkpoint;
use wecdg::config::RunConfig;
use wecdg::data::{load_image, save_image, synth_dataset, DatasetManifest};
use wecdg::eval::{evaluate, DescriptorMode};
use wecdg::gradcheck::GradcheckConfig;
use wecdg::image::ImageBuffer;
use wecdg::params::ParameterTree;
use wecdg::pipeline::{adopt_text_embedder, Wecdg};
use wecdg::sdgm::{DescriptorLabel, ExposureClass, Sdgm};
use wecdg::tensor::Tensor;
use wecdg::train::{load_samples, train, train_descriptor_module};
use wecdg::wavelet::{dwt2, swap_subbands_raw, Band};

use crate::{Cli, Command, Mode};

/// Window for the first/last loss means in the training summary.
const SUMMARY_WINDOW: usize = 50;

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(p) = cli.precision {
        cfg.model.precision = p;
    }
    Ok(cfg)
}

fn load_restoration(path: &Path, cli: &Cli) -> Result<(Wecdg, ParameterTree)> {
    Checkpoint::load(path)?
        .into_restoration(path, cli.precision)
        .with_context(|| format!("loading {}", path.display()))
}

fn load_sdgm(path: &Path) -> Result<(Sdgm, ParameterTree)> {
    Checkpoint::load(path)?
        .into_sdgm(path)
        .with_context(|| format!("loading {}", path.display()))
}

fn fmt_probs(p: &[f64]) -> String {
    ExposureClass::ALL
        .iter()
        .zip(p)
        .map(|(c, v)| format!("p_{}={v:.6}", c.name()))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = run_config(&cli)?;
    match &cli.command {
        Command::Synth { out, count, size } => {
            let mut s = cfg.synth.clone();
            s.count = count.unwrap_or(s.count);
            s.size = size.unwrap_or(s.size);
            let m = synth_dataset(out, &s)?;
            println!(
                "wrote {} images ({} ground truths) to {}",
                m.entries.len(),
                s.count,
                out.join("manifest.json").display()
            );
        }
        Command::TrainSdgm { manifest, out, epochs } => {
            let mut tc = cfg.train.clone();
            tc.sdgm.epochs = epochs.unwrap_or(tc.sdgm.epochs);
            let samples = load_samples(&DatasetManifest::load(manifest)?)?;
            let mut params = ParameterTree::new(cfg.model.seed);
            let sdgm = Sdgm::new(&mut params, cfg.model.sdgm);
            train_descriptor_module(&sdgm, &mut params, &samples, &tc, |epoch, loss| {
                println!("epoch={epoch} loss={loss:.6}");
            })?;
            Checkpoint::sdgm(&sdgm, &params).save(out)?;
            println!("saved {}", out.display());
        }
        Command::Train {
            manifest,
            out,
            sdgm,
            steps,
            lr,
            batch,
        } => {
            let mut tc = cfg.train.clone();
            tc.steps = steps.unwrap_or(tc.steps);
            tc.lr = lr.unwrap_or(tc.lr);
            tc.batch = batch.unwrap_or(tc.batch);
            let samples = load_samples(&DatasetManifest::load(manifest)?)?;
            let (model, mut params) = Wecdg::new(cfg.model.clone())?;
            if let Some(path) = sdgm {
                let (module, sp) = load_sdgm(path)?;
                if module.config != model.config.sdgm {
                    bail!("descriptor module configuration in {} differs from the model's", path.display());
                }
                adopt_text_embedder(&mut params, &sp)?;
            }
            println!(
                "params={} samples={} steps={} lr={} batch={} seed={}",
                Wecdg::param_count(&params),
                samples.len(),
                tc.steps,
                tc.lr,
                tc.batch,
                tc.seed
            );
            let report = train(&model, &mut params, &samples, &tc, |log| println!("{log}"))?;
            if let Some((head, tail)) = report.head_tail_means(SUMMARY_WINDOW) {
                println!(
                    "summary first_mean={head:.6} last_mean={tail:.6} ratio={:.6} window={}",
                    tail / head,
                    SUMMARY_WINDOW.min(report.history.len())
                );
            }
            Checkpoint::restoration(&model, &params).save(out)?;
            println!("saved {}", out.display());
        }
        Command::Eval {
            manifest,
            checkpoint,
            mode,
            sdgm,
            json,
        } => {
            let (model, params) = load_restoration(checkpoint, &cli)?;
            let samples = load_samples(&DatasetManifest::load(manifest)?)?;
            let loaded = sdgm.as_deref().map(load_sdgm).transpose()?;
            let dm = match (mode, &loaded) {
                (Mode::Auto, Some((s, sp))) => DescriptorMode::Auto { sdgm: s, params: sp },
                _ => DescriptorMode::Manual,
            };
            let report = evaluate(&model, &params, &samples, &dm)?;
            if *json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                println!("{report}");
            }
        }
        Command::Correct {
            input,
            output,
            checkpoint,
            mode,
            descriptor,
            sdgm,
        } => {
            let (model, params) = match checkpoint {
                Some(p) => load_restoration(p, &cli)?,
                None => Wecdg::new(cfg.model.clone())?,
            };
            let img = load_image(input)?;
            let out = match mode {
                Mode::Manual => {
                    let label: DescriptorLabel = descriptor.as_deref().unwrap_or_default().parse()?;
                    println!("descriptor={label} source=manual");
                    model.correct_manual(&params, &img, label)?
                }
                Mode::Auto => {
                    let path = sdgm.as_ref().expect("clap requires --sdgm in auto mode");
                    let (module, sp) = load_sdgm(path)?;
                    let (out, d, probs) = model.correct_auto(&params, &module, &sp, &img)?;
                    println!("descriptor={} source=auto {}", d.label, fmt_probs(&probs));
                    out
                }
            };
            save_image(&out, output)?;
            println!("wrote {} ({}x{})", output.display(), out.height(), out.width());
        }
        Command::Classify { sdgm, manifest, images } => {
            let (module, sp) = load_sdgm(sdgm)?;
            let mix = module.config.mix_weight;
            let items: Vec<(PathBuf, Option<ExposureClass>)> = match manifest {
                Some(m) => {
                    let m = DatasetManifest::load(m)?;
                    m.entries
                        .iter()
                        .map(|e| (m.input_path(e), Some(e.label.class(mix))))
                        .collect()
                }
                None => images.iter().map(|p| (p.clone(), None)).collect(),
            };
            let mut correct = 0usize;
            for (path, truth) in &items {
                let (d, probs) = module.classify(&sp, &load_image(path)?)?;
                let class = d.label.dominant();
                let verdict = match truth {
                    Some(t) => {
                        correct += usize::from(*t == class);
                        format!(" expected={}", t.name())
                    }
                    None => String::new(),
                };
                println!("{} class={}{verdict} {}", path.display(), class.name(), fmt_probs(&probs));
            }
            if manifest.is_some() {
                println!(
                    "accuracy={:.6} correct={correct} total={}",
                    correct as f64 / items.len() as f64,
                    items.len()
                );
            }
        }
        Command::Decompose { input, out_dir, levels } => decompose(input, out_dir, *levels)?,
        Command::Swap { which, a, b, out_dir } => swap(*which, a, b, out_dir.as_deref())?,
        Command::Gradcheck { block, tolerance } => {
            let gc = GradcheckConfig {
                tolerance: *tolerance,
                seed: cfg.model.seed,
                ..GradcheckConfig::default()
            };
            let print = |r: &BlockResult| {
                let worst = r.report.worst();
                println!(
                    "block={} tensors={} worst_rel_err={:.3e} worst={} status={}",
                    r.block,
                    r.report.checks.len(),
                    worst.map_or(0.0, |w| w.relative_error),
                    worst.map_or("-", |w| w.name.as_str()),
                    if r.report.passed() { "pass" } else { "FAIL" }
                );
            };
            let results = match block {
                Some(b) => {
                    let name = BLOCKS
                        .iter()
                        .find(|n| **n == b.as_str())
                        .with_context(|| format!("unknown block `{b}`; known: {}", BLOCKS.join(", ")))?;
                    let r = BlockResult {
                        block: name,
                        report: run_block(name, &gc)?,
                    };
                    print(&r);
                    vec![r]
                }
                None => run_suite(&gc, print)?,
            };
            let failed: Vec<&str> = results.iter().filter(|r| !r.report.passed()).map(|r| r.block).collect();
            if !failed.is_empty() {
                eprintln!("error: gradient check failed for {}", failed.join(", "));
                return Ok(ExitCode::from(1));
            }
            println!("gradcheck passed ({} blocks, tolerance {:e})", results.len(), tolerance);
        }
        Command::Paramcount { checkpoint } => {
            let (_, params) = match checkpoint {
                Some(p) => load_restoration(p, &cli)?,
                None => Wecdg::new(cfg.model.clone())?,
            };
            let mut groups: Vec<(String, usize)> = Vec::new();
            for (name, t) in params.iter().filter(|(n, _)| Wecdg::is_network_param(n)) {
                let group = name.split('.').take(2).collect::<Vec<_>>().join(".");
                match groups.last_mut() {
                    Some((g, n)) if *g == group => *n += t.numel(),
                    _ => groups.push((group, t.numel())),
                }
            }
            for (g, n) in &groups {
                println!("{g} {n}");
            }
            let text: usize = params
                .iter()
                .filter(|(n, _)| !Wecdg::is_network_param(n))
                .map(|(_, t)| t.numel())
                .sum();
            println!("text_embedder {text}");
            println!("total {}", Wecdg::param_count(&params));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned())
}

/// Approximation bands are divided by `2^level`; detail bands are shown as
/// `0.5 + v / 2^level`.
fn decompose(input: &Path, out_dir: &Path, levels: usize) -> Result<()> {
    if levels == 0 {
        bail!("--levels must be at least 1");
    }
    let img = load_image(input)?;
    std::fs::create_dir_all(out_dir)?;
    let name = stem(input);
    let mut approx = img.pixels().clone();
    for level in 1..=levels {
        let sb = dwt2(&approx).with_context(|| format!("level {level}"))?;
        let scale = f64::powi(2.0, level as i32);
        let mut bands = vec![
            ("lh", sb.horizontal.map(|v| 0.5 + v / scale)),
            ("hl", sb.vertical.map(|v| 0.5 + v / scale)),
            ("hh", sb.diagonal.map(|v| 0.5 + v / scale)),
        ];
        if level == levels {
            bands.insert(0, ("ll", sb.approx.map(|v| v / scale)));
        }
        for (band, t) in bands {
            let path = out_dir.join(format!("{name}_l{level}_{band}.png"));
            save_image(&ImageBuffer::from_unclamped(t)?, &path)?;
            println!("wrote {}", path.display());
        }
        approx = sb.approx;
    }
    Ok(())
}

fn swap(which: Band, a: &Path, b: &Path, out_dir: Option<&Path>) -> Result<()> {
    let (ia, ib) = (load_image(a)?, load_image(b)?);
    let (oa, ob) = swap_subbands_raw(ia.pixels(), ib.pixels(), which)?;
    let mean = Tensor::mean;
    println!(
        "which={} mean_delta_a={:e} mean_delta_b={:e} donor_delta_a={:e} donor_delta_b={:e}",
        match which {
            Band::Low => "lf",
            Band::High => "hf",
        },
        mean(&oa) - mean(ia.pixels()),
        mean(&ob) - mean(ib.pixels()),
        mean(&oa) - mean(ib.pixels()),
        mean(&ob) - mean(ia.pixels()),
    );
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        for (src, t) in [(a, oa), (b, ob)] {
            let path = dir.join(format!("{}_swapped.png", stem(src)));
            save_image(&ImageBuffer::from_unclamped(t)?, &path)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}
