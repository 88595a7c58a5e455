//! `styo`: fine-tune a toy latent diffusion model on one source/target pair
//! and stylize portraits with fixed cross-attention control.

use std::fs;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use styo_core::config::{Profile, RunConfig};
use styo_core::fcc::{dump_attention, load_record, run_pipeline, run_sweep, write_outputs};
use styo_core::model::Checkpoint;
use styo_core::ppm::{read_ppm, write_ppm};
use styo_core::session::{finetune, load_images};
use styo_core::synth::{auxiliary_set, fixture_pair};
use styo_core::trainer::loss_csv;

#[derive(Parser)]
#[command(
    name = "styo",
    version,
    about = "One-shot portrait style transfer with a toy latent diffusion model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a deterministic set of synthetic auxiliary faces
    MakeAux(MakeAuxArgs),
    /// Write the bundled source/target fixture pair
    MakeFixture(MakeFixtureArgs),
    /// Fine-tune the denoiser on a source/target pair
    Finetune(FinetuneArgs),
    /// Stylize a source image with a fine-tuned checkpoint
    Stylize(StylizeArgs),
    /// Render an exported attention record as gray heatmaps
    InspectAttn(InspectArgs),
}

#[derive(Args)]
struct MakeAuxArgs {
    /// Number of images
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Side length in pixels
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MakeFixtureArgs {
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Run configuration (key = value lines)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in profile used when no config file is given
    #[arg(long, default_value = "toy")]
    profile: Profile,
    /// Override a config key, e.g. --set train.iterations=100
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Continue from a checkpoint with optimizer state
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Output directory (defaults to output.dir)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Allow the paper-scale profile
    #[arg(long)]
    i_have_a_gpu: bool,
}

#[derive(Args)]
struct StylizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Source portrait (P6); defaults to the configured source
    #[arg(long)]
    source: Option<PathBuf>,
    /// Config supplying defaults; otherwise config.txt next to the checkpoint
    #[arg(long)]
    config: Option<PathBuf>,
    /// Style identifier repetitions
    #[arg(long)]
    ns: Option<usize>,
    /// Content identifier repetitions
    #[arg(long)]
    nc: Option<usize>,
    /// Sampler steps
    #[arg(long)]
    steps: Option<usize>,
    /// Classifier-free guidance scale
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Sampler stochasticity (0 is deterministic DDIM)
    #[arg(long)]
    eta: Option<f64>,
    /// Sample the stylized prompt without attention control
    #[arg(long)]
    no_fcc: bool,
    /// Grid of repetitions, e.g. ns=1..3,nc=1..3
    #[arg(long)]
    sweep: Option<String>,
    /// Write attention heatmaps under <out>/attn
    #[arg(long)]
    dump_attn: bool,
    /// Save the recorded attention maps to this file
    #[arg(long)]
    record_export: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Allow the paper-scale profile
    #[arg(long)]
    i_have_a_gpu: bool,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    record: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = err
                .chain()
                .find_map(|e| e.downcast_ref::<styo_core::Error>())
                .map_or("cli", styo_core::Error::code);
            eprintln!("error: {code}: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeAux(a) => make_aux(a),
        Command::MakeFixture(a) => make_fixture(a),
        Command::Finetune(a) => run_finetune(a),
        Command::Stylize(a) => run_stylize(a),
        Command::InspectAttn(a) => inspect(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn make_aux(a: MakeAuxArgs) -> Result<()> {
    create_dir(&a.out)?;
    let mut manifest = format!("# synthetic auxiliary faces, seed {} size {}\n", a.seed, a.size);
    for (i, (seed, img)) in auxiliary_set(a.n, a.seed, a.size).iter().enumerate() {
        let name = format!("aux_{i:03}.ppm");
        write_ppm(a.out.join(&name), img)?;
        manifest.push_str(&format!("{name} = {seed}\n"));
    }
    write_text(&a.out.join("manifest.txt"), &manifest)?;
    println!("wrote {} images to {}", a.n, a.out.display());
    Ok(())
}

fn make_fixture(a: MakeFixtureArgs) -> Result<()> {
    create_dir(&a.out)?;
    let (src, tgt) = fixture_pair(a.size);
    write_ppm(a.out.join("source.ppm"), &src)?;
    write_ppm(a.out.join("target.ppm"), &tgt)?;
    println!("wrote source.ppm and target.ppm to {}", a.out.display());
    Ok(())
}

fn apply_overrides(cfg: &mut RunConfig, overrides: &[String]) -> Result<()> {
    let cwd = std::env::current_dir()?;
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k.trim(), v.trim(), &cwd)?;
    }
    cfg.validate()?;
    Ok(())
}

fn run_finetune(a: FinetuneArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::profile(a.profile),
    };
    apply_overrides(&mut cfg, &a.overrides)?;
    cfg.check_compute(a.i_have_a_gpu)?;
    let out = a.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    create_dir(&out)?;
    write_text(&out.join("config.txt"), &cfg.echo())?;

    let resume = a.resume.as_ref().map(Checkpoint::load).transpose()?;
    let images = load_images(&cfg)?;
    println!(
        "fine-tuning for {} iterations ({} aux images)",
        cfg.trainer.iterations,
        images.aux.len()
    );
    let outcome = finetune(&cfg, &images, resume, |ck| {
        ck.save(out.join(format!("checkpoint_{}.styo", ck.iteration)))?;
        println!("iteration {}: checkpoint written", ck.iteration);
        Ok(())
    })?;
    outcome.checkpoint.save(out.join("checkpoint.styo"))?;
    write_text(
        &out.join("loss.csv"),
        &loss_csv(&outcome.history, outcome.first_iteration),
    )?;
    let (i, f) = (&outcome.initial_eval, &outcome.final_eval);
    let summary = format!(
        "iterations = {}\nparams_hash = {}\ninitial_eval = {} {} {}\nfinal_eval = {} {} {}\neval_ratio = {}\n",
        outcome.checkpoint.iteration,
        outcome.checkpoint.model.params.hash(),
        i.src,
        i.tgt,
        i.aux,
        f.src,
        f.tgt,
        f.aux,
        f.total() / i.total(),
    );
    write_text(&out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn parse_range(raw: &str) -> Result<RangeInclusive<usize>> {
    let bad = || anyhow!("bad sweep range {raw:?}");
    let (lo, hi) = match raw.split_once("..") {
        Some((lo, hi)) => (lo.parse().map_err(|_| bad())?, hi.parse().map_err(|_| bad())?),
        None => {
            let v = raw.parse().map_err(|_| bad())?;
            (v, v)
        }
    };
    if lo == 0 || lo > hi {
        return Err(bad());
    }
    Ok(lo..=hi)
}

/// `ns=1..3,nc=1..3`; either axis may be a single value or omitted.
fn parse_sweep(raw: &str, default: (usize, usize)) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut ns = default.0..=default.0;
    let mut nc = default.1..=default.1;
    for part in raw.split(',') {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| anyhow!("sweep expects ns=A..B,nc=C..D, got {raw:?}"))?;
        match k.trim() {
            "ns" => ns = parse_range(v.trim())?,
            "nc" => nc = parse_range(v.trim())?,
            other => bail!("unknown sweep axis {other:?}"),
        }
    }
    Ok((ns.collect(), nc.collect()))
}

fn run_stylize(a: StylizeArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let sibling = a.checkpoint.with_file_name("config.txt");
    let cfg = match &a.config {
        Some(path) => Some(RunConfig::load(path)?),
        None if sibling.is_file() => Some(RunConfig::load(&sibling)?),
        None => None,
    };
    let mut sc = match &cfg {
        Some(c) => {
            c.check_compute(a.i_have_a_gpu)?;
            if c.model.identifiers != ck.model.spec.identifiers {
                return Err(styo_core::Error::CheckpointMismatch(
                    "config identifiers differ from the checkpoint".into(),
                )
                .into());
            }
            c.stylize.clone()
        }
        None => RunConfig::profile(Profile::Toy).stylize,
    };
    sc.n_s = a.ns.unwrap_or(sc.n_s);
    sc.n_c = a.nc.unwrap_or(sc.n_c);
    sc.steps = a.steps.unwrap_or(sc.steps);
    sc.guidance_scale = a.scale.unwrap_or(sc.guidance_scale);
    sc.seed = a.seed.unwrap_or(sc.seed);
    sc.eta = a.eta.unwrap_or(sc.eta);
    sc.use_fcc &= !a.no_fcc;
    sc.record_export = a.record_export.clone();

    let source = match (&a.source, &cfg) {
        (Some(p), _) => read_ppm(p)?,
        (None, Some(c)) => load_images(c)?.source,
        (None, None) => fixture_pair(64).0,
    };
    let model = &ck.model;
    match &a.sweep {
        Some(raw) => {
            let (ns, nc) = parse_sweep(raw, (sc.n_s, sc.n_c))?;
            if sc.record_export.is_some() {
                bail!("--record-export cannot be combined with --sweep");
            }
            let results = run_sweep(model, &source, &sc, &ns, &nc, &a.out, a.dump_attn)?;
            println!("wrote {} settings to {}", results.len(), a.out.display());
        }
        None => {
            let out = run_pipeline(model, &source, &sc)?;
            write_outputs(&out, &a.out, &sc, a.dump_attn)?;
            println!("wrote stylized.ppm and reconstruction.ppm to {}", a.out.display());
        }
    }
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let record = load_record(&a.record)?;
    let n = dump_attention(&record, &a.out)?;
    println!(
        "wrote {n} heatmaps ({} steps, {} layers, {} tokens) to {}",
        record.steps.len(),
        record.layers(),
        record.tokens,
        a.out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_grammar() {
        assert_eq!(parse_sweep("ns=1..3,nc=2", (3, 1)).unwrap(), (vec![1, 2, 3], vec![2]));
        assert_eq!(parse_sweep("nc=1..2", (3, 1)).unwrap(), (vec![3], vec![1, 2]));
        assert!(parse_sweep("ns=0..2", (3, 1)).is_err());
        assert!(parse_sweep("ns=3..1", (3, 1)).is_err());
        assert!(parse_sweep("k=1", (3, 1)).is_err());
    }
}
