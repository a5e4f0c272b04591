use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use metaseg_core::analyzer::{count_attention_macs, count_params, AttentionKind, Comparison};
use metaseg_core::checkpoint;
use metaseg_core::gradsuite::{check_modules, CheckModule, DEFAULT_EPSILON};
use metaseg_core::image::{GrayImage, RgbImage};
use metaseg_core::train;
use metaseg_core::{Error, MetaSeg, ModelConfig, ParamStore, Result};

#[derive(Parser)]
#[command(name = "metaseg", version, about = "MetaSeg segmentation network: inference, cost analysis and gradient checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MixerChoice {
    Cra,
    Sra,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Kv,
}

#[derive(Subcommand)]
enum Command {
    /// Segment a binary PPM image and write the class mask as a PGM.
    Infer {
        /// Model configuration file.
        config: PathBuf,
        /// Input image (binary PPM, P6, maxval 255).
        image: PathBuf,
        /// Output class mask (binary PGM, gray value = class index).
        out_mask: PathBuf,
        /// Write one attention map per stage and head for the probe pixel.
        #[arg(long)]
        attn_dir: Option<PathBuf>,
        /// Also dump every softmax row as text next to the maps.
        #[arg(long, requires = "attn_dir")]
        attn_raw: bool,
        /// Probe pixel as ROW,COL in image coordinates (default: center).
        #[arg(long, value_parser = parse_probe)]
        probe: Option<(usize, usize)>,
        /// Load weights from a checkpoint instead of the seeded init.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Attention MAC counts at the configured input size.
    Flops {
        /// Model configuration file.
        config: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        mixer: MixerChoice,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Finite-difference gradient checks at toy dimensions.
    Gradcheck {
        /// Model configuration file.
        config: PathBuf,
        /// Restrict to one module (default: all).
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = DEFAULT_EPSILON)]
        epsilon: f64,
    },
    /// Full-batch SGD on the synthetic rectangles task.
    Toytrain {
        /// Model configuration file.
        config: PathBuf,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        lr: f64,
        /// Images in the synthetic batch.
        #[arg(long, default_value_t = 4)]
        batch: usize,
        /// Save trained weights.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Parameter counts, analytical and instantiated.
    Params {
        /// Model configuration file.
        config: PathBuf,
        /// Save the seeded initial weights.
        #[arg(long)]
        save: Option<PathBuf>,
    },
}

fn parse_probe(s: &str) -> std::result::Result<(usize, usize), String> {
    let (r, c) = s.split_once(',').ok_or("expected ROW,COL")?;
    let num = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((num(r)?, num(c)?))
}

/// What a successful command prints and how it exits.
struct Outcome {
    stdout: String,
    stderr: String,
    code: u8,
}

impl Outcome {
    fn ok(stdout: String) -> Self {
        Outcome {
            stdout,
            stderr: String::new(),
            code: 0,
        }
    }
}

fn io_error(path: &Path, err: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(err.kind(), format!("{}: {err}", path.display())))
}

fn load_config(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    ModelConfig::parse(&text)
}

fn model_and_weights(cfg: ModelConfig, weights: Option<&Path>) -> Result<(MetaSeg, ParamStore)> {
    let model = MetaSeg::new(cfg)?;
    let mut store = model.init_params()?;
    if let Some(path) = weights {
        let loaded = checkpoint::load(path)?;
        checkpoint::load_into(&mut store, &loaded)?;
    }
    Ok((model, store))
}

fn infer(
    config: &Path,
    image: &Path,
    out_mask: &Path,
    attn_dir: Option<&Path>,
    attn_raw: bool,
    probe: Option<(usize, usize)>,
    weights: Option<&Path>,
) -> Result<Outcome> {
    let cfg = load_config(config)?;
    let (model, store) = model_and_weights(cfg, weights)?;
    let img = RgbImage::read(image)?;
    model.config().check_input(img.height, img.width)?;
    let (py, px) = probe.unwrap_or((img.height / 2, img.width / 2));
    if py >= img.height || px >= img.width {
        return Err(Error::Config(format!(
            "probe {py},{px} outside {}x{} image",
            img.height, img.width
        )));
    }
    let result = model.infer(&store, &img.to_tensor())?;

    // Everything is computed before anything is written.
    let mask = GrayImage::new(
        img.width,
        img.height,
        result.mask.labels.iter().map(|&l| l.min(255) as u8).collect(),
    )?;
    let mut files: Vec<(PathBuf, Vec<u8>)> = vec![(out_mask.to_path_buf(), mask.encode_pgm())];
    if let Some(dir) = attn_dir {
        for s in &result.scores {
            let stride = 1usize << (s.stage + 1);
            let (ty, tx) = (py / stride, px / stride);
            let maps = &s.maps;
            for head in 0..maps.heads() {
                let row = maps.row(0, head, ty, tx);
                let gray = GrayImage::from_normalized(maps.kw, maps.kh, row)?;
                let stem = format!("stage{}_head{head}_y{ty}_x{tx}", s.stage);
                files.push((dir.join(format!("{stem}.pgm")), gray.encode_pgm()));
                if attn_raw {
                    files.push((dir.join(format!("stage{}_head{head}.txt", s.stage)), raw_rows(maps, head)));
                }
            }
        }
    }
    if let Some(dir) = attn_dir {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    for (path, bytes) in &files {
        std::fs::write(path, bytes).map_err(|e| io_error(path, e))?;
    }

    let mut counts = vec![0usize; model.config().num_classes];
    for &l in &result.mask.labels {
        counts[l] += 1;
    }
    let mut out = format!(
        "mask {}x{} -> {}\n",
        img.width,
        img.height,
        out_mask.display()
    );
    for (class, n) in counts.iter().enumerate() {
        let _ = writeln!(out, "class {class}: {n} pixels");
    }
    if attn_dir.is_some() {
        let _ = writeln!(out, "attention files: {}", files.len() - 1);
    }
    Ok(Outcome::ok(out))
}

/// Every softmax row of one head: a header, then one line per query token
/// with the shortest round-trip decimal of each probability.
fn raw_rows(maps: &metaseg_core::attention::ScoreMaps, head: usize) -> Vec<u8> {
    let mut s = format!(
        "# queries {}x{} keys {}x{}\n",
        maps.h, maps.w, maps.kh, maps.kw
    );
    for y in 0..maps.h {
        for x in 0..maps.w {
            let row: Vec<String> = maps.row(0, head, y, x).iter().map(|v| format!("{v:e}")).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
    }
    s.into_bytes()
}

fn flops(config: &Path, mixer: MixerChoice, format: Format) -> Result<Outcome> {
    let cfg = load_config(config)?;
    let (h, w) = (cfg.input_h, cfg.input_w);
    let render = |r: &metaseg_core::analyzer::FlopReport| match format {
        Format::Text => r.render_text(),
        Format::Kv => r.render_kv(),
    };
    let out = match mixer {
        MixerChoice::Sra => render(&count_attention_macs(&cfg, AttentionKind::Sra, h, w)),
        MixerChoice::Cra => render(&count_attention_macs(&cfg, AttentionKind::Cra, h, w)),
        MixerChoice::Both => {
            let c = Comparison::new(&cfg, h, w);
            let mut s = render(&c.sra);
            if matches!(format, Format::Text) {
                s.push('\n');
            }
            s.push_str(&render(&c.cra));
            match format {
                Format::Text => {
                    let _ = writeln!(s, "\nreduction: {:.2}% (CRA vs SRA, qk+av)", c.reduction_percent());
                }
                Format::Kv => {
                    let _ = writeln!(s, "reduction_percent={:.6}", c.reduction_percent());
                }
            }
            s
        }
    };
    Ok(Outcome::ok(out))
}

fn gradcheck(config: &Path, module: Option<&str>, epsilon: f64) -> Result<Outcome> {
    let cfg = load_config(config)?;
    let modules: Vec<CheckModule> = module.map(str::parse).transpose()?.into_iter().collect();
    let started = Instant::now();
    let checks = check_modules(&modules, &cfg, epsilon)?;
    let mut out = String::new();
    let mut failed = Vec::new();
    for check in &checks {
        let tol = check.module.tolerance();
        let _ = writeln!(
            out,
            "{:<12} max_rel_err={:.3e} tol={:.0e} {}",
            check.module.name(),
            check.report.max_error(),
            tol,
            if check.passed() { "ok" } else { "FAIL" }
        );
        for (name, e) in &check.report.entries {
            let _ = writeln!(
                out,
                "  {name:<40} {:.3e}  [{}] analytic {:.6e} numeric {:.6e}",
                e.relative, e.index, e.analytic, e.numeric
            );
        }
        failed.extend(check.failures().into_iter().map(|n| format!("{}:{n}", check.module)));
    }
    let _ = writeln!(out, "elapsed {:.2}s", started.elapsed().as_secs_f64());
    if failed.is_empty() {
        Ok(Outcome::ok(out))
    } else {
        Ok(Outcome {
            stdout: String::new(),
            stderr: format!("{out}gradient check failed for: {}\n", failed.join(", ")),
            code: 4,
        })
    }
}

fn toytrain(config: &Path, steps: usize, lr: f64, batch: usize, save: Option<&Path>) -> Result<Outcome> {
    let cfg = load_config(config)?;
    let task = train::rectangles(cfg.seed, batch, cfg.input_h, cfg.input_w)?;
    let (model, mut store) = model_and_weights(cfg, None)?;
    let mut out = String::new();
    let losses = train::train(&model, &mut store, &task, steps, lr, |step, loss| {
        let _ = writeln!(out, "step {step} loss {loss:.12}");
    })?;
    let (first, last) = train::window_means(&losses, 10);
    let _ = writeln!(out, "first10_mean {first:.12} last10_mean {last:.12}");
    if let Some(path) = save {
        checkpoint::save(&store, path)?;
    }
    if train::improved(&losses) {
        Ok(Outcome::ok(out))
    } else {
        Ok(Outcome {
            stdout: String::new(),
            stderr: format!("{out}loss did not decrease\n"),
            code: 1,
        })
    }
}

fn params(config: &Path, save: Option<&Path>) -> Result<Outcome> {
    let cfg = load_config(config)?;
    let report = count_params(&cfg);
    let (_, store) = model_and_weights(cfg, None)?;
    let instantiated = store.num_elements();
    if instantiated != report.total() {
        return Err(Error::State(format!(
            "analytical count {} disagrees with instantiated {instantiated}",
            report.total()
        )));
    }
    if let Some(path) = save {
        checkpoint::save(&store, path)?;
    }
    let mut out = report.render();
    let _ = writeln!(out, "instantiated={instantiated}");
    let _ = writeln!(out, "tensors={}", store.len());
    Ok(Outcome::ok(out))
}

fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Infer {
            config,
            image,
            out_mask,
            attn_dir,
            attn_raw,
            probe,
            weights,
        } => infer(
            &config,
            &image,
            &out_mask,
            attn_dir.as_deref(),
            attn_raw,
            probe,
            weights.as_deref(),
        ),
        Command::Flops { config, mixer, format } => flops(&config, mixer, format),
        Command::Gradcheck { config, module, epsilon } => gradcheck(&config, module.as_deref(), epsilon),
        Command::Toytrain {
            config,
            steps,
            lr,
            batch,
            save,
        } => toytrain(&config, steps, lr, batch, save.as_deref()),
        Command::Params { config, save } => params(&config, save.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(outcome) => {
            print!("{}", outcome.stdout);
            eprint!("{}", outcome.stderr);
            ExitCode::from(outcome.code)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
