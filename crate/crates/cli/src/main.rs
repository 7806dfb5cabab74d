//! `emonas`: dynamic images, cell search, training and subject-independent evaluation from
//! the command line.
//!
//! Settings resolve as built-in defaults, then the `--config` JSON file, then flags.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use emonas_core::data::{split_subjects_half, stripes, Dataset, StripesConfig};
use emonas_core::dynimg::{dynamic_image_from_frames, normalize_for_display};
use emonas_core::evaluator::{build_network, split_protocol, ModelCheckpoint};
use emonas_core::image::{is_pnm, read_pnm, write_pnm, Image};
use emonas_core::manifest::{ingest, SampleKind};
use emonas_core::nn::Model;
use emonas_core::pipeline::{aggregate, evaluate_checkpoint, run_fold, search_genotype, train_genotype, Aggregate, FoldReport};
use emonas_core::search::{continue_search, SearchCheckpoint, SearchState};
use emonas_core::{Error, Genotype, Result, RunConfig};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "emonas", version, about = "Differentiable cell search for expression recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search a cell genotype on a dataset; writes genotype.json, search_log.ndjson and checkpoint.json
    Search {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from `checkpoint.json` in the output directory; its settings win except the epoch count
        #[arg(long)]
        resume: bool,
    },
    /// Train a network for a genotype on every sample of a dataset; writes model.json
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Genotype JSON to build the network from
        #[arg(long)]
        genotype: PathBuf,
    },
    /// Subject-independent evaluation; writes metrics.json
    ///
    /// With --genotype, a fresh network is trained and tested for every fold of the protocol.
    /// With --checkpoint, the trained model is tested on the whole dataset.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        genotype: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Collapse frame sequences into display-normalized dynamic images
    Dynimg {
        /// One directory of ordered PGM/PPM frames
        #[arg(long, conflicts_with = "data", required_unless_present = "data")]
        input: Option<PathBuf>,
        /// A video dataset (`root/<subject>/<class>/<clip>/<frames>`) to convert as a whole
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output image file with --input, output dataset root with --data
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Class table, comma separated (required with --data unless set in the config)
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<String>>,
    },
    /// Print the exact number of learnable scalars of a genotype network
    Params {
        #[arg(long)]
        genotype: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        cells: Option<usize>,
        #[arg(long)]
        channels: Option<usize>,
        /// Number of classes; defaults to the length of the config's class table
        #[arg(long)]
        num_classes: Option<usize>,
        /// Input image channels (1 for PGM, 3 for PPM)
        #[arg(long, default_value_t = 1)]
        in_channels: usize,
    },
    /// Write the synthetic two-class stripes dataset as PGM files
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 4)]
        subjects: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root laid out as `<subject>/<class>/<sample>`
    #[arg(long)]
    data: PathBuf,
    /// Output directory (default: the config's out_dir)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    cells: Option<usize>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Search epochs for `search`, training epochs for `train` and `eval`
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    /// holdout or loso
    #[arg(long)]
    protocol: Option<String>,
    /// Class table, comma separated, in label order
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<String>>,
    /// Resize every sample to N×N
    #[arg(long)]
    input_size: Option<usize>,
}

#[derive(Clone, Copy, PartialEq)]
enum Stage {
    Search,
    Train,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

impl RunArgs {
    fn resolve(&self, stage: Stage) -> Result<RunConfig> {
        let mut cfg = load_config(self.config.as_deref())?;
        if let Some(v) = self.cells {
            cfg.cells = v;
        }
        if let Some(v) = self.nodes {
            cfg.nodes = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.epochs {
            match stage {
                Stage::Search => cfg.search_epochs = v,
                Stage::Train => cfg.train_epochs = v,
            }
        }
        if let Some(v) = self.channels {
            cfg.channels = v;
        }
        if let Some(p) = &self.protocol {
            cfg.protocol = p.parse()?;
        }
        if let Some(c) = &self.classes {
            cfg.classes = Some(c.clone());
        }
        if let Some(s) = self.input_size {
            cfg.input_size = Some(s);
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn class_table(cfg: &RunConfig) -> Result<Vec<String>> {
    cfg.classes
        .clone()
        .ok_or_else(|| Error::Config("a class table is required (config \"classes\" or --classes)".into()))
}

fn load_dataset(cfg: &RunConfig, root: &Path) -> Result<Dataset> {
    ingest(root, &class_table(cfg)?)?.load(cfg.input_size)
}

fn load_genotype(path: &Path) -> Result<Genotype> {
    let g = Genotype::load(path).map_err(|e| Error::Config(format!("genotype {}: {e}", path.display())))?;
    g.validate()?;
    Ok(g)
}

fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_text(&dir.join("run_config.json"), &cfg.to_json())?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_search(run: &RunArgs, resume: bool) -> Result<()> {
    let cfg = run.resolve(Stage::Search)?;
    let data = load_dataset(&cfg, &run.data)?;
    let out = prepare_out(&cfg)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let ckpt_path = out.join("checkpoint.json");
    let outcome = if resume && ckpt_path.is_file() {
        let mut state = SearchState::from_checkpoint(&SearchCheckpoint::load(&ckpt_path)?)?;
        if cfg.search_epochs < state.epoch {
            return Err(Error::Config(format!(
                "checkpoint is at epoch {} but only {} search epochs were requested",
                state.epoch, cfg.search_epochs
            )));
        }
        state.config.epochs = cfg.search_epochs;
        let (w, a) = split_subjects_half(&data, &all, state.config.seed)?;
        continue_search(state, &data, &w, &a, Some(&out))?
    } else {
        search_genotype(&cfg, &data, &all, Some(&out))?
    };
    for r in &outcome.log {
        eprintln!("epoch {:>3}  lr {:.5}  train {:.4}  val {:.4}", r.epoch, r.lr, r.train_loss, r.val_loss);
    }
    println!("{}", outcome.genotype.to_json());
    Ok(())
}

fn cmd_train(run: &RunArgs, genotype: &Path) -> Result<()> {
    let cfg = run.resolve(Stage::Train)?;
    let genotype = load_genotype(genotype)?;
    let data = load_dataset(&cfg, &run.data)?;
    let out = prepare_out(&cfg)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let ckpt = train_genotype(&cfg, &genotype, &data, &all)?;
    ckpt.save(&out.join("model.json"))?;
    let history: Vec<String> = ckpt.history.iter().map(serde_json::to_string).collect::<std::result::Result<_, _>>()?;
    write_text(&out.join("train_log.ndjson"), &(history.join("\n") + "\n"))?;
    if let Some(last) = ckpt.history.last() {
        eprintln!("epoch {:>3}  loss {:.4}  acc {:.4}", last.epoch, last.loss, last.accuracy);
    }
    let (net, _) = ckpt.restore()?;
    println!("{}", net.count_params());
    Ok(())
}

#[derive(Serialize)]
struct MetricsFile {
    protocol: String,
    folds: Vec<FoldReport>,
    aggregate: Aggregate,
}

fn cmd_eval(run: &RunArgs, genotype: Option<&Path>, checkpoint: Option<&Path>) -> Result<()> {
    let cfg = run.resolve(Stage::Train)?;
    let data = load_dataset(&cfg, &run.data)?;
    let (protocol, folds) = match (genotype, checkpoint) {
        (Some(g), _) => {
            let genotype = load_genotype(g)?;
            let protocol = cfg.protocol();
            let mut reports = Vec::new();
            for fold in split_protocol(&data, protocol, cfg.seed)? {
                let r = run_fold(&cfg, &genotype, &data, &fold)?;
                eprintln!("fold {} {:?}: accuracy {:.4} uar {:.4}", r.fold, r.test_subjects, r.accuracy, r.uar);
                reports.push(r);
            }
            (protocol.to_string(), reports)
        }
        (None, Some(c)) => {
            let ckpt = ModelCheckpoint::load(c)?;
            let all: Vec<usize> = (0..data.len()).collect();
            (String::from("checkpoint"), vec![evaluate_checkpoint(&cfg, &ckpt, &data, &all, 0, data.subjects())?])
        }
        (None, None) => return Err(Error::Config("eval needs --genotype or --checkpoint".into())),
    };
    let metrics = MetricsFile { protocol, aggregate: aggregate(&folds)?, folds };
    let out = prepare_out(&cfg)?;
    let json = serde_json::to_string_pretty(&metrics)?;
    write_text(&out.join("metrics.json"), &(json.clone() + "\n"))?;
    println!("{json}");
    Ok(())
}

fn frames_in(dir: &Path) -> Result<Vec<Image>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    paths.retain(|p| is_pnm(p));
    paths.sort();
    paths.iter().map(|p| read_pnm(p)).collect()
}

fn image_ext(image: &Image) -> &'static str {
    if image.channels == 1 {
        "pgm"
    } else {
        "ppm"
    }
}

fn cmd_dynimg(
    input: Option<&Path>,
    data: Option<&Path>,
    out: &Path,
    config: Option<&Path>,
    classes: Option<&[String]>,
) -> Result<()> {
    if let Some(dir) = input {
        let frames = frames_in(dir)?;
        let di = dynamic_image_from_frames(&frames)
            .map_err(|e| Error::Dataset(format!("{}: {e}", dir.display())))?;
        write_pnm(out, &normalize_for_display(&di.pixels))?;
        println!("{}", out.display());
        return Ok(());
    }
    let root = data.expect("clap requires --input or --data");
    let mut cfg = load_config(config)?;
    if let Some(c) = classes {
        cfg.classes = Some(c.to_vec());
    }
    let manifest = ingest(root, &class_table(&cfg)?)?;
    if manifest.kind != SampleKind::Video {
        return Err(Error::Dataset(format!("{} holds still images, not frame sequences", root.display())));
    }
    for entry in &manifest.entries {
        let clip = entry.paths[0].parent().expect("frames live in a clip directory");
        let name = clip.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let image = manifest.load_image(entry)?;
        let dir = out.join(&entry.subject).join(&manifest.classes[entry.label]);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_pnm(&dir.join(format!("{name}.{}", image_ext(&image))), &image)?;
    }
    println!("{} dynamic images written under {}", manifest.entries.len(), out.display());
    Ok(())
}

fn cmd_params(
    genotype: &Path,
    config: Option<&Path>,
    cells: Option<usize>,
    channels: Option<usize>,
    num_classes: Option<usize>,
    in_channels: usize,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    cfg.cells = cells.unwrap_or(cfg.cells);
    cfg.channels = channels.unwrap_or(cfg.channels);
    cfg.validate()?;
    let classes = match (num_classes, &cfg.classes) {
        (Some(n), _) => n,
        (None, Some(c)) => c.len(),
        (None, None) => return Err(Error::Config("params needs --num-classes or a class table in the config".into())),
    };
    let genotype = load_genotype(genotype)?;
    let (net, _) = build_network(cfg.network_config(genotype, in_channels, classes), cfg.seed)?;
    println!("{}", net.count_params());
    Ok(())
}

fn cmd_synth(out: &Path, seed: u64, samples: usize, subjects: usize, size: usize) -> Result<()> {
    let data = stripes(&StripesConfig { size, samples, subjects, ..StripesConfig::default() }, seed)?;
    let mut counter = std::collections::BTreeMap::new();
    for s in &data.samples {
        let class = &data.classes[s.label];
        let dir = out.join(&s.subject).join(class);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let k = counter.entry((s.subject.clone(), s.label)).or_insert(0usize);
        let image = Image::new(size, size, 1, s.image.data().to_vec())?;
        write_pnm(&dir.join(format!("{k:04}.pgm")), &image)?;
        *k += 1;
    }
    println!("{}", data.classes.join(","));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Search { run, resume } => cmd_search(&run, resume),
        Command::Train { run, genotype } => cmd_train(&run, &genotype),
        Command::Eval { run, genotype, checkpoint } => cmd_eval(&run, genotype.as_deref(), checkpoint.as_deref()),
        Command::Dynimg { input, data, out, config, classes } => {
            cmd_dynimg(input.as_deref(), data.as_deref(), &out, config.as_deref(), classes.as_deref())
        }
        Command::Params { genotype, config, cells, channels, num_classes, in_channels } => {
            cmd_params(&genotype, config.as_deref(), cells, channels, num_classes, in_channels)
        }
        Command::Synth { out, seed, samples, subjects, size } => cmd_synth(&out, seed, samples, subjects, size),
    }
}

/// Exit status and diagnostic tag: 2 for bad configuration, 3 for dataset and file problems,
/// 4 for numerical aborts.
fn classify(e: &Error) -> (u8, &'static str) {
    match e {
        Error::Config(_) => (2, "config"),
        Error::Json(_) => (2, "json"),
        Error::Shape(_) => (2, "shape"),
        Error::Dataset(_) => (3, "dataset"),
        Error::Image { .. } => (3, "image"),
        Error::Io { .. } => (3, "io"),
        Error::Label { .. } => (3, "label"),
        Error::Numeric(_) => (4, "numeric"),
        Error::MissingGrad(_) => (1, "internal"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, tag) = classify(&e);
            let message = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error[{tag}]: {message}");
            ExitCode::from(code)
        }
    }
}
