use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use confflow::check::run_checks;
use confflow::config::Config;
use confflow::io::{
    generate_toy_dataset, import_coordinate_lists, load_dataset, sample_torsion, save_dataset, Dataset, MoleculeRecord, Provenance, Split, ToyFamily,
    ToyMetadata,
};
use confflow::metrics::{circular_wasserstein1, cov_mat_masked, summarize, MetricsReport, MetricsSummary};
use confflow::net::{load_checkpoint, save_checkpoint, MolContext, Model};
use confflow::paths::PriorSpec;
use confflow::sampler::{sample_conformers, Method, NetField};
use confflow::train::{log_likelihood, train_stage, write_loss_csv, LogLikelihood, TrainMolecule};
use confflow::zmatrix::{build_zmatrix, decompose, measure};
use confflow::{Error, Result};

#[derive(Parser)]
#[command(name = "confflow", version, about = "Manifold-decomposed flow matching for molecular conformers")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file (`key = value` lines, dotted keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the built-in oracle suites and print a pass/fail table.
    Check,
    /// Write a synthetic dataset with a known torsion distribution.
    Toygen(ToygenArgs),
    /// Write centroid, orientation and internal coordinates per conformer.
    Decompose {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert per-molecule coordinate lists (elements, bonds, conformers)
    /// into a dataset file.
    Import {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the velocity network stage by stage.
    Train(TrainArgs),
    /// Generate conformers for one molecule.
    Sample(SampleArgs),
    /// Coverage and matching scores of generated against reference sets.
    Eval(EvalArgs),
    /// Log-likelihood of conformers under a trained model.
    Loglik(LoglikArgs),
}

#[derive(Args)]
struct ToygenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_family)]
    family: Option<ToyFamily>,
    #[arg(long)]
    chain_length: Option<usize>,
    #[arg(long)]
    molecules: Option<usize>,
    #[arg(long)]
    conformers: Option<usize>,
    /// Randomly rotate and translate every conformer.
    #[arg(long)]
    random_rigid_motion: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated stages to run, in order.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    stages: Vec<u8>,
    /// Final checkpoint; per-stage checkpoints go to `<out>.stage<k>`.
    #[arg(long)]
    out: PathBuf,
    /// Resume from this checkpoint instead of fresh parameters.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Loss history; defaults to `<out>.loss.csv`.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset holding the molecular graph.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    mol_index: usize,
    /// Number of conformers; defaults to `eval.ratio` times the molecule's
    /// reference conformers.
    #[arg(long)]
    num: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    /// Integrate Cartesian coordinates instead of the decomposed state.
    #[arg(long)]
    cartesian: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    generated: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    delta: Option<f64>,
    /// Align on heavy atoms only.
    #[arg(long)]
    heavy_only: bool,
    /// Toy metadata sidecar; adds the torsion Wasserstein-1 distance to the
    /// recorded generative law.
    #[arg(long)]
    toy_meta: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LoglikArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    probes: Option<usize>,
    /// Euler steps of the likelihood integration.
    #[arg(long)]
    steps: Option<usize>,
    /// Only this molecule.
    #[arg(long)]
    mol_index: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_family(s: &str) -> std::result::Result<ToyFamily, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown toy family `{s}`"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = Config::load_or_default(cli.common.config.as_deref())?;
    if let Some(seed) = cli.common.seed {
        config.reseed(seed);
    }
    let seed = cli.common.seed.unwrap_or(config.sampler.seed);
    match cli.command {
        Command::Check => check(seed),
        Command::Toygen(a) => toygen(&config, a),
        Command::Decompose { input, out } => decompose_file(&input, &out),
        Command::Import { input, out } => import_file(&input, &out),
        Command::Train(a) => train(&config, a),
        Command::Sample(a) => sample(&config, a),
        Command::Eval(a) => eval(&config, a),
        Command::Loglik(a) => loglik(&config, seed, a),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::validation(format!("cannot create {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f = create(path)?;
    serde_json::to_writer_pretty(&mut f, value).map_err(|e| Error::Io(e.into()))?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn check(seed: u64) -> Result<()> {
    let rows = run_checks(seed)?;
    println!("{:<10} {:<34} {:>11} {:>12}  {:>8}  result", "suite", "check", "value", "tolerance", "time");
    for r in &rows {
        println!("{r}");
    }
    let failed = rows.iter().filter(|r| !r.passed()).count();
    println!("{} of {} checks passed", rows.len() - failed, rows.len());
    if failed > 0 {
        return Err(Error::numerical(format!("{failed} check(s) failed")));
    }
    Ok(())
}

fn toygen(config: &Config, a: ToygenArgs) -> Result<()> {
    let mut toy = config.toy.clone();
    if let Some(f) = a.family {
        toy.family = f;
    }
    if let Some(n) = a.chain_length {
        toy.chain_length = n;
    }
    if let Some(n) = a.molecules {
        toy.n_molecules = n;
    }
    if let Some(n) = a.conformers {
        toy.conformers_per_molecule = n;
    }
    toy.random_rigid_motion |= a.random_rigid_motion;
    let (dataset, meta) = generate_toy_dataset(&toy)?;
    save_dataset(&dataset, &a.out)?;
    let meta_path = with_suffix(&a.out, ".meta.json");
    write_json(&meta_path, &meta)?;
    println!(
        "wrote {} molecule(s), {} conformer(s) to {} (law in {})",
        dataset.molecules.len(),
        dataset.num_conformers(),
        a.out.display(),
        meta_path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct DecomposedRecord<'a> {
    molecule: usize,
    name: Option<&'a str>,
    conformer: usize,
    c: [f64; 3],
    q: [f64; 4],
    r: &'a [f64],
    theta: &'a [f64],
    phi: &'a [f64],
    clamped_angles: &'a [usize],
}

fn decompose_file(input: &Path, out: &Path) -> Result<()> {
    let dataset = load_dataset(input)?;
    let mut f = create(out)?;
    let mut count = 0;
    for (i, m) in dataset.molecules.iter().enumerate() {
        let spec = build_zmatrix(&m.graph)?;
        for (k, x) in m.conformers.iter().enumerate() {
            let d = decompose(x, &spec)?;
            let s = &d.state;
            let rec = DecomposedRecord {
                molecule: i,
                name: m.name.as_deref(),
                conformer: k,
                c: [s.c.x, s.c.y, s.c.z],
                q: s.q.as_array(),
                r: &s.z.r,
                theta: &s.z.theta,
                phi: &s.z.phi,
                clamped_angles: &d.clamped_angles,
            };
            serde_json::to_writer(&mut f, &rec).map_err(|e| Error::Io(e.into()))?;
            f.write_all(b"\n")?;
            count += 1;
        }
    }
    f.flush()?;
    println!("decomposed {count} conformer(s) into {}", out.display());
    Ok(())
}

fn import_file(input: &Path, out: &Path) -> Result<()> {
    let file = File::open(input).map_err(|e| Error::Parse {
        location: input.display().to_string(),
        message: e.to_string(),
    })?;
    let dataset = import_coordinate_lists(std::io::BufReader::new(file), &input.display().to_string())?;
    save_dataset(&dataset, out)?;
    println!(
        "imported {} molecule(s), {} conformer(s) into {}",
        dataset.molecules.len(),
        dataset.num_conformers(),
        out.display()
    );
    Ok(())
}

fn train(config: &Config, a: TrainArgs) -> Result<()> {
    let dataset = load_dataset(&a.data)?;
    let data: Vec<TrainMolecule> = dataset
        .split(Split::Train)
        .map(|m| TrainMolecule::from_conformers(&m.graph, &m.conformers))
        .collect::<Result<_>>()?;
    if data.is_empty() {
        return Err(Error::validation(format!("{} has no training molecules", a.data.display())));
    }
    if a.stages.is_empty() {
        return Err(Error::validation("no stages requested"));
    }
    let mut model = match &a.init {
        Some(p) => load_checkpoint(p)?,
        None => Model::new(config.net.clone())?,
    };
    let opts = config.train_options();
    let loss_path = a.loss_csv.clone().unwrap_or_else(|| with_suffix(&a.out, ".loss.csv"));
    let mut history = Vec::new();
    for &k in &a.stages {
        let stage = config.stage(k)?;
        log::info!("stage {k}: {} epoch(s), learning rate {:e}", stage.epochs, stage.learning_rate);
        let outcome = train_stage(stage, &opts, &data, &model);
        let outcome = match outcome {
            Ok(o) => o,
            Err(e) => {
                write_loss_file(&loss_path, &history)?;
                return Err(e);
            }
        };
        model = outcome.model;
        if let Some(last) = outcome.history.last() {
            log::info!("stage {k}: {} step(s), final total {:e}", outcome.history.len(), last.total);
        }
        history.extend(outcome.history);
        let path = with_suffix(&a.out, &format!(".stage{k}"));
        save_checkpoint(&model, &path)?;
        write_loss_file(&loss_path, &history)?;
    }
    save_checkpoint(&model, &a.out)?;
    println!(
        "trained stages {:?} on {} molecule(s); checkpoint {}, losses {}",
        a.stages,
        data.len(),
        a.out.display(),
        loss_path.display()
    );
    Ok(())
}

fn write_loss_file(path: &Path, history: &[confflow::train::LossRecord]) -> Result<()> {
    let mut f = create(path)?;
    write_loss_csv(history, &mut f)?;
    f.flush()?;
    Ok(())
}

/// The prior a checkpoint was trained with, falling back to the config.
fn model_prior<'a>(model: &'a Model, config: &'a Config) -> &'a PriorSpec {
    model.prior.as_ref().unwrap_or(&config.prior)
}

fn pick<'a>(dataset: &'a Dataset, index: usize, path: &Path) -> Result<&'a MoleculeRecord> {
    dataset.molecules.get(index).ok_or_else(|| {
        Error::validation(format!(
            "molecule index {index} out of range: {} has {} molecule(s)",
            path.display(),
            dataset.molecules.len()
        ))
    })
}

fn sample(config: &Config, a: SampleArgs) -> Result<()> {
    let model = load_checkpoint(&a.ckpt)?;
    let dataset = load_dataset(&a.data)?;
    let mol = pick(&dataset, a.mol_index, &a.data)?;
    let ctx = MolContext::new(&mol.graph)?;
    let mut sc = config.sampler.clone();
    if let Some(s) = a.steps {
        sc.steps = s;
    }
    if let Some(m) = a.method {
        sc.method = m;
    }
    sc.cartesian |= a.cartesian;
    let num = a.num.unwrap_or(config.eval.ratio * mol.conformers.len().max(1));
    let field = NetField { model: &model, ctx: &ctx };
    let conformers = sample_conformers(&field, &ctx, num, &sc, model_prior(&model, config))?;
    let provenance = (0..num)
        .map(|draw| Provenance {
            seed: sc.seed,
            steps: sc.steps,
            method: sc.method.to_string(),
            draw,
        })
        .collect();
    let out = Dataset {
        molecules: vec![MoleculeRecord {
            name: mol.name.clone(),
            split: Split::Test,
            graph: mol.graph.clone(),
            conformers,
            provenance,
        }],
    };
    save_dataset(&out, &a.out)?;
    println!("wrote {num} conformer(s) to {} ({}, {} steps)", a.out.display(), sc.method, sc.steps);
    Ok(())
}

#[derive(Serialize)]
struct MoleculeScore {
    name: Option<String>,
    #[serde(flatten)]
    report: MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    torsion_w1: Option<f64>,
}

#[derive(Serialize)]
struct EvalReport {
    delta: f64,
    heavy_only: bool,
    molecules: Vec<MoleculeScore>,
    summary: MetricsSummary,
}

/// Reference molecule for generated molecule `i`: same name when both carry
/// one, same position otherwise.
fn match_reference<'a>(reference: &'a Dataset, gen: &MoleculeRecord, i: usize) -> Result<&'a MoleculeRecord> {
    let by_name = gen
        .name
        .as_ref()
        .and_then(|n| reference.molecules.iter().find(|r| r.name.as_ref() == Some(n)));
    by_name
        .or_else(|| reference.molecules.get(i))
        .ok_or_else(|| Error::validation(format!("no reference molecule for generated molecule {i}")))
}

fn torsion_sample(meta: &ToyMetadata, draws: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..draws).map(|_| sample_torsion(&meta.config.torsion_modes, &mut rng)).collect()
}

fn eval(config: &Config, a: EvalArgs) -> Result<()> {
    let generated = load_dataset(&a.generated)?;
    let reference = load_dataset(&a.reference)?;
    let delta = a.delta.unwrap_or(config.eval.delta);
    let heavy_only = a.heavy_only || config.eval.heavy_only;
    let meta: Option<ToyMetadata> = match &a.toy_meta {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            Some(serde_json::from_str(&text).map_err(|e| Error::Parse {
                location: p.display().to_string(),
                message: e.to_string(),
            })?)
        }
        None => None,
    };
    let truth = meta.as_ref().map(|m| torsion_sample(m, 10_000, m.config.seed.wrapping_add(1)));

    let mut scores = Vec::new();
    for (i, gen) in generated.molecules.iter().enumerate() {
        let refm = match_reference(&reference, gen, i)?;
        if refm.graph.num_atoms() != gen.graph.num_atoms() {
            return Err(Error::validation(format!(
                "generated molecule {i} has {} atoms, its reference {}",
                gen.graph.num_atoms(),
                refm.graph.num_atoms()
            )));
        }
        let mask: Vec<bool> = refm.graph.atoms.iter().map(|a| a.is_heavy()).collect();
        let report = cov_mat_masked(&gen.conformers, &refm.conformers, delta, heavy_only.then_some(&mask[..]))?;
        let torsion_w1 = match &truth {
            Some(t) => {
                let spec = build_zmatrix(&gen.graph)?;
                let phis: Vec<f64> = gen.conformers.iter().flat_map(|x| measure(x, &spec).phi).collect();
                if phis.is_empty() {
                    None
                } else {
                    Some(circular_wasserstein1(&phis, t)?)
                }
            }
            None => None,
        };
        scores.push(MoleculeScore {
            name: gen.name.clone(),
            report,
            torsion_w1,
        });
    }
    let reports: Vec<MetricsReport> = scores.iter().map(|s| s.report.clone()).collect();
    let summary = summarize(&reports)?;

    println!("{:<16} {:>8} {:>8} {:>8} {:>8} {:>10}", "molecule", "COV-R", "MAT-R", "COV-P", "MAT-P", "torsion W1");
    for (i, s) in scores.iter().enumerate() {
        let r = &s.report;
        let name = s.name.clone().unwrap_or_else(|| format!("#{i}"));
        let w = s.torsion_w1.map(|w| format!("{w:.4}")).unwrap_or_else(|| "-".into());
        println!("{name:<16} {:>8.2} {:>8.4} {:>8.2} {:>8.4} {w:>10}", r.cov_r, r.mat_r, r.cov_p, r.mat_p);
    }
    for (label, row) in [("mean", &summary.mean), ("median", &summary.median)] {
        println!("{label:<16} {:>8.2} {:>8.4} {:>8.2} {:>8.4}", row.cov_r, row.mat_r, row.cov_p, row.mat_p);
    }
    if let Some(out) = &a.out {
        write_json(
            out,
            &EvalReport {
                delta,
                heavy_only,
                molecules: scores,
                summary,
            },
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct MoleculeLikelihood {
    index: usize,
    name: Option<String>,
    mean_log_likelihood: f64,
    conformers: Vec<LogLikelihood>,
}

fn loglik(config: &Config, seed: u64, a: LoglikArgs) -> Result<()> {
    let model = load_checkpoint(&a.ckpt)?;
    let dataset = load_dataset(&a.data)?;
    let probes = a.probes.unwrap_or(config.stage3.probes);
    let steps = a.steps.unwrap_or(config.stage3.ode_steps);
    if probes == 0 || steps == 0 {
        return Err(Error::validation("probes and steps must be at least 1"));
    }
    let prior = model_prior(&model, config);
    let indices: Vec<usize> = match a.mol_index {
        Some(i) => {
            pick(&dataset, i, &a.data)?;
            vec![i]
        }
        None => (0..dataset.molecules.len()).collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for i in indices {
        let m = &dataset.molecules[i];
        let ctx = MolContext::new(&m.graph)?;
        let values = m
            .conformers
            .iter()
            .map(|x| log_likelihood(&model, &ctx, x, steps, probes, prior, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        if values.is_empty() {
            continue;
        }
        let mean = values.iter().map(|v| v.log_likelihood).sum::<f64>() / values.len() as f64;
        println!(
            "{:<16} {:>6} conformer(s)  mean log-likelihood {mean:.4}",
            m.name.clone().unwrap_or_else(|| format!("#{i}")),
            values.len()
        );
        out.push(MoleculeLikelihood {
            index: i,
            name: m.name.clone(),
            mean_log_likelihood: mean,
            conformers: values,
        });
    }
    if let Some(p) = &a.out {
        write_json(p, &out)?;
    }
    Ok(())
}
