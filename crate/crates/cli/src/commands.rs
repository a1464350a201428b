use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dualglow::checkpoint;
use dualglow::complexity;
use dualglow::data::{generate, Dataset, DatasetSpec, GeneratorKind};
use dualglow::dgt;
use dualglow::metrics::MetricReport;
use dualglow::nn::perturb;
use dualglow::side::{label_matrix, SideLabel};
use dualglow::train::{train, TrainEvent, TrainLog};
use dualglow::verify::{verify_model, Fault, VerifyOptions};
use dualglow::{DualGlowModel, RunConfig, SideConfig, SideKind, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::args::{
    Cli, Command, Common, ComplexityArgs, EvaluateArgs, FaultArg, GenDataArgs, InitArg, SampleArgs, SideArg,
    TrainArgs, VerifyArgs,
};
use crate::{montage, UsageError, VerificationFailed};

pub fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    match &cli.command {
        Command::GenData(a) => gen_data(c, a),
        Command::Train(a) => train_cmd(c, a),
        Command::Sample(a) => sample(c, a),
        Command::Evaluate(a) => evaluate(c, a),
        Command::Verify(a) => verify(c, a),
        Command::Complexity(a) => complexity_cmd(c, a),
    }
}

/// Fails if any global flag outside `allowed` was given.
fn only(common: &Common, command: &str, allowed: &[&str]) -> Result<()> {
    let given = [
        ("config", common.config.is_some()),
        ("seed", common.seed.is_some()),
        ("out", common.out.is_some()),
        ("levels", common.levels.is_some()),
        ("depth", common.depth.is_some()),
        ("lambda", common.lambda.is_some()),
        ("w-cls", common.w_cls.is_some()),
        ("temperature", common.temperature.is_some()),
        ("side-label", common.side_label.is_some()),
    ];
    for (name, set) in given {
        if set && !allowed.contains(&name) {
            return Err(UsageError(format!("--{name} does not apply to {command}")).into());
        }
    }
    Ok(())
}

fn out_dir(common: &Common, default: &str) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// The configuration file (or the defaults) with command-line overrides applied.
fn resolve_run(common: &Common) -> Result<RunConfig> {
    let mut run = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            RunConfig::parse(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        run.seed = s;
    }
    if let Some(l) = common.levels {
        run.model.flow.levels = l;
    }
    if let Some(d) = common.depth {
        run.model.flow.depth = d;
    }
    if let Some(l) = common.lambda {
        run.model.lambda = l;
    }
    if let Some(w) = common.w_cls {
        run.model.side.w_cls = w;
    }
    Ok(run)
}

fn print_resolved(title: &str, seed: u64, body: &str) {
    println!("# {title}");
    println!("# seed = {seed}");
    print!("{body}");
    if !body.ends_with('\n') {
        println!();
    }
    println!("# ---");
}

fn gen_data(common: &Common, a: &GenDataArgs) -> Result<()> {
    only(common, "gen-data", &["seed", "out", "levels"])?;
    let spec = DatasetSpec {
        kind: GeneratorKind::parse(&a.kind)?,
        n_samples: a.count,
        image: a.image,
        noise_std: a.noise_std,
        seed: common.seed.unwrap_or(0),
        levels: common.levels.unwrap_or(3),
    };
    spec.validate()?;
    print_resolved("gen-data", spec.seed, &toml::to_string(&spec)?);
    let ds = generate(&spec)?;
    let dir = out_dir(common, "data")?;
    ds.save(&dir)?;
    println!("wrote {} pairs to {}", ds.len(), dir.display());
    Ok(())
}

fn side_config(base: &SideConfig, arg: Option<SideArg>, classes: Option<usize>) -> SideConfig {
    let mut side = base.clone();
    if let Some(arg) = arg {
        side.kind = match arg {
            SideArg::None => SideKind::None,
            SideArg::Continuous => SideKind::Continuous,
            SideArg::Categorical => SideKind::Categorical,
        };
    }
    if let Some(k) = classes {
        side.classes = k;
    }
    side
}

fn train_cmd(common: &Common, a: &TrainArgs) -> Result<()> {
    only(common, "train", &["config", "seed", "out", "levels", "depth", "lambda", "w-cls"])?;
    let ds = Dataset::load(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    let mut run = resolve_run(common)?;
    if common.config.is_none() {
        run.model.flow.input = ds.image_shape();
    }
    if let Some(h) = a.hidden {
        run.model.flow.hidden = h;
    }
    run.model.side = side_config(&run.model.side, a.side, a.classes);
    if let Some(e) = a.epochs {
        run.train.epochs = e;
    }
    if let Some(b) = a.batch_size {
        run.train.batch_size = b;
    }
    if a.max_steps.is_some() {
        run.train.max_steps = a.max_steps;
    }
    run.validate()?;
    print_resolved("train", run.seed, &run.to_toml());
    if ds.c.is_some() && !run.model.side.enabled() {
        println!("note: dataset labels are unused because side information is off");
    }
    let dir = out_dir(common, "run")?;
    fs::write(dir.join("config.toml"), run.to_toml())?;

    let mut model = DualGlowModel::<f32>::new(run.model.clone(), run.seed)?;
    let mut log = TrainLog::default();
    let mut save_error = None;
    let result = train(&mut model, &ds, &run.train, run.seed, &mut log, |event| match event {
        TrainEvent::Epoch(e) => eprintln!(
            "epoch {:>3}  loss {:>12.5}  bits/dim {:>9.5}",
            e.epoch, e.mean_loss, e.mean_bits_per_dim
        ),
        TrainEvent::Checkpoint { epoch, model } => {
            let path = dir.join(format!("checkpoint-epoch-{epoch:03}"));
            if let Err(e) = checkpoint::save(&path, model, &run) {
                save_error.get_or_insert(e);
            }
        }
        TrainEvent::Step(_) => {}
    });
    fs::write(dir.join("steps.csv"), log.steps_csv())?;
    fs::write(dir.join("epochs.csv"), log.epochs_csv())?;
    result.context("training stopped")?;
    if let Some(e) = save_error {
        return Err(e).context("writing an intermediate checkpoint");
    }
    checkpoint::save(dir.join("checkpoint"), &model, &run)?;
    let last = log.epochs.last();
    println!(
        "trained {} steps; final epoch bits/dim {}; checkpoint at {}",
        log.steps.len(),
        last.map_or("n/a".into(), |e| format!("{:.5}", e.mean_bits_per_dim)),
        dir.join("checkpoint").display()
    );
    Ok(())
}

/// Side labels for `n` samples: the `--side-label` override, else the
/// dataset's own labels.
fn labels_for(
    model: &DualGlowModel<f32>,
    override_label: Option<&str>,
    ds: Option<&Dataset>,
    n: usize,
) -> Result<Option<Tensor<f32>>> {
    let side = &model.config.side;
    if !side.enabled() {
        if override_label.is_some() {
            return Err(UsageError("--side-label given but the model takes no side information".into()).into());
        }
        return Ok(None);
    }
    if let Some(text) = override_label {
        let label = SideLabel::parse(text, side)?;
        return Ok(Some(label_matrix(&vec![label; n], side)?));
    }
    match ds.map(|d| d.side_matrix(side)).transpose()?.flatten() {
        Some(c) => Ok(Some(c)),
        None => Err(UsageError("the model needs side labels: pass --side-label or a labelled dataset".into()).into()),
    }
}

fn sample(common: &Common, a: &SampleArgs) -> Result<()> {
    only(common, "sample", &["seed", "out", "temperature", "side-label"])?;
    let (model, run) = checkpoint::load::<f32>(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let seed = common.seed.unwrap_or(run.seed);
    let temperature = common.temperature.unwrap_or(0.0);
    let ds = a.data.as_ref().map(Dataset::load).transpose()?;
    let x_m = match (&ds, &a.input) {
        (Some(d), _) => d.x_m.clone(),
        (None, Some(p)) => dgt::read_file::<f32>(p)?,
        (None, None) => unreachable!("clap requires --data or --input"),
    };
    let n = x_m.dims4()?.0;
    let c = labels_for(&model, common.side_label.as_deref(), ds.as_ref(), n)?;
    let body = format!(
        "temperature = {temperature}\nsamples = {n}\nside_label = {:?}\n{}",
        common.side_label.as_deref().unwrap_or("from dataset"),
        run.to_toml()
    );
    print_resolved("sample", seed, &body);
    let out = match &c {
        Some(c) => model.conditional_sample(&x_m, c, temperature, seed)?,
        None => model.sample_pet(&x_m, temperature, seed)?,
    };
    let dir = out_dir(common, "samples")?;
    dgt::write_file(dir.join("samples.dgt"), &out)?;
    if a.montage_rows > 0 {
        let columns: Vec<&Tensor<f32>> = match &ds {
            Some(d) => vec![&x_m, &d.x_p, &out],
            None => vec![&x_m, &out],
        };
        montage::write(&dir.join("montage.png"), &columns, a.montage_rows)?;
    }
    println!("wrote {n} samples to {}", dir.join("samples.dgt").display());
    Ok(())
}

#[derive(Serialize)]
struct MetricRow {
    index: usize,
    mae: f64,
    psnr: f64,
    ssim: f64,
    corcoef: f64,
}

fn write_metrics(path: &Path, report: &MetricReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (index, m) in report.per_sample.iter().enumerate() {
        w.serialize(MetricRow {
            index,
            mae: m.mae,
            psnr: m.psnr,
            ssim: m.ssim,
            corcoef: m.corcoef,
        })?;
    }
    w.flush()?;
    Ok(())
}

fn evaluate(common: &Common, a: &EvaluateArgs) -> Result<()> {
    only(common, "evaluate", &["seed", "out"])?;
    let seed = common.seed.unwrap_or(0);
    print_resolved(
        "evaluate",
        seed,
        &format!("pred = {:?}\ndata = {:?}\n", a.pred.display().to_string(), a.data.display().to_string()),
    );
    let pred = dgt::read_file::<f32>(&a.pred)?;
    let ds = Dataset::load(&a.data)?;
    let report = MetricReport::evaluate(&pred, &ds.x_p).context("scoring predictions")?;
    let dir = out_dir(common, "eval")?;
    write_metrics(&dir.join("metrics.csv"), &report)?;
    fs::write(dir.join("summary.csv"), report.summary_csv())?;
    if a.montage_rows > 0 {
        montage::write(&dir.join("montage.png"), &[&ds.x_m, &ds.x_p, &pred], a.montage_rows)?;
    }
    println!("samples  {}", report.count);
    println!("mae      {}", report.mae);
    println!("psnr     {}", report.psnr);
    println!("ssim     {}", report.ssim);
    println!("corcoef  {}", report.corcoef);
    Ok(())
}

fn verify(common: &Common, a: &VerifyArgs) -> Result<()> {
    let (mut model, run) = match &a.checkpoint {
        Some(path) => {
            only(common, "verify --checkpoint", &["seed", "out"])?;
            checkpoint::load::<f64>(path).with_context(|| format!("loading checkpoint {}", path.display()))?
        }
        None => {
            only(common, "verify", &["config", "seed", "out", "levels", "depth", "lambda", "w-cls"])?;
            let mut run = resolve_run(common)?;
            if common.config.is_none() {
                run.model.flow.input = a.dims;
                run.model.flow.levels = common.levels.unwrap_or(2);
                run.model.flow.depth = common.depth.unwrap_or(1);
                run.model.flow.hidden = 4;
            }
            run.validate()?;
            (DualGlowModel::<f64>::new(run.model.clone(), run.seed)?, run)
        }
    };
    let seed = common.seed.unwrap_or(run.seed);
    if a.checkpoint.is_none() && a.init == InitArg::Random {
        perturb(&mut model, &mut ChaCha8Rng::seed_from_u64(seed), a.perturb);
    }
    let body = format!(
        "init = {:?}\nfault = {:?}\nsamples = {}\ngrad_coords = {}\n{}",
        if a.checkpoint.is_some() { "checkpoint" } else if a.init == InitArg::Zero { "zero" } else { "random" },
        a.fault.map_or("none", |_| "negate-shift"),
        a.samples,
        a.grad_coords,
        RunConfig { model: model.config.clone(), ..run }.to_toml()
    );
    print_resolved("verify", seed, &body);
    let elements: usize = model.config.flow.input.iter().product();
    if elements > dualglow::gradcheck::MAX_JACOBIAN_INPUTS {
        println!(
            "note: log-det checks skipped, input has {elements} elements (limit {})",
            dualglow::gradcheck::MAX_JACOBIAN_INPUTS
        );
    }
    let opts = VerifyOptions {
        seed,
        samples: a.samples,
        grad_coords: (a.grad_coords > 0).then_some(a.grad_coords),
        fault: a.fault.map(|f| match f {
            FaultArg::NegateShift => Fault::NegateShift,
        }),
    };
    let report = verify_model(&model, &opts)?;
    print!("{}", report.to_text());
    if let Some(dir) = &common.out {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("verify.csv"))?;
        for c in &report.checks {
            w.serialize(c)?;
        }
        w.flush()?;
    }
    let failed = report.failures().count();
    if failed > 0 {
        for c in report.failures() {
            eprintln!("failed: {} (observed {:.3e}, tolerance {:.0e})", c.name, c.observed, c.tolerance);
        }
        return Err(VerificationFailed(failed).into());
    }
    println!("all {} checks passed", report.checks.len());
    Ok(())
}

fn complexity_cmd(common: &Common, a: &ComplexityArgs) -> Result<()> {
    only(common, "complexity", &["seed", "out", "levels"])?;
    let levels = common.levels.unwrap_or(6);
    if levels == 0 {
        return Err(UsageError("--levels must be at least 1".into()).into());
    }
    print_resolved(
        "complexity",
        common.seed.unwrap_or(0),
        &format!("levels = {levels}\nbase = {}\n", a.base),
    );
    let rows = complexity::report(1..=levels, a.base)?;
    let csv = complexity::report_csv(&rows);
    print!("{csv}");
    if let Some(dir) = &common.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("complexity.csv"), &csv)?;
    }
    if let Some(r) = rows.iter().find(|r| !r.matches_formulas()) {
        return Err(VerificationFailed(1)).with_context(|| format!("counts for {} levels differ from the formulas", r.levels));
    }
    Ok(())
}
