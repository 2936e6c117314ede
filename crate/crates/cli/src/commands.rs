use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nnkit::adversarial::{robustness_report, AttackConfig, AttackMode};
use nnkit::data::{load_mnist, Dataset, MnistFiles};
use nnkit::model::{
    evaluate, parse_convention, prepare_data, train_with_progress, Checkpoint, Dtype, Model, ModelSpec,
};
use nnkit::{parallel, Error, Mode};

use crate::{AttackArgs, Command, Common, CountArgs, DtypeArg, EvalArgs, ExtractArgs, InspectArgs, SplitArg, TrainArgs};

/// Failure with its exit status: 1 for usage and configuration problems,
/// 2 for missing files, bad data and other runtime failures.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::Build(_) | Error::InvalidArgument(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::CountParams(a) => count_params(a),
        Command::Extract(a) => extract(a),
        Command::Attack(a) => attack(a),
        Command::InspectData(a) => inspect(a),
    }
}

/// Parses the config and applies command-line overrides. Nothing is read
/// besides the config file.
fn load_spec(c: &Common) -> Result<ModelSpec> {
    let text = std::fs::read_to_string(&c.config).map_err(|e| io_err(&c.config, e))?;
    let mut spec: ModelSpec = text
        .parse()
        .map_err(|e: Error| usage(format!("{}: {e}", c.config.display())))?;
    if let Some(seed) = c.seed {
        spec.train.seed = seed;
    }
    if let Some(conv) = &c.dropout_convention {
        spec.train.dropout_convention = parse_convention(conv).map_err(usage)?;
    }
    if c.threads == 0 {
        return Err(usage("--threads must be at least 1"));
    }
    parallel::set_threads(c.threads);
    Ok(spec)
}

fn require_file(path: &Path) -> Result<()> {
    match path.is_file() {
        true => Ok(()),
        false => Err(CliError::Data(format!("{}: file not found", path.display()))),
    }
}

/// An output path must not be a directory and its parent must exist.
fn check_output(path: &Path) -> Result<()> {
    if path.is_dir() {
        return Err(usage(format!("{} is a directory", path.display())));
    }
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => {
            Err(CliError::Data(format!("{}: directory not found", dir.display())))
        }
        _ => Ok(()),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn check_input_shape(spec: &ModelSpec, data: &Dataset) -> Result<()> {
    if data.image_shape() != spec.input {
        return Err(usage(format!(
            "config input {:?} does not match the data's image shape {:?}",
            spec.input,
            data.image_shape()
        )));
    }
    Ok(())
}

fn pick(split: SplitArg, train: Dataset, test: Dataset) -> Dataset {
    match split {
        SplitArg::Train => train,
        SplitArg::Test => test,
    }
}

/// Builds the spec's model and fills it from a checkpoint.
fn restore(spec: &ModelSpec, checkpoint: &Path) -> Result<Model> {
    let mut model = Model::build(spec)?;
    model.load_state(&Checkpoint::load(checkpoint)?, &[])?;
    model.set_mode(Mode::Eval);
    Ok(model)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut spec = load_spec(&a.common)?;
    if let Some(iters) = a.iters {
        spec.train.iters = iters;
    }
    if !a.replace.is_empty() && a.checkpoint_in.is_none() {
        return Err(usage("--replace only applies together with --checkpoint-in"));
    }
    let mut model = Model::build(&spec)?;
    if let Some(&i) = a.replace.iter().find(|&&i| i >= model.len()) {
        return Err(usage(format!("--replace {i}: the model has {} layers", model.len())));
    }
    if let Some(n) = a.freeze_below {
        model.freeze_below(n, &a.replace)?;
    }
    MnistFiles::in_dir(&a.common.data_dir)?;
    if let Some(p) = &a.checkpoint_in {
        require_file(p)?;
    }
    check_output(&a.checkpoint_out)?;
    if let Some(p) = &a.metrics_out {
        check_output(p)?;
    }

    let (train_set, test_set) = load_mnist(&a.common.data_dir)?;
    check_input_shape(&spec, &train_set)?;
    if let Some(p) = &a.checkpoint_in {
        model.load_state(&Checkpoint::load(p)?, &a.replace)?;
    }
    println!(
        "training {} parameters for {} iterations ({} optimizer, batch {})",
        model.param_count(),
        spec.train.iters,
        spec.train.optimizer.kind.name(),
        spec.train.batch
    );
    let report = train_with_progress(&mut model, &spec.train, &train_set, Some(&test_set), |p, loss| {
        let test = p.test_acc.map(|a| format!(" test_acc {a:.4}")).unwrap_or_default();
        println!("iter {:>6} loss {loss:.5} train_acc {:.4}{test}", p.iter, p.train_acc);
    })?;
    let dtype = match a.dtype {
        DtypeArg::F64 => Dtype::F64,
        DtypeArg::F32 => Dtype::F32,
    };
    model.save_checkpoint(&a.checkpoint_out, dtype)?;
    if let Some(p) = &a.metrics_out {
        let mut w = create(p)?;
        report.write_csv(&mut w).and_then(|_| w.flush()).map_err(|e| io_err(p, e))?;
    }
    match report.final_test_accuracy() {
        Some(acc) => println!("test_accuracy {acc}"),
        None => {
            let r = evaluate(&model, &prepare_data(&spec.train, &train_set, &test_set)?)?;
            println!("test_accuracy {}", r.accuracy);
        }
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let spec = load_spec(&a.common)?;
    Model::build(&spec)?;
    MnistFiles::in_dir(&a.common.data_dir)?;
    require_file(&a.checkpoint_in)?;

    let model = restore(&spec, &a.checkpoint_in)?;
    let (train_set, test_set) = load_mnist(&a.common.data_dir)?;
    check_input_shape(&spec, &train_set)?;
    let data = pick(a.split, train_set.clone(), test_set);
    let data = prepare_data(&spec.train, &train_set, &data.take(a.limit.unwrap_or(usize::MAX)))?;
    let r = evaluate(&model, &data)?;
    println!("accuracy {}", r.accuracy);
    println!("loss {}", r.loss);
    println!("samples {}", r.total);
    Ok(())
}

fn count_params(a: CountArgs) -> Result<()> {
    let common = Common {
        config: a.config,
        data_dir: PathBuf::new(),
        seed: None,
        threads: 1,
        dropout_convention: None,
    };
    let spec = load_spec(&common)?;
    let model = Model::build(&spec)?;
    println!("{:<6} {:<10} {:<14} {:>10}", "layer", "kind", "output", "params");
    for (i, layer) in model.layers().iter().enumerate() {
        let shape: Vec<String> = model.layer_output_shape(i).iter().map(usize::to_string).collect();
        println!(
            "{:<6} {:<10} {:<14} {:>10}",
            i,
            spec.layers[i].kind_name(),
            shape.join("x"),
            layer.param_count()
        );
    }
    println!("total {}", model.param_count());
    Ok(())
}

fn extract(a: ExtractArgs) -> Result<()> {
    let spec = load_spec(&a.common)?;
    let probe = Model::build(&spec)?;
    let tap = a.tap.unwrap_or_else(|| probe.default_tap());
    if tap >= probe.len() {
        return Err(usage(format!("--tap {tap}: the model has {} layers", probe.len())));
    }
    MnistFiles::in_dir(&a.common.data_dir)?;
    require_file(&a.checkpoint_in)?;
    check_output(&a.out)?;

    let model = restore(&spec, &a.checkpoint_in)?;
    let (train_set, test_set) = load_mnist(&a.common.data_dir)?;
    check_input_shape(&spec, &train_set)?;
    let data = pick(a.split, train_set.clone(), test_set);
    let data = prepare_data(&spec.train, &train_set, &data.take(a.limit.unwrap_or(usize::MAX)))?;

    let mut w = create(&a.out)?;
    let dim: usize = model.layer_output_shape(tap).iter().product();
    let header: Vec<String> = (0..dim).map(|j| format!("f{j}")).collect();
    let write_err = |e| io_err(&a.out, e);
    writeln!(w, "label,{}", header.join(",")).map_err(write_err)?;
    for start in (0..data.len()).step_by(nnkit::model::EVAL_CHUNK) {
        let end = (start + nnkit::model::EVAL_CHUNK).min(data.len());
        let features = model.extract_features(&data.images().slice_rows(start, end), tap)?;
        for (k, row) in features.data().chunks_exact(dim).enumerate() {
            let values: Vec<String> = row.iter().map(f64::to_string).collect();
            writeln!(w, "{},{}", data.class_of(start + k), values.join(",")).map_err(write_err)?;
        }
    }
    w.flush().map_err(write_err)?;
    println!("wrote {} feature vectors of length {dim} from layer {tap} to {}", data.len(), a.out.display());
    Ok(())
}

fn attack(a: AttackArgs) -> Result<()> {
    let spec = load_spec(&a.common)?;
    let mode: AttackMode = a.mode.parse().map_err(usage)?;
    if spec.train.preprocess.is_some() {
        return Err(usage("attacks run on raw pixels; configs with preprocessing are not supported"));
    }
    if a.epsilons.is_empty() {
        return Err(usage("--epsilons needs at least one value"));
    }
    let cfg = AttackConfig {
        target: a.target,
        mode,
        ..AttackConfig::default()
    };
    for &epsilon in &a.epsilons {
        AttackConfig { epsilon, ..cfg }.validate()?;
    }
    let probe = Model::build(&spec)?;
    if let Some(t) = a.target {
        let classes = probe.output_shape().iter().product::<usize>();
        if t >= classes {
            return Err(usage(format!("--target {t}: the model has {classes} classes")));
        }
    }
    MnistFiles::in_dir(&a.common.data_dir)?;
    require_file(&a.checkpoint_in)?;
    check_output(&a.out)?;

    let model = restore(&spec, &a.checkpoint_in)?;
    let (_, test_set) = load_mnist(&a.common.data_dir)?;
    check_input_shape(&spec, &test_set)?;
    let data = test_set.take(a.limit);
    let rows = robustness_report(&model, &data, &a.epsilons, &cfg)?;

    let mut w = create(&a.out)?;
    let write_err = |e| io_err(&a.out, e);
    writeln!(w, "epsilon,adv_accuracy").map_err(write_err)?;
    for r in &rows {
        writeln!(w, "{},{}", r.epsilon, r.adv_accuracy).map_err(write_err)?;
        println!("epsilon {} adv_accuracy {}", r.epsilon, r.adv_accuracy);
    }
    w.flush().map_err(write_err)?;
    if let Some(r) = rows.iter().find(|r| r.skipped > 0) {
        println!("{} samples had a zero input gradient and were left unperturbed", r.skipped);
    }
    Ok(())
}

fn describe(name: &str, d: &Dataset) {
    let px = d.images().data();
    let n = px.len() as f64;
    let mean = px.iter().sum::<f64>() / n;
    let std = (px.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let min = px.iter().copied().fold(f64::INFINITY, f64::min);
    let max = px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut counts = vec![0usize; d.n_classes()];
    for i in 0..d.len() {
        counts[d.class_of(i)] += 1;
    }
    let counts: Vec<String> = counts.iter().map(usize::to_string).collect();
    println!("{name}: images {:?} labels {:?}", d.images().shape(), d.labels().shape());
    println!("  pixels mean {mean:.4} std {std:.4} min {min} max {max}");
    println!("  class counts {}", counts.join(" "));
}

fn inspect(a: InspectArgs) -> Result<()> {
    let (train, test) = load_mnist(&a.data_dir)?;
    describe("train", &train);
    describe("test", &test);
    Ok(())
}
