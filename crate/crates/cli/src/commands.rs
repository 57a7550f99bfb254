use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use slom::attack::{make_latent_target, run_attack, AttackError, AttackResult, AttackTarget};
use slom::network::{load_weights, write_weights};
use slom::structural::{measure_amplification, StructuralReport};
use slom::training::{
    self, load_split, split_paths, Dataset, Oracle, Split, TrainConfig, ORACLE_MEMBERS,
};
use slom::{
    AttackConfig, AttackKind, LambdaSchedule, LayerSpec, Network, NetworkSpec, StepSchedule,
};

use crate::config::ConfigFile;
use crate::error::{CliError, Result};
use crate::harness::{self, Pick};
use crate::{AttackArgs, AuditArgs, Cli, Command, CompareArgs, TrainArgs};

/// Options shared by every command after merging flags over the file.
#[derive(Debug, Clone)]
pub struct Globals {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub log_every: usize,
}

pub fn dispatch(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let globals = Globals {
        seed: cli.seed.or(file.seed).unwrap_or(0),
        out_dir: cli
            .out_dir
            .clone()
            .or(file.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out")),
        log_every: cli
            .log_every
            .or(file.log_every)
            .unwrap_or(slom::attack::DEFAULT_LOG_EVERY),
    };
    if globals.log_every == 0 {
        return Err(CliError::Usage("--log-every must be at least 1".into()));
    }
    match cli.command {
        Command::Train(a) => train(&globals, a, &file),
        Command::Attack(a) => attack(&globals, a, &file),
        Command::CompareLayers(a) => compare(&globals, a, &file),
        Command::Audit(a) => audit(&globals, a, &file),
    }
}

fn required<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| CliError::Usage(format!("missing required option --{flag}")))
}

pub fn read_spec(path: &Path) -> Result<NetworkSpec> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    NetworkSpec::parse(&text).map_err(|source| CliError::Spec {
        path: path.to_path_buf(),
        source,
    })
}

fn read_weights_file(spec: &NetworkSpec, path: &Path) -> Result<Network> {
    if !path.is_file() {
        return Err(CliError::Usage(format!(
            "weight file {} does not exist",
            path.display()
        )));
    }
    Ok(load_weights(spec, path)?)
}

fn check_data_dir(dir: &Path, splits: &[Split]) -> Result<()> {
    for &s in splits {
        split_paths(dir, s)?;
    }
    Ok(())
}

/// Writes every file through a sibling temp file and a rename, creating
/// the parent directory first.
pub fn write_outputs(files: &[(PathBuf, Vec<u8>)]) -> Result<()> {
    for (path, bytes) in files {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        let mut tmp = path.clone().into_os_string();
        tmp.push(".partial");
        let tmp = PathBuf::from(tmp);
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| {
            let _ = fs::remove_file(&tmp);
            CliError::io(path, e)
        })?;
    }
    Ok(())
}

fn json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Encode(e.to_string()))?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn train(g: &Globals, a: TrainArgs, file: &ConfigFile) -> Result<()> {
    let f = &file.train;
    let spec_path = required(a.spec.or(f.spec.clone()), "spec")?;
    let data_dir = required(a.data.or(f.data.clone()), "data")?;
    let oracle = a.oracle || f.oracle.unwrap_or(false);
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: a.epochs.or(f.epochs).unwrap_or(defaults.epochs),
        learning_rate: a.lr.or(f.lr).unwrap_or(defaults.learning_rate),
        batch_size: a.batch_size.or(f.batch_size).unwrap_or(defaults.batch_size),
        seed: g.seed,
    };
    if cfg.learning_rate.is_nan() || cfg.learning_rate <= 0.0 || cfg.batch_size == 0 {
        return Err(CliError::Usage(
            "--lr must be positive and --batch-size at least 1".into(),
        ));
    }
    let spec = read_spec(&spec_path)?;
    check_data_dir(&data_dir, &[Split::Train, Split::Test])?;
    let out = a.out.or(f.out.clone());
    let seeds = match (oracle, a.seeds.or(f.seeds.clone())) {
        (true, s) => {
            let seeds = harness::parse_seeds(s.as_deref().unwrap_or("1,2,3,4,5"))?;
            if seeds.len() != ORACLE_MEMBERS {
                return Err(CliError::Usage(format!(
                    "--oracle needs exactly {ORACLE_MEMBERS} seeds"
                )));
            }
            if out.is_some() {
                return Err(CliError::Usage(
                    "--out does not apply to --oracle; members go to --out-dir".into(),
                ));
            }
            seeds
        }
        (false, Some(_)) => {
            return Err(CliError::Usage("--seeds needs --oracle; use --seed".into()))
        }
        (false, None) => vec![g.seed],
    };

    let mut data = load_split(&data_dir, Split::Train)?;
    if let Some(n) = a.limit.or(f.limit) {
        data = data.head(n);
    }
    let test = load_split(&data_dir, Split::Test)?;
    eprintln!(
        "training on {} samples, testing on {}",
        data.len(),
        test.len()
    );

    let mut files = Vec::new();
    if oracle {
        let (oracle, reports) = Oracle::train(&spec, &seeds, &data, Some(&test), &cfg)?;
        for ((seed, member), report) in seeds.iter().zip(oracle.members()).zip(&reports) {
            let w = g.out_dir.join(format!("oracle-{seed}.w"));
            files.push((w.with_extension("csv"), report.to_csv().into_bytes()));
            files.push((w, write_weights(member)));
            println!(
                "oracle member {seed}: test accuracy {:.4}",
                report.final_test_accuracy().unwrap_or(0.0)
            );
        }
        let (correct, n) = (0..test.len()).try_fold((0, 0), |(c, n), i| {
            oracle
                .predict(test.image(i))
                .map(|(p, _)| (c + usize::from(p == test.label(i)), n + 1))
        })?;
        println!(
            "oracle ensemble: test accuracy {:.4}",
            correct as f64 / n.max(1) as f64
        );
    } else {
        let (net, report) =
            training::train(Network::init(&spec, g.seed), &data, Some(&test), &cfg)?;
        let w = out.unwrap_or_else(|| g.out_dir.join("target.w"));
        files.push((w.with_extension("csv"), report.to_csv().into_bytes()));
        files.push((w.clone(), write_weights(&net)));
        println!(
            "test accuracy {:.4}; weights in {}",
            report.final_test_accuracy().unwrap_or(0.0),
            w.display()
        );
    }
    write_outputs(&files)
}

/// Parses `idx:N` or a bare index.
fn parse_index(text: &str, data: &Dataset) -> Result<usize> {
    let digits = text.strip_prefix("idx:").unwrap_or(text);
    let i: usize = digits
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("sample must look like `idx:17`, got `{text}`")))?;
    if i >= data.len() {
        return Err(CliError::Usage(format!(
            "sample index {i} is out of range (test split has {})",
            data.len()
        )));
    }
    Ok(i)
}

fn seeded_pick(net: &Network, data: &Dataset, class: usize, seed: u64) -> Result<usize> {
    let list = harness::eligible(net, data, class)?;
    list.get(seed as usize).copied().ok_or_else(|| {
        CliError::Usage(format!(
            "seed {seed} selects eligible sample {seed} of class {class}, but only {} exist",
            list.len()
        ))
    })
}

#[derive(Debug, Serialize)]
struct AttackSummary {
    #[serde(rename = "type")]
    kind: AttackKind,
    tap: String,
    tap_layer: usize,
    seed: u64,
    source_index: usize,
    donor_index: Option<usize>,
    goal_class: usize,
    steps: Vec<(usize, f64)>,
    lambda: LambdaSchedule,
    clamp: bool,
    iterations_run: usize,
    diverged: bool,
    success: bool,
    pred_class: usize,
    confidence: f64,
    l2: f64,
    linf: f64,
    l2_limit: f64,
    initial_tap_loss: f64,
    final_tap_loss: f64,
    iters_to_flip: Option<usize>,
    iters_to_tenth: Option<usize>,
}

fn schedule(a: &AttackArgs, f: &crate::config::AttackSection) -> Result<StepSchedule> {
    let steps = a.steps.clone().or(f.steps.clone());
    let iterations = a.iterations.or(f.iterations);
    let step = a.step.or(f.step);
    let preset = a.preset.clone().or(f.preset.clone());
    match (steps, iterations, step) {
        (Some(s), None, None) => StepSchedule::parse(&s).map_err(CliError::Usage),
        (None, Some(n), Some(st)) => StepSchedule::constant(n, st).map_err(CliError::Usage),
        (None, None, None) => match preset.as_deref().unwrap_or("mnist") {
            "mnist" => Ok(StepSchedule::mnist()),
            "large" => Ok(StepSchedule::large()),
            other => Err(CliError::Usage(format!(
                "unknown preset `{other}` (mnist, large)"
            ))),
        },
        _ => Err(CliError::Usage(
            "give either --steps, or --iterations with --step, or neither".into(),
        )),
    }
}

fn attack(g: &Globals, a: AttackArgs, file: &ConfigFile) -> Result<()> {
    let f = &file.attack;
    let spec = read_spec(&required(a.spec.clone().or(f.spec.clone()), "spec")?)?;
    let weights = required(a.weights.clone().or(f.weights.clone()), "weights")?;
    let data_dir = required(a.data.clone().or(f.data.clone()), "data")?;
    let kind = match a.kind.or(f.kind).unwrap_or(1) {
        1 => AttackKind::TypeI,
        2 => AttackKind::TypeII,
        other => {
            return Err(CliError::Usage(format!(
                "--type must be 1 or 2, got {other}"
            )))
        }
    };
    let steps = schedule(&a, f)?;
    let lambda_text = a
        .lambda
        .clone()
        .or(f.lambda.clone())
        .unwrap_or_else(|| "off".into());
    let lambda =
        LambdaSchedule::parse(&lambda_text, steps.total_iterations()).map_err(CliError::Usage)?;
    let net = read_weights_file(&spec, &weights)?;
    let tap_name = a
        .tap
        .clone()
        .or(f.tap.clone())
        .unwrap_or_else(|| "pool2".into());
    let (_, tap) = harness::resolve_taps(&net, std::slice::from_ref(&tap_name))?.remove(0);
    let oracle = if lambda.is_active() {
        let ospec = read_spec(&required(
            a.oracle_spec.clone().or(f.oracle_spec.clone()),
            "oracle-spec",
        )?)?;
        let paths = required(
            a.oracle_weights.clone().or(f.oracle_weights.clone()),
            "oracle-weights",
        )?;
        let members = paths
            .iter()
            .map(|p| read_weights_file(&ospec, p))
            .collect::<Result<Vec<_>>>()?;
        Some(Oracle::new(members)?)
    } else {
        None
    };
    check_data_dir(&data_dir, &[Split::Test])?;
    let data = load_split(&data_dir, Split::Test)?;

    let source = match a.sample.clone().or(f.sample.clone()) {
        Some(s) => parse_index(&s, &data)?,
        None => seeded_pick(
            &net,
            &data,
            a.source_class
                .or(f.source_class)
                .unwrap_or(harness::SOURCE_CLASS),
            g.seed,
        )?,
    };
    let x_bar = data.image(source).clone();
    let donor = match kind {
        AttackKind::TypeI => None,
        AttackKind::TypeII => Some(match a.donor.clone().or(f.donor.clone()) {
            Some(s) => parse_index(&s, &data)?,
            None => seeded_pick(
                &net,
                &data,
                a.donor_class
                    .or(f.donor_class)
                    .unwrap_or(harness::DONOR_CLASS),
                g.seed,
            )?,
        }),
    };
    let target = match donor {
        None => {
            let oracle_label = match (a.label.or(f.label), &oracle) {
                (Some(l), _) => Some(l),
                (None, Some(o)) => Some(o.predict(&x_bar)?.0),
                (None, None) => None,
            };
            AttackTarget::TypeI {
                reference: x_bar.clone(),
                oracle_label,
            }
        }
        Some(d) => AttackTarget::TypeII {
            target: make_latent_target(&net, tap, data.image(d), &x_bar)?,
            source: x_bar.clone(),
            source_label: a.label.or(f.label),
        },
    };
    let clamp = !(a.no_clamp || f.no_clamp.unwrap_or(false));
    let cfg = AttackConfig::new(tap, target)
        .with_steps(steps.clone())
        .with_lambda(lambda)
        .with_clamp(clamp)
        .with_seed(g.seed)
        .with_log_every(g.log_every);

    eprintln!(
        "{} attack at {tap_name}, source idx:{source}{}, {} iterations",
        kind.label(),
        donor
            .map(|d| format!(", donor idx:{d}"))
            .unwrap_or_default(),
        steps.total_iterations()
    );
    let (result, diverged) = match run_attack(&net, oracle.as_ref(), &cfg) {
        Ok(r) => (r, None),
        Err(AttackError::Diverged { iteration, partial }) => (*partial, Some(iteration)),
        Err(e) => return Err(e.into()),
    };

    let l2_limit = match (&cfg.target, donor) {
        (AttackTarget::TypeII { .. }, Some(d)) => data.image(d).l2_distance(&x_bar).map_err(num)?,
        _ => slom::attack::NOISE_RETENTION * result.x_initial.l2_distance(&x_bar).map_err(num)?,
    };
    let summary = AttackSummary {
        kind,
        tap: tap_name.clone(),
        tap_layer: tap.layer_index,
        seed: g.seed,
        source_index: source,
        donor_index: donor,
        goal_class: result.goal_class,
        steps: steps.spans().to_vec(),
        lambda,
        clamp,
        iterations_run: result.iterations_run,
        diverged: diverged.is_some(),
        success: result.success && diverged.is_none(),
        pred_class: result.pred_class,
        confidence: result.confidence,
        l2: result.x_final.l2_distance(&x_bar).map_err(num)?,
        linf: result.x_final.linf_distance(&x_bar).map_err(num)?,
        l2_limit,
        initial_tap_loss: result.initial_tap_loss,
        final_tap_loss: result.final_tap_loss,
        iters_to_flip: result.iters_to_flip,
        iters_to_tenth: result.iters_to_tenth,
    };
    let name = a
        .name
        .clone()
        .or(f.name.clone())
        .unwrap_or_else(|| "attack".into());
    let path = |suffix: &str| g.out_dir.join(format!("{name}.{suffix}"));
    let mut files = vec![
        (path("trace.csv"), result.trace_csv().into_bytes()),
        (path("json"), json(&summary)?),
        (path("reference.pgm"), harness::pgm(&x_bar)),
        (path("initial.pgm"), harness::pgm(&result.x_initial)),
        (path("final.pgm"), harness::pgm(&result.x_final)),
    ];
    if let Some(d) = donor {
        files.push((path("donor.pgm"), harness::pgm(data.image(d))));
    }
    write_outputs(&files)?;
    print_attack(&summary, &result);
    eprintln!("wall time {:.2?}", result.wall_time);
    match diverged {
        Some(it) => Err(CliError::Diverged(it)),
        None => Ok(()),
    }
}

fn num(e: slom::TensorError) -> CliError {
    CliError::Attack(e.into())
}

fn print_attack(s: &AttackSummary, r: &AttackResult) {
    println!(
        "success={} pred={} (goal {}) confidence={:.4} L2={:.4} (limit {:.4}) tap loss {:.3e} -> {:.3e}",
        s.success, s.pred_class, s.goal_class, s.confidence, s.l2, s.l2_limit, r.initial_tap_loss, r.final_tap_loss
    );
}

fn compare(g: &Globals, a: CompareArgs, file: &ConfigFile) -> Result<()> {
    let f = &file.compare_layers;
    let spec = read_spec(&required(a.spec.or(f.spec.clone()), "spec")?)?;
    let weights = required(a.weights.or(f.weights.clone()), "weights")?;
    let data_dir = required(a.data.or(f.data.clone()), "data")?;
    let seeds = match a.seeds.or(f.seeds.clone()) {
        Some(s) => harness::parse_seeds(&s)?,
        None => vec![g.seed],
    };
    let iterations = a.iterations.or(f.iterations).unwrap_or(800);
    let step = a.step.or(f.step).unwrap_or(1.0);
    let steps = StepSchedule::constant(iterations, step).map_err(CliError::Usage)?;
    let net = read_weights_file(&spec, &weights)?;
    let tap_names = match a.taps.or(f.taps.clone()) {
        Some(t) => t,
        None => net.spec().taps().into_iter().map(|(n, _)| n).collect(),
    };
    let taps = harness::resolve_taps(&net, &tap_names)?;
    check_data_dir(&data_dir, &[Split::Test])?;
    let data = load_split(&data_dir, Split::Test)?;
    let picks: Vec<Pick> = harness::picks(
        &net,
        &data,
        a.source_class
            .or(f.source_class)
            .unwrap_or(harness::SOURCE_CLASS),
        a.donor_class
            .or(f.donor_class)
            .unwrap_or(harness::DONOR_CLASS),
        &seeds,
    )?;
    eprintln!(
        "{} taps x 2 types x {} seeds, {iterations} iterations at step {step}",
        taps.len(),
        picks.len()
    );
    let cmp = harness::compare_layers(&net, &data, &taps, &picks, &steps, g.log_every)?;

    let mut checks = harness::layer_ordering_checks(&net, &cmp);
    let pools: Vec<&String> = tap_names
        .iter()
        .filter(|n| {
            net.spec()
                .tap(n)
                .is_some_and(|t| t.kind == slom::TapKind::Pool)
        })
        .collect();
    if let (Some(first), Some(last)) = (pools.first(), pools.last()) {
        if first != last {
            checks.extend(harness::depth_checks(&cmp, first, last));
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let encode = |e: csv::Error| CliError::Encode(e.to_string());
    w.write_record(["check", "holds", "detail"])
        .map_err(encode)?;
    for c in &checks {
        w.write_record([
            c.name.as_str(),
            if c.holds { "true" } else { "false" },
            c.detail.as_str(),
        ])
        .map_err(encode)?;
    }
    let checks_csv = w
        .into_inner()
        .map_err(|e| CliError::Encode(e.to_string()))?;

    let name = a
        .name
        .or(f.name.clone())
        .unwrap_or_else(|| "compare".into());
    write_outputs(&[
        (
            g.out_dir.join(format!("{name}.csv")),
            cmp.to_csv()?.into_bytes(),
        ),
        (g.out_dir.join(format!("{name}.checks.csv")), checks_csv),
    ])?;

    println!(
        "{:<8} {:<6} {:>10} {:>12} {:>10} {:>10}",
        "tap", "type", "median L2", "tap loss", "conf", "flip"
    );
    for m in &cmp.medians {
        println!(
            "{:<8} {:<6} {:>10.4} {:>12.4e} {:>10.4} {:>10}",
            m.tap,
            m.kind.label(),
            m.l2,
            m.final_tap_loss,
            m.confidence,
            m.iters_to_flip
        );
    }
    for c in &checks {
        println!(
            "[{}] {} ({})",
            if c.holds { "holds" } else { "fails" },
            c.name,
            c.detail
        );
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct AuditOutput {
    #[serde(flatten)]
    report: StructuralReport,
    measured_amplification: Option<MeasuredAmplification>,
}

#[derive(Debug, Serialize)]
struct MeasuredAmplification {
    upto_layer: usize,
    sigma: f64,
    trials: usize,
    seed: u64,
    std_ratio: f64,
}

fn audit(g: &Globals, a: AuditArgs, file: &ConfigFile) -> Result<()> {
    let f = &file.audit;
    let spec = read_spec(&required(a.spec.or(f.spec.clone()), "spec")?)?;
    let net = match a.weights.or(f.weights.clone()) {
        Some(p) => Some(read_weights_file(&spec, &p)?),
        None => None,
    };
    let sigma = a.sigma.or(f.sigma).unwrap_or(0.01);
    let trials = a.trials.or(f.trials).unwrap_or(1000);
    let report = StructuralReport::analyze(&spec, net.as_ref())?;
    let last_conv = spec
        .layers()
        .iter()
        .position(|l| matches!(l, LayerSpec::Flatten | LayerSpec::Fc { .. }))
        .unwrap_or(spec.layers().len())
        .checked_sub(1)
        .filter(|_| {
            report
                .conv_layers
                .iter()
                .any(|c| c.layer < spec.layers().len())
        });
    let measured = match (&net, last_conv, report.conv_layers.is_empty()) {
        (Some(net), Some(upto), false) => Some(MeasuredAmplification {
            upto_layer: upto,
            sigma,
            trials,
            seed: g.seed,
            std_ratio: measure_amplification(net, upto, sigma, trials, g.seed)?,
        }),
        _ => None,
    };
    let table = report.render_table();
    let out = AuditOutput {
        report,
        measured_amplification: measured,
    };
    write_outputs(&[(g.out_dir.join("audit.json"), json(&out)?)])?;
    print!("{table}");
    if let Some(m) = &out.measured_amplification {
        println!(
            "measured std ratio: {:.6} (sigma {}, {} trials)",
            m.std_ratio, m.sigma, m.trials
        );
    }
    Ok(())
}
