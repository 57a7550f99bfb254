//! Experiment harness: sample selection, batched attack studies, layer
//! comparisons and the ordering checks over their medians.
//!
//! Every study is a pure function of the network, the data and the seeds, so
//! its CSV output is byte-identical across runs and thread counts.

use serde::Serialize;
use slom::attack::{make_latent_target, run_attacks, AttackResult, AttackTarget};
use slom::training::Dataset;
use slom::{AttackConfig, AttackKind, Network, StepSchedule, TapKind, TapPoint, Tensor};

use crate::error::{CliError, Result};

/// Classes of the source and donor samples in the reference protocol.
pub const SOURCE_CLASS: usize = 0;
pub const DONOR_CLASS: usize = 3;
/// Minimum confidence for a sample to take part in a study.
pub const ELIGIBLE_CONFIDENCE: f64 = 0.9;

/// Indices of samples labelled `class` that `net` classifies correctly with
/// confidence at least [`ELIGIBLE_CONFIDENCE`], in dataset order.
pub fn eligible(net: &Network, data: &Dataset, class: usize) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for i in data.indices_of(class) {
        let (pred, conf) = net.predict(data.image(i))?;
        if pred == class && conf >= ELIGIBLE_CONFIDENCE {
            out.push(i);
        }
    }
    Ok(out)
}

/// The samples one seeded run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Pick {
    pub seed: u64,
    pub source: usize,
    pub donor: usize,
}

/// Seed `s` takes the `s`-th eligible source and donor.
pub fn picks(
    net: &Network,
    data: &Dataset,
    source_class: usize,
    donor_class: usize,
    seeds: &[u64],
) -> Result<Vec<Pick>> {
    let sources = eligible(net, data, source_class)?;
    let donors = eligible(net, data, donor_class)?;
    seeds
        .iter()
        .map(|&seed| {
            let s = seed as usize;
            match (sources.get(s), donors.get(s)) {
                (Some(&source), Some(&donor)) => Ok(Pick { seed, source, donor }),
                _ => Err(CliError::Usage(format!(
                    "seed {seed} needs the {s}-th eligible sample, but only {} of class {source_class} and {} of class {donor_class} qualify",
                    sources.len(),
                    donors.len()
                ))),
            }
        })
        .collect()
}

pub fn attack_config(
    net: &Network,
    data: &Dataset,
    kind: AttackKind,
    tap: TapPoint,
    pick: Pick,
    steps: &StepSchedule,
    log_every: usize,
) -> Result<AttackConfig> {
    let source = data.image(pick.source).clone();
    let target = match kind {
        AttackKind::TypeI => AttackTarget::TypeI {
            reference: source,
            oracle_label: None,
        },
        AttackKind::TypeII => AttackTarget::TypeII {
            target: make_latent_target(net, tap, data.image(pick.donor), &source)?,
            source,
            source_label: None,
        },
    };
    Ok(AttackConfig::new(tap, target)
        .with_steps(steps.clone())
        .with_seed(pick.seed)
        .with_log_every(log_every))
}

/// One finished run, reduced to the quantities studies report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRow {
    pub seed: u64,
    pub tap: String,
    pub kind: AttackKind,
    pub source: usize,
    pub donor: Option<usize>,
    pub success: bool,
    pub pred_class: usize,
    pub confidence: f64,
    pub l2: f64,
    pub linf: f64,
    /// Type I: half the initial noise distance. Type II: the donor distance.
    pub l2_limit: f64,
    pub final_tap_loss: f64,
    pub iters_to_flip: Option<usize>,
    pub iters_to_tenth: Option<usize>,
}

fn row(net: &Network, data: &Dataset, pick: Pick, result: &AttackResult) -> Result<RunRow> {
    let x_bar = data.image(pick.source);
    let l2_limit = match result.kind {
        AttackKind::TypeI => {
            slom::attack::NOISE_RETENTION * result.x_initial.l2_distance(x_bar).map_err(num)?
        }
        AttackKind::TypeII => data.image(pick.donor).l2_distance(x_bar).map_err(num)?,
    };
    Ok(RunRow {
        seed: pick.seed,
        tap: net.spec().tap_name(result.tap).unwrap_or_default(),
        kind: result.kind,
        source: pick.source,
        donor: (result.kind == AttackKind::TypeII).then_some(pick.donor),
        success: result.success,
        pred_class: result.pred_class,
        confidence: result.confidence,
        l2: result.x_final.l2_distance(x_bar).map_err(num)?,
        linf: result.x_final.linf_distance(x_bar).map_err(num)?,
        l2_limit,
        final_tap_loss: result.final_tap_loss,
        iters_to_flip: result.iters_to_flip,
        iters_to_tenth: result.iters_to_tenth,
    })
}

fn num(e: slom::TensorError) -> CliError {
    CliError::Attack(e.into())
}

const ROW_HEADER: [&str; 14] = [
    "seed",
    "tap",
    "type",
    "source_index",
    "donor_index",
    "success",
    "pred_class",
    "confidence",
    "l2",
    "linf",
    "l2_limit",
    "final_tap_loss",
    "iters_to_flip",
    "iters_to_tenth",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn row_fields(r: &RunRow) -> Vec<String> {
    vec![
        r.seed.to_string(),
        r.tap.clone(),
        r.kind.label().to_string(),
        r.source.to_string(),
        opt(r.donor),
        r.success.to_string(),
        r.pred_class.to_string(),
        r.confidence.to_string(),
        r.l2.to_string(),
        r.linf.to_string(),
        r.l2_limit.to_string(),
        r.final_tap_loss.to_string(),
        opt(r.iters_to_flip),
        opt(r.iters_to_tenth),
    ]
}

fn to_csv(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let encode = |e: csv::Error| CliError::Encode(e.to_string());
    w.write_record(header).map_err(encode)?;
    for r in rows {
        w.write_record(&r).map_err(encode)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::Encode(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CliError::Encode(e.to_string()))
}

/// Outcome of a batch of attacks with one kind at one tap.
#[derive(Debug, Clone)]
pub struct Study {
    pub rows: Vec<RunRow>,
    /// Per-run trace CSVs, in row order.
    pub traces: Vec<String>,
    pub results: Vec<AttackResult>,
}

impl Study {
    pub fn successes(&self) -> usize {
        self.rows.iter().filter(|r| r.success).count()
    }

    pub fn to_csv(&self) -> Result<String> {
        to_csv(&ROW_HEADER, self.rows.iter().map(row_fields))
    }
}

/// Runs one attack per pick, all with the same kind, tap and schedule.
pub fn run_study(
    net: &Network,
    data: &Dataset,
    kind: AttackKind,
    tap: TapPoint,
    picks: &[Pick],
    steps: &StepSchedule,
    log_every: usize,
) -> Result<Study> {
    let cfgs = picks
        .iter()
        .map(|&p| attack_config(net, data, kind, tap, p, steps, log_every))
        .collect::<Result<Vec<_>>>()?;
    let mut study = Study {
        rows: Vec::new(),
        traces: Vec::new(),
        results: Vec::new(),
    };
    for (pick, result) in picks.iter().zip(run_attacks(net, None, &cfgs)) {
        let result = result?;
        study.rows.push(row(net, data, *pick, &result)?);
        study.traces.push(result.trace_csv());
        study.results.push(result);
    }
    Ok(study)
}

/// Median; the mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

/// Runs that never reached the event count as `iterations + 1`.
pub fn censored(v: Option<usize>, iterations: usize) -> f64 {
    v.unwrap_or(iterations + 1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MedianRow {
    pub tap: String,
    pub kind: AttackKind,
    pub runs: usize,
    pub l2: f64,
    pub final_tap_loss: f64,
    pub confidence: f64,
    pub iters_to_flip: f64,
    pub iters_to_tenth: f64,
}

/// Both attack kinds at several taps over several seeds.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub iterations: usize,
    pub rows: Vec<RunRow>,
    pub medians: Vec<MedianRow>,
}

impl Comparison {
    /// Per-seed rows followed by one median row per (tap, type); the first
    /// column tells them apart.
    pub fn to_csv(&self) -> Result<String> {
        let mut header = vec!["row"];
        header.extend(ROW_HEADER);
        let runs = self.rows.iter().map(|r| {
            let mut f = vec!["run".to_string()];
            f.extend(row_fields(r));
            f
        });
        let medians = self.medians.iter().map(|m| {
            vec![
                "median".to_string(),
                String::new(),
                m.tap.clone(),
                m.kind.label().to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                m.confidence.to_string(),
                m.l2.to_string(),
                String::new(),
                String::new(),
                m.final_tap_loss.to_string(),
                m.iters_to_flip.to_string(),
                m.iters_to_tenth.to_string(),
            ]
        });
        to_csv(&header, runs.chain(medians))
    }

    fn values(&self, taps: &[&str], kind: AttackKind, f: impl Fn(&RunRow) -> f64) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.kind == kind && taps.contains(&r.tap.as_str()))
            .map(f)
            .collect()
    }

    pub fn median_of(
        &self,
        taps: &[&str],
        kind: AttackKind,
        f: impl Fn(&RunRow) -> f64,
    ) -> Option<f64> {
        let v = self.values(taps, kind, f);
        (!v.is_empty()).then(|| median(&v))
    }
}

/// Runs every (tap, kind, seed) combination with identical samples and
/// schedule per seed. Rows are ordered by tap, then kind, then seed.
pub fn compare_layers(
    net: &Network,
    data: &Dataset,
    taps: &[(String, TapPoint)],
    picks: &[Pick],
    steps: &StepSchedule,
    log_every: usize,
) -> Result<Comparison> {
    let mut jobs = Vec::new();
    for (name, tap) in taps {
        for kind in [AttackKind::TypeI, AttackKind::TypeII] {
            for &p in picks {
                jobs.push((
                    name.clone(),
                    kind,
                    p,
                    attack_config(net, data, kind, *tap, p, steps, log_every)?,
                ));
            }
        }
    }
    let cfgs: Vec<AttackConfig> = jobs.iter().map(|j| j.3.clone()).collect();
    let results = run_attacks(net, None, &cfgs);
    let iterations = steps.total_iterations();
    let mut rows = Vec::with_capacity(jobs.len());
    for ((_, _, pick, _), result) in jobs.iter().zip(results) {
        rows.push(row(net, data, *pick, &result?)?);
    }
    let mut medians = Vec::new();
    for (name, _) in taps {
        for kind in [AttackKind::TypeI, AttackKind::TypeII] {
            let sel: Vec<&RunRow> = rows
                .iter()
                .filter(|r| &r.tap == name && r.kind == kind)
                .collect();
            let med =
                |f: &dyn Fn(&RunRow) -> f64| median(&sel.iter().map(|r| f(r)).collect::<Vec<_>>());
            medians.push(MedianRow {
                tap: name.clone(),
                kind,
                runs: sel.len(),
                l2: med(&|r| r.l2),
                final_tap_loss: med(&|r| r.final_tap_loss),
                confidence: med(&|r| r.confidence),
                iters_to_flip: med(&|r| censored(r.iters_to_flip, iterations)),
                iters_to_tenth: med(&|r| censored(r.iters_to_tenth, iterations)),
            });
        }
    }
    Ok(Comparison {
        iterations,
        rows,
        medians,
    })
}

/// One ordering claim evaluated on comparison medians.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub holds: bool,
    pub detail: String,
}

fn between(mid: f64, a: f64, b: f64) -> bool {
    mid >= a.min(b) && mid <= a.max(b)
}

/// Tap names of each block, grouped by kind.
fn taps_of(net: &Network, kind: TapKind) -> Vec<String> {
    net.spec()
        .taps()
        .into_iter()
        .filter(|(_, t)| t.kind == kind)
        .map(|(n, _)| n)
        .collect()
}

/// Pooling versus convolution versus activation taps: type I median L2
/// must rank pool above conv, type II median iterations to flip must rank
/// pool below conv, with the activation tap between or tied, over all
/// blocks together; pool versus conv must also hold within every block.
pub fn layer_ordering_checks(net: &Network, cmp: &Comparison) -> Vec<Check> {
    let pools = taps_of(net, TapKind::Pool);
    let relus = taps_of(net, TapKind::Relu);
    let convs = taps_of(net, TapKind::Conv);
    fn refs(v: &[String]) -> Vec<&str> {
        v.iter().map(String::as_str).collect()
    }
    let (p, a, c) = (refs(&pools), refs(&relus), refs(&convs));
    let it = cmp.iterations;
    let flip = move |r: &RunRow| censored(r.iters_to_flip, it);
    let l2 = |r: &RunRow| r.l2;

    let mut checks = Vec::new();
    let mut push_all =
        |label: &str, kind: AttackKind, f: &dyn Fn(&RunRow) -> f64, pool_above: bool| {
            let (Some(sp), Some(sa), Some(sc)) = (
                cmp.median_of(&p, kind, f),
                cmp.median_of(&a, kind, f),
                cmp.median_of(&c, kind, f),
            ) else {
                return;
            };
            let order = if pool_above { sp > sc } else { sp < sc };
            let rel = if pool_above { ">" } else { "<" };
            checks.push(Check {
                name: format!("{label}: SPM {rel} SCM"),
                holds: order,
                detail: format!("SPM {sp} SCM {sc}"),
            });
            checks.push(Check {
                name: format!("{label}: SAM between SPM and SCM"),
                holds: between(sa, sp, sc),
                detail: format!("SPM {sp} SAM {sa} SCM {sc}"),
            });
            for (pool, conv) in pools.iter().zip(&convs) {
                let (Some(bp), Some(bc)) = (
                    cmp.median_of(&[pool], kind, f),
                    cmp.median_of(&[conv], kind, f),
                ) else {
                    continue;
                };
                checks.push(Check {
                    name: format!("{label}: {pool} {rel} {conv}"),
                    holds: if pool_above { bp > bc } else { bp < bc },
                    detail: format!("{pool} {bp} {conv} {bc}"),
                });
            }
        };
    push_all("type1 median L2", AttackKind::TypeI, &l2, true);
    push_all(
        "type2 median iterations to flip",
        AttackKind::TypeII,
        &flip,
        false,
    );
    checks
}

/// Shallow versus deep pooling tap: the deeper tap should give a larger
/// type I modification, a smaller type II modification and slower tap-loss
/// convergence for both kinds.
pub fn depth_checks(cmp: &Comparison, shallow: &str, deep: &str) -> Vec<Check> {
    let it = cmp.iterations;
    let tenth = move |r: &RunRow| censored(r.iters_to_tenth, it);
    let l2 = |r: &RunRow| r.l2;
    let mut checks = Vec::new();
    let mut push = |name: &str, kind: AttackKind, f: &dyn Fn(&RunRow) -> f64, deep_larger: bool| {
        if let (Some(s), Some(d)) = (
            cmp.median_of(&[shallow], kind, f),
            cmp.median_of(&[deep], kind, f),
        ) {
            let rel = if deep_larger { ">" } else { "<" };
            checks.push(Check {
                name: format!("{name}: {deep} {rel} {shallow}"),
                holds: if deep_larger { d > s } else { d < s },
                detail: format!("{deep} {d} {shallow} {s}"),
            });
        }
    };
    push("type1 median L2", AttackKind::TypeI, &l2, true);
    push("type2 median L2", AttackKind::TypeII, &l2, false);
    push(
        "type1 median iterations to 10% loss",
        AttackKind::TypeI,
        &tenth,
        true,
    );
    push(
        "type2 median iterations to 10% loss",
        AttackKind::TypeII,
        &tenth,
        true,
    );
    checks
}

/// Parses `A..B` (inclusive) or a comma list.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let bad = || {
        CliError::Usage(format!(
            "seeds must look like `0..9` or `1,2,3`, got `{text}`"
        ))
    };
    let seeds = if let Some((a, b)) = text.split_once("..") {
        let (a, b): (u64, u64) = (
            a.trim().parse().map_err(|_| bad())?,
            b.trim().parse().map_err(|_| bad())?,
        );
        if a > b {
            return Err(bad());
        }
        (a..=b).collect()
    } else {
        text.split(',')
            .map(|s| s.trim().parse().map_err(|_| bad()))
            .collect::<Result<Vec<u64>>>()?
    };
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

/// Resolves tap names against the network, reporting the valid names on
/// failure.
pub fn resolve_taps(net: &Network, names: &[String]) -> Result<Vec<(String, TapPoint)>> {
    names
        .iter()
        .map(|n| {
            net.spec().tap(n).map(|t| (n.clone(), t)).ok_or_else(|| {
                let valid: Vec<String> = net.spec().taps().into_iter().map(|(n, _)| n).collect();
                CliError::Usage(format!(
                    "unknown tap `{n}`; valid taps: {}",
                    valid.join(", ")
                ))
            })
        })
        .collect()
}

/// Grayscale binary PGM of a `[1, h, w]` image in `[0, 1]`.
pub fn pgm(image: &Tensor) -> Vec<u8> {
    let shape = image.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        image.data()[..h * w]
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}
