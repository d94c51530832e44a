use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use excap::data::{
    load_dataset, save_dataset_csv, save_report, CausalMask, DatasetFormat, Degradation, ExplanationReport, MaskSource,
    TimeSeries,
};
use excap::eval::{
    baseline_attribution, extract_attribution, lipschitz_probe, mask_and_score, runtime_scaling, stability, Baseline,
    LipschitzRow, MaskTarget, MaskingProtocol, Metric, SelfAttentionContrast,
};
use excap::experiments::motif_spec;
use excap::model::{ExcapModel, Output, Pipeline, Prepared};
use excap::objectives::Task;
use excap::reference::{train_reference, ReferenceModel};
use excap::scm::{generate_scm, perturb_mask, random_mask};
use excap::tensor::Tensor;
use excap::trainer::{train_until, write_trace_csv, Checkpoint, TrainState};
use serde::Serialize;

use crate::config::{MaskChoice, RunConfig};
use crate::error::CliError;
use crate::output::OutDir;

const REFERENCE: &str = "reference.json";
const CHECKPOINT: &str = "checkpoint.json";

fn seed_file(seed: u64, name: &str) -> String {
    format!("seed-{seed}/{name}")
}

pub struct Data {
    pub train: Vec<TimeSeries>,
    pub test: Vec<TimeSeries>,
    pub task: Task,
    pub ingested: Option<CausalMask>,
}

impl Data {
    pub fn n_vars(&self) -> usize {
        self.train[0].n_vars()
    }
}

fn load_split(path: &Path) -> Result<Vec<TimeSeries>, CliError> {
    if !path.exists() {
        return Err(CliError::Data(format!(
            "{} not found; run gen-data first or set dataset paths",
            path.display()
        )));
    }
    Ok(load_dataset(path, DatasetFormat::from_path(path))?)
}

/// Labels make a classification task, target vectors a regression task.
pub fn infer_task(series: &[TimeSeries]) -> Result<Task, CliError> {
    if series.iter().all(|s| s.label.is_some()) {
        let top = series.iter().filter_map(|s| s.label).max().unwrap_or(0);
        return Ok(Task::Classification { classes: (top + 1).max(2) });
    }
    let d = series.first().and_then(|s| s.targets.as_ref()).map(Vec::len);
    match d {
        Some(d) if d > 0 && series.iter().all(|s| s.targets.as_ref().map(Vec::len) == Some(d)) => {
            Ok(Task::Regression { outputs: d })
        }
        _ => Err(CliError::Data(
            "every sequence needs a label, or targets of one common length".into(),
        )),
    }
}

pub fn load_data(cfg: &RunConfig) -> Result<Data, CliError> {
    let train = load_split(&cfg.train_path())?;
    let test = load_split(&cfg.test_path())?;
    let task = infer_task(&train)?;
    let n = train[0].n_vars();
    if let Some(bad) = train.iter().chain(&test).find(|s| s.n_vars() != n) {
        return Err(CliError::Data(format!(
            "sequence {} has N = {} but the dataset has N = {n}",
            bad.id,
            bad.n_vars()
        )));
    }
    let ingested = match cfg.mask_path() {
        Some(p) if p.exists() => Some(CausalMask::load(&p)?),
        _ => None,
    };
    Ok(Data {
        train,
        test,
        task,
        ingested,
    })
}

pub fn build_mask(cfg: &RunConfig, task: Task, n: usize, ingested: Option<&CausalMask>) -> Result<CausalMask, CliError> {
    let d = task.outputs();
    let m = &cfg.mask;
    match m.source {
        MaskChoice::AllOnes => Ok(CausalMask::all_ones(d, n, MaskSource::Ingested)),
        MaskChoice::Random => Ok(random_mask(d, n, m.density, m.seed)?),
        MaskChoice::Ingested | MaskChoice::Perturbed => {
            let base = ingested.ok_or_else(|| {
                CliError::Data("mask source is ingested but no mask file exists (set dataset.mask_path or run gen-data)".into())
            })?;
            if (base.d(), base.n()) != (d, n) {
                return Err(CliError::Config(format!(
                    "mask is {}×{} but the task needs D×N = {d}×{n}",
                    base.d(),
                    base.n()
                )));
            }
            if m.source == MaskChoice::Perturbed {
                Ok(perturb_mask(base, m.flips, m.seed)?)
            } else {
                Ok(base.clone())
            }
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs `f` for every seed on up to `jobs` threads; results keep seed order.
fn per_seed<T: Send>(
    seeds: &[u64],
    jobs: usize,
    f: impl Fn(u64) -> Result<T, CliError> + Sync,
) -> Result<Vec<T>, CliError> {
    let jobs = jobs.max(1);
    if jobs == 1 {
        return seeds.iter().map(|&s| f(s)).collect();
    }
    let mut out = Vec::with_capacity(seeds.len());
    for chunk in seeds.chunks(jobs) {
        let results: Vec<Result<T, CliError>> = std::thread::scope(|scope| {
            let f = &f;
            let handles: Vec<_> = chunk.iter().map(|&s| scope.spawn(move || f(s))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(CliError::Numeric("worker thread panicked".into()))))
                .collect()
        });
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------- gen-data

pub fn gen_data(cfg: &RunConfig, out: &mut OutDir) -> Result<(), CliError> {
    let spec = cfg
        .dataset
        .scm_spec()
        .ok_or_else(|| CliError::Config("gen-data needs dataset.preset or dataset.scm".into()))?;
    spec.validate()?;
    let d = &cfg.dataset;
    let train_p = out.claim("data/train.csv")?;
    let test_p = out.claim("data/test.csv")?;
    let mask_p = out.claim("data/mask.json")?;
    let scm_p = out.claim("data/scm.json")?;
    out.claim("data/train.meta.json")?;
    out.claim("data/test.meta.json")?;
    // one weight draw for both splits
    let mut all = generate_scm(&spec, d.train_size + d.test_size, d.seed)?;
    let test = all.series.split_off(d.train_size);
    save_dataset_csv(&all.series, &train_p)?;
    save_dataset_csv(&test, &test_p)?;
    all.mask.save(&mask_p)?;
    write_json(
        &scm_p,
        &serde_json::json!({ "spec": spec, "weights": all.weights, "seed": d.seed }),
    )?;
    Ok(())
}

// ---------------------------------------------------------------- train-reference

#[derive(Serialize)]
struct LossRow {
    epoch: usize,
    loss: f64,
}

fn fit_reference(cfg: &RunConfig, data: &Data, seed: u64, out: &mut OutDir) -> Result<ReferenceModel, CliError> {
    let mut rc = cfg.reference;
    rc.seed = seed;
    let (model, trace) = train_reference(&data.train, data.task, rc)?;
    write_json(&out.claim(seed_file(seed, REFERENCE))?, &model)?;
    let rows: Vec<LossRow> = trace.iter().enumerate().map(|(epoch, &loss)| LossRow { epoch, loss }).collect();
    write_csv(&out.claim(seed_file(seed, "reference_loss.csv"))?, &rows)?;
    Ok(model)
}

pub fn train_reference_cmd(cfg: &RunConfig, out: &mut OutDir) -> Result<(), CliError> {
    let data = load_data(cfg)?;
    for &seed in &cfg.seeds {
        fit_reference(cfg, &data, seed, out)?;
    }
    Ok(())
}

// ---------------------------------------------------------------- train

pub struct TrainOptions {
    pub resume: bool,
    /// Stop (and checkpoint) after this many epochs.
    pub stop_after: Option<usize>,
}

pub fn train_cmd(cfg: &RunConfig, opts: &TrainOptions, out: &mut OutDir) -> Result<(), CliError> {
    let data = load_data(cfg)?;
    let n = data.n_vars();
    let snapshot = toml::to_string(cfg).map_err(|e| CliError::Config(format!("cannot snapshot config: {e}")))?;
    fs::write(out.reclaim("config.toml")?, snapshot)?;
    for &seed in &cfg.seeds {
        let ck_rel = seed_file(seed, CHECKPOINT);
        let ck_path = out.root().join(&ck_rel);
        let mut tc = cfg.train.clone();
        tc.seed = seed;
        let (mut pipeline, mut state, prepared, ck_path) = if opts.resume && ck_path.exists() {
            let ck = Checkpoint::load(&ck_path)?;
            check_compatible(&ck.pipeline, cfg, n, data.task)?;
            let prepared = ck.pipeline.prepare_all(&data.train)?;
            if ck.train != tc {
                return Err(CliError::Config(format!(
                    "seed {seed}: train settings differ from the checkpoint; resume needs identical settings"
                )));
            }
            let path = out.reclaim(&ck_rel)?;
            (ck.pipeline, ck.state, prepared, path)
        } else {
            let ck_path = out.claim(&ck_rel)?;
            let ref_path = out.root().join(seed_file(seed, REFERENCE));
            let reference = if ref_path.exists() {
                let r: ReferenceModel = serde_json::from_str(&fs::read_to_string(&ref_path)?)?;
                if r.n_vars != n || r.task != data.task {
                    return Err(CliError::Config(format!(
                        "dimension mismatch: {} was trained for N = {} and {:?}",
                        ref_path.display(),
                        r.n_vars,
                        r.task
                    )));
                }
                r
            } else {
                fit_reference(cfg, &data, seed, out)?
            };
            let mask = build_mask(cfg, data.task, n, data.ingested.as_ref())?;
            let mut mc = cfg.model.clone();
            mc.seed = seed;
            let model = ExcapModel::new(n, data.task, mask, mc)?;
            let pipeline = Pipeline::new(reference, model)?;
            let prepared = pipeline.prepare_all(&data.train)?;
            let state = TrainState::new(&pipeline.model, &tc);
            (pipeline, state, prepared, ck_path)
        };
        let until = opts.stop_after.unwrap_or(tc.epochs).min(tc.epochs);
        train_until(&mut pipeline.model, &prepared, &tc, &mut state, until)?;
        write_trace_csv(&state.trace, &out.reclaim(seed_file(seed, "loss.csv"))?)?;
        Checkpoint {
            pipeline,
            train: tc,
            state,
        }
        .save(&ck_path)?;
    }
    Ok(())
}

fn check_compatible(p: &Pipeline, cfg: &RunConfig, n: usize, task: Task) -> Result<(), CliError> {
    let m = &p.model;
    if m.n_vars != n {
        return Err(CliError::Config(format!(
            "dimension N mismatch: checkpoint has N = {}, dataset has N = {n}",
            m.n_vars
        )));
    }
    if m.task.outputs() != task.outputs() || m.task.is_classification() != task.is_classification() {
        return Err(CliError::Config(format!(
            "dimension D mismatch: checkpoint has {:?}, dataset implies {task:?}",
            m.task
        )));
    }
    let (a, b) = (&m.config.encoder, &cfg.model.encoder);
    if a.d_z != b.d_z {
        return Err(CliError::Config(format!(
            "dimension d_z mismatch: checkpoint has d_z = {}, config has d_z = {}",
            a.d_z, b.d_z
        )));
    }
    if m.config.segmenter.l_max != cfg.model.segmenter.l_max {
        return Err(CliError::Config(format!(
            "dimension L_max mismatch: checkpoint has {}, config has {}",
            m.config.segmenter.l_max, cfg.model.segmenter.l_max
        )));
    }
    Ok(())
}

fn load_checkpoint(cfg: &RunConfig, data: &Data, seed: u64) -> Result<Checkpoint, CliError> {
    let path = cfg.out.join(seed_file(seed, CHECKPOINT));
    if !path.exists() {
        return Err(CliError::Data(format!("{} not found; run train first", path.display())));
    }
    let ck = Checkpoint::load(&path)?;
    check_compatible(&ck.pipeline, cfg, data.n_vars(), data.task)?;
    Ok(ck)
}

// ---------------------------------------------------------------- explain

#[derive(Serialize)]
struct Explanation<'a> {
    id: &'a str,
    boundaries: &'a [usize],
    saliency_flags: &'a [bool],
    attribution: Tensor,
}

pub fn explain_cmd(cfg: &RunConfig, out: &mut OutDir) -> Result<(), CliError> {
    let data = load_data(cfg)?;
    for &seed in &cfg.seeds {
        let ck = load_checkpoint(cfg, &data, seed)?;
        let test = ck.pipeline.prepare_all(&data.test)?;
        let explanations = test
            .iter()
            .map(|p| {
                Ok(Explanation {
                    id: &p.id,
                    boundaries: &p.segments.boundaries,
                    saliency_flags: &p.segments.saliency_flags,
                    attribution: extract_attribution(p)?,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        write_json(&out.claim(seed_file(seed, "attributions.json"))?, &explanations)?;

        let mut w = csv::Writer::from_path(out.claim(seed_file(seed, "embeddings.csv"))?)?;
        let d_z = ck.pipeline.model.d_z();
        let mut header = vec!["id".to_string(), "variable".into(), "segment".into(), "salient".into()];
        header.extend((0..d_z).map(|k| format!("z{k}")));
        w.write_record(&header)?;
        for p in &test {
            for (k, z) in ck.pipeline.embeddings(p)?.iter().enumerate() {
                for v in 0..z.rows() {
                    let mut rec = vec![p.id.clone(), v.to_string(), k.to_string(), p.segments.saliency_flags[k].to_string()];
                    rec.extend(z.row(v).iter().map(|x| format!("{x:?}")));
                    w.write_record(&rec)?;
                }
            }
        }
        w.flush()?;
    }
    Ok(())
}

// ---------------------------------------------------------------- evaluate

pub struct EvaluateOptions {
    pub baselines: bool,
    pub runtime: bool,
    pub jobs: usize,
}

/// One row of the faithfulness table.
#[derive(Debug, Clone, Serialize)]
struct TableRow {
    method: String,
    seed: String,
    auprc: Option<f64>,
    auroc: Option<f64>,
    delta_auprc_pct: Option<f64>,
    delta_auroc_pct: Option<f64>,
    mse: Option<f64>,
    delta_mse_pct: Option<f64>,
}

impl TableRow {
    fn new(method: &str, seed: String, scores: &BTreeMap<&'static str, Degradation>) -> Self {
        let get = |m: &str| scores.get(m);
        Self {
            method: method.to_string(),
            seed,
            auprc: get("auprc").map(|d| d.after),
            auroc: get("auroc").map(|d| d.after),
            delta_auprc_pct: get("auprc").map(|d| d.delta_percent),
            delta_auroc_pct: get("auroc").map(|d| d.delta_percent),
            mse: get("mse").map(|d| d.after),
            delta_mse_pct: get("mse").map(|d| d.delta_percent),
        }
    }
}

fn metrics_for(task: Task) -> Vec<Metric> {
    if task.is_classification() {
        vec![Metric::Auprc, Metric::Auroc]
    } else {
        vec![Metric::Mse]
    }
}

fn target_name(t: MaskTarget) -> &'static str {
    match t {
        MaskTarget::Top => "excap_top",
        MaskTarget::Random => "excap_random",
        MaskTarget::Bottom => "excap_bottom",
    }
}

/// Output explained by the gradient baselines: the class-1 log-probability,
/// or the first regression output.
fn explained_output(task: Task) -> Output {
    if task.is_classification() {
        Output::LogProb(1)
    } else {
        Output::Branch(0)
    }
}

struct SeedEvaluation {
    seed: u64,
    rows: Vec<(String, BTreeMap<&'static str, Degradation>)>,
    mean_attribution: Tensor,
    lipschitz: Vec<LipschitzRow>,
}

fn score_all(
    pipeline: &Pipeline,
    test: &[Prepared],
    attributions: &[Tensor],
    protocol: &MaskingProtocol,
    metrics: &[Metric],
    seed: u64,
) -> Result<BTreeMap<&'static str, Degradation>, CliError> {
    let mut scores = BTreeMap::new();
    for &m in metrics {
        scores.insert(m.name(), mask_and_score(pipeline, test, attributions, protocol, m, seed)?);
    }
    Ok(scores)
}

fn evaluate_seed(cfg: &RunConfig, data: &Data, seed: u64, baselines: bool) -> Result<SeedEvaluation, CliError> {
    let e = &cfg.evaluation;
    let ck = load_checkpoint(cfg, data, seed)?;
    let pipeline = &ck.pipeline;
    let test = pipeline.prepare_all(&data.test)?;
    let attributions = test.iter().map(extract_attribution).collect::<Result<Vec<_>, _>>()?;
    let metrics = metrics_for(data.task);
    let mut rows = Vec::new();
    for &target in &e.targets {
        let protocol = MaskingProtocol {
            k_percent: e.k_percent,
            target,
            granularity: e.granularity,
        };
        rows.push((target_name(target).to_string(), score_all(pipeline, &test, &attributions, &protocol, &metrics, seed)?));
    }
    if baselines {
        let top = MaskingProtocol {
            k_percent: e.k_percent,
            target: MaskTarget::Top,
            granularity: e.granularity,
        };
        for (i, method) in [Baseline::Random, Baseline::GradSaliency, Baseline::IntegratedGradients].into_iter().enumerate() {
            let maps = test
                .iter()
                .enumerate()
                .map(|(k, p)| {
                    let f = pipeline.frozen(p, explained_output(data.task))?;
                    baseline_attribution(&f, &p.x, method, e.ig_steps, seed ^ ((i as u64) << 32 | k as u64))
                })
                .collect::<Result<Vec<_>, _>>()?;
            rows.push((method.name().to_string(), score_all(pipeline, &test, &maps, &top, &metrics, seed)?));
        }
    }
    let mut mean_attribution = Tensor::zeros(attributions[0].rows(), attributions[0].cols());
    let mut same_shape = true;
    for a in &attributions {
        if a.shape() == mean_attribution.shape() {
            mean_attribution.add_assign(a);
        } else {
            same_shape = false;
        }
    }
    if !same_shape {
        // ragged lengths: report the first sequence's map
        mean_attribution = attributions[0].clone();
    }
    let mean_attribution = excap::eval::normalize_attribution(mean_attribution)?;
    let probe = &test[..test.len().min(e.lipschitz_samples.max(1))];
    let lipschitz = lipschitz_probe(pipeline, probe, &e.sigmas, e.lipschitz_trials, seed)?;
    Ok(SeedEvaluation {
        seed,
        rows,
        mean_attribution,
        lipschitz,
    })
}

#[derive(Serialize)]
struct LipschitzCsvRow {
    seed: u64,
    sigma: f64,
    input_delta: f64,
    output_delta: f64,
    l_emp: f64,
    l_emp_std: f64,
}

fn lipschitz_rows(seed: u64, rows: &[LipschitzRow]) -> Vec<LipschitzCsvRow> {
    rows.iter()
        .map(|r| LipschitzCsvRow {
            seed,
            sigma: r.sigma,
            input_delta: r.input_delta,
            output_delta: r.output_delta,
            l_emp: r.l_emp,
            l_emp_std: r.l_emp_std,
        })
        .collect()
}

fn mean_rows(method: &str, per_seed: &[&BTreeMap<&'static str, Degradation>]) -> TableRow {
    let mut acc: BTreeMap<&'static str, Degradation> = BTreeMap::new();
    let k = per_seed.len() as f64;
    for scores in per_seed {
        for (&m, d) in scores.iter() {
            let a = acc.entry(m).or_insert(Degradation {
                before: 0.0,
                after: 0.0,
                delta_percent: 0.0,
            });
            a.before += d.before / k;
            a.after += d.after / k;
            a.delta_percent += d.delta_percent / k;
        }
    }
    TableRow::new(method, "mean".into(), &acc)
}

pub fn evaluate_cmd(cfg: &RunConfig, opts: &EvaluateOptions, out: &mut OutDir) -> Result<(), CliError> {
    let data = load_data(cfg)?;
    let evals = per_seed(&cfg.seeds, opts.jobs, |seed| evaluate_seed(cfg, &data, seed, opts.baselines))?;
    let primary = if data.task.is_classification() { "auroc" } else { "mse" };

    // stability of the top-k degradation across seeds
    let deltas: Vec<f64> = evals
        .iter()
        .filter_map(|ev| ev.rows.iter().find(|(m, _)| m == "excap_top"))
        .filter_map(|(_, s)| s.get(primary).map(|d| d.delta_percent.abs()))
        .collect();
    let stab = if deltas.len() >= 2 { stability(&deltas).ok() } else { None };

    let mut table = Vec::new();
    let methods: Vec<String> = evals[0].rows.iter().map(|(m, _)| m.clone()).collect();
    for method in &methods {
        let mut per = Vec::new();
        for ev in &evals {
            if let Some((_, s)) = ev.rows.iter().find(|(m, _)| m == method) {
                table.push(TableRow::new(method, ev.seed.to_string(), s));
                per.push(s);
            }
        }
        table.push(mean_rows(method, &per));
    }
    write_csv(&out.claim("evaluation/table.csv")?, &table)?;

    let lip: Vec<LipschitzCsvRow> = evals.iter().flat_map(|ev| lipschitz_rows(ev.seed, &ev.lipschitz)).collect();
    write_csv(&out.claim("evaluation/lipschitz.csv")?, &lip)?;

    let runtime = if opts.runtime {
        let rows = profile_rows(cfg, &data, cfg.seeds[0])?;
        write_csv(&out.claim("evaluation/runtime.csv")?, &rows)?;
        rows.iter().map(|r| (r.t, r.excap_ms)).collect()
    } else {
        BTreeMap::new()
    };

    for ev in &evals {
        let degradation = ev
            .rows
            .iter()
            .find(|(m, _)| m == "excap_top")
            .map(|(_, s)| s.iter().map(|(k, v)| (k.to_string(), *v)).collect())
            .unwrap_or_default();
        let report = ExplanationReport {
            attribution: ev.mean_attribution.clone(),
            degradation,
            stability: stab.as_ref().map(|s| s.coefficient),
            lipschitz_samples: ev.lipschitz.iter().flat_map(|r| r.trials.iter().copied()).collect(),
            runtime: runtime.clone(),
        };
        save_report(&report, &out.claim(format!("evaluation/seed-{}/report.json", ev.seed))?)?;
    }
    if let Some(s) = &stab {
        write_json(&out.claim("evaluation/stability.json")?, s)?;
    }
    Ok(())
}

// ---------------------------------------------------------------- probe-lipschitz

pub fn probe_lipschitz_cmd(cfg: &RunConfig, out: &mut OutDir) -> Result<(), CliError> {
    let data = load_data(cfg)?;
    let e = &cfg.evaluation;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let ck = load_checkpoint(cfg, &data, seed)?;
        let test = ck.pipeline.prepare_all(&data.test[..data.test.len().min(e.lipschitz_samples.max(1))])?;
        let probe = lipschitz_probe(&ck.pipeline, &test, &e.sigmas, e.lipschitz_trials, seed)?;
        rows.extend(lipschitz_rows(seed, &probe));
    }
    write_csv(&out.claim("probe/lipschitz.csv")?, &rows)?;
    Ok(())
}

// ---------------------------------------------------------------- profile

#[derive(Debug, Clone, Serialize)]
pub struct RuntimeRow {
    pub t: usize,
    pub excap_ms: f64,
    pub self_attention_ms: f64,
}

/// Times prepare + predict on four synthetic sequences per length. Uses the
/// trained checkpoint when present, otherwise a freshly initialized model
/// (runtime does not depend on the weights).
fn profile_rows(cfg: &RunConfig, data: &Data, seed: u64) -> Result<Vec<RuntimeRow>, CliError> {
    let e = &cfg.evaluation;
    let n = data.n_vars();
    let pipeline = match load_checkpoint(cfg, data, seed) {
        Ok(ck) => ck.pipeline,
        Err(CliError::Data(_)) => {
            let mask = CausalMask::all_ones(data.task.outputs(), n, MaskSource::Ingested);
            let reference = ReferenceModel::new(n, data.task, cfg.reference)?;
            Pipeline::new(reference, ExcapModel::new(n, data.task, mask, cfg.model.clone())?)?
        }
        Err(other) => return Err(other),
    };
    let batch = |t: usize| -> Result<Vec<TimeSeries>, CliError> { Ok(generate_scm(&motif_spec(n, t), 4, seed)?.series) };
    let ours = runtime_scaling(
        |t| {
            let series = batch(t).map_err(|e| excap::ExcapError::Config(e.to_string()))?;
            let p = &pipeline;
            Ok(move || {
                for s in &series {
                    p.predict(&p.prepare(s)?)?;
                }
                Ok(())
            })
        },
        &e.runtime_t,
        e.runtime_warmup,
        e.runtime_iters,
    )?;
    let contrast = SelfAttentionContrast::new(n, 16, seed);
    let quad = runtime_scaling(
        |t| {
            let series = batch(t).map_err(|e| excap::ExcapError::Config(e.to_string()))?;
            let c = &contrast;
            Ok(move || {
                for s in &series {
                    c.forward(s.values());
                }
                Ok(())
            })
        },
        &e.runtime_t,
        e.runtime_warmup,
        e.runtime_iters,
    )?;
    Ok(ours
        .iter()
        .zip(&quad)
        .map(|(&(t, a), &(_, b))| RuntimeRow {
            t,
            excap_ms: a,
            self_attention_ms: b,
        })
        .collect())
}

pub fn profile_cmd(cfg: &RunConfig, out: &mut OutDir) -> Result<(), CliError> {
    let data = load_data(cfg)?;
    let rows = profile_rows(cfg, &data, cfg.seeds[0])?;
    write_csv(&out.claim("profile/runtime.csv")?, &rows)?;
    Ok(())
}
