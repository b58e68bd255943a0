use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use taskprune::calibration::{collect_norms, sample_corpus, SourceTag, TokenCorpus};
use taskprune::evaluation::{
    calibration_samples, compare_on, lm_metrics, CompareOptions, ComparisonTable, EvalReport, LmMetrics, Splits,
};
use taskprune::format::{decode_corpus, decode_mask, decode_model, encode_mask, write_model};
use taskprune::masking::{make_mask, PruneMask, SparsitySpec};
use taskprune::model::{apply_mask, Model, ModelSpec, OUT};
use taskprune::scoring::wanda_scores;
use taskprune::seed::sub_seed;
use taskprune::taskaware::task_aware_scores;
use taskprune::train::{train_toy_model, TrainConfig};

use crate::config::{parse_layer_alpha, parse_list, parse_sparsity, RunConfig};
use crate::error::{CliError, CliResult, FileExt, StageExt};
use crate::fixture::{build_fixture, write_fixture, FixtureParams};
use crate::hash::blob_hash;
use crate::{EvalArgs, FixtureArgs, PlotDataArgs, RunArgs, SweepArgs, TrainArgs};

pub const MASK_FILE: &str = "mask.tpm";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const SWEEP_JSON: &str = "sweep.json";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const ALPHA_METRICS_CSV: &str = "alpha_metrics.csv";
pub const LAYER_GROUPS_CSV: &str = "layer_groups.csv";

const CALIBRATION_RECIPE: &str = "uniform sample without replacement of whole token sequences from each \
     calibration corpus, one shared sample seed; sequences used as-is, no templating";

fn read_file(path: &Path, hashes: &mut BTreeMap<String, String>, role: &str) -> CliResult<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    hashes.insert(role.to_string(), blob_hash(&bytes));
    Ok(bytes)
}

fn load_model(path: &Path, hashes: &mut BTreeMap<String, String>) -> CliResult<Model> {
    decode_model(&read_file(path, hashes, "model")?).stage("load")
}

fn load_corpus(
    path: &Path,
    source: SourceTag,
    hashes: &mut BTreeMap<String, String>,
    role: &str,
) -> CliResult<TokenCorpus> {
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| role.to_string());
    decode_corpus(&read_file(path, hashes, role)?, &name, source).stage("load")
}

fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn to_json(value: &impl Serialize) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialize");
    s.push('\n');
    s.into_bytes()
}

fn parse_hidden(text: &str) -> CliResult<Vec<usize>> {
    parse_list("--hidden", text)
}

pub fn fixture(a: &FixtureArgs) -> CliResult<()> {
    let params = FixtureParams {
        seed: a.seed,
        overlap: a.overlap,
        channels: a.channels,
        hidden: parse_hidden(&a.hidden)?,
        steps: a.steps,
        lr: a.lr,
    };
    let f = build_fixture(&params)?;
    write_fixture(&a.out, &f)?;
    println!("fixture written to {} (train loss {:.4})", a.out.display(), f.train.final_loss);
    Ok(())
}

pub fn train(a: &TrainArgs) -> CliResult<()> {
    let mut hashes = BTreeMap::new();
    let mut sequences = Vec::new();
    for (k, path) in a.corpora.iter().enumerate() {
        sequences.extend(load_corpus(path, SourceTag::General, &mut hashes, &format!("corpus{k}"))?.sequences);
    }
    let corpus = TokenCorpus::new("train", SourceTag::General, sequences);
    let spec = ModelSpec {
        vocab_size: a.vocab_size,
        embed_dim: a.embed_dim,
        layer_dims: parse_hidden(&a.hidden)?,
        nonlinearity: a.nonlinearity,
        seed: a.seed,
    };
    let cfg = TrainConfig { steps: a.steps, lr: a.lr, batch_size: a.batch_size, train_embedding: true, seed: a.seed };
    let (mut model, report) = train_toy_model(spec, &corpus, &cfg).stage("train")?;
    if a.prune_output {
        model.set_prunable(OUT, true).stage("train")?;
    }
    write_model(&a.out, &model).file("write", &a.out)?;
    println!(
        "trained {} steps, final loss {:.6}, grad norm {:.3e}",
        report.steps, report.final_loss, report.final_grad_norm
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalLine<'a> {
    corpus: &'a Path,
    #[serde(flatten)]
    metrics: LmMetrics,
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    let mut hashes = BTreeMap::new();
    let mut model = load_model(&a.model, &mut hashes)?;
    if let Some(path) = &a.mask {
        let mask = decode_mask(&read_file(path, &mut hashes, "mask")?).stage("load")?;
        model = apply_mask(&model, &mask).stage("apply")?;
    }
    for path in &a.corpora {
        let corpus = load_corpus(path, SourceTag::General, &mut hashes, "corpus")?;
        let metrics = lm_metrics(&model, &corpus).stage("evaluation")?;
        println!("{}", serde_json::to_string(&EvalLine { corpus: path, metrics }).expect("metrics serialize"));
    }
    Ok(())
}

fn run_config(command: &str, a: &RunArgs) -> CliResult<RunConfig> {
    let cfg = RunConfig {
        command: command.to_string(),
        model: a.model.clone(),
        general_corpus: a.general_corpus.clone(),
        task_corpus: a.task_corpus.clone(),
        general_eval: a.general_eval.clone(),
        task_eval: a.task_eval.clone(),
        task_valid: a.task_valid.clone(),
        alpha: a.alpha,
        layer_alpha: parse_layer_alpha(&a.layer_alpha)?,
        alpha_scale: a.alpha_scale,
        norm_mode: a.norm_mode,
        sparsity: a.sparsity.clone(),
        scope: a.scope,
        mean_normalize: a.mean_normalize,
        seed: a.seed,
        calib_samples: a.calib_samples,
        balance: a.balance,
        out: a.out.clone(),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Model and corpora of one run, with the content hash of every file read.
struct Inputs {
    model: Model,
    general: TokenCorpus,
    task: Option<TokenCorpus>,
    general_eval: TokenCorpus,
    task_eval: TokenCorpus,
    task_valid: TokenCorpus,
    hashes: BTreeMap<String, String>,
}

impl Inputs {
    fn load(cfg: &RunConfig) -> CliResult<Self> {
        let mut hashes = BTreeMap::new();
        let model = load_model(&cfg.model, &mut hashes)?;
        let general = load_corpus(&cfg.general_corpus, SourceTag::General, &mut hashes, "general_corpus")?;
        let task = match &cfg.task_corpus {
            Some(p) => Some(load_corpus(p, SourceTag::Task, &mut hashes, "task_corpus")?),
            None => None,
        };
        let general_eval = match &cfg.general_eval {
            Some(p) => load_corpus(p, SourceTag::General, &mut hashes, "general_eval")?,
            None => general.clone(),
        };
        let task_eval = match &cfg.task_eval {
            Some(p) => load_corpus(p, SourceTag::Task, &mut hashes, "task_eval")?,
            None => task.clone().unwrap_or_else(|| general_eval.clone()),
        };
        let task_valid = match &cfg.task_valid {
            Some(p) => load_corpus(p, SourceTag::Task, &mut hashes, "task_valid")?,
            None => task_eval.clone(),
        };
        Ok(Self { model, general, task, general_eval, task_eval, task_valid, hashes })
    }

    fn task(&self, command: &str) -> CliResult<&TokenCorpus> {
        self.task.as_ref().ok_or_else(|| CliError::Usage(format!("{command} requires --task-corpus")))
    }
}

fn compare_options(cfg: &RunConfig) -> CompareOptions {
    CompareOptions {
        calib_samples: cfg.calib_samples,
        balance: cfg.balance,
        seed: cfg.seed,
        task_aware: cfg.task_aware(),
    }
}

fn seeds(seed: u64) -> BTreeMap<String, u64> {
    BTreeMap::from([
        ("run".to_string(), seed),
        ("calibration-sample".to_string(), sub_seed(seed, "calibration-sample")),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub general_sequences: usize,
    pub general_tokens: usize,
    pub task_sequences: usize,
    pub task_tokens: usize,
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub input_hashes: BTreeMap<String, String>,
    pub mask_file: String,
    pub mask_hash: String,
    pub calibration: CalibrationSummary,
    pub report: EvalReport,
}

fn write_run_outputs(
    cfg: &RunConfig,
    inputs: &Inputs,
    mask: &PruneMask,
    calibration: CalibrationSummary,
    report: EvalReport,
) -> CliResult<()> {
    create_dir(&cfg.out)?;
    let mask_bytes = encode_mask(mask).stage("write")?;
    write_bytes(&cfg.out.join(MASK_FILE), &mask_bytes)?;
    let doc = RunReport {
        config: cfg.clone(),
        input_hashes: inputs.hashes.clone(),
        mask_file: MASK_FILE.to_string(),
        mask_hash: blob_hash(&mask_bytes),
        calibration,
        report,
    };
    write_bytes(&cfg.out.join(REPORT_JSON), &to_json(&doc))?;
    write_bytes(&cfg.out.join(REPORT_CSV), &report_csv(&doc))?;
    println!(
        "{}: sparsity {:.4}, general ppl {:.4}, task loss {:.4} -> {}",
        doc.report.method,
        doc.report.sparsity.fraction,
        doc.report.perplexity_general,
        doc.report.task_loss,
        cfg.out.display()
    );
    Ok(())
}

fn report_csv(doc: &RunReport) -> Vec<u8> {
    let r = &doc.report;
    let c = &doc.config;
    let hash = |k: &str| doc.input_hashes.get(k).cloned().unwrap_or_default();
    let mut w = csv::Writer::from_writer(Vec::new());
    let rows: [[String; 19]; 2] = [
        [
            "method",
            "alpha",
            "spec",
            "scope",
            "norm_mode",
            "alpha_scale",
            "mean_normalize",
            "seed",
            "calib_samples",
            "balance",
            "sparsity",
            "perplexity_general",
            "perplexity_task",
            "task_loss",
            "task_accuracy",
            "model_hash",
            "general_corpus_hash",
            "task_corpus_hash",
            "mask_hash",
        ]
        .map(String::from),
        [
            r.method.clone(),
            r.alpha.map(|a| a.to_string()).unwrap_or_default(),
            r.spec.to_string(),
            c.scope.to_string(),
            c.norm_mode.to_string(),
            c.alpha_scale.to_string(),
            c.mean_normalize.to_string(),
            c.seed.to_string(),
            c.calib_samples.to_string(),
            c.balance.to_string(),
            r.sparsity.fraction.to_string(),
            r.perplexity_general.to_string(),
            r.perplexity_task.to_string(),
            r.task_loss.to_string(),
            r.task_accuracy.to_string(),
            hash("model"),
            hash("general_corpus"),
            hash("task_corpus"),
            doc.mask_hash.clone(),
        ],
    ];
    for row in rows {
        w.write_record(&row).expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

fn summary(g: &TokenCorpus, t: Option<&TokenCorpus>) -> CalibrationSummary {
    CalibrationSummary {
        general_sequences: g.len(),
        general_tokens: g.total_tokens(),
        task_sequences: t.map_or(0, TokenCorpus::len),
        task_tokens: t.map_or(0, TokenCorpus::total_tokens),
    }
}

pub fn prune(a: &RunArgs) -> CliResult<()> {
    let cfg = run_config("prune", a)?;
    let inputs = Inputs::load(&cfg)?;
    let spec = cfg.sparsity_spec()?;
    let opts = compare_options(&cfg);
    let (gs, ts) = calibration_samples(&inputs.general, inputs.task("prune")?, &opts).stage("calibration")?;
    let g = collect_norms(&inputs.model, &gs).stage("calibration")?;
    let t = collect_norms(&inputs.model, &ts).stage("calibration")?;
    let scores = task_aware_scores(&inputs.model, &g, &t, &opts.task_aware).stage("scoring")?;
    let mask = make_mask(&scores.scores, &spec).stage("masking")?;
    let pruned = apply_mask(&inputs.model, &mask).stage("apply")?;
    let report = EvalReport::build(
        "task-aware",
        &pruned,
        &mask,
        &inputs.general_eval,
        &inputs.task_eval,
        Some(&scores.partition),
        scores.alpha_factors,
        seeds(cfg.seed),
        CALIBRATION_RECIPE.to_string(),
    )
    .stage("evaluation")?;
    write_run_outputs(&cfg, &inputs, &mask, summary(&gs, Some(&ts)), report)
}

pub fn baseline(a: &RunArgs) -> CliResult<()> {
    let cfg = run_config("baseline", a)?;
    let inputs = Inputs::load(&cfg)?;
    let spec = cfg.sparsity_spec()?;
    let opts = compare_options(&cfg);
    // With a task corpus the general sample is drawn exactly as `prune` and
    // `sweep` draw it, balancing included.
    let gs = match &inputs.task {
        Some(task) => calibration_samples(&inputs.general, task, &opts).stage("calibration")?.0,
        None => sample_corpus(&inputs.general, cfg.calib_samples, sub_seed(cfg.seed, "calibration-sample"))
            .stage("calibration")?,
    };
    let g = collect_norms(&inputs.model, &gs).stage("calibration")?;
    let scores = wanda_scores(&inputs.model, &g, cfg.mean_normalize).stage("scoring")?;
    let mask = make_mask(&scores, &spec).stage("masking")?;
    let pruned = apply_mask(&inputs.model, &mask).stage("apply")?;
    let report = EvalReport::build(
        "wanda",
        &pruned,
        &mask,
        &inputs.general_eval,
        &inputs.task_eval,
        None,
        Vec::new(),
        seeds(cfg.seed),
        CALIBRATION_RECIPE.to_string(),
    )
    .stage("evaluation")?;
    write_run_outputs(&cfg, &inputs, &mask, summary(&gs, None), report)
}

/// Contents of `sweep.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config: RunConfig,
    pub alphas: Vec<f64>,
    pub ratios: Vec<String>,
    pub input_hashes: BTreeMap<String, String>,
    pub calibration_recipe: String,
    pub tables: Vec<ComparisonTable>,
    /// Mask files of task-aware rows, `[ratio][alpha]`, when written.
    pub mask_files: Vec<Vec<String>>,
}

/// Name of the mask file for ratio index `r` and alpha index `a`.
pub fn sweep_mask_file(r: usize, a: usize) -> String {
    format!("mask_r{r}_a{a}.tpm")
}

pub fn sweep(a: &SweepArgs) -> CliResult<()> {
    let cfg = run_config("sweep", &a.run)?;
    let alphas: Vec<f64> = parse_list("--alphas", &a.alphas)?;
    if let Some(bad) = alphas.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
        return Err(CliError::Usage(format!("--alphas: {bad} is not a finite threshold >= 0")));
    }
    let ratios: Vec<String> = match &a.ratios {
        Some(text) => parse_list("--ratios", text)?,
        None => vec![cfg.sparsity.clone()],
    };
    let specs = ratios.iter().map(|r| parse_sparsity(r, cfg.scope)).collect::<CliResult<Vec<SparsitySpec>>>()?;

    let inputs = Inputs::load(&cfg)?;
    let splits = Splits {
        general_train: &inputs.general,
        task_train: inputs.task("sweep")?,
        general_eval: &inputs.general_eval,
        task_eval: &inputs.task_eval,
        task_valid: &inputs.task_valid,
    };
    let opts = compare_options(&cfg);
    let tables = specs
        .iter()
        .map(|spec| compare_on(&splits, &inputs.model, spec, &alphas, &opts).stage("sweep"))
        .collect::<CliResult<Vec<_>>>()?;

    create_dir(&cfg.out)?;
    let mut mask_files = Vec::new();
    if a.write_masks {
        for (r, table) in tables.iter().enumerate() {
            let mut names = Vec::new();
            for (k, row) in table.task_aware_rows().enumerate() {
                let name = sweep_mask_file(r, k);
                let mask = row.mask.as_ref().expect("pruned rows carry masks");
                write_bytes(&cfg.out.join(&name), &encode_mask(mask).stage("write")?)?;
                names.push(name);
            }
            mask_files.push(names);
        }
    }
    let doc = SweepReport {
        config: cfg.clone(),
        alphas,
        ratios,
        input_hashes: inputs.hashes.clone(),
        calibration_recipe: CALIBRATION_RECIPE.to_string(),
        tables,
        mask_files,
    };
    write_bytes(&cfg.out.join(SWEEP_JSON), &to_json(&doc))?;
    write_bytes(&cfg.out.join(SWEEP_CSV), &sweep_csv(&doc))?;
    for (ratio, table) in doc.ratios.iter().zip(&doc.tables) {
        println!(
            "sparsity {ratio}: selected alpha {} (task valid loss {:.4})",
            table.selected_alpha,
            table.selected().task_valid_loss
        );
    }
    Ok(())
}

/// One row per (sparsity, alpha) task-aware cell; baseline and dense metrics
/// of the same sparsity ride along as columns.
pub fn sweep_csv(doc: &SweepReport) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "spec",
        "alpha",
        "selected",
        "sparsity",
        "perplexity_general",
        "perplexity_task",
        "task_loss",
        "task_accuracy",
        "task_valid_loss",
        "wanda_perplexity_general",
        "wanda_perplexity_task",
        "wanda_task_loss",
        "wanda_task_accuracy",
        "dense_perplexity_general",
        "dense_task_loss",
    ])
    .expect("in-memory csv");
    for table in &doc.tables {
        let base = table.row("wanda").expect("comparison has a baseline row");
        let dense = table.row("dense").expect("comparison has a dense row");
        for row in table.task_aware_rows() {
            let alpha = row.alpha.expect("task-aware rows carry alpha");
            w.write_record([
                table.spec.to_string(),
                alpha.to_string(),
                (alpha == table.selected_alpha).to_string(),
                row.sparsity.to_string(),
                row.perplexity_general.to_string(),
                row.perplexity_task.to_string(),
                row.task_loss.to_string(),
                row.task_accuracy.to_string(),
                row.task_valid_loss.to_string(),
                base.perplexity_general.to_string(),
                base.perplexity_task.to_string(),
                base.task_loss.to_string(),
                base.task_accuracy.to_string(),
                dense.perplexity_general.to_string(),
                dense.task_loss.to_string(),
            ])
            .expect("in-memory csv");
        }
    }
    w.into_inner().expect("in-memory csv")
}

pub fn plot_data(a: &PlotDataArgs) -> CliResult<()> {
    let bytes = fs::read(&a.sweep).map_err(|e| CliError::io(&a.sweep, e))?;
    let doc: SweepReport = serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Stage { stage: "load", source: taskprune::Error::Format(e.to_string()) })?;
    create_dir(&a.out)?;

    let mut metrics = csv::Writer::from_writer(Vec::new());
    metrics
        .write_record([
            "spec",
            "alpha",
            "task_loss",
            "task_accuracy",
            "perplexity_general",
            "perplexity_task",
            "wanda_task_loss",
            "wanda_perplexity_general",
        ])
        .expect("in-memory csv");
    let mut groups = csv::Writer::from_writer(Vec::new());
    groups
        .write_record(["spec", "alpha", "layer_index", "layer", "layer_alpha", "shared", "general_only", "task_only"])
        .expect("in-memory csv");
    for table in &doc.tables {
        let spec = table.spec.to_string();
        let base = table.row("wanda").expect("comparison has a baseline row");
        for row in table.task_aware_rows() {
            let alpha = row.alpha.expect("task-aware rows carry alpha").to_string();
            metrics
                .write_record([
                    spec.clone(),
                    alpha.clone(),
                    row.task_loss.to_string(),
                    row.task_accuracy.to_string(),
                    row.perplexity_general.to_string(),
                    row.perplexity_task.to_string(),
                    base.task_loss.to_string(),
                    base.perplexity_general.to_string(),
                ])
                .expect("in-memory csv");
            for (k, g) in row.group_fractions.iter().enumerate() {
                groups
                    .write_record([
                        spec.clone(),
                        alpha.clone(),
                        k.to_string(),
                        g.layer.clone(),
                        g.alpha.to_string(),
                        g.fractions.shared.to_string(),
                        g.fractions.general_only.to_string(),
                        g.fractions.task_only.to_string(),
                    ])
                    .expect("in-memory csv");
            }
        }
    }
    write_bytes(&a.out.join(ALPHA_METRICS_CSV), &metrics.into_inner().expect("in-memory csv"))?;
    write_bytes(&a.out.join(LAYER_GROUPS_CSV), &groups.into_inner().expect("in-memory csv"))?;
    Ok(())
}
