use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use catrace_core::checkpoint;
use catrace_core::darc::{self, check_mutual_exclusivity, parse_facts, summarize, validate_fact, Issue};
use catrace_core::factgen::{self, Archive, ChatClient, HttpChatClient, ReplayClient, RetryPolicy};
use catrace_core::locality::{inter_category_avg, intra_category_avg, pairwise_matrix, PairAverage};
use catrace_core::report::{
    emit_heatmap, emit_lineplot, summary_text, FigureSpec, Grid, LineSeries, MaxAieColumn, MaxAieTable,
};
use catrace_core::tokenizer::Vocab;
use catrace_core::tracing::{self, trace_category, write_fact_grids, CellStats, SkipReason};
use catrace_core::{
    Bucket, CategoryAggregate, CategoryManifest, Component, CorrelationMatrix, FactRecord, Gpt2, LayerImportanceVector,
    TraceConfig,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{config_err, RunConfig, View};

/// Per-item problem that does not stop the stage.
#[derive(Debug, Clone, Serialize)]
pub struct ItemFailure {
    pub item: String,
    pub message: String,
}

#[derive(Debug, Default, Serialize)]
pub struct StageOutcome {
    pub stage: &'static str,
    pub artifacts: Vec<String>,
    pub failures: Vec<ItemFailure>,
}

impl StageOutcome {
    fn new(stage: &'static str) -> Self {
        Self {
            stage,
            ..Default::default()
        }
    }

    fn fail(&mut self, item: impl Into<String>, message: impl Into<String>) {
        self.failures.push(ItemFailure {
            item: item.into(),
            message: message.into(),
        });
    }

    fn write(&mut self, cfg: &RunConfig, path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
        fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
        let rel = path.strip_prefix(&cfg.output_dir).unwrap_or(path);
        self.artifacts.push(rel.display().to_string());
        Ok(())
    }
}

/// File-name form of a subcategory or category name.
pub fn slug(name: &str) -> String {
    let mut out = String::new();
    for c in name.chars() {
        if c.is_alphanumeric() {
            out.extend(c.to_lowercase());
        } else if !out.ends_with('-') && !out.is_empty() {
            out.push('-');
        }
    }
    let trimmed = out.trim_end_matches('-');
    if trimmed.is_empty() {
        "unnamed".into()
    } else {
        trimmed.to_string()
    }
}

fn json_pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn load_manifests(paths: &[PathBuf]) -> Result<Vec<CategoryManifest>> {
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?;
            CategoryManifest::from_json(&text).map_err(|e| config_err(format!("{}: {e}", p.display())))
        })
        .collect()
}

struct LoadedFacts {
    facts: Vec<FactRecord>,
    schema_errors: Vec<(String, darc::SchemaError)>,
}

fn load_facts(paths: &[PathBuf]) -> Result<LoadedFacts> {
    let mut facts = Vec::new();
    let mut schema_errors = Vec::new();
    for p in paths {
        let file = File::open(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?;
        let parsed = parse_facts(BufReader::new(file));
        let name = p.display().to_string();
        schema_errors.extend(parsed.errors.into_iter().map(|e| (name.clone(), e)));
        facts.extend(parsed.records.into_iter().map(|(_, r)| r));
    }
    Ok(LoadedFacts { facts, schema_errors })
}

/// Subcategory names in manifest order, followed by groups that no
/// manifest lists, in order of first appearance.
fn subcategory_order(facts: &[FactRecord], manifests: &[CategoryManifest]) -> Vec<String> {
    let mut order: Vec<String> = Vec::new();
    for m in manifests {
        for n in m.names() {
            if !order.iter().any(|o| o == n) {
                order.push(n.to_string());
            }
        }
    }
    for f in facts {
        if !order.contains(&f.group) {
            order.push(f.group.clone());
        }
    }
    order
}

#[derive(Debug, Serialize)]
struct ValidationReport {
    records: usize,
    schema_errors: Vec<serde_json::Value>,
    issues: Vec<serde_json::Value>,
    warnings: usize,
    violations: Vec<darc::Violation>,
    summary: darc::DatasetSummary,
}

pub fn validate(cfg: &RunConfig, write_outputs: bool) -> Result<(StageOutcome, String)> {
    let mut outcome = StageOutcome::new("validate");
    let loaded = load_facts(&cfg.facts)?;
    let manifests = load_manifests(&cfg.manifests)?;
    let mut issues = Vec::new();
    let mut warnings = 0;
    for f in &loaded.facts {
        for issue in validate_fact(f) {
            let id = tracing::fact_id(f);
            if issue.is_warning() {
                warnings += 1;
            } else {
                outcome.fail(format!("fact {id}"), issue.to_string());
            }
            issues
                .push(serde_json::json!({ "fact_id": id, "issue": issue_json(&issue), "warning": issue.is_warning() }));
        }
    }
    for (file, e) in &loaded.schema_errors {
        outcome.fail(format!("{file}:{}", e.line), e.to_string());
    }
    let mut violations = Vec::new();
    for m in &manifests {
        for v in check_mutual_exclusivity(&loaded.facts, m) {
            outcome.fail(
                format!("{}/{}", m.category, v.subcategory),
                format!(
                    "subject {:?} matches {:?} from {}",
                    v.subject, v.term, v.term_subcategory
                ),
            );
            violations.push(v);
        }
    }
    let summary = summarize(&loaded.facts, &manifests, None);
    let report = ValidationReport {
        records: loaded.facts.len(),
        schema_errors: loaded
            .schema_errors
            .iter()
            .map(
                |(file, e)| serde_json::json!({ "file": file, "line": e.line, "field": e.field, "message": e.message }),
            )
            .collect(),
        issues,
        warnings,
        violations,
        summary,
    };
    let json = json_pretty(&report);
    if write_outputs {
        let dir = cfg.stage_dir("validate")?;
        outcome.write(cfg, &dir.join("report.json"), &json)?;
        outcome.write(cfg, &dir.join("summary.txt"), summary_text(&report.summary))?;
    }
    Ok((outcome, json))
}

fn issue_json(issue: &Issue) -> serde_json::Value {
    serde_json::to_value(issue).expect("serializable")
}

pub fn generate(cfg: &RunConfig, replay: Option<&Path>) -> Result<StageOutcome> {
    let mut outcome = StageOutcome::new("generate");
    let gen = cfg
        .generation
        .as_ref()
        .ok_or_else(|| config_err("config has no `generation` section"))?;
    let client: Box<dyn ChatClient> = match replay {
        Some(dir) => Box::new(ReplayClient::open(dir).map_err(|e| config_err(e.to_string()))?),
        None => Box::new(HttpChatClient::from_env().map_err(|e| config_err(e.to_string()))?),
    };
    let archive = Archive::new(&gen.archive);
    let dir = cfg.stage_dir("generate")?;
    let sleep = |d| std::thread::sleep(d);
    for job in &gen.jobs {
        let name = &job.subcategory;
        let result = factgen::run_generation(
            job,
            &gen.model,
            client.as_ref(),
            &archive,
            gen.max_batches,
            RetryPolicy::default(),
            &sleep,
        )
        .and_then(|g| {
            let conv = factgen::run_conversion(
                &g.facts,
                name,
                job.batch_size,
                &gen.model,
                client.as_ref(),
                &archive,
                RetryPolicy::default(),
                &sleep,
            )?;
            Ok((g, conv))
        });
        match result {
            Ok((g, conv)) => {
                let s = slug(name);
                outcome.write(cfg, &dir.join(format!("{s}.raw.txt")), g.facts.join("\n") + "\n")?;
                let mut lines = String::new();
                for r in &conv.records {
                    lines.push_str(&serde_json::to_string(r).expect("serializable"));
                    lines.push('\n');
                }
                outcome.write(cfg, &dir.join(format!("{s}.jsonl")), lines)?;
                if !conv.rejected.is_empty() {
                    outcome.fail(
                        name.clone(),
                        format!("{} objects could not be parsed", conv.rejected.len()),
                    );
                }
                log::info!(
                    "{name}: {} facts in {} batches, {} duplicates removed, {} records",
                    g.facts.len(),
                    g.batches,
                    g.duplicates_removed,
                    conv.records.len()
                );
            }
            Err(e) => outcome.fail(name.clone(), e.to_string()),
        }
    }
    Ok(outcome)
}

#[derive(Debug, Clone, Default)]
pub struct TraceOptions {
    pub positions: Option<Vec<Bucket>>,
    pub components: Option<Vec<Component>>,
    pub limit: Option<usize>,
    pub raw: bool,
}

/// Per-subcategory metadata written next to each aggregate CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceSidecar {
    pub order: usize,
    pub subcategory: String,
    pub model_id: String,
    pub trace_config: TraceConfig,
    pub sigma: f64,
    pub window: usize,
    pub facts_total: usize,
    pub facts_traced: usize,
    pub skipped: BTreeMap<SkipReason, usize>,
    pub total_effect: CellStats,
    pub aggregate_csv: String,
}

fn load_model(cfg: &RunConfig) -> Result<(Gpt2, String)> {
    let paths = cfg
        .model
        .as_ref()
        .ok_or_else(|| config_err("config has no `model` section"))?;
    let config = checkpoint::load_config(&paths.config).map_err(|e| config_err(e.to_string()))?;
    let weights = checkpoint::load_model(&paths.weights, &config).map_err(|e| config_err(e.to_string()))?;
    let model = Gpt2::new(config, weights).map_err(|e| config_err(e.to_string()))?;
    Ok((model, paths.id.clone()))
}

fn load_vocab(cfg: &RunConfig) -> Result<Vocab> {
    let t = cfg
        .tokenizer
        .as_ref()
        .ok_or_else(|| config_err("config has no `tokenizer` section"))?;
    Vocab::from_files(&t.vocab, &t.merges).map_err(|e| config_err(e.to_string()))
}

pub fn trace(cfg: &RunConfig, opts: &TraceOptions) -> Result<StageOutcome> {
    let mut outcome = StageOutcome::new("trace");
    let (model, model_id) = load_model(cfg)?;
    let vocab = load_vocab(cfg)?;
    let manifests = load_manifests(&cfg.manifests)?;
    let loaded = load_facts(&cfg.facts)?;
    for (file, e) in &loaded.schema_errors {
        outcome.fail(format!("{file}:{}", e.line), e.to_string());
    }
    let mut trace_cfg = cfg.trace.clone();
    if let Some(p) = &opts.positions {
        trace_cfg.positions = tracing::PositionSelection::Subset(p.clone());
    }
    if let Some(c) = &opts.components {
        trace_cfg.components = c.clone();
    }
    trace_cfg.validate().map_err(|e| config_err(e.to_string()))?;

    let sigma = match cfg.sigma {
        Some(s) => s,
        None => {
            let prompts: Vec<Vec<u32>> = loaded.facts.iter().map(|f| vocab.encode(&f.prompt)).collect();
            tracing::calibrate_noise(&model, &prompts).map_err(|e| config_err(format!("noise calibration: {e}")))?
        }
    };
    log::info!("noise sigma {sigma}");

    let dir = cfg.stage_dir("trace")?;
    for (order, sub) in subcategory_order(&loaded.facts, &manifests).into_iter().enumerate() {
        let mut facts: Vec<FactRecord> = loaded.facts.iter().filter(|f| f.group == sub).cloned().collect();
        if let Some(n) = opts.limit {
            facts.truncate(n);
        }
        let result = trace_category(&sub, &facts, &model, &vocab, &trace_cfg, sigma)?;
        for s in result.skipped.iter().filter(|s| s.reason == SkipReason::ModelError) {
            outcome.fail(format!("{sub}/{}", s.fact_id), s.detail.clone());
        }
        let s = slug(&sub);
        let mut csv = Vec::new();
        result.aggregate.write_csv(&mut csv)?;
        let csv_name = format!("{s}.csv");
        outcome.write(cfg, &dir.join(&csv_name), csv)?;
        let sidecar = TraceSidecar {
            order,
            subcategory: sub.clone(),
            model_id: model_id.clone(),
            trace_config: trace_cfg.clone(),
            sigma,
            window: trace_cfg.window,
            facts_total: facts.len(),
            facts_traced: result.aggregate.facts_traced,
            skipped: result.aggregate.skipped.clone(),
            total_effect: result.aggregate.total_effect,
            aggregate_csv: csv_name,
        };
        outcome.write(cfg, &dir.join(format!("{s}.json")), json_pretty(&sidecar))?;
        let mut skipped = String::new();
        for sk in &result.skipped {
            skipped.push_str(&serde_json::to_string(sk).expect("serializable"));
            skipped.push('\n');
        }
        outcome.write(cfg, &dir.join(format!("{s}.skipped.jsonl")), skipped)?;
        if opts.raw {
            let mut raw = Vec::new();
            write_fact_grids(&result.traces, &mut raw)?;
            outcome.write(cfg, &dir.join(format!("{s}.facts.csv")), raw)?;
        }
        log::info!(
            "{sub}: traced {} of {} facts, mean TE {:?}",
            result.aggregate.facts_traced,
            facts.len(),
            result.aggregate.total_effect.mean
        );
    }
    Ok(outcome)
}

/// Aggregates written by the trace stage, in subcategory order.
fn load_trace_outputs(cfg: &RunConfig) -> Result<Vec<(TraceSidecar, CategoryAggregate)>> {
    let dir = cfg.output_dir.join("trace");
    if !dir.is_dir() {
        return Err(config_err(format!("{} not found; run `trace` first", dir.display())));
    }
    let mut out = Vec::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(&dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    entries.sort();
    for p in entries {
        if p.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let sidecar: TraceSidecar =
            serde_json::from_str(&fs::read_to_string(&p)?).with_context(|| format!("reading {}", p.display()))?;
        let csv = File::open(dir.join(&sidecar.aggregate_csv))
            .with_context(|| format!("opening {}", sidecar.aggregate_csv))?;
        let mut agg = CategoryAggregate::read_csv(&sidecar.subcategory, csv)?;
        agg.facts_traced = sidecar.facts_traced;
        agg.skipped = sidecar.skipped.clone();
        agg.total_effect = sidecar.total_effect;
        out.push((sidecar, agg));
    }
    out.sort_by_key(|(s, _)| s.order);
    Ok(out)
}

pub fn aggregate(cfg: &RunConfig) -> Result<StageOutcome> {
    let mut outcome = StageOutcome::new("aggregate");
    let traced = load_trace_outputs(cfg)?;
    let manifests = load_manifests(&cfg.manifests)?;
    let dir = cfg.stage_dir("aggregate")?;

    let mut w = csv_writer();
    w.write_record([
        "subcategory",
        "layer",
        "bucket",
        "component",
        "mean_aie",
        "count",
        "stddev",
    ])?;
    for (_, agg) in &traced {
        let mut buf = Vec::new();
        agg.write_csv(&mut buf)?;
        let mut r = csv::Reader::from_reader(buf.as_slice());
        for rec in r.records() {
            let rec = rec?;
            let mut row = vec![agg.subcategory.as_str()];
            row.extend(rec.iter());
            w.write_record(row)?;
        }
    }
    outcome.write(cfg, &dir.join("aie.csv"), w.into_inner()?)?;

    let aggregates: Vec<CategoryAggregate> = traced.iter().map(|(_, a)| a.clone()).collect();
    let columns: Vec<MaxAieColumn> = cfg
        .report
        .views
        .iter()
        .map(|v| MaxAieColumn {
            bucket: v.bucket,
            component: v.component,
        })
        .collect();
    let table = MaxAieTable::from_aggregates(&aggregates, &columns);
    outcome.write(cfg, &dir.join("max_aie.txt"), table.to_text())?;
    outcome.write(cfg, &dir.join("max_aie.csv"), table.to_csv())?;

    let mut totals: Vec<FactRecord> = Vec::new();
    let mut correct = HashMap::new();
    for (s, _) in &traced {
        correct.insert(s.subcategory.clone(), s.facts_traced);
        totals.extend(std::iter::repeat_n(placeholder_fact(&s.subcategory), s.facts_total));
    }
    let summary = summarize(&totals, &manifests, Some(&correct));
    outcome.write(cfg, &dir.join("accuracy.txt"), summary_text(&summary))?;
    outcome.write(cfg, &dir.join("accuracy.json"), json_pretty(&summary))?;
    Ok(outcome)
}

fn placeholder_fact(group: &str) -> FactRecord {
    FactRecord {
        known_id: None,
        full_fact: String::new(),
        subject: String::new(),
        attribute: String::new(),
        prediction: String::new(),
        prompt: String::new(),
        group: group.to_string(),
        relation_id: None,
        template: None,
    }
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::Writer::from_writer(Vec::new())
}

#[derive(Debug, Serialize)]
struct AverageEntry {
    kind: &'static str,
    categories: Vec<String>,
    mean: Option<f64>,
    pairs: usize,
    undefined: usize,
    note: Option<String>,
}

fn average_entry(kind: &'static str, categories: Vec<String>, r: Result<PairAverage, impl ToString>) -> AverageEntry {
    match r {
        Ok(a) => AverageEntry {
            kind,
            categories,
            mean: Some(a.mean),
            pairs: a.pairs,
            undefined: a.undefined,
            note: None,
        },
        Err(e) => AverageEntry {
            kind,
            categories,
            mean: None,
            pairs: 0,
            undefined: 0,
            note: Some(e.to_string()),
        },
    }
}

/// Subcategories named by more than one manifest plus configured extras.
fn shared_members(cfg: &RunConfig, manifests: &[CategoryManifest]) -> BTreeSet<String> {
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for m in manifests {
        for n in m.names() {
            *seen.entry(n).or_default() += 1;
        }
    }
    let mut shared: BTreeSet<String> = seen
        .into_iter()
        .filter(|(_, c)| *c > 1)
        .map(|(n, _)| n.to_string())
        .collect();
    shared.extend(cfg.report.shared.iter().cloned());
    shared
}

fn view_vectors(
    aggregates: &[CategoryAggregate],
    view: &View,
    outcome: &mut StageOutcome,
) -> Vec<LayerImportanceVector> {
    let mut out = Vec::new();
    for agg in aggregates {
        match LayerImportanceVector::from_aggregate(agg, view.bucket, view.component) {
            Ok(v) => out.push(v),
            Err(e) => log::warn!("{}: left out of {}: {e}", agg.subcategory, view.slug()),
        }
    }
    if out.is_empty() {
        outcome.fail(view.slug(), "no subcategory has a complete layer curve");
    }
    out
}

pub fn correlate(cfg: &RunConfig) -> Result<StageOutcome> {
    let mut outcome = StageOutcome::new("correlate");
    let traced = load_trace_outputs(cfg)?;
    let aggregates: Vec<CategoryAggregate> = traced.into_iter().map(|(_, a)| a).collect();
    let manifests = load_manifests(&cfg.manifests)?;
    let shared = shared_members(cfg, &manifests);
    let shared_refs: Vec<&str> = shared.iter().map(String::as_str).collect();
    let dir = cfg.stage_dir("correlate")?;
    let mut averages: BTreeMap<String, Vec<AverageEntry>> = BTreeMap::new();
    for view in &cfg.report.views {
        let vectors = view_vectors(&aggregates, view, &mut outcome);
        if vectors.is_empty() {
            continue;
        }
        let matrix = pairwise_matrix(&vectors)?;
        let mut buf = Vec::new();
        matrix.write_csv(&mut buf)?;
        outcome.write(cfg, &dir.join(format!("{}.csv", view.slug())), buf)?;

        let present = |m: &CategoryManifest| -> Vec<String> {
            m.names()
                .filter(|n| matrix.labels.iter().any(|l| l == n))
                .map(String::from)
                .collect()
        };
        let mut entries = Vec::new();
        for m in &manifests {
            let members = present(m);
            let refs: Vec<&str> = members.iter().map(String::as_str).collect();
            entries.push(average_entry(
                "intra",
                vec![m.category.clone()],
                intra_category_avg(&matrix, &refs),
            ));
        }
        for (i, a) in manifests.iter().enumerate() {
            for b in &manifests[i + 1..] {
                let (ma, mb) = (present(a), present(b));
                let ra: Vec<&str> = ma.iter().map(String::as_str).collect();
                let rb: Vec<&str> = mb.iter().map(String::as_str).collect();
                entries.push(average_entry(
                    "inter",
                    vec![a.category.clone(), b.category.clone()],
                    inter_category_avg(&matrix, &ra, &rb, &shared_refs),
                ));
            }
        }
        averages.insert(view.slug(), entries);
    }
    let doc = serde_json::json!({ "shared_excluded": shared, "averages": averages });
    outcome.write(cfg, &dir.join("averages.json"), json_pretty(&doc))?;
    Ok(outcome)
}

pub fn report(cfg: &RunConfig) -> Result<StageOutcome> {
    let mut outcome = StageOutcome::new("report");
    let traced = load_trace_outputs(cfg)?;
    let aggregates: Vec<CategoryAggregate> = traced.into_iter().map(|(_, a)| a).collect();
    let manifests = load_manifests(&cfg.manifests)?;
    let dir = cfg.stage_dir("report")?;
    let corr_dir = cfg.output_dir.join("correlate");

    for view in &cfg.report.views {
        let slug_v = view.slug();
        let matrix_path = corr_dir.join(format!("{slug_v}.csv"));
        if matrix_path.exists() {
            let matrix = CorrelationMatrix::read_csv(File::open(&matrix_path)?)?;
            let svg = emit_heatmap(
                &Grid::from_matrix(&matrix),
                &FigureSpec::correlation(&format!("Spearman correlation, {} at {}", view.component, view.bucket)),
            )?;
            outcome.write(cfg, &dir.join(format!("corr_{slug_v}.svg")), svg)?;
        } else {
            outcome.fail(slug_v.clone(), "no correlation matrix; run `correlate` first");
        }

        let with_curves: Vec<CategoryAggregate> = aggregates
            .iter()
            .filter(|a| LayerImportanceVector::from_aggregate(a, view.bucket, view.component).is_ok())
            .cloned()
            .collect();
        if !with_curves.is_empty() {
            let grid = Grid::layer_importance(&with_curves, view.bucket, view.component)?;
            let (lo, hi) = grid
                .values
                .iter()
                .flatten()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                });
            let bounds = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
            let title = format!("Mean AIE by layer, {} at {}", view.component, view.bucket);
            let raw = emit_heatmap(&grid, &FigureSpec::layer_importance(&title, bounds))?;
            outcome.write(cfg, &dir.join(format!("layers_{slug_v}_raw.svg")), raw)?;
            let ranked = emit_heatmap(
                &grid.rank_normalize_rows(),
                &FigureSpec::layer_importance(&format!("{title} (within-row rank)"), (0.0, 1.0)),
            )?;
            outcome.write(cfg, &dir.join(format!("layers_{slug_v}_rank.svg")), ranked)?;
        }

        let mut groups: Vec<(String, Vec<&CategoryAggregate>)> = manifests
            .iter()
            .map(|m| {
                let members = aggregates
                    .iter()
                    .filter(|a| m.names().any(|n| n == a.subcategory))
                    .collect();
                (m.category.clone(), members)
            })
            .collect();
        let listed: BTreeSet<&str> = manifests.iter().flat_map(|m| m.names()).collect();
        let unlisted: Vec<&CategoryAggregate> = aggregates
            .iter()
            .filter(|a| !listed.contains(a.subcategory.as_str()))
            .collect();
        if !unlisted.is_empty() {
            groups.push(("Other".into(), unlisted));
        }
        for (category, members) in groups {
            if members.is_empty() {
                continue;
            }
            let series: Vec<LineSeries> = members
                .iter()
                .map(|a| LineSeries::from_aggregate(a, view.bucket, view.component))
                .collect::<Result<_, _>>()?;
            let svg = emit_lineplot(
                &series,
                &FigureSpec::line_plot(&format!("{category}: {} at {}", view.component, view.bucket)),
            )?;
            outcome.write(cfg, &dir.join(format!("lines_{}_{slug_v}.svg", slug(&category))), svg)?;
        }
    }
    Ok(outcome)
}

#[derive(Debug, Serialize)]
struct ArtifactEntry {
    path: String,
    sha256: String,
    bytes: u64,
}

/// Rewrites `<outdir>/manifest.json` with the hash of every artifact.
pub fn write_manifest(cfg: &RunConfig) -> Result<()> {
    let mut entries = Vec::new();
    for entry in walkdir::WalkDir::new(&cfg.output_dir).sort_by_file_name() {
        let entry = entry?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(&cfg.output_dir)?;
        if rel == Path::new("manifest.json") {
            continue;
        }
        let bytes = fs::read(entry.path())?;
        entries.push(ArtifactEntry {
            path: rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/"),
            sha256: hex::encode(Sha256::digest(&bytes)),
            bytes: bytes.len() as u64,
        });
    }
    let doc = serde_json::json!({ "artifacts": entries });
    fs::write(cfg.output_dir.join("manifest.json"), json_pretty(&doc))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slugs() {
        assert_eq!(slug("Am. Crow"), "am-crow");
        assert_eq!(slug("Frame & Body"), "frame-body");
        assert_eq!(slug("Chordata (Birds)"), "chordata-birds");
        assert_eq!(slug("***"), "unnamed");
    }
}
