use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use retgrade_core::analysis::{
    compare_matrices, compare_references, dataset_summary, grader_agreement_summary, reasons_crosstab,
    AgreementMode, ReferenceComparison,
};
use retgrade_core::io::{self, GradeLog, IngestOptions, PolicyFile, PredictionFile};
use retgrade_core::manifest::Manifest;
use retgrade_core::metrics::{
    auc, bootstrap_ci, quadratic_weighted_kappa, roc, BootstrapConfig, BootstrapInterval, Rate,
};
use retgrade_core::model::{
    ConfusionMatrix, GraderIdentity, GraderRole, PredictionRecord, ReferenceMethod, ReferenceStandard,
    SeverityGrade,
};
use retgrade_core::operating::{
    apply_policy, ensemble_combine, fit_cascade, pick_threshold, CascadeTargets, EnsembleSpec,
};
use retgrade_core::refstd::{
    build_reference, disagreement_queue, replay, BuildMethod, Dataset, MajorityPolicy,
};
use retgrade_core::report::{
    self, Cell, RateStyle, ReportBundle, ReportTable, KAPPA_DECIMALS,
};
use retgrade_core::synth::{self, layout, WorkflowConfig};
use retgrade_core::{model::DmeStatus, operating::Threshold};

use crate::args::*;
use crate::error::{CliError, CliResult};

/// Settings shared by every subcommand.
pub struct Ctx {
    pub seed: Option<u64>,
    pub bootstrap_n: usize,
    pub format: Format,
    pub data_dir: Option<PathBuf>,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        match &self.data_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p.to_path_buf(),
        }
    }

    fn bootstrap(&self, level: f64) -> BootstrapConfig {
        BootstrapConfig {
            resamples: self.bootstrap_n,
            seed: self.seed.unwrap_or(0),
            level,
            parallel: true,
            ..BootstrapConfig::default()
        }
    }

    fn emit(&self, bundle: &ReportBundle) -> CliResult<()> {
        print_bytes(report::render(bundle, self.format.into()).as_bytes())
    }
}

/// Writes to stdout; a reader that hung up early (`| head`) is not an error.
fn print_bytes(bytes: &[u8]) -> CliResult<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(bytes).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

pub fn run(ctx: &Ctx, command: Command) -> CliResult<()> {
    if ctx.bootstrap_n < 100 {
        return Err(CliError::invalid(format!(
            "--bootstrap-n {} is too small; intervals need at least 100 resamples",
            ctx.bootstrap_n
        )));
    }
    match command {
        Command::Ingest { grades, out } => ingest(ctx, &grades, out.as_deref()),
        Command::Refstd {
            command:
                RefstdCommand::Build {
                    grades,
                    panel,
                    method,
                    tie_rule,
                    min_graders,
                    out,
                },
        } => {
            let method = match method {
                Method::Majority => BuildMethod::Majority(MajorityPolicy {
                    tie_rule: tie_rule.into(),
                    min_graders,
                }),
                Method::Adjudicated => BuildMethod::AdjudicatedConsensus,
            };
            refstd_build(ctx, &grades, &panel, method, out.as_deref())
        }
        Command::Queue { grades, panel } => queue(ctx, &grades, &panel),
        Command::Metrics {
            source,
            cutoff,
            ci,
            level,
        } => metrics(ctx, &source, cutoff, ci.then_some(level)),
        Command::Kappa { source, ci, level } => kappa(ctx, &source, ci.then_some(level)),
        Command::Roc {
            reference,
            predictions,
            cutoff,
            dme,
            ci,
            level,
        } => roc_cmd(ctx, &reference, &predictions, cutoff, dme, ci.then_some(level)),
        Command::Cascade {
            command:
                CascadeCommand::Fit {
                    reference,
                    predictions,
                    targets,
                    dme_target,
                    score_mode,
                    out,
                },
        } => cascade_fit(ctx, &reference, &predictions, &targets, dme_target, score_mode, &out),
        Command::Cascade {
            command: CascadeCommand::Apply { policy, predictions, out },
        } => cascade_apply(ctx, &policy, &predictions, &out),
        Command::Ensemble { predictions, id, out } => ensemble(ctx, &predictions, &id, &out),
        Command::Compare {
            source,
            cutoff,
            ref_label,
            test_label,
            reasons,
        } => compare(ctx, &source, cutoff, &ref_label, &test_label, reasons.as_deref()),
        Command::Summary {
            manifest,
            reference,
            name,
        } => summary(ctx, &manifest, &reference, &name),
        Command::Report { dir, tables, cutoff, ci } => study_report(ctx, &dir, tables.as_deref(), cutoff, ci),
        Command::Serve {
            store,
            tokens,
            addr,
            snapshot_every,
            allow_facilitator,
        } => serve(ctx, &store, &tokens, &addr, snapshot_every, allow_facilitator),
        Command::Synth { command } => match command {
            SynthCommand::Workflow {
                images,
                graders,
                disagreement_rate,
                out,
            } => synth_workflow(ctx, images, graders, disagreement_rate, &out),
            SynthCommand::Validation { tables, study, out_dir } => synth_validation(ctx, &tables, &study, &out_dir),
        },
    }
}

// ---- inputs ----

fn load_grades(ctx: &Ctx, input: &GradeInput) -> CliResult<(GradeLog, Option<Manifest>)> {
    let manifest = input
        .manifest
        .as_ref()
        .map(|m| io::load_manifest(&ctx.path(m)))
        .transpose()?;
    let options = IngestOptions {
        replicate_eye_level: input.replicate_eye_level,
    };
    let log = io::ingest_grades(&ctx.path(&input.grades), options, manifest.as_ref())?;
    Ok((log, manifest))
}

fn dataset(log: &GradeLog, manifest: Option<&Manifest>) -> Dataset {
    let ds = Dataset::from_events(log.dataset_id.clone(), log.events.clone());
    match manifest {
        Some(m) => ds.with_images(m.images.keys().cloned()),
        None => ds,
    }
}

fn resolve_panel(ds: &Dataset, panel: &PanelArgs) -> CliResult<Vec<GraderIdentity>> {
    let graders: Vec<GraderIdentity> = if !panel.graders.is_empty() {
        let mut out = Vec::new();
        for id in &panel.graders {
            let g = ds
                .events
                .iter()
                .find(|e| &e.grader.id == id)
                .map(|e| e.grader.clone())
                .ok_or_else(|| CliError::invalid(format!("grader {id} has no grades in this log")))?;
            out.push(g);
        }
        out.sort();
        out.dedup();
        out
    } else {
        let roles = if panel.roles.is_empty() {
            vec![GraderRole::RetinaSpecialist]
        } else {
            panel.roles.clone()
        };
        let mut out: Vec<GraderIdentity> = roles.iter().flat_map(|&r| ds.graders_with_role(r)).collect();
        out.sort();
        out.dedup();
        out
    };
    if graders.is_empty() {
        return Err(CliError::invalid("panel is empty: no grader in the log matches --role/--grader"));
    }
    Ok(graders)
}

fn load_members(ctx: &Ctx, paths: &[PathBuf]) -> CliResult<Vec<PredictionFile>> {
    paths.iter().map(|p| Ok(io::load_predictions(&ctx.path(p))?)).collect()
}

/// One prediction per image: the single file as-is, or the ensemble mean.
fn combine(files: &[PredictionFile], spec: Option<&EnsembleSpec>) -> CliResult<Vec<PredictionRecord>> {
    let default_spec;
    let spec = match (spec, files) {
        (None, [only]) => return Ok(only.records.clone()),
        (Some(s), _) => s,
        (None, _) => {
            default_spec = EnsembleSpec {
                ensemble_id: "ensemble".into(),
                member_model_ids: files.iter().map(|f| f.model_id.clone()).collect(),
                combine: Default::default(),
            };
            &default_spec
        }
    };
    let mut members = Vec::with_capacity(spec.member_model_ids.len());
    for id in &spec.member_model_ids {
        let f = files
            .iter()
            .find(|f| &f.model_id == id)
            .ok_or_else(|| CliError::invalid(format!("ensemble member {id} is not among the prediction files")))?;
        members.push(f.records.clone());
    }
    if files.len() != members.len() {
        return Err(CliError::invalid(format!(
            "{} prediction files given for an ensemble of {}",
            files.len(),
            members.len()
        )));
    }
    ensemble_combine(&members, spec).map_err(CliError::invalid)
}

/// A comparison plus the (reference, test) label pairs behind each matrix,
/// which the bootstrap resamples.
struct Loaded {
    label: String,
    comparison: ReferenceComparison,
}

fn load_comparison(ctx: &Ctx, source: &ComparisonSource) -> CliResult<Loaded> {
    match (&source.reference, &source.test, &source.tables) {
        (Some(r), Some(t), None) => {
            if !source.ids.is_empty() {
                return Err(CliError::invalid("--id only applies to --tables"));
            }
            let reference = io::load_reference(&ctx.path(r))?;
            let test = io::load_reference(&ctx.path(t))?;
            let comparison = compare_references(&reference, &test).map_err(CliError::invalid)?;
            Ok(Loaded {
                label: method_label(test.method).into(),
                comparison,
            })
        }
        (None, None, Some(tables)) => {
            let records = io::load_tables(&ctx.path(tables))?;
            if source.ids.is_empty() {
                return Err(CliError::invalid("--tables needs at least one --id"));
            }
            let mut dr = None;
            let mut dme = None;
            let mut reference_method = ReferenceMethod::AdjudicatedConsensus;
            let mut test_method = ReferenceMethod::Majority;
            for id in &source.ids {
                let rec = records
                    .iter()
                    .find(|r| &r.id == id)
                    .ok_or_else(|| CliError::invalid(format!("no table {id:?} in {}", tables.display())))?;
                reference_method = method_from_label(&rec.reference);
                test_method = method_from_label(&rec.test);
                let slot = match rec.matrix.k() {
                    5 => &mut dr,
                    2 => &mut dme,
                    k => return Err(CliError::invalid(format!("table {id} has {k} classes; expected 5 (DR) or 2 (DME)"))),
                };
                if slot.replace(&rec.matrix).is_some() {
                    return Err(CliError::invalid("give at most one DR and one DME table"));
                }
            }
            let comparison = compare_matrices(reference_method, test_method, dr, dme).map_err(CliError::invalid)?;
            Ok(Loaded {
                label: source.ids.join(" + "),
                comparison,
            })
        }
        _ => Err(CliError::invalid("give either --ref and --test, or --tables with --id")),
    }
}

/// Recorded tables describe their sides in free text.
fn method_from_label(label: &str) -> ReferenceMethod {
    let label = label.to_ascii_lowercase();
    if label.contains("adjudicat") {
        ReferenceMethod::AdjudicatedConsensus
    } else if label.contains("majority") {
        ReferenceMethod::Majority
    } else {
        ReferenceMethod::ModelOutput
    }
}

fn method_label(m: ReferenceMethod) -> &'static str {
    match m {
        ReferenceMethod::Majority => "Majority decision",
        ReferenceMethod::AdjudicatedConsensus => "Adjudicated consensus",
        ReferenceMethod::ModelOutput => "Algorithm",
    }
}

/// Image-level (reference, test) class pairs, row-major over the matrix.
fn pairs(m: &ConfusionMatrix) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(m.n() as usize);
    for (i, row) in m.counts().iter().enumerate() {
        for (j, &n) in row.iter().enumerate() {
            out.extend(std::iter::repeat_n((i, j), n as usize));
        }
    }
    out
}

fn proportion(hits: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| hits as f64 / total as f64)
}

/// Sensitivity (`positive_side = true`) or specificity of a binary split at
/// class index `cutoff` over a resample.
fn split_rate(all: &[(usize, usize)], idx: &[usize], cutoff: usize, positive_side: bool) -> Option<f64> {
    let (mut hit, mut total) = (0, 0);
    for &i in idx {
        let (r, t) = all[i];
        if (r >= cutoff) == positive_side {
            total += 1;
            hit += usize::from((t >= cutoff) == positive_side);
        }
    }
    proportion(hit, total)
}

fn kappa_of(all: &[(usize, usize)], idx: &[usize]) -> Option<f64> {
    let mut m = ConfusionMatrix::zeros(SeverityGrade::class_labels()).expect("five classes");
    for &i in idx {
        let (r, t) = all[i];
        m.increment(r, t);
    }
    quadratic_weighted_kappa(&m).ok()
}

fn interval_cell(ci: &BootstrapInterval, decimals: u32) -> Cell {
    Cell::Interval {
        point: ci.point,
        low: ci.low,
        high: ci.high,
        decimals,
    }
}

fn ci_column(level: f64) -> String {
    format!("Estimate [{}% CI]", trim_level(level))
}

fn trim_level(level: f64) -> String {
    let pct = level * 100.0;
    if pct.fract() == 0.0 {
        format!("{pct:.0}")
    } else {
        format!("{pct}")
    }
}

// ---- subcommands ----

fn ingest(ctx: &Ctx, input: &GradeInput, out: Option<&Path>) -> CliResult<()> {
    let (log, _) = load_grades(ctx, input)?;
    if let Some(out) = out {
        io::save_grades(&ctx.path(out), &log.dataset_id, &log.events)?;
    }
    let ds = dataset(&log, None);
    let mut t = ReportTable::new("ingest", format!("Grade log {}", log.dataset_id), "", vec!["Count".into()]);
    t.push("Events", vec![Cell::Count(log.events.len() as u64)]);
    t.push("Images", vec![Cell::Count(ds.images.len() as u64)]);
    let mut graders: Vec<&GraderIdentity> = log.events.iter().map(|e| &e.grader).collect();
    graders.sort();
    graders.dedup();
    t.push("Graders", vec![Cell::Count(graders.len() as u64)]);
    let round0 = log.events.iter().filter(|e| e.round == 0).count();
    t.push("Independent grades", vec![Cell::Count(round0 as u64)]);
    t.push("Adjudication grades", vec![Cell::Count((log.events.len() - round0) as u64)]);
    t.push(
        "Highest round",
        vec![Cell::Count(log.events.iter().map(|e| u64::from(e.round)).max().unwrap_or(0))],
    );
    ctx.emit(&ReportBundle {
        tables: vec![t],
        series: vec![],
    })
}

fn reference_table(id: &str, title: &str, r: &ReferenceStandard) -> ReportTable {
    let mut t = ReportTable::new(id, title, "", vec!["Images".into()]);
    t.push("Images", vec![Cell::Count(r.len() as u64)]);
    t.push("Fully gradable", vec![Cell::Count(r.gradable().count() as u64)]);
    let labels = r.dr_labels();
    for g in SeverityGrade::ALL {
        t.push(
            format!("DR {}", g.name()),
            vec![Cell::Count(labels.values().filter(|&&x| x == g).count() as u64)],
        );
    }
    let dme = r.gradable().filter(|e| e.dme == Some(DmeStatus::Referable)).count();
    t.push("Referable DME", vec![Cell::Count(dme as u64)]);
    t
}

fn refstd_build(
    ctx: &Ctx,
    input: &GradeInput,
    panel: &PanelArgs,
    method: BuildMethod,
    out: Option<&Path>,
) -> CliResult<()> {
    let (log, manifest) = load_grades(ctx, input)?;
    let ds = dataset(&log, manifest.as_ref());
    let panel = resolve_panel(&ds, panel)?;
    let reference = build_reference(&ds, &panel, method).map_err(CliError::invalid)?;
    match out {
        Some(out) => {
            io::save_reference(&ctx.path(out), &reference)?;
            ctx.emit(&ReportBundle {
                tables: vec![reference_table(
                    "reference",
                    &format!("{} reference over {} graders", method_label(reference.method), panel.len()),
                    &reference,
                )],
                series: vec![],
            })
        }
        None => {
            let mut buf = Vec::new();
            io::write_reference(&mut buf, &reference)?;
            print_bytes(&buf)
        }
    }
}

fn queue(ctx: &Ctx, input: &GradeInput, panel: &PanelArgs) -> CliResult<()> {
    let (log, manifest) = load_grades(ctx, input)?;
    let ds = dataset(&log, manifest.as_ref());
    let panel = resolve_panel(&ds, panel)?;
    let states = replay(&ds, &panel).map_err(CliError::invalid)?;
    let mut t = ReportTable::new(
        "queue",
        "Open disagreements, oldest first",
        "Image",
        vec!["Phase".into(), "Round".into(), "Awaiting".into()],
    );
    for id in disagreement_queue(states.values()) {
        let s = &states[&id];
        let awaiting: Vec<&str> = s
            .required_graders
            .iter()
            .filter(|g| s.awaiting(&g.id))
            .map(|g| g.id.as_str())
            .collect();
        let phase = serde_json::to_value(s.phase).expect("phase serializes");
        t.push(
            id,
            vec![
                Cell::Text(phase.as_str().unwrap_or_default().to_string()),
                Cell::Count(u64::from(s.current_round)),
                Cell::Text(awaiting.join(" ")),
            ],
        );
    }
    ctx.emit(&ReportBundle {
        tables: vec![t],
        series: vec![],
    })
}

fn metric_cis(
    ctx: &Ctx,
    c: &ReferenceComparison,
    cutoff: SeverityGrade,
    level: f64,
) -> CliResult<ReportTable> {
    let cfg = ctx.bootstrap(level);
    let mut t = ReportTable::new(
        "metrics_ci",
        format!("Bootstrap intervals ({} image resamples, seed {})", cfg.resamples, cfg.seed),
        "Metric",
        vec![ci_column(level)],
    );
    let run = |all: &[(usize, usize)], f: &(dyn Fn(&[usize]) -> Option<f64> + Sync)| {
        bootstrap_ci(all.len(), f, &cfg).map_err(CliError::invalid)
    };
    if let Some(dr) = &c.dr {
        let all = pairs(&dr.confusion.matrix);
        let k = cutoff.index();
        let sens = run(&all, &|idx| split_rate(&all, idx, k, true))?;
        let spec = run(&all, &|idx| split_rate(&all, idx, k, false))?;
        let kap = run(&all, &|idx| kappa_of(&all, idx))?;
        t.push("DR sensitivity", vec![interval_cell(&sens, 3)]);
        t.push("DR specificity", vec![interval_cell(&spec, 3)]);
        t.push("Quadratic-weighted kappa", vec![interval_cell(&kap, KAPPA_DECIMALS)]);
    }
    if let Some(dme) = &c.dme {
        let all = pairs(&dme.confusion.matrix);
        let sens = run(&all, &|idx| split_rate(&all, idx, 1, true))?;
        let spec = run(&all, &|idx| split_rate(&all, idx, 1, false))?;
        t.push("DME sensitivity", vec![interval_cell(&sens, 3)]);
        t.push("DME specificity", vec![interval_cell(&spec, 3)]);
    }
    Ok(t)
}

fn metrics(ctx: &Ctx, source: &ComparisonSource, cutoff: SeverityGrade, ci: Option<f64>) -> CliResult<()> {
    let loaded = load_comparison(ctx, source)?;
    let c = &loaded.comparison;
    let mut bundle = ReportBundle::default();
    bundle.tables.push(report::metrics_table(
        "metrics",
        &format!("Agreement with the reference ({} or worse DR, referable DME)", cutoff.name()),
        &[(loaded.label.clone(), c)],
        cutoff,
    ));
    if let Some(level) = ci {
        bundle.tables.push(metric_cis(ctx, c, cutoff, level)?);
    }
    ctx.emit(&bundle)
}

fn kappa(ctx: &Ctx, source: &ComparisonSource, ci: Option<f64>) -> CliResult<()> {
    let loaded = load_comparison(ctx, source)?;
    let dr = loaded
        .comparison
        .dr
        .as_ref()
        .ok_or_else(|| CliError::invalid("kappa needs DR grades (a 5-class matrix)"))?;
    let mut columns = vec!["Images".to_string(), "Quadratic-weighted kappa".to_string()];
    let mut cells = vec![Cell::Count(dr.confusion.matrix.n()), Cell::kappa(dr.kappa)];
    if let Some(level) = ci {
        let all = pairs(&dr.confusion.matrix);
        let interval = bootstrap_ci(all.len(), |idx| kappa_of(&all, idx), &ctx.bootstrap(level)).map_err(CliError::invalid)?;
        columns.push(ci_column(level));
        cells.push(interval_cell(&interval, KAPPA_DECIMALS));
    }
    let mut t = ReportTable::new("kappa", "Quadratic-weighted kappa of DR grades", "", columns);
    t.push(loaded.label, cells);
    ctx.emit(&ReportBundle {
        tables: vec![t],
        series: vec![],
    })
}

/// (label, score) per reference image that has a prediction.
fn scored(reference: &ReferenceStandard, preds: &[PredictionRecord], cutoff: SeverityGrade, dme: bool) -> (Vec<bool>, Vec<f64>) {
    let by_id: BTreeMap<&str, &PredictionRecord> = preds.iter().map(|p| (p.image_id.as_str(), p)).collect();
    let mut labels = Vec::new();
    let mut scores = Vec::new();
    for e in reference.gradable() {
        let Some(p) = by_id.get(e.image_id.as_str()) else { continue };
        let item = if dme {
            e.dme.map(|d| (d.is_referable(), p.p_dme))
        } else {
            e.dr.map(|g| (g >= cutoff, retgrade_core::model::tail_score(&p.p_dr, cutoff)))
        };
        if let Some((l, s)) = item {
            labels.push(l);
            scores.push(s);
        }
    }
    (labels, scores)
}

fn auc_bundle(
    ctx: &Ctx,
    id: &str,
    label: &str,
    labels: &[bool],
    scores: &[f64],
    ci: Option<f64>,
) -> CliResult<(ReportTable, report::PlotSeries)> {
    let curve = roc(labels, scores).map_err(CliError::invalid)?;
    let area = auc(&curve);
    let interval = match ci {
        Some(level) => Some(
            bootstrap_ci(
                labels.len(),
                |idx| {
                    let l: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
                    let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
                    roc(&l, &s).ok().map(|c| auc(&c))
                },
                &ctx.bootstrap(level),
            )
            .map_err(CliError::invalid)?,
        ),
        None => None,
    };
    let table = report::auc_table(
        &format!("{id}_auc"),
        "Area under the ROC curve",
        &[(label.to_string(), area, interval.as_ref())],
    );
    Ok((table, report::roc_series(&format!("{id}_roc"), &curve)))
}

fn roc_cmd(
    ctx: &Ctx,
    reference: &Path,
    predictions: &[PathBuf],
    cutoff: SeverityGrade,
    dme: bool,
    ci: Option<f64>,
) -> CliResult<()> {
    let reference = io::load_reference(&ctx.path(reference))?;
    let files = load_members(ctx, predictions)?;
    let preds = combine(&files, None)?;
    let (labels, scores) = scored(&reference, &preds, cutoff, dme);
    let target = if dme { "referable DME".to_string() } else { format!("{} or worse DR", cutoff.name()) };
    let (table, series) = auc_bundle(ctx, "model", &target, &labels, &scores, ci)?;
    ctx.emit(&ReportBundle {
        tables: vec![table],
        series: vec![series],
    })
}

fn cascade_fit(
    ctx: &Ctx,
    reference: &Path,
    predictions: &[PathBuf],
    targets: &[(SeverityGrade, f64)],
    dme_target: Option<f64>,
    mode: ModeArg,
    out: &Path,
) -> CliResult<()> {
    let reference = io::load_reference(&ctx.path(reference))?;
    let files = load_members(ctx, predictions)?;
    let preds = combine(&files, None)?;
    let mut target_map = CascadeTargets::new();
    for &(level, t) in targets {
        if level == SeverityGrade::NoDr {
            return Err(CliError::invalid("no cascade stage for grade none; targets start at mild"));
        }
        if target_map.insert(level, t).is_some() {
            return Err(CliError::invalid(format!("target for {} given twice", level.name())));
        }
    }
    if target_map.is_empty() && dme_target.is_none() {
        return Err(CliError::invalid("give at least one --target or --dme-target"));
    }
    let fit = fit_cascade(&preds, &reference.dr_labels(), &target_map, mode.into()).map_err(CliError::invalid)?;
    let mut policy = fit.policy.clone();
    if let Some(t) = dme_target {
        let (labels, scores) = scored(&reference, &preds, SeverityGrade::Moderate, true);
        policy.dme_threshold = Some(pick_threshold(&scores, &labels, t).map_err(CliError::invalid)?);
    }
    let ensemble = (files.len() > 1).then(|| EnsembleSpec {
        ensemble_id: "ensemble".into(),
        member_model_ids: files.iter().map(|f| f.model_id.clone()).collect(),
        combine: Default::default(),
    });
    io::save_policy(&ctx.path(out), &PolicyFile::new(policy.clone(), ensemble))?;
    for w in &fit.warnings {
        eprintln!("warning: {w}");
    }

    let mut t = ReportTable::new(
        "cascade_fit",
        format!("Cascade thresholds fitted on {} tune images", fit.tune_images),
        "Stage",
        vec!["Threshold".into(), "Target".into(), "Remaining".into(), "Sensitivity".into()],
    );
    for s in &fit.stages {
        t.push(
            s.level.name(),
            vec![
                threshold_cell(s.threshold),
                s.target.map_or(Cell::Blank, |x| Cell::Number { value: x, decimals: 3 }),
                Cell::Count(s.remaining as u64),
                s.sensitivity.map_or(Cell::Blank, Cell::rate),
            ],
        );
    }
    if let (Some(th), Some(target)) = (policy.dme_threshold, dme_target) {
        t.push(
            "referable DME",
            vec![threshold_cell(th), Cell::Number { value: target, decimals: 3 }, Cell::Blank, Cell::Blank],
        );
    }
    ctx.emit(&ReportBundle {
        tables: vec![t],
        series: vec![],
    })
}

/// Thresholds are stored exactly; tables show them rounded.
fn threshold_cell(t: Threshold) -> Cell {
    match t {
        Threshold::At(value) => Cell::Number { value, decimals: 4 },
        Threshold::Never => Cell::Text("never".into()),
    }
}

fn cascade_apply(ctx: &Ctx, policy: &Path, predictions: &[PathBuf], out: &Path) -> CliResult<()> {
    let policy = io::load_policy(&ctx.path(policy))?;
    let files = load_members(ctx, predictions)?;
    let preds = combine(&files, policy.ensemble.as_ref())?;
    let labels = apply_policy(&preds, &policy.policy);
    io::save_reference(&ctx.path(out), &labels)?;
    ctx.emit(&ReportBundle {
        tables: vec![reference_table("model_labels", "Model grades under the policy", &labels)],
        series: vec![],
    })
}

fn ensemble(ctx: &Ctx, predictions: &[PathBuf], id: &str, out: &Path) -> CliResult<()> {
    let files = load_members(ctx, predictions)?;
    let spec = EnsembleSpec {
        ensemble_id: id.into(),
        member_model_ids: files.iter().map(|f| f.model_id.clone()).collect(),
        combine: Default::default(),
    };
    let records = combine(&files, Some(&spec))?;
    let resolution = files.first().and_then(|f| f.input_resolution);
    let input_resolution = files.iter().all(|f| f.input_resolution == resolution).then_some(resolution).flatten();
    let n = records.len();
    io::save_predictions(
        &ctx.path(out),
        &PredictionFile {
            model_id: id.into(),
            input_resolution,
            records,
        },
    )?;
    let mut t = ReportTable::new("ensemble", format!("Ensemble {id}"), "", vec!["Count".into()]);
    t.push("Members", vec![Cell::Count(files.len() as u64)]);
    t.push("Images", vec![Cell::Count(n as u64)]);
    ctx.emit(&ReportBundle {
        tables: vec![t],
        series: vec![],
    })
}

fn compare(
    ctx: &Ctx,
    source: &ComparisonSource,
    cutoff: SeverityGrade,
    ref_label: &str,
    test_label: &str,
    reasons: Option<&Path>,
) -> CliResult<()> {
    let loaded = load_comparison(ctx, source)?;
    let mut bundle = report::comparison_report("comparison", ref_label, test_label, &loaded.comparison, cutoff);
    if let Some(path) = reasons {
        let reasons = io::load_reasons(&ctx.path(path))?;
        let x = reasons_crosstab(&reasons).map_err(CliError::invalid)?;
        bundle.tables.push(report::reasons_table(
            "disagreement_reasons",
            "Reasons for disagreement by signed step",
            &x,
        ));
    }
    ctx.emit(&bundle)
}

fn summary(ctx: &Ctx, manifest: &Path, reference: &Path, name: &str) -> CliResult<()> {
    let manifest = io::load_manifest(&ctx.path(manifest))?;
    let reference = io::load_reference(&ctx.path(reference))?;
    let s = dataset_summary(&manifest, &reference);
    ctx.emit(&report::summary_report("summary", name, &s))
}

fn study_report(ctx: &Ctx, dir: &Path, tables: Option<&Path>, cutoff: SeverityGrade, ci: bool) -> CliResult<()> {
    let dir = ctx.path(dir);
    let manifest = io::load_manifest(&dir.join(layout::MANIFEST))?;
    let log = io::ingest_grades(&dir.join(layout::GRADES), IngestOptions::default(), Some(&manifest))?;
    let ds = dataset(&log, Some(&manifest));
    let specialists = ds.graders_with_role(GraderRole::RetinaSpecialist);
    let ophthalmologists = ds.graders_with_role(GraderRole::Ophthalmologist);
    if specialists.is_empty() {
        return Err(CliError::invalid("grade log has no retina specialist grades to adjudicate"));
    }
    let majority = BuildMethod::Majority(MajorityPolicy::default());
    let adjudicated = build_reference(&ds, &specialists, BuildMethod::AdjudicatedConsensus).map_err(CliError::invalid)?;

    let mut bundle = report::summary_report("dataset", &log.dataset_id, &dataset_summary(&manifest, &adjudicated));
    let adj_label = "Adjudicated consensus";
    let mut headline: Vec<(String, ReferenceComparison)> = Vec::new();
    let mut add = |prefix: &str, label: &str, c: ReferenceComparison, bundle: &mut ReportBundle| {
        bundle.extend(report::comparison_report(prefix, adj_label, label, &c, cutoff));
        headline.push((label.to_string(), c));
    };

    let spec_major = build_reference(&ds, &specialists, majority).map_err(CliError::invalid)?;
    let c = compare_references(&adjudicated, &spec_major).map_err(CliError::invalid)?;
    add("specialist_majority", "Retina specialist majority", c, &mut bundle);
    if !ophthalmologists.is_empty() {
        let oph_major = build_reference(&ds, &ophthalmologists, majority).map_err(CliError::invalid)?;
        let c = compare_references(&adjudicated, &oph_major).map_err(CliError::invalid)?;
        add("ophthalmologist_majority", "Ophthalmologist majority", c, &mut bundle);
    }

    let policy_path = dir.join(layout::POLICY);
    let pred_dir = dir.join(layout::PREDICTIONS_DIR);
    let mut model_preds = None;
    if policy_path.exists() && pred_dir.is_dir() {
        let policy = io::load_policy(&policy_path)?;
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&pred_dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()?;
        paths.retain(|p| p.extension().is_some_and(|x| x == "jsonl"));
        paths.sort();
        let files = load_members(ctx, &paths)?;
        let preds = combine(&files, policy.ensemble.as_ref())?;
        let labels = apply_policy(&preds, &policy.policy);
        let c = compare_references(&adjudicated, &labels).map_err(CliError::invalid)?;
        add("algorithm", "Algorithm", c, &mut bundle);
        model_preds = Some(preds);
    }

    let rows: Vec<(String, &ReferenceComparison)> = headline.iter().map(|(l, c)| (l.clone(), c)).collect();
    bundle.tables.push(report::metrics_table(
        "headline_metrics",
        &format!("Agreement with the adjudicated consensus ({} or worse DR, referable DME)", cutoff.name()),
        &rows,
        cutoff,
    ));

    let reasons_path = dir.join(layout::REASONS);
    if reasons_path.exists() {
        let reasons = io::load_reasons(&reasons_path)?;
        let x = reasons_crosstab(&reasons).map_err(CliError::invalid)?;
        bundle.tables.push(report::reasons_table(
            "disagreement_reasons",
            "Reasons for disagreement between the adjudicated consensus and the ophthalmologist majority",
            &x,
        ));
    }

    let agreement = grader_agreement_summary(&log.events, &adjudicated, cutoff, AgreementMode::Referability)
        .map_err(CliError::invalid)?;
    bundle.tables.push(report::agreement_table(
        "grader_agreement",
        "Agreement of each grader's independent grades with the adjudicated consensus",
        &agreement,
    ));

    if let Some(preds) = model_preds {
        let level = ci.then_some(0.95);
        for (id, dme, label) in [
            ("algorithm_dr", false, format!("{} or worse DR", cutoff.name())),
            ("algorithm_dme", true, "referable DME".to_string()),
        ] {
            let (labels, scores) = scored(&adjudicated, &preds, cutoff, dme);
            if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
                let (table, series) = auc_bundle(ctx, id, &label, &labels, &scores, level)?;
                bundle.tables.push(table);
                bundle.series.push(series);
            }
        }
    }

    if let Some(path) = tables {
        for rec in io::load_tables(&ctx.path(path))? {
            bundle.tables.push(report::matrix_table(
                &format!("recorded_{}", rec.id),
                &format!("Recorded matrix {}", rec.id),
                &rec.matrix,
                &format!("{} \\ {}", rec.reference, rec.test),
            ));
        }
    }
    ctx.emit(&bundle)
}

fn serve(
    ctx: &Ctx,
    store: &Path,
    tokens: &Path,
    addr: &str,
    snapshot_every: u64,
    allow_facilitator: bool,
) -> CliResult<()> {
    let auth = retgrade_service::StaticTokens::load(&ctx.path(tokens)).map_err(|e| match e {
        retgrade_service::auth::AuthError::Io { .. } => CliError::Io(e.to_string()),
        other => CliError::invalid(other),
    })?;
    let config = retgrade_service::ServiceConfig {
        data_dir: ctx.path(store),
        snapshot_every,
        allow_facilitator_endorsements: allow_facilitator,
    };
    let service = retgrade_service::Service::open(config, Box::new(auth)).map_err(|e| match e {
        retgrade_service::StoreError::Storage { .. } => CliError::Io(e.to_string()),
        other => CliError::invalid(other),
    })?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        let mut out = std::io::stdout().lock();
        writeln!(out, "listening on http://{}", listener.local_addr()?)?;
        out.flush()?;
        drop(out);
        retgrade_service::serve(Arc::new(service), listener).await
    })?;
    Ok(())
}

fn synth_workflow(ctx: &Ctx, images: usize, graders: usize, disagreement_rate: f64, out: &Path) -> CliResult<()> {
    if !(0.0..=1.0).contains(&disagreement_rate) {
        return Err(CliError::invalid("--disagreement-rate must be in [0, 1]"));
    }
    if images == 0 || graders < 2 {
        return Err(CliError::invalid("need at least one image and two graders"));
    }
    let defaults = WorkflowConfig::default();
    let cfg = WorkflowConfig {
        images,
        graders,
        seed: ctx.seed.unwrap_or(defaults.seed),
        disagreement_rate,
        ..defaults
    };
    let log = synth::synthetic_workflow(&cfg);
    io::save_grades(&ctx.path(out), &log.dataset_id, &log.events)?;
    let mut t = ReportTable::new("workflow", format!("Synthetic workflow {}", log.dataset_id), "", vec!["Count".into()]);
    t.push("Images", vec![Cell::Count(log.images.len() as u64)]);
    t.push("Graders", vec![Cell::Count(log.graders.len() as u64)]);
    t.push("Events", vec![Cell::Count(log.events.len() as u64)]);
    t.push(
        "Injected disagreements",
        vec![Cell::Rate {
            rate: Rate::new(log.injected.len() as u64, log.images.len() as u64),
            style: RateStyle::CountsWithPercent,
        }],
    );
    ctx.emit(&ReportBundle {
        tables: vec![t],
        series: vec![],
    })
}

fn synth_validation(ctx: &Ctx, tables: &Path, study: &Path, out_dir: &Path) -> CliResult<()> {
    let tables = io::load_tables(&ctx.path(tables))?;
    let design = synth::load_study(&ctx.path(study))?;
    let replay = synth::validation_replay(&tables, &design)?;
    let out_dir = ctx.path(out_dir);
    std::fs::create_dir_all(out_dir.join(layout::PREDICTIONS_DIR))?;
    synth::write_validation_replay(&out_dir, &replay)?;
    let mut t = ReportTable::new("validation", format!("Validation replay {}", replay.dataset_id), "", vec!["Count".into()]);
    t.push("Images", vec![Cell::Count(replay.manifest.images.len() as u64)]);
    t.push("Patients", vec![Cell::Count(replay.manifest.patients.len() as u64)]);
    t.push("Grade events", vec![Cell::Count(replay.events.len() as u64)]);
    t.push("Model members", vec![Cell::Count(replay.members.len() as u64)]);
    t.push("Disagreement reasons", vec![Cell::Count(replay.reasons.len() as u64)]);
    ctx.emit(&ReportBundle {
        tables: vec![t],
        series: vec![],
    })
}
