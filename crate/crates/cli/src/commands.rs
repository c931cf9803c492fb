use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use fewshot_ie::corpus::{compute_stats, reference_sizes, write_records};
use fewshot_ie::evalkit::{
    aggregate_runs, ingest_baseline_predictions, modified_dataset_experiment, null_probability_study,
    predict_records, read_prediction_records, run_ablation, score, write_prediction_records, MeanStd,
    MetricsReport, TextTable,
};
use fewshot_ie::Task;
use serde::Serialize;

use crate::config::{config_err, RetrievalMode};
use crate::session::Session;

fn predictions_name(seed: u64) -> String {
    format!("predictions-seed{seed}.jsonl")
}

pub fn stats(s: &mut Session) -> Result<()> {
    let split = s.split()?;
    let stats = compute_stats(&split);
    let (train, dev, test) = stats.counts();
    let mut t = TextTable::new(&["Part", "Examples", "Null", "Null %"]).titled(format!("{} ({:?})", stats.name, stats.task));
    for p in &stats.parts {
        t.push(vec![
            format!("{:?}", p.part).to_lowercase(),
            p.examples.to_string(),
            p.null_examples.to_string(),
            format!("{:.1}", p.null_fraction * 100.0),
        ]);
    }
    s.emit_table("stats.txt", &t)?;
    println!("counts: {train}/{dev}/{test}");
    let reference = reference_sizes(&stats.name).map(|(_, sizes)| sizes);
    if let Some(r) = reference {
        let verdict = if r == [train, dev, test] { "match" } else { "MISMATCH" };
        println!("published sizes: {}/{}/{} ({verdict})", r[0], r[1], r[2]);
    }
    #[derive(Serialize)]
    struct Out<'a> {
        stats: &'a fewshot_ie::corpus::DatasetStats,
        reference: Option<[usize; 3]>,
    }
    s.write_json("stats.json", &Out { stats: &stats, reference })
}

pub fn sample(s: &mut Session) -> Result<()> {
    let mut t = TextTable::new(&["Seed", "Pool", "Null", "Digest"]);
    for seed in s.cfg.seeds.clone() {
        let pool = s.pool(seed)?;
        let name = format!("pool-seed{seed}.jsonl");
        std::fs::create_dir_all(s.out())?;
        write_records(&s.out().join(&name), &pool.examples)?;
        s.note_artifact(&name);
        let nulls = pool.examples.iter().filter(|e| e.is_null(None)).count();
        t.push(vec![seed.to_string(), pool.len().to_string(), nulls.to_string(), pool.digest()[..12].to_string()]);
    }
    let tests = s.test_sample()?;
    write_records(&s.out().join("test-sample.jsonl"), &tests)?;
    s.note_artifact("test-sample.jsonl");
    s.emit_table("sample.txt", &t)?;
    println!("test sample: {} examples (cap {})", tests.len(), s.cfg.cap);
    Ok(())
}

pub fn select(s: &mut Session, subsample: Option<usize>) -> Result<()> {
    let seeds = s.cfg.seeds.clone();
    let mut reports = Vec::new();
    for &seed in &seeds {
        let engine = s.engine(seed)?;
        let pool = s.pool(seed)?;
        reports.push(s.run_selection(&engine, &pool, subsample)?);
    }
    let mut header = vec!["Config".to_string(), "Shots".to_string()];
    header.extend(seeds.iter().map(|x| format!("Seed {x}")));
    let mut t = TextTable::new(&header.iter().map(String::as_str).collect::<Vec<_>>());
    for (i, c) in reports[0].configs.iter().enumerate() {
        let mut row = vec![c.config_id.clone(), c.shots.to_string()];
        row.extend(reports.iter().map(|r| format!("{:.4}", r.configs[i].mean)));
        t.push(row);
    }
    let mut chosen = vec!["chosen".to_string(), String::new()];
    chosen.extend(reports.iter().map(|r| r.chosen_config.clone()));
    t.push(chosen);
    s.emit_table("selection.txt", &t)
}

pub fn extract(s: &mut Session) -> Result<()> {
    let tests = s.test_sample()?;
    let mut t = TextTable::new(&["Seed", "Config", "Predictions"]);
    for seed in s.cfg.seeds.clone() {
        let engine = s.engine(seed)?;
        let pool = s.pool(seed)?;
        let template = s.template_for(&engine, &pool)?;
        let records = predict_records(&engine, &template, &pool.examples, &tests)?;
        let name = predictions_name(seed);
        std::fs::create_dir_all(s.out())?;
        write_prediction_records(&s.out().join(&name), &records)?;
        s.note_artifact(&name);
        t.push(vec![seed.to_string(), template.config.id.clone(), records.len().to_string()]);
    }
    s.emit_table("extract.txt", &t)
}

#[derive(Serialize)]
struct SeedMetrics {
    seed: u64,
    metrics: MetricsReport,
}

fn score_seeds(s: &mut Session, dir: &std::path::Path) -> Result<Vec<SeedMetrics>> {
    let split = s.split()?;
    let tests = s.test_sample()?;
    let mut out = Vec::new();
    for seed in s.cfg.seeds.clone() {
        let path = dir.join(predictions_name(seed));
        let records = read_prediction_records(&path)
            .with_context(|| format!("reading {} (run `extract` first)", path.display()))?;
        let metrics = score(split.task(), &records, &tests, split.labels())?;
        if metrics.undefined {
            log::warn!("seed {seed}: no non-null predictions or golds, metrics are undefined");
        }
        out.push(SeedMetrics { seed, metrics });
    }
    Ok(out)
}

fn mean_row(label: &str, reports: &[MetricsReport], seeds: &[u64]) -> Result<Vec<String>> {
    let agg = aggregate_runs(reports, seeds)?;
    Ok(vec![
        label.to_string(),
        agg.precision.display_pct(),
        agg.f1.display_pct(),
        agg.recall.display_pct(),
    ])
}

pub fn evaluate(s: &mut Session, predictions: Option<PathBuf>) -> Result<()> {
    let dir = predictions.unwrap_or_else(|| s.out().to_path_buf());
    let per_seed = score_seeds(s, &dir)?;
    let reports: Vec<MetricsReport> = per_seed.iter().map(|m| m.metrics.clone()).collect();
    let seeds = s.cfg.seeds.clone();
    let aggregate = aggregate_runs(&reports, &seeds)?;
    let mut t = TextTable::new(&["Seed", "Precision", "F1", "Recall"]);
    for m in &per_seed {
        let mut row = vec![m.seed.to_string()];
        row.extend(m.metrics.pfr_cells());
        t.push(row);
    }
    t.push(mean_row("mean ± std", &reports, &seeds)?);
    #[derive(Serialize)]
    struct Out<'a> {
        per_seed: &'a [SeedMetrics],
        aggregate: &'a fewshot_ie::evalkit::RunAggregate,
    }
    s.write_json("evaluation.json", &Out { per_seed: &per_seed, aggregate: &aggregate })?;
    s.emit_table("evaluation.txt", &t)
}

pub fn ablate(s: &mut Session, random_seed: Option<u64>) -> Result<()> {
    if s.cfg.retrieval != RetrievalMode::Knn {
        return Err(config_err("ablation compares against kNN retrieval; use --retrieval knn"));
    }
    let tests = s.test_sample()?;
    let seeds = s.cfg.seeds.clone();
    let mut by_arm: BTreeMap<usize, (String, Vec<MetricsReport>)> = BTreeMap::new();
    for &seed in &seeds {
        let engine = s.engine(seed)?;
        let pool = s.pool(seed)?;
        let template = s.template_for(&engine, &pool)?;
        let report = run_ablation(&engine, &template, &pool.examples, &tests, random_seed.unwrap_or(seed))?;
        s.write_json(&format!("ablation-seed{seed}.json"), &report)?;
        for (i, row) in report.rows.iter().enumerate() {
            by_arm
                .entry(i)
                .or_insert_with(|| (row.arm.name.clone(), Vec::new()))
                .1
                .push(row.metrics.clone());
        }
    }
    let mut t = TextTable::new(&["", "Precision", "F1", "Recall"]);
    for (name, reports) in by_arm.values() {
        t.push(mean_row(name, reports, &seeds)?);
    }
    s.emit_table("ablation.txt", &t)
}

pub fn null_study(s: &mut Session, draws: usize) -> Result<()> {
    if s.task()? != Task::Ner {
        return Err(config_err("null-study applies to NER datasets only"));
    }
    let mut tables = String::new();
    for seed in s.cfg.seeds.clone() {
        let engine = s.engine(seed)?;
        let pool = s.pool(seed)?;
        let template = s.template_for(&engine, &pool)?;
        let report = null_probability_study(&engine, &template, &pool.examples, draws, seed)?;
        s.write_json(&format!("null-study-seed{seed}.json"), &report)?;
        let t = report.to_table().titled(format!("Seed {seed} ({} draws)", draws));
        println!("{t}");
        tables.push_str(&format!("{t}\n"));
    }
    s.write_text("null-study.txt", &tables)
}

pub fn modified_run(s: &mut Session) -> Result<()> {
    if s.task()? != Task::Ner {
        return Err(config_err("modified-run applies to NER datasets only"));
    }
    let tests = s.test_sample()?;
    let name = s.split()?.name().to_string();
    let seeds = s.cfg.seeds.clone();
    let mut original = Vec::new();
    let mut modified = Vec::new();
    for &seed in &seeds {
        let engine = s.engine(seed)?;
        let pool = s.pool(seed)?;
        let template = s.template_for(&engine, &pool)?;
        let report = modified_dataset_experiment(&engine, &template, &pool.examples, &tests, &name)?;
        s.write_json(&format!("modified-seed{seed}.json"), &report)?;
        original.push(report.rows[0].original.clone());
        modified.push(report.rows[0].modified.clone());
    }
    let mut out = String::new();
    for (title, reports) in [(format!("Original {name}"), &original), (format!("Modified {name}"), &modified)] {
        let mut t = TextTable::new(&["", "Precision", "F1", "Recall"]).titled(title);
        t.push(mean_row(&format!("In-Context ({})", s.cfg.model), reports, &seeds)?);
        println!("{t}");
        out.push_str(&format!("{t}\n"));
    }
    s.write_text("modified.txt", &out)
}

pub fn compare(s: &mut Session, baselines: &[String], predictions: Option<PathBuf>) -> Result<()> {
    let mut parsed = Vec::new();
    for b in baselines {
        let (name, path) = b
            .split_once('=')
            .ok_or_else(|| config_err(format!("--baseline expects NAME=PATH, got '{b}'")))?;
        parsed.push((name.to_string(), PathBuf::from(path)));
    }
    if parsed.is_empty() {
        bail!(config_err("compare needs at least one --baseline NAME=PATH"));
    }
    let split = s.split()?;
    let tests = s.test_sample()?;
    let mut t = TextTable::new(&["Model", "Precision", "F1", "Recall"]);
    let mut rows: Vec<(String, MetricsReport)> = Vec::new();
    for (name, path) in &parsed {
        let records = ingest_baseline_predictions(path, &tests)
            .with_context(|| format!("baseline {name} ({})", path.display()))?;
        let metrics = score(split.task(), &records, &tests, split.labels())?;
        let mut row = vec![name.clone()];
        row.extend(metrics.pfr_cells());
        t.push(row);
        rows.push((name.clone(), metrics));
    }
    let dir = predictions.unwrap_or_else(|| s.out().to_path_buf());
    let ours = score_seeds(s, &dir)?;
    let reports: Vec<MetricsReport> = ours.iter().map(|m| m.metrics.clone()).collect();
    let seeds = s.cfg.seeds.clone();
    t.push(mean_row(&format!("In-Context ({})", s.cfg.model), &reports, &seeds)?);
    #[derive(Serialize)]
    struct Out<'a> {
        baselines: &'a [(String, MetricsReport)],
        in_context: &'a [SeedMetrics],
        in_context_f1: MeanStd,
    }
    let f1 = aggregate_runs(&reports, &seeds)?.f1;
    s.write_json(
        "comparison.json",
        &Out {
            baselines: &rows,
            in_context: &ours,
            in_context_f1: f1,
        },
    )?;
    s.emit_table("comparison.txt", &t)
}
