use std::path::{Path, PathBuf};
use std::time::Instant;

use apa_core::analysis::{self, SweepParam};
use apa_core::config::RunConfig;
use apa_core::data::Dataset;
use apa_core::losses::LossKind;
use apa_core::plot::{Plot, Style};
use apa_core::train::{self, RunSummary, Setting, Stage};
use apa_core::verify::{self, Level};
use apa_core::{Model, Variant};
use serde_json::json;

use crate::layout::{claim_dir, out_root, require, Failure, Layout, Outcome, EXIT_VERIFY};
use crate::{Common, ProbeKind, TrainStage};

fn load_config(common: &Common) -> Outcome<RunConfig> {
    match &common.config {
        Some(p) => {
            if !p.is_file() {
                return Err(Failure::missing(format!("config file {} not found", p.display())));
            }
            RunConfig::load(p).map_err(|e| Failure::config(e.to_string()))
        }
        None => Ok(RunConfig::default()),
    }
}

fn parse_loss(name: &str) -> Outcome<LossKind> {
    name.parse().map_err(|e: apa_core::Error| Failure::config(e.to_string()))
}

fn num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Outcome {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Effective configuration as TOML next to the outputs and as JSON for
/// embedding in summaries.
fn echo_config(dir: &Path, cfg: &RunConfig) -> Outcome<serde_json::Value> {
    let cfg = cfg.resolved()?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(serde_json::to_value(&cfg)?)
}

fn write_table(path: &Path, header: &[String], rows: &[Vec<String>]) -> Outcome {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Renders `svg` from the CSV already written at `csv_path`.
fn plot_from(csv_path: &Path, svg: &Path, plot: Plot, x: &str, ys: &[&str]) -> Outcome {
    let text = std::fs::read_to_string(csv_path)?;
    plot.with_csv_columns(&text, x, ys)?.write(svg)?;
    Ok(())
}

fn load_data(layout: &Layout, cfg: &RunConfig) -> Outcome<(Dataset, Dataset)> {
    let dir = layout.data();
    let (s, t) = (dir.join("source.csv"), dir.join("target.csv"));
    require(&s, "run `apa gen-data` first")?;
    require(&t, "run `apa gen-data` first")?;
    let stamp = dir.join("config.toml");
    require(&stamp, "run `apa gen-data` first")?;
    let made = RunConfig::load(&stamp).map_err(|e| Failure::missing(format!("unreadable dataset stamp: {e}")))?;
    if made.data != cfg.data {
        return Err(Failure::missing(format!(
            "datasets in {} were generated with a different [data] section; rerun `apa gen-data --force`",
            dir.display()
        )));
    }
    Ok((Dataset::read_csv(&s, cfg.data.classes)?, Dataset::read_csv(&t, cfg.data.classes)?))
}

fn load_source_model(layout: &Layout, cfg: &RunConfig) -> Outcome<Model> {
    let path = layout.checkpoint();
    require(&path, "run `apa train --stage source` first")?;
    let model = Model::load_checkpoint(&path)?;
    if model.arch != cfg.architecture() {
        return Err(Failure::missing(format!(
            "checkpoint {} was trained with a different [model] section; rerun `apa train --stage source --force`",
            path.display()
        )));
    }
    Ok(model)
}

pub fn gen_data(common: &Common) -> Outcome {
    let cfg = load_config(common)?;
    let layout = Layout { root: out_root(common.out.as_deref(), Some(&cfg)) };
    let dir = layout.data();
    claim_dir(&dir, common.force)?;
    let (source, target) = cfg.data.generate()?;
    source.write_csv(&dir.join("source.csv"))?;
    target.write_csv(&dir.join("target.csv"))?;
    echo_config(&dir, &cfg)?;
    println!("wrote {} source and {} target rows to {}", source.len(), target.len(), dir.display());
    Ok(())
}

fn records_plot(dir: &Path, title: &str) -> Outcome {
    let plot = Plot::new(title, "step", "accuracy", Style::Line);
    plot_from(
        &dir.join("records.csv"),
        &dir.join("accuracy.svg"),
        plot,
        "step",
        &["source_acc", "target_acc", "target_class_acc", "pseudo_acc"],
    )
}

pub fn train(common: &Common, stage: TrainStage, loss: Option<&str>) -> Outcome {
    let mut cfg = load_config(common)?;
    if let Some(name) = loss {
        cfg = cfg.with_loss(parse_loss(name)?);
    }
    match stage {
        TrainStage::Source => {}
        TrainStage::Adapt => cfg.run.setting = Setting::Standard,
        TrainStage::AdaptSf => cfg.run.setting = Setting::SourceFree,
    }
    cfg.validate()?;
    let layout = Layout { root: out_root(common.out.as_deref(), Some(&cfg)) };
    let (source, target) = load_data(&layout, &cfg)?;
    let adapt_cfg = cfg.adapt_config()?;
    let t0 = Instant::now();

    let (dir, stage_tag, model, records, skipped) = if stage == TrainStage::Source {
        let dir = layout.source();
        claim_dir(&dir, common.force)?;
        println!("source stage: {} steps", adapt_cfg.source_steps);
        let out = train::run_source_stage(&adapt_cfg, cfg.architecture(), &source, Some(&target))?;
        (dir, Stage::Source, out.model, out.records, 0)
    } else {
        let start = load_source_model(&layout, &cfg)?;
        let sf = cfg.run.setting == Setting::SourceFree;
        let dir = layout.adapt(sf, cfg.loss.kind.name());
        claim_dir(&dir, common.force)?;
        println!("adaptation ({:?}, loss {}): {} steps", cfg.run.setting, cfg.loss.kind, adapt_cfg.adapt_steps);
        let src = (!sf).then_some(&source);
        let out = train::run_adapt_stage(&adapt_cfg, &start, src, &target, None)?;
        (dir, Stage::Adapt, out.model, out.records, out.skipped_rows)
    };

    model.save_checkpoint(&dir.join("model.json"))?;
    train::write_records_csv(&records, &dir.join("records.csv"))?;
    let summary = RunSummary::new(stage_tag, &adapt_cfg, &records, skipped)?;
    let config = echo_config(&dir, &cfg)?;
    write_json(&dir.join("summary.json"), &json!({ "run": summary, "effective_config": config }))?;
    records_plot(&dir, &format!("{stage_tag} stage"))?;
    let last = &summary.final_record;
    println!(
        "done in {:.1}s: target per-class acc {:.2}, target acc {:.2} -> {}",
        t0.elapsed().as_secs_f64(),
        last.target_class_acc,
        last.target_acc,
        dir.display()
    );
    Ok(())
}

pub fn sweep(
    common: &Common,
    param: &str,
    values: Option<Vec<f64>>,
    losses: Option<Vec<String>>,
    jobs: Option<usize>,
) -> Outcome {
    let cfg = load_config(common)?;
    let param: SweepParam = param.parse().map_err(|e: apa_core::Error| Failure::config(e.to_string()))?;
    let values = values.unwrap_or_else(|| match param {
        SweepParam::Eps => cfg.sweep.eps.clone(),
        SweepParam::Beta => cfg.sweep.beta.clone(),
        SweepParam::Topk => cfg.sweep.topk.clone(),
    });
    if values.is_empty() {
        return Err(Failure::config("sweep needs at least one value"));
    }
    let kinds: Vec<LossKind> = match losses {
        Some(names) => names.iter().map(|n| parse_loss(n)).collect::<Outcome<_>>()?,
        None => vec![cfg.loss.kind],
    };
    let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let layout = Layout { root: out_root(common.out.as_deref(), Some(&cfg)) };
    let (source, target) = load_data(&layout, &cfg)?;
    let start = load_source_model(&layout, &cfg)?;
    let configs: Vec<RunConfig> = kinds.iter().map(|&k| cfg.with_loss(k)).collect();
    let adapt: Vec<_> = configs.iter().map(|c| c.adapt_config()).collect::<Result<_, _>>()?;
    for a in &adapt {
        for &v in &values {
            param.apply(a, v)?;
        }
    }
    let dir = layout.sweep(&param.to_string());
    claim_dir(&dir, common.force)?;

    let mut all = Vec::new();
    for (k, a) in kinds.iter().zip(&adapt) {
        println!("sweep {param} over {values:?} with loss {k} ({jobs} jobs)");
        let src = (a.setting == Setting::Standard).then_some(&source);
        all.push(analysis::sweep(a, &start, src, &target, param, &values, jobs)?);
    }

    let mut header = vec![param.to_string()];
    for k in &kinds {
        header.push(format!("{k}_class_acc"));
        header.push(format!("{k}_acc"));
    }
    let rows: Vec<Vec<String>> = values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let mut row = vec![num(v)];
            for runs in &all {
                row.push(num(runs[i].final_class_acc));
                row.push(num(runs[i].final_acc));
            }
            row
        })
        .collect();
    let csv_path = dir.join("sweep.csv");
    write_table(&csv_path, &header, &rows)?;
    let ys: Vec<String> = kinds.iter().map(|k| format!("{k}_class_acc")).collect();
    let ys: Vec<&str> = ys.iter().map(String::as_str).collect();
    let mut plot = Plot::new(&format!("final target accuracy vs {param}"), &param.to_string(), "per-class accuracy", Style::Line);
    if param == SweepParam::Eps && values.iter().all(|&v| v > 0.0) {
        plot = plot.log_x();
    }
    plot_from(&csv_path, &dir.join("sweep.svg"), plot, &param.to_string(), &ys)?;
    let config = echo_config(&dir, &cfg)?;
    write_json(
        &dir.join("summary.json"),
        &json!({ "param": param, "values": values, "runs": all, "effective_config": config }),
    )?;
    for (k, runs) in kinds.iter().zip(&all) {
        let accs: Vec<String> = runs.iter().map(|r| format!("{:.2}", r.final_class_acc)).collect();
        println!("{k}: {}", accs.join(" "));
    }
    println!("-> {}", dir.display());
    Ok(())
}

pub fn probe(common: &Common, kind: ProbeKind, loss: Option<&str>) -> Outcome {
    let mut cfg = load_config(common)?;
    if let Some(name) = loss {
        cfg = cfg.with_loss(parse_loss(name)?);
    }
    cfg.validate()?;
    let layout = Layout { root: out_root(common.out.as_deref(), Some(&cfg)) };
    let (source, target) = load_data(&layout, &cfg)?;
    let start = load_source_model(&layout, &cfg)?;
    let adapt_cfg = cfg.adapt_config()?;
    let src = (adapt_cfg.setting == Setting::Standard).then_some(&source);
    let name = match kind {
        ProbeKind::Drift => "drift",
        ProbeKind::Corr => "corr",
        ProbeKind::Shrink => "shrink",
    };
    let dir = layout.probe(name);
    claim_dir(&dir, common.force)?;
    let config = echo_config(&dir, &cfg)?;
    let t0 = Instant::now();
    match kind {
        ProbeKind::Drift => probe_drift(&dir, &cfg, &start, src, &target, config)?,
        ProbeKind::Corr => probe_corr(&dir, &cfg, &start, src, &target, config)?,
        ProbeKind::Shrink => probe_shrink(&dir, &cfg, &start, &target, config)?,
    }
    println!("done in {:.1}s -> {}", t0.elapsed().as_secs_f64(), dir.display());
    Ok(())
}

fn probe_drift(
    dir: &Path,
    cfg: &RunConfig,
    start: &Model,
    source: Option<&Dataset>,
    target: &Dataset,
    config: serde_json::Value,
) -> Outcome {
    let a = cfg.adapt_config()?;
    println!("drift probe: adaptation with loss {}", a.loss.kind);
    let out = train::run_adapt_stage(&a, start, source, target, None)?;
    let rows: Vec<Vec<String>> =
        out.records.iter().map(|r| vec![r.step.to_string(), num(r.drift), num(r.target_class_acc)]).collect();
    let header: Vec<String> = ["step", "drift", "target_class_acc"].map(String::from).to_vec();
    let csv_path = dir.join("drift.csv");
    write_table(&csv_path, &header, &rows)?;
    let plot = Plot::new("classifier drift", "step", "mean cosine to initial weights", Style::Line);
    plot_from(&csv_path, &dir.join("drift.svg"), plot, "step", &["drift"])?;
    let summary = RunSummary::new(Stage::Adapt, &a, &out.records, out.skipped_rows)?;
    println!("min drift cosine {:.4} (threshold {}, ok: {})", summary.min_drift, a.drift_threshold, summary.drift_ok);
    write_json(
        &dir.join("summary.json"),
        &json!({
            "min_drift": summary.min_drift,
            "threshold": a.drift_threshold,
            "drift_ok": summary.drift_ok,
            "effective_config": config,
        }),
    )
}

const KEY_PAIRS: [(&str, &str); 5] =
    [("r_n", "grad_n"), ("r_n", "delta_n"), ("r_n", "grad_u"), ("r_n", "delta_u"), ("r_n", "delta_i")];

fn probe_corr(
    dir: &Path,
    cfg: &RunConfig,
    start: &Model,
    source: Option<&Dataset>,
    target: &Dataset,
    config: serde_json::Value,
) -> Outcome {
    let a = cfg.adapt_config()?;
    let p = cfg.probe_config();
    println!("correlation probe: adaptation with loss {}, probe batch {}", a.loss.kind, p.batch_size);
    let run = analysis::run_correlation_probe(&a, start, source, target, &p)?;
    let samples = &run.samples;
    let pairs: Vec<String> = samples.first().map(|s| s.cosines.iter().map(|(k, _)| k.clone()).collect()).unwrap_or_default();

    let mut header = vec!["step".to_string(), "skipped".to_string()];
    header.extend(pairs.iter().map(|k| format!("cos_{}", k.replace('~', "_"))));
    let smoothed: Vec<Vec<f64>> = KEY_PAIRS
        .iter()
        .map(|(x, y)| {
            let raw: Vec<f64> = samples.iter().map(|s| s.cosine(x, y).map_or(f64::NAN, |c| c.mean)).collect();
            analysis::moving_average(&raw, p.smoothing_window)
        })
        .collect();
    header.extend(KEY_PAIRS.iter().map(|(x, y)| format!("ma_{x}_{y}")));
    let rows: Vec<Vec<String>> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut row = vec![s.step.to_string(), (s.skipped as u8).to_string()];
            row.extend(s.cosines.iter().map(|(_, c)| num(c.mean)));
            row.extend(smoothed.iter().map(|m| num(m[i])));
            row
        })
        .collect();
    let csv_path = dir.join("corr.csv");
    write_table(&csv_path, &header, &rows)?;
    let ys: Vec<String> = KEY_PAIRS.iter().map(|(x, y)| format!("ma_{x}_{y}")).collect();
    let ys: Vec<&str> = ys.iter().map(String::as_str).collect();
    let plot = Plot::new("cosine with r_n (moving average)", "step", "batch-averaged cosine", Style::Line);
    plot_from(&csv_path, &dir.join("corr.svg"), plot, "step", &ys)?;

    let warmup = analysis::warmup_steps(&a, &p);
    let signs = analysis::correlation_signs(samples, warmup);
    println!(
        "after warm-up ({} probes): cos(r_n, grad_n) > 0 at {:.1}%, cos(r_n, delta_n) < 0 at {:.1}%",
        signs.probes,
        100.0 * signs.grad_positive,
        100.0 * signs.delta_negative
    );
    let mut summary = json!({ "warmup_steps": warmup, "signs": signs, "effective_config": config });

    if cfg.probe.topk {
        let variant = a.loss.kind.variant().unwrap_or(Variant::Normalized);
        let k_max = cfg.probe.topk_max;
        println!("top-k probe: k = 1..={k_max}, {variant:?} variant");
        let run = analysis::run_topk_probe(&a, start, source, target, &p, variant, k_max)?;
        let mut header = vec!["step".to_string()];
        header.extend((1..=k_max).map(|k| format!("cos_k{k}")));
        let rows: Vec<Vec<String>> = run
            .probes
            .iter()
            .map(|t| {
                let mut row = vec![t.step.to_string()];
                row.extend(t.cosines.iter().map(|c| num(c.mean)));
                row
            })
            .collect();
        let csv_path = dir.join("topk.csv");
        write_table(&csv_path, &header, &rows)?;
        let ys: Vec<&str> = header[1..].iter().map(String::as_str).collect();
        let plot = Plot::new("cosine between one-step and top-k perturbations", "step", "batch-averaged cosine", Style::Line);
        plot_from(&csv_path, &dir.join("topk.svg"), plot, "step", &ys)?;
        let s = analysis::topk_summary(&run.probes);
        let curve = analysis::topk_mean_curve(&run.probes);
        println!(
            "top-k: all positive at {:.1}% of probes, monotonicity violated at {:.1}%, mean curve {:?}",
            100.0 * s.all_positive,
            100.0 * s.monotone_violations,
            curve.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>()
        );
        summary["topk"] = json!({ "variant": format!("{variant:?}"), "summary": s, "mean_curve": curve });
    }
    write_json(&dir.join("summary.json"), &summary)
}

fn probe_shrink(dir: &Path, cfg: &RunConfig, model: &Model, target: &Dataset, config: serde_json::Value) -> Outcome {
    let p = cfg.probe_config();
    let x = analysis::probe_batch(target, p.batch_size, p.seed);
    let rows = analysis::probe_shrinking(&x, model, &cfg.probe.shrink_grid, cfg.run.seed)?;
    let header: Vec<String> =
        ["epsilon", "ratio_mean", "ratio_min", "ratio_max", "norm_ratio", "valid", "excluded"].map(String::from).to_vec();
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                num(r.epsilon),
                num(r.ratio_mean),
                num(r.ratio_min),
                num(r.ratio_max),
                num(r.norm_ratio),
                r.valid.to_string(),
                r.excluded.to_string(),
            ]
        })
        .collect();
    let csv_path = dir.join("shrink.csv");
    write_table(&csv_path, &header, &table)?;
    let mut plot = Plot::new("gradient-norm ratio vs perturbation size", "epsilon", "ratio", Style::Line);
    if cfg.probe.shrink_grid.iter().all(|&e| e > 0.0) {
        plot = plot.log_x();
    }
    plot_from(&csv_path, &dir.join("shrink.svg"), plot, "epsilon", &["ratio_mean", "ratio_min", "ratio_max"])?;
    for r in &rows {
        println!("eps {:>8}: ratio mean {:.4} (min {:.4}, max {:.4}), norm ratio {:.4}", r.epsilon, r.ratio_mean, r.ratio_min, r.ratio_max, r.norm_ratio);
    }
    write_json(&dir.join("summary.json"), &json!({ "rows": rows, "effective_config": config }))
}

pub fn verify(level: &str, seed: u64, out: Option<PathBuf>, force: bool) -> Outcome {
    let level: Level = level.parse().map_err(|e: apa_core::Error| Failure::config(e.to_string()))?;
    let layout = Layout { root: out_root(out.as_deref(), None) };
    let name = match level {
        Level::Fast => "fast",
        Level::Full => "full",
    };
    let dir = layout.verify(name);
    claim_dir(&dir, force)?;
    let (report, secs) = verify::run_timed(level, seed)?;
    std::fs::write(dir.join("report.json"), report.to_json()? + "\n")?;
    for c in &report.checks {
        println!(
            "{} {:<36} measured {:.3e} tolerance {:.1e} ({} instances)",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.measured,
            c.tolerance,
            c.instances
        );
    }
    println!("{name} verification finished in {secs:.2}s -> {}", dir.join("report.json").display());
    if report.passed {
        Ok(())
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        Err(Failure::new(EXIT_VERIFY, format!("verification failed: {}", failed.join(", "))))
    }
}
