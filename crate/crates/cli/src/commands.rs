use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use necroscope::quantify::{
    aggregate_case, count_pixels, cases_csv, mean_iou, render_overlay_level, report_comparison, CaseQuantification,
    ClassCounts,
};
use necroscope::segmenter::{run_slide, BackendConfig};
use necroscope::slide_store::{check_mask_dims, load_manifest, save_rgb_png};
use necroscope::survival::{
    consort, km_svg, stratify, sweep, CohortCase, Endpoint, RatioSource, SweepTable, DEFAULT_THRESHOLDS,
};
use necroscope::synth::{generate_cohort, CohortSpec};
use necroscope::{Dataset, LabelMask};
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::config::{
    merge, required, AnalysisArgs, BackendKind, Command, EndpointArg, OverlayArgs, RatioArg, SegmentArgs,
    SurvivalArgs, SweepArgs, SynthArgs,
};
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

pub fn run(command: Command, file: &Map<String, Value>) -> Result<()> {
    match command {
        Command::Synth(a) => synth(merge(&a, file)?),
        Command::Segment(a) => segment(merge(&a, file)?),
        Command::Quantify(a) => quantify(merge(&a, file)?),
        Command::Evaluate(a) => evaluate(merge(&a, file)?),
        Command::Survival(a) => survival(merge(&a, file)?),
        Command::Sweep(a) => sweep_cmd(merge(&a, file)?),
        Command::Overlay(a) => overlay(merge(&a, file)?),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::output(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::output(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("results serialize");
    text.push('\n');
    write_text(path, &text)
}

fn write_run_config<T: Serialize>(out: &Path, command: &str, args: &T) -> Result<()> {
    write_json(
        &out.join(format!("run_config_{command}.json")),
        &json!({ "command": command, "args": args }),
    )
}

fn open_dataset(dataset: &Option<PathBuf>) -> Result<Dataset> {
    Ok(load_manifest(&required(dataset, "dataset")?)?)
}

fn mask_file(masks: &Path, slide_id: &str) -> PathBuf {
    masks.join(format!("{slide_id}.png"))
}

fn load_mask(ds: &Dataset, masks: &Path, slide_id: &str) -> Result<LabelMask> {
    let path = mask_file(masks, slide_id);
    if !path.exists() {
        return Err(CliError::Validation(format!(
            "no predicted mask for slide `{slide_id}` at {}",
            path.display()
        )));
    }
    let mask = LabelMask::load_png(&path)?;
    check_mask_dims(ds.slide_meta(slide_id)?, &mask)?;
    Ok(mask)
}

fn synth(mut args: SynthArgs) -> Result<()> {
    let spec_path = required(&args.spec, "spec")?;
    let out = required(&args.out, "out")?;
    let text = fs::read_to_string(&spec_path)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", spec_path.display())))?;
    let spec: CohortSpec = serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("{}: {e}", spec_path.display())))?;
    eprintln!("generating {} cases into {}", spec.cases, out.display());
    let started = Instant::now();
    let ds = generate_cohort(&spec, &out)?;
    eprintln!(
        "wrote {} slides in {:.1}s",
        ds.slides().len(),
        started.elapsed().as_secs_f64()
    );
    write_json(&out.join("cohort_spec.json"), &spec)?;
    args.out = Some(out.clone());
    write_run_config(&out, "synth", &args)
}

fn backend_config(args: &SegmentArgs) -> Result<BackendConfig> {
    let config = match args.backend.expect("resolved") {
        BackendKind::Oracle => BackendConfig::Oracle,
        BackendKind::Chromatic => BackendConfig::chromatic_with_faults(
            args.mislabel_rate.expect("resolved"),
            args.seed.expect("resolved"),
        ),
        BackendKind::External => {
            let cmd = required(&args.external_cmd, "external_cmd")?;
            BackendConfig::External {
                command: cmd.split_whitespace().map(str::to_string).collect(),
                workdir: None,
                batch_size: args.batch_size.expect("resolved"),
                timeout_secs: args.timeout_secs.expect("resolved"),
            }
        }
    };
    config.validate()?;
    Ok(config)
}

#[derive(Serialize)]
struct SlideLog {
    slide_id: String,
    width: u32,
    height: u32,
    tiles: usize,
    elapsed_ms: u64,
    error: Option<String>,
}

fn segment(mut args: SegmentArgs) -> Result<()> {
    let ds = open_dataset(&args.dataset)?;
    let out = required(&args.out, "out")?;
    args.backend.get_or_insert(BackendKind::Chromatic);
    args.workers.get_or_insert(1);
    args.seed.get_or_insert(0);
    args.mislabel_rate.get_or_insert(0.0);
    args.batch_size.get_or_insert(16);
    args.timeout_secs.get_or_insert(600.0);
    let config = backend_config(&args)?;
    let workers = args.workers.unwrap();
    if workers == 0 {
        return Err(CliError::Validation("--workers must be at least 1".into()));
    }
    let slide_ids: Vec<String> = match &args.slides {
        Some(ids) => {
            for id in ids {
                ds.slide_meta(id)?;
            }
            ids.clone()
        }
        None => ds.slides().iter().map(|s| s.id.clone()).collect(),
    };

    let masks_dir = out.join("masks");
    fs::create_dir_all(&masks_dir).map_err(|e| CliError::output(format!("{}: {e}", masks_dir.display())))?;
    write_run_config(&out, "segment", &json!({ "resolved": &args, "backend_config": &config }))?;

    let mut logs = Vec::new();
    let mut first_error: Option<CliError> = None;
    for (i, id) in slide_ids.iter().enumerate() {
        let slide = ds.slide(id)?;
        let meta = slide.meta();
        eprintln!("[{}/{}] {id}: {}x{}", i + 1, slide_ids.len(), meta.width, meta.height);
        let truth = match config {
            BackendConfig::Oracle => Some(ds.mask(id)?),
            _ => None,
        };
        match run_slide(&slide, truth.as_ref(), &config, workers) {
            Ok((mask, stats)) => {
                mask.save_png(&mask_file(&masks_dir, id)).map_err(CliError::output)?;
                eprintln!("[{}/{}] {id}: {} tiles in {} ms", i + 1, slide_ids.len(), stats.tiles, stats.elapsed_ms);
                logs.push(SlideLog {
                    slide_id: stats.slide_id,
                    width: stats.width,
                    height: stats.height,
                    tiles: stats.tiles,
                    elapsed_ms: stats.elapsed_ms,
                    error: None,
                });
            }
            Err(e) => {
                eprintln!("[{}/{}] {id}: failed: {e}", i + 1, slide_ids.len());
                // A failed slide leaves no mask behind, not even a stale one.
                let _ = fs::remove_file(mask_file(&masks_dir, id));
                logs.push(SlideLog {
                    slide_id: id.clone(),
                    width: meta.width,
                    height: meta.height,
                    tiles: 0,
                    elapsed_ms: 0,
                    error: Some(e.to_string()),
                });
                first_error.get_or_insert(e.into());
            }
        }
    }
    write_json(&out.join("run_log.json"), &json!({ "backend": config.kind(), "workers": workers, "slides": logs }))?;
    match first_error {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn masks_dir(masks: &Option<PathBuf>, out: &Path) -> PathBuf {
    masks.clone().unwrap_or_else(|| out.join("masks"))
}

/// Pixel counts of every slide of every case.
fn quantify_cases(ds: &Dataset, masks: &Path) -> Result<Vec<CaseQuantification>> {
    let mut counts: HashMap<String, ClassCounts> = HashMap::new();
    let total = ds.slides().len();
    for (i, meta) in ds.slides().iter().enumerate() {
        eprintln!("[{}/{}] counting {}", i + 1, total, meta.id);
        counts.insert(meta.id.clone(), count_pixels(&load_mask(ds, masks, &meta.id)?));
    }
    ds.cases()
        .iter()
        .map(|case| Ok(aggregate_case(case, &counts)?))
        .collect()
}

fn quantification_json(q: &CaseQuantification) -> Value {
    json!({
        "case_id": q.case_id,
        "counts": q.counts,
        "slides": q.slide_counts.iter().map(|(id, c)| json!({ "slide_id": id, "counts": c })).collect::<Vec<_>>(),
        "necrotic": q.ratio.map(|r| r.necrotic()),
        "tumor": q.ratio.map(|r| r.tumor()),
        "r_dl": q.r_dl(),
        "grade": q.grade.map(|g| g.label()),
        "r_pr": q.r_pr,
        "abs_diff": q.abs_diff,
        "flags": q.flags,
    })
}

fn quantify(mut args: AnalysisArgs) -> Result<()> {
    let ds = open_dataset(&args.dataset)?;
    let out = required(&args.out, "out")?;
    let masks = masks_dir(&args.masks, &out);
    args.masks = Some(masks.clone());
    let cases = quantify_cases(&ds, &masks)?;
    write_text(&out.join("cases.csv"), &cases_csv(&cases))?;
    write_json(&out.join("cases.json"), &cases.iter().map(quantification_json).collect::<Vec<_>>())?;
    write_run_config(&out, "quantify", &args)
}

fn evaluate(mut args: AnalysisArgs) -> Result<()> {
    let ds = open_dataset(&args.dataset)?;
    let out = required(&args.out, "out")?;
    let masks = masks_dir(&args.masks, &out);
    args.masks = Some(masks.clone());
    let cases = quantify_cases(&ds, &masks)?;
    let report = report_comparison(&cases)?;
    write_text(&out.join("report.csv"), &report.stats_csv())?;
    write_json(&out.join("report.json"), &report)?;
    write_text(&out.join("scatter.csv"), &report.scatter_csv())?;
    write_text(&out.join("scatter.svg"), &report.scatter_svg())?;

    // Segmentation agreement where ground truth exists.
    let mut iou = String::from("slide_id,mean_iou\n");
    for meta in ds.slides() {
        if !ds.mask_path(&meta.id).exists() {
            continue;
        }
        let truth = ds.mask(&meta.id)?;
        let pred = load_mask(&ds, &masks, &meta.id)?;
        iou.push_str(&format!("{},{:.6}\n", meta.id, mean_iou(&pred, &truth)?));
    }
    write_text(&out.join("miou.csv"), &iou)?;
    write_run_config(&out, "evaluate", &args)
}

fn cohort(ds: &Dataset, masks: &Path) -> Result<Vec<CohortCase>> {
    let quantified = quantify_cases(ds, masks)?;
    Ok(ds
        .cases()
        .iter()
        .zip(&quantified)
        .map(|(record, q)| CohortCase::new(record.clone(), q))
        .collect())
}

fn endpoints(selected: &Option<Vec<EndpointArg>>) -> Vec<Endpoint> {
    let all = vec![EndpointArg::Os, EndpointArg::Pfs];
    let mut list = selected.clone().unwrap_or(all);
    list.dedup();
    list.into_iter()
        .map(|e| match e {
            EndpointArg::Os => Endpoint::Os,
            EndpointArg::Pfs => Endpoint::Pfs,
        })
        .collect()
}

fn ratio_source(r: RatioArg) -> RatioSource {
    match r {
        RatioArg::Model => RatioSource::Model,
        RatioArg::Report => RatioSource::Report,
    }
}

fn survival(mut args: SurvivalArgs) -> Result<()> {
    let ds = open_dataset(&args.dataset)?;
    let out = required(&args.out, "out")?;
    let masks = masks_dir(&args.masks, &out);
    args.masks = Some(masks.clone());
    let cutoff = *args.cutoff.get_or_insert(0.9);
    let source = ratio_source(*args.ratio.get_or_insert(RatioArg::Model));
    let selected = endpoints(&args.endpoint);
    args.endpoint = Some(
        selected
            .iter()
            .map(|e| match e {
                Endpoint::Os => EndpointArg::Os,
                Endpoint::Pfs => EndpointArg::Pfs,
            })
            .collect(),
    );

    let cases = cohort(&ds, &masks)?;
    write_json(&out.join("consort.json"), &consort(&cases))?;
    for endpoint in selected {
        let label = endpoint.label();
        let result = stratify(&cases, endpoint, cutoff, source)?;
        eprintln!(
            "{label}: {} responders, {} non-responders, p = {}",
            result.responders.len(),
            result.non_responders.len(),
            necroscope::survival::format_p(result.logrank.p_value)
        );
        write_text(&out.join(format!("km_{label}_responders.csv")), &result.km_responders.to_csv())?;
        write_text(&out.join(format!("km_{label}_non_responders.csv")), &result.km_non_responders.to_csv())?;
        let title = format!("{} by ratio cutoff {:.0}%", label.to_uppercase(), cutoff * 100.0);
        let svg = km_svg(
            &[("responders", &result.km_responders), ("non-responders", &result.km_non_responders)],
            &title,
        );
        write_text(&out.join(format!("km_{label}.svg")), &svg)?;
        write_json(&out.join(format!("logrank_{label}.json")), &result)?;
    }
    write_run_config(&out, "survival", &args)
}

fn sweep_cmd(mut args: SweepArgs) -> Result<()> {
    let ds = open_dataset(&args.dataset)?;
    let out = required(&args.out, "out")?;
    let masks = masks_dir(&args.masks, &out);
    args.masks = Some(masks.clone());
    let thresholds = args.thresholds.get_or_insert_with(|| DEFAULT_THRESHOLDS.to_vec()).clone();
    let source = ratio_source(*args.ratio.get_or_insert(RatioArg::Model));
    let selected = endpoints(&args.endpoint);

    let cases = cohort(&ds, &masks)?;
    write_json(&out.join("consort.json"), &consort(&cases))?;
    let results = selected
        .into_iter()
        .map(|e| {
            let r = sweep(&cases, e, &thresholds, source)?;
            eprintln!("{}: argmin cutoff {:.2}", e.label(), r.argmin);
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    let table = SweepTable::new(results);
    write_text(&out.join("sweep.csv"), &table.to_csv())?;
    write_json(&out.join("sweep.json"), &table)?;
    write_run_config(&out, "sweep", &args)
}

fn overlay(mut args: OverlayArgs) -> Result<()> {
    let ds = open_dataset(&args.dataset)?;
    let out = required(&args.out, "out")?;
    let masks = masks_dir(&args.masks, &out);
    args.masks = Some(masks.clone());
    let alpha = *args.alpha.get_or_insert(0.5);
    let level = *args.level.get_or_insert(4);
    for meta in ds.slides() {
        if !meta.has_level(level) {
            return Err(CliError::Validation(format!("slide `{}` has no level {level}", meta.id)));
        }
        let mask = load_mask(&ds, &masks, &meta.id)?;
        let slide = ds.slide(&meta.id)?;
        let img = render_overlay_level(&slide, &mask, alpha, level).map_err(|e| CliError::Validation(e.to_string()))?;
        save_rgb_png(&out.join("overlays").join(format!("{}.png", meta.id)), &img).map_err(CliError::output)?;
        eprintln!("overlay {}", meta.id);
    }
    write_run_config(&out, "overlay", &args)
}
