//! CSV summaries and SVG plots of finished search runs.

use std::path::{Path, PathBuf};

use lpnas::search::{paired_gap_report, parse_history, Branch, GapReport, GenerationLog};

use crate::svg::{render, Mark, Panel, Series};
use crate::CliError;

pub const HISTORY_FILE: &str = "history.csv";
pub const SUMMARY_HEADER: &str = "branch,gen,max_fitness,median_fitness,max_iou,max_gpu_iou,max_fps";
pub const GAP_HEADER: &str = "branch,count,mean_gap,median_gap,mean_gpu_miou,mean_device_miou,recovered_fraction";

/// One branch's history as loaded from a run directory.
#[derive(Debug, Clone)]
pub struct BranchRun {
    pub branch: Branch,
    pub source: PathBuf,
    pub history: Vec<GenerationLog>,
}

fn colors(branch: Branch) -> (&'static str, &'static str) {
    match branch {
        Branch::Ptq => ("#d62728", "#ff9896"),
        Branch::Aligned => ("#1f77b4", "#aec7e8"),
    }
}

/// Finds `<dir>/ptq/history.csv` and `<dir>/aligned/history.csv`.
pub fn load_run(dir: &Path) -> Result<Vec<BranchRun>, CliError> {
    let mut out = Vec::new();
    for branch in [Branch::Ptq, Branch::Aligned] {
        let path = dir.join(branch.as_str()).join(HISTORY_FILE);
        if !path.exists() {
            continue;
        }
        let text = std::fs::read_to_string(&path).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
        let history = parse_history(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        out.push(BranchRun {
            branch,
            source: path,
            history,
        });
    }
    if out.is_empty() {
        return Err(CliError::Input(format!("{}: no branch history found", dir.display())));
    }
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

fn csv_text(header: &str, rows: Vec<Vec<String>>) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(header.split(',')).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("UTF-8 fields")
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

pub fn summary_csv(runs: &[BranchRun]) -> String {
    let rows = runs
        .iter()
        .flat_map(|r| {
            r.history.iter().map(move |g| {
                vec![
                    r.branch.as_str().to_string(),
                    g.generation.to_string(),
                    fmt_opt(finite(g.max_fitness)),
                    fmt_opt(finite(g.median_fitness)),
                    fmt_opt(finite(g.max_iou)),
                    fmt_opt(finite(g.max_gpu_iou)),
                    fmt_opt(finite(g.max_fps)),
                ]
            })
        })
        .collect();
    csv_text(SUMMARY_HEADER, rows)
}

pub fn gap_csv(report: &GapReport) -> String {
    let row = |name: &str, g: &lpnas::search::BranchGap, rec: Option<f64>| {
        vec![
            name.to_string(),
            g.count.to_string(),
            g.mean_gap.to_string(),
            g.median_gap.to_string(),
            g.mean_gpu_miou.to_string(),
            g.mean_device_miou.to_string(),
            fmt_opt(rec),
        ]
    };
    csv_text(
        GAP_HEADER,
        vec![
            row("ptq", &report.ptq, None),
            row("aligned", &report.aligned, report.recovered_fraction),
        ],
    )
}

/// Every evaluated candidate at (fps, mIoU): filled for the device, hollow
/// for the full-precision reference, joined per candidate.
pub fn iou_fps_svg(runs: &[BranchRun]) -> String {
    let mut panel = Panel {
        title: "IoU vs FPS".into(),
        x_label: "simulated FPS".into(),
        y_label: "mIoU".into(),
        ..Default::default()
    };
    for r in runs {
        let (c, light) = colors(r.branch);
        let rows: Vec<_> = r.history.iter().flat_map(|g| &g.rows).filter(|row| row.fps.is_some()).collect();
        let dev: Vec<(f64, f64)> = rows
            .iter()
            .filter_map(|row| Some((row.fps?, row.device_miou?)))
            .collect();
        let gpu: Vec<(f64, f64)> = rows.iter().filter_map(|row| Some((row.fps?, row.gpu_miou?))).collect();
        for row in &rows {
            if let (Some(f), Some(a), Some(b)) = (row.fps, row.gpu_miou, row.device_miou) {
                panel.links.push(((f, a), (f, b), light));
            }
        }
        panel.series.push(Series {
            label: format!("{} device", r.branch.as_str()),
            color: c,
            mark: Mark::Dot,
            points: dev,
        });
        panel.series.push(Series {
            label: format!("{} fp32", r.branch.as_str()),
            color: c,
            mark: Mark::Ring,
            points: gpu,
        });
    }
    render(&[panel])
}

fn per_gen(r: &BranchRun, f: impl Fn(&GenerationLog) -> f64) -> Vec<(f64, f64)> {
    r.history.iter().map(|g| (g.generation as f64, f(g))).collect()
}

pub fn fitness_svg(runs: &[BranchRun]) -> String {
    let mut panel = Panel {
        title: "Fitness per generation".into(),
        x_label: "generation".into(),
        y_label: "fitness".into(),
        ..Default::default()
    };
    for r in runs {
        let (c, light) = colors(r.branch);
        panel.series.push(Series {
            label: format!("{} max", r.branch.as_str()),
            color: c,
            mark: Mark::Line,
            points: per_gen(r, |g| g.max_fitness),
        });
        panel.series.push(Series {
            label: format!("{} median", r.branch.as_str()),
            color: light,
            mark: Mark::Line,
            points: per_gen(r, |g| g.median_fitness),
        });
    }
    render(&[panel])
}

pub fn progression_svg(runs: &[BranchRun]) -> String {
    let mut iou = Panel {
        title: "Max IoU per generation".into(),
        x_label: "generation".into(),
        y_label: "device mIoU".into(),
        ..Default::default()
    };
    let mut fps = Panel {
        title: "Max FPS per generation".into(),
        x_label: "generation".into(),
        y_label: "simulated FPS".into(),
        ..Default::default()
    };
    for r in runs {
        let (c, _) = colors(r.branch);
        iou.series.push(Series {
            label: r.branch.as_str().into(),
            color: c,
            mark: Mark::Line,
            points: per_gen(r, |g| g.max_iou),
        });
        fps.series.push(Series {
            label: r.branch.as_str().into(),
            color: c,
            mark: Mark::Line,
            points: per_gen(r, |g| g.max_fps),
        });
    }
    render(&[iou, fps])
}

/// File name and contents of every report output, in a fixed order.
pub fn build_report(runs: &[BranchRun]) -> Result<Vec<(&'static str, String)>, CliError> {
    if runs.is_empty() {
        return Err(CliError::Input("nothing to report".into()));
    }
    for (i, a) in runs.iter().enumerate() {
        if let Some(b) = runs[i + 1..].iter().find(|b| b.branch == a.branch) {
            return Err(CliError::Input(format!(
                "incompatible runs: {} and {} are both {} histories",
                a.source.display(),
                b.source.display(),
                a.branch.as_str()
            )));
        }
    }
    let mut files = vec![
        ("iou_fps.svg", iou_fps_svg(runs)),
        ("fitness.svg", fitness_svg(runs)),
        ("progression.svg", progression_svg(runs)),
        ("summary.csv", summary_csv(runs)),
    ];
    let find = |b: Branch| runs.iter().find(|r| r.branch == b);
    if let (Some(p), Some(a)) = (find(Branch::Ptq), find(Branch::Aligned)) {
        let report = paired_gap_report(&p.history, &a.history).map_err(|e| {
            CliError::Input(format!(
                "incompatible runs {} and {}: {e}",
                p.source.display(),
                a.source.display()
            ))
        })?;
        files.push(("gap.csv", gap_csv(&report)));
    }
    Ok(files)
}

/// Loads every run directory, builds the report and writes it to `out`.
pub fn write_report(run_dirs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut runs = Vec::new();
    for d in run_dirs {
        runs.extend(load_run(d)?);
    }
    runs.sort_by_key(|r| r.branch == Branch::Aligned);
    let files = build_report(&runs)?;
    std::fs::create_dir_all(out).map_err(|source| CliError::Io {
        path: out.to_path_buf(),
        source,
    })?;
    let mut written = Vec::new();
    for (name, text) in files {
        let path = out.join(name);
        std::fs::write(&path, text).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
        written.push(path);
    }
    Ok(written)
}
