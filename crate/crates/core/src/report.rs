//! Report emission: per-method archive copies, the HVI-vs-iteration series,
//! three 2-D Pareto projections (SVG plus the exact data behind each), and a
//! ranked plain-text summary.

use std::fs;
use std::io;
use std::path::Path;

use crate::design_space::{csv_error, Configuration, DesignSpace};
use crate::error::{Error, Result};
use crate::harness::{read_run_records, ExperimentConfig, RunRecord, REFERENCE_MARGIN};
use crate::oracle::ppa_tradeoff;
use crate::pareto::{hypervolume, NormalizedObjective, QoRVector};

/// One archive CSV row: a configuration with its raw and normalized
/// objectives, front membership, and insertion iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveRow {
    pub config: Configuration,
    pub qor: QoRVector,
    pub norm: [f64; 3],
    pub on_front: bool,
    pub iteration: u64,
}

const ARCHIVE_LABELS: [&str; 8] = [
    "performance",
    "power_w",
    "area_um2",
    "norm_neg_perf",
    "norm_power",
    "norm_area",
    "on_front",
    "iteration",
];

/// Parse an archive CSV as written by the exploration phases.
pub fn read_archive_rows<R: io::Read>(space: &DesignSpace, reader: R) -> Result<Vec<ArchiveRow>> {
    let mut r = csv::Reader::from_reader(reader);
    let n = space.n_params();
    let headers = r.headers().map_err(csv_error)?.clone();
    let mut expected: Vec<&str> = space.params().iter().map(|p| p.name.as_str()).collect();
    expected.extend(ARCHIVE_LABELS);
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(Error::Parse {
            location: "archive CSV header".into(),
            message: format!("expected columns {expected:?}, got {got:?}"),
        });
    }
    let mut rows = Vec::new();
    for (idx, record) in r.records().enumerate() {
        let line = idx + 2;
        let record = record.map_err(csv_error)?;
        if record.len() != expected.len() {
            return Err(Error::Parse {
                location: format!("archive CSV row {line}"),
                message: format!("expected {} fields, got {}", expected.len(), record.len()),
            });
        }
        let field = |i: usize| record.get(i).expect("length checked");
        let parse_f64 = |i: usize| -> Result<f64> {
            field(i).parse().map_err(|e| Error::Parse {
                location: format!("archive CSV row {line}, column {}", i + 1),
                message: format!("{e}"),
            })
        };
        let mut choices = Vec::with_capacity(n);
        for slot in 0..n {
            choices.push(space.literal_to_choice(slot, field(slot))?);
        }
        let config = space.config(choices)?;
        let qor = QoRVector {
            performance: parse_f64(n)?,
            power: parse_f64(n + 1)?,
            area: parse_f64(n + 2)?,
        };
        let norm = [parse_f64(n + 3)?, parse_f64(n + 4)?, parse_f64(n + 5)?];
        let on_front = match field(n + 6) {
            "false" => false,
            "true" => true,
            other => {
                return Err(Error::Parse {
                    location: format!("archive CSV row {line}, column {}", n + 7),
                    message: format!("expected true/false flag, got '{other}'"),
                })
            }
        };
        let iteration = field(n + 7).parse().map_err(|e| Error::Parse {
            location: format!("archive CSV row {line}, column {}", n + 8),
            message: format!("{e}"),
        })?;
        rows.push(ArchiveRow {
            config,
            qor,
            norm,
            on_front,
            iteration,
        });
    }
    Ok(rows)
}

/// Re-emit archive rows in the same schema the phases write.
pub fn write_archive_rows<W: io::Write>(
    space: &DesignSpace,
    rows: &[ArchiveRow],
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = space.params().iter().map(|p| p.name.clone()).collect();
    header.extend(ARCHIVE_LABELS.map(String::from));
    w.write_record(&header).map_err(csv_error)?;
    for row in rows {
        let mut out: Vec<String> = space
            .params()
            .iter()
            .zip(row.config.choices())
            .map(|(p, &c)| p.candidates[c].literal())
            .collect();
        out.push(format!("{:?}", row.qor.performance));
        out.push(format!("{:?}", row.qor.power));
        out.push(format!("{:?}", row.qor.area));
        out.push(format!("{:?}", row.norm[0]));
        out.push(format!("{:?}", row.norm[1]));
        out.push(format!("{:?}", row.norm[2]));
        out.push(row.on_front.to_string());
        out.push(row.iteration.to_string());
        w.write_record(&out).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Final numbers for one method, as printed in the summary.
#[derive(Debug, Clone)]
pub struct MethodReport {
    pub name: &'static str,
    pub evaluations: usize,
    pub final_hypervolume: f64,
    pub hvi_offline: f64,
    /// Indices into the method's archive rows, best ppa_tradeoff first.
    pub ranked: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
pub struct ReportSummary {
    pub offline_hypervolume: f64,
    pub diffusion: MethodReport,
    pub mobo: MethodReport,
}

fn method_report(
    name: &'static str,
    records: &[RunRecord],
    rows: &[ArchiveRow],
    offline_hv: f64,
) -> MethodReport {
    let (final_hv, hvi) = match records.last() {
        Some(r) => (r.hypervolume, r.hvi_offline),
        None => (offline_hv, 0.0),
    };
    let mut ranked: Vec<(usize, f64)> = rows
        .iter()
        .enumerate()
        .filter_map(|(i, row)| {
            ppa_tradeoff(row.qor.performance, row.qor.power, row.qor.area)
                .ok()
                .map(|v| (i, v))
        })
        .collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("ppa values are finite"));
    MethodReport {
        name,
        evaluations: records.len(),
        final_hypervolume: final_hv,
        hvi_offline: hvi,
        ranked,
    }
}

/// Offline hypervolume, preferably derived from any run record
/// (hypervolume − hvi_offline is constant across a run), otherwise
/// recomputed from the seed archive rows.
fn offline_hypervolume(
    online: &[RunRecord],
    mobo: &[RunRecord],
    seed_rows: &[ArchiveRow],
) -> Result<f64> {
    if let Some(r) = online.first().or_else(|| mobo.first()) {
        return Ok(r.hypervolume - r.hvi_offline);
    }
    if seed_rows.is_empty() {
        return Err(Error::Degenerate("no records and no seed archive".into()));
    }
    // Reconstruct the frozen reference exactly as seeding froze it: the
    // componentwise max of the seeds' normalized objectives plus the margin.
    let mut reference = [f64::NEG_INFINITY; 3];
    for row in seed_rows {
        for k in 0..3 {
            reference[k] = reference[k].max(row.norm[k]);
        }
    }
    for r in reference.iter_mut() {
        *r += REFERENCE_MARGIN;
    }
    let points: Vec<NormalizedObjective> = seed_rows
        .iter()
        .filter(|r| r.on_front)
        .map(|r| NormalizedObjective(r.norm))
        .collect();
    hypervolume(&points, reference)
}

struct Series<'a> {
    name: &'static str,
    color: &'static str,
    rows: &'a [ArchiveRow],
}

fn format_tick(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && (a >= 1e4 || a < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// Minimal self-contained scatter plot. Hollow markers for dominated
/// points, filled for the front; one color per method.
fn svg_scatter(
    title: &str,
    x_label: &str,
    y_label: &str,
    extract: impl Fn(&ArchiveRow) -> (f64, f64),
    series: &[Series<'_>],
) -> String {
    const W: f64 = 640.0;
    const H: f64 = 480.0;
    const ML: f64 = 80.0; // left margin leaves room for y tick labels
    const MR: f64 = 20.0;
    const MT: f64 = 40.0;
    const MB: f64 = 56.0;
    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        for row in s.rows {
            let (x, y) = extract(row);
            x_min = x_min.min(x);
            x_max = x_max.max(x);
            y_min = y_min.min(y);
            y_max = y_max.max(y);
        }
    }
    if !x_min.is_finite() {
        // No points at all; plot an empty unit box.
        (x_min, x_max, y_min, y_max) = (0.0, 1.0, 0.0, 1.0);
    }
    if x_max == x_min {
        x_max = x_min + 1.0;
    }
    if y_max == y_min {
        y_max = y_min + 1.0;
    }
    let pad_x = (x_max - x_min) * 0.05;
    let pad_y = (y_max - y_min) * 0.05;
    let (x0, x1) = (x_min - pad_x, x_max + pad_x);
    let (y0, y1) = (y_min - pad_y, y_max + pad_y);
    let px = |x: f64| ML + (x - x0) / (x1 - x0) * (W - ML - MR);
    let py = |y: f64| H - MB - (y - y0) / (y1 - y0) * (H - MT - MB);

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {W} {H}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    out.push_str(&format!(
        "  <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{title}</text>\n",
        W / 2.0
    ));
    out.push_str(&format!(
        "  <rect x=\"{ML}\" y=\"{MT}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#333\"/>\n",
        W - ML - MR,
        H - MT - MB
    ));
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        let tx = px(xv);
        let ty = py(yv);
        out.push_str(&format!(
            "  <line x1=\"{tx}\" y1=\"{}\" x2=\"{tx}\" y2=\"{}\" stroke=\"#333\"/>\n",
            H - MB,
            H - MB + 4.0
        ));
        out.push_str(&format!(
            "  <text x=\"{tx}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            H - MB + 18.0,
            format_tick(xv)
        ));
        out.push_str(&format!(
            "  <line x1=\"{}\" y1=\"{ty}\" x2=\"{ML}\" y2=\"{ty}\" stroke=\"#333\"/>\n",
            ML - 4.0
        ));
        out.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
            ML - 8.0,
            ty + 4.0,
            format_tick(yv)
        ));
    }
    out.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x_label}</text>\n",
        ML + (W - ML - MR) / 2.0,
        H - 12.0
    ));
    out.push_str(&format!(
        "  <text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{y_label}</text>\n",
        MT + (H - MT - MB) / 2.0,
        MT + (H - MT - MB) / 2.0
    ));
    for (i, s) in series.iter().enumerate() {
        let ly = MT + 16.0 + i as f64 * 18.0;
        out.push_str(&format!(
            "  <circle cx=\"{}\" cy=\"{}\" r=\"4\" fill=\"{}\"/>\n",
            ML + 14.0,
            ly - 4.0,
            s.color
        ));
        out.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\">{}</text>\n",
            ML + 24.0,
            ly,
            s.name
        ));
    }
    for s in series {
        for row in s.rows {
            let (x, y) = extract(row);
            if row.on_front {
                out.push_str(&format!(
                    "  <circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"{}\"/>\n",
                    px(x),
                    py(y),
                    s.color
                ));
            } else {
                out.push_str(&format!(
                    "  <circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"none\" stroke=\"{}\" stroke-opacity=\"0.6\"/>\n",
                    px(x),
                    py(y),
                    s.color
                ));
            }
        }
    }
    out.push_str("</svg>\n");
    out
}

fn write_projection(
    dir: &Path,
    stem: &str,
    title: &str,
    x: (&str, fn(&QoRVector) -> f64),
    y: (&str, fn(&QoRVector) -> f64),
    series: &[Series<'_>],
) -> Result<()> {
    let svg = svg_scatter(title, x.0, y.0, |row| (x.1(&row.qor), y.1(&row.qor)), series);
    fs::write(dir.join(format!("{stem}.svg")), svg)?;

    let mut w = csv::Writer::from_writer(fs::File::create(dir.join(format!("{stem}.csv")))?);
    w.write_record(["method", x.0, y.0, "on_front"])
        .map_err(csv_error)?;
    for s in series {
        for row in s.rows {
            w.write_record([
                s.name.to_string(),
                format!("{:?}", x.1(&row.qor)),
                format!("{:?}", y.1(&row.qor)),
                row.on_front.to_string(),
            ])
            .map_err(csv_error)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_hvi_series<W: io::Write>(
    online: &[RunRecord],
    mobo: &[RunRecord],
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["iteration", "hvi_diffusion", "hvi_mobo"])
        .map_err(csv_error)?;
    let rows = online.len().max(mobo.len());
    let mut last = [0.0f64; 2];
    for i in 0..rows {
        // A method that stopped early holds its final value; HVI is
        // monotone, so this is the exact continuation.
        if let Some(r) = online.get(i) {
            last[0] = r.hvi_offline;
        }
        if let Some(r) = mobo.get(i) {
            last[1] = r.hvi_offline;
        }
        w.write_record([
            (i + 1).to_string(),
            format!("{:?}", last[0]),
            format!("{:?}", last[1]),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn summary_text(
    space: &DesignSpace,
    cfg: &ExperimentConfig,
    summary: &ReportSummary,
    online_records: &[RunRecord],
    rows: [&[ArchiveRow]; 2],
) -> String {
    let mut out = String::new();
    out.push_str("design space exploration summary\n");
    out.push_str("================================\n\n");
    out.push_str(&format!(
        "offline hypervolume: {:.6}\n\n",
        summary.offline_hypervolume
    ));
    for (method, rows) in [&summary.diffusion, &summary.mobo].into_iter().zip(rows) {
        out.push_str(&format!("[{}]\n", method.name));
        out.push_str(&format!("evaluations: {}\n", method.evaluations));
        out.push_str(&format!(
            "final hypervolume: {:.6}\n",
            method.final_hypervolume
        ));
        out.push_str(&format!(
            "hypervolume improvement over offline: {:.6}\n",
            method.hvi_offline
        ));
        if method.name == "diffusion" && !online_records.is_empty() {
            let n = online_records.len() as f64;
            let illegal = online_records.iter().filter(|r| r.legalized).count();
            let resamples: u64 = online_records.iter().map(|r| u64::from(r.resamples)).sum();
            let fallbacks = online_records.iter().filter(|r| r.mutated_fallback).count();
            let guidance: u64 = online_records.iter().map(|r| r.guidance_fallbacks).sum();
            out.push_str(&format!(
                "sample error rate (rule violations before legalization): {:.4}\n",
                illegal as f64 / n
            ));
            out.push_str(&format!(
                "duplicate resamples: {resamples}, mutation fallbacks: {fallbacks}, guidance fallbacks: {guidance}\n"
            ));
        }
        out.push_str("best configurations by ppa_tradeoff:\n");
        for (rank, &(idx, ppa)) in method.ranked.iter().take(3).enumerate() {
            let row = &rows[idx];
            out.push_str(&format!(
                "  #{} ppa_tradeoff={ppa:.6e} performance={:.6} power_w={:.6} area_um2={:.1}\n",
                rank + 1,
                row.qor.performance,
                row.qor.power,
                row.qor.area
            ));
            let params: Vec<String> = space
                .params()
                .iter()
                .zip(row.config.choices())
                .map(|(p, &c)| format!("{}={}", p.name, p.candidates[c].literal()))
                .collect();
            out.push_str(&format!("     {}\n", params.join(" ")));
        }
        out.push('\n');
    }
    out.push_str("configuration\n");
    out.push_str("-------------\n");
    match toml::to_string_pretty(&cfg.stamped()) {
        Ok(text) => out.push_str(&text),
        Err(e) => out.push_str(&format!("<config serialization failed: {e}>\n")),
    }
    out
}

/// Write every report artifact into `outdir/report`.
#[allow(clippy::too_many_arguments)]
pub fn emit_report(
    space: &DesignSpace,
    cfg: &ExperimentConfig,
    online_records: &[RunRecord],
    mobo_records: &[RunRecord],
    online_rows: &[ArchiveRow],
    mobo_rows: &[ArchiveRow],
    seed_rows: &[ArchiveRow],
) -> Result<ReportSummary> {
    let dir = cfg.report_dir();
    fs::create_dir_all(&dir)?;

    let offline_hv = offline_hypervolume(online_records, mobo_records, seed_rows)?;
    let summary = ReportSummary {
        offline_hypervolume: offline_hv,
        diffusion: method_report("diffusion", online_records, online_rows, offline_hv),
        mobo: method_report("mobo", mobo_records, mobo_rows, offline_hv),
    };

    write_archive_rows(
        space,
        online_rows,
        io::BufWriter::new(fs::File::create(dir.join("archive_diffusion.csv"))?),
    )?;
    write_archive_rows(
        space,
        mobo_rows,
        io::BufWriter::new(fs::File::create(dir.join("archive_mobo.csv"))?),
    )?;
    write_hvi_series(
        online_records,
        mobo_records,
        io::BufWriter::new(fs::File::create(dir.join("hvi.csv"))?),
    )?;

    let series = [
        Series {
            name: "diffusion",
            color: "#1f77b4",
            rows: online_rows,
        },
        Series {
            name: "mobo",
            color: "#d62728",
            rows: mobo_rows,
        },
    ];
    let perf = ("performance", (|q: &QoRVector| q.performance) as fn(&QoRVector) -> f64);
    let power = ("power_w", (|q: &QoRVector| q.power) as fn(&QoRVector) -> f64);
    let area = ("area_um2", (|q: &QoRVector| q.area) as fn(&QoRVector) -> f64);
    write_projection(
        &dir,
        "pareto_perf_power",
        "performance vs power",
        perf,
        power,
        &series,
    )?;
    write_projection(
        &dir,
        "pareto_perf_area",
        "performance vs area",
        perf,
        area,
        &series,
    )?;
    write_projection(
        &dir,
        "pareto_power_area",
        "power vs area",
        power,
        area,
        &series,
    )?;

    let text = summary_text(space, cfg, &summary, online_records, [online_rows, mobo_rows]);
    fs::write(dir.join("summary.txt"), text)?;
    Ok(summary)
}

/// Standalone report phase: everything is read back from the run directory,
/// so `report` works on any completed (or partially completed) run.
pub fn phase_report(cfg: &ExperimentConfig) -> Result<ReportSummary> {
    let space = DesignSpace::builtin();
    let read_records = |dir: &Path| -> Result<Vec<RunRecord>> {
        let file = fs::File::open(dir.join("run.csv"))?;
        read_run_records(&space, io::BufReader::new(file))
    };
    let read_rows = |path: &Path| -> Result<Vec<ArchiveRow>> {
        let file = fs::File::open(path)?;
        read_archive_rows(&space, io::BufReader::new(file))
    };
    let online_records = read_records(&cfg.online_dir())?;
    let mobo_records = read_records(&cfg.mobo_dir())?;
    let online_rows = read_rows(&cfg.online_dir().join("archive.csv"))?;
    let mobo_rows = read_rows(&cfg.mobo_dir().join("archive.csv"))?;
    let seed_rows = read_rows(&cfg.offline_dir().join("archive.csv"))?;
    emit_report(
        &space,
        cfg,
        &online_records,
        &mobo_records,
        &online_rows,
        &mobo_rows,
        &seed_rows,
    )
}
