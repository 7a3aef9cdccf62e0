//! Evaluation artifacts: accuracy tables, score histograms, and embedding
//! exports.
//!
//! Figures are emitted twice — as a raw text table (what tests and scripts
//! consume) and as a rendered PNG (what people look at). The histogram
//! tables carry branch, category, and decision threshold in a comment
//! header, so every figure is reproducible from its data file alone.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::train::{CategoryAggregate, EvalRun, TrainSummary};
use crate::types::Category;

pub const HIST_BINS: usize = 40;
pub const DECISION_THRESHOLD: f64 = 0.5;

/// The three scored branches, in report order.
pub const BRANCHES: [&str; 3] = ["audio", "visual", "av"];

fn write_text(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.to_path_buf(), e))?;
    }
    std::fs::write(path, content).map_err(|e| Error::io(path.to_path_buf(), e))
}

/// Wrap a single evaluation as one-seed aggregates (std reported as 0).
pub fn aggregate_single(eval: &EvalRun) -> Vec<CategoryAggregate> {
    eval.per_category
        .iter()
        .map(|c| CategoryAggregate {
            category: c.category,
            mean: c.accuracy,
            std: 0.0,
            per_seed: vec![c.accuracy],
        })
        .collect()
}

/// Machine-readable accuracy table: one row per category with mean, std,
/// and the per-seed values.
pub fn accuracy_table_tsv(aggs: &[CategoryAggregate], model_name: &str, seeds: &[u64]) -> String {
    let mut out = String::new();
    writeln!(out, "# model={model_name}").unwrap();
    out.push_str("category\tmean\tstd");
    for s in seeds {
        write!(out, "\tseed_{s}").unwrap();
    }
    out.push('\n');
    for a in aggs {
        write!(out, "{}\t{:.2}\t{:.2}", a.category.as_str(), a.mean, a.std).unwrap();
        for v in &a.per_seed {
            write!(out, "\t{v:.2}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Human-readable accuracy table shaped like the usual results table: one
/// row per model, one column per test category, mean ± std.
pub fn accuracy_table_pretty(aggs: &[CategoryAggregate], model_name: &str) -> String {
    let mut out = String::new();
    write!(out, "{:<24}", "model").unwrap();
    for cat in Category::TEST_SETS {
        write!(out, "{:>16}", cat.as_str()).unwrap();
    }
    out.push('\n');
    write!(out, "{model_name:<24}").unwrap();
    for cat in Category::TEST_SETS {
        match aggs.iter().find(|a| a.category == cat) {
            Some(a) => {
                write!(out, "{:>16}", format!("{:.2} ± {:.2}", a.mean, a.std)).unwrap()
            }
            None => write!(out, "{:>16}", "-").unwrap(),
        }
    }
    out.push('\n');
    out
}

pub fn write_accuracy_tables(
    out_dir: &Path,
    aggs: &[CategoryAggregate],
    model_name: &str,
    seeds: &[u64],
) -> Result<(PathBuf, PathBuf)> {
    let tsv = out_dir.join("accuracy.tsv");
    write_text(&tsv, &accuracy_table_tsv(aggs, model_name, seeds))?;
    let txt = out_dir.join("accuracy.txt");
    write_text(&txt, &accuracy_table_pretty(aggs, model_name))?;
    Ok((tsv, txt))
}

/// Fixed-range histogram; out-of-range values land in the edge bins so the
/// counts always sum to the sample count.
pub fn histogram_counts(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut counts = vec![0usize; bins];
    for &v in values {
        let frac = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
        let bin = ((frac * bins as f64) as usize).min(bins - 1);
        counts[bin] += 1;
    }
    counts
}

fn branch_score_range(branch: &str) -> (f64, f64) {
    match branch {
        // OC scores are cosines.
        "audio" | "visual" => (-1.0, 1.0),
        // The AV head emits a probability.
        _ => (0.0, 1.0),
    }
}

fn branch_score(branch: &str, r: &crate::train::RecordEval) -> f64 {
    match branch {
        "audio" => r.audio_score,
        "visual" => r.visual_score,
        _ => r.av_real_prob,
    }
}

/// Emit one histogram per (branch, fake test category): a TSV data table and
/// a PNG with the 0.5 decision threshold drawn as a red vertical line.
/// Returns the paths written (data tables first, then images).
pub fn write_histograms(out_dir: &Path, eval: &EvalRun) -> Result<Vec<PathBuf>> {
    let fig_dir = out_dir.join("figures");
    let mut tables = Vec::new();
    let mut images = Vec::new();
    for branch in BRANCHES {
        let (lo, hi) = branch_score_range(branch);
        for cat in Category::TEST_SETS {
            let values: Vec<f64> = eval
                .records
                .iter()
                .filter(|r| r.category == cat)
                .map(|r| branch_score(branch, r))
                .collect();
            let counts = histogram_counts(&values, lo, hi, HIST_BINS);
            let stem = format!("hist_{branch}_{}", cat.as_str().to_lowercase());

            let mut tsv = format!(
                "# branch={branch} category={} threshold={DECISION_THRESHOLD}\n",
                cat.as_str()
            );
            tsv.push_str("bin_lo\tbin_hi\tcount\n");
            for (i, c) in counts.iter().enumerate() {
                let bin_lo = lo + (hi - lo) * i as f64 / HIST_BINS as f64;
                let bin_hi = lo + (hi - lo) * (i + 1) as f64 / HIST_BINS as f64;
                writeln!(tsv, "{bin_lo:.4}\t{bin_hi:.4}\t{c}").unwrap();
            }
            let table_path = fig_dir.join(format!("{stem}.tsv"));
            write_text(&table_path, &tsv)?;
            tables.push(table_path);

            let image_path = fig_dir.join(format!("{stem}.png"));
            render_histogram_png(&image_path, &counts, lo, hi, DECISION_THRESHOLD)?;
            images.push(image_path);
        }
    }
    tables.extend(images);
    Ok(tables)
}

const BAR_COLOR: image::Rgb<u8> = image::Rgb([70, 110, 175]);
const AXIS_COLOR: image::Rgb<u8> = image::Rgb([60, 60, 60]);
const THRESHOLD_COLOR: image::Rgb<u8> = image::Rgb([220, 30, 30]);

fn render_histogram_png(
    path: &Path,
    counts: &[usize],
    lo: f64,
    hi: f64,
    threshold: f64,
) -> Result<()> {
    use image::{Rgb, RgbImage};
    const W: u32 = 480;
    const H: u32 = 320;
    const MARGIN_L: u32 = 45;
    const MARGIN_R: u32 = 12;
    const MARGIN_T: u32 = 12;
    const MARGIN_B: u32 = 32;
    let plot_w = W - MARGIN_L - MARGIN_R;
    let plot_h = H - MARGIN_T - MARGIN_B;
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));

    let max_count = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    for (i, &c) in counts.iter().enumerate() {
        let x0 = MARGIN_L + (i as f64 / counts.len() as f64 * f64::from(plot_w)) as u32;
        let x1 = MARGIN_L + ((i + 1) as f64 / counts.len() as f64 * f64::from(plot_w)) as u32;
        let bar_h = (c as f64 / max_count * f64::from(plot_h)).round() as u32;
        for x in x0..x1.min(W - MARGIN_R) {
            for y in (H - MARGIN_B - bar_h)..(H - MARGIN_B) {
                img.put_pixel(x, y, BAR_COLOR);
            }
        }
    }
    for x in MARGIN_L..(W - MARGIN_R) {
        img.put_pixel(x, H - MARGIN_B, AXIS_COLOR);
    }
    for y in MARGIN_T..=(H - MARGIN_B) {
        img.put_pixel(MARGIN_L, y, AXIS_COLOR);
    }
    let tx = MARGIN_L
        + (((threshold - lo) / (hi - lo)).clamp(0.0, 1.0) * f64::from(plot_w)).round() as u32;
    let tx = tx.min(W - MARGIN_R - 1);
    for y in MARGIN_T..(H - MARGIN_B) {
        img.put_pixel(tx, y, THRESHOLD_COLOR);
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.to_path_buf(), e))?;
    }
    img.save(path)
        .map_err(|e| Error::Invalid(format!("writing {}: {e}", path.display())))
}

/// Export concatenated AV-branch embeddings (one row per test record) plus
/// per-category centroids, for external 2-D projection.
pub fn write_embeddings(out_dir: &Path, eval: &EvalRun) -> Result<(PathBuf, PathBuf)> {
    let dim = eval.embeddings.ncols();
    let mut emb = String::from("sample_id\tcategory");
    for d in 0..dim {
        write!(emb, "\te{d}").unwrap();
    }
    emb.push('\n');
    for (r, row) in eval.records.iter().zip(eval.embeddings.rows()) {
        write!(emb, "{}\t{}", r.sample_id, r.category.as_str()).unwrap();
        for v in row {
            write!(emb, "\t{v}").unwrap();
        }
        emb.push('\n');
    }
    let emb_path = out_dir.join("embeddings.tsv");
    write_text(&emb_path, &emb)?;

    let mut cen = String::from("category\tn");
    for d in 0..dim {
        write!(cen, "\tc{d}").unwrap();
    }
    cen.push('\n');
    for cat in Category::ALL {
        let rows: Vec<usize> = eval
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.category == cat)
            .map(|(i, _)| i)
            .collect();
        if rows.is_empty() {
            continue;
        }
        let mut centroid = vec![0.0f64; dim];
        for &i in &rows {
            for (d, v) in eval.embeddings.row(i).iter().enumerate() {
                centroid[d] += f64::from(*v);
            }
        }
        write!(cen, "{}\t{}", cat.as_str(), rows.len()).unwrap();
        for c in centroid {
            write!(cen, "\t{:.6}", c / rows.len() as f64).unwrap();
        }
        cen.push('\n');
    }
    let cen_path = out_dir.join("centroids.tsv");
    write_text(&cen_path, &cen)?;
    Ok((emb_path, cen_path))
}

/// Per-record decision dump: raw scores, fused score, verdict, label.
pub fn write_decisions(out_dir: &Path, eval: &EvalRun) -> Result<PathBuf> {
    let mut out = String::from(
        "sample_id\tcategory\tav_label\taudio_score\tvisual_score\tav_real_prob\tfused_score\tverdict\n",
    );
    for r in &eval.records {
        writeln!(
            out,
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}",
            r.sample_id,
            r.category.as_str(),
            r.av_label,
            r.audio_score,
            r.visual_score,
            r.av_real_prob,
            r.fused_score,
            r.verdict
        )
        .unwrap();
    }
    let path = out_dir.join("decisions.tsv");
    write_text(&path, &out)?;
    Ok(path)
}

/// Persist a training log as line-delimited JSON.
pub fn write_training_log(path: &Path, summary: &TrainSummary) -> Result<()> {
    let mut out = summary.log.join("\n");
    out.push('\n');
    write_text(path, &out)
}
