//! Confusion matrices, per-class and macro metrics, heatmaps and comparison tables.

use std::fmt::Write as _;
use std::path::Path;

use image::{ImageFormat, Rgb, RgbImage};

use crate::checkpoint::write_atomic;
use crate::error::{LvitError, Result};

/// Counts with rows = true class, columns = predicted class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
    label_names: Vec<String>,
}

impl ConfusionMatrix {
    pub fn from_counts(counts: Vec<Vec<u64>>, label_names: Vec<String>) -> Result<Self> {
        let k = label_names.len();
        if k == 0 || counts.len() != k || counts.iter().any(|r| r.len() != k) {
            return Err(LvitError::Contract(format!(
                "confusion matrix must be {k}x{k} to match its label names"
            )));
        }
        Ok(ConfusionMatrix { counts, label_names })
    }

    pub fn num_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth][predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }
}

/// Tally `(truth, prediction)` pairs.
pub fn confusion(truth: &[usize], predicted: &[usize], label_names: &[String]) -> Result<ConfusionMatrix> {
    let k = label_names.len();
    if truth.len() != predicted.len() {
        return Err(LvitError::Contract(format!(
            "{} true labels but {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let mut counts = vec![vec![0u64; k]; k];
    for (i, (&t, &p)) in truth.iter().zip(predicted).enumerate() {
        if t >= k || p >= k {
            return Err(LvitError::Contract(format!("pair {i} ({t}, {p}) is outside [0, {k})")));
        }
        counts[t][p] += 1;
    }
    ConfusionMatrix::from_counts(counts, label_names.to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Diagonal over row sum; the same quantity as recall.
    pub accuracy: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// One-vs-rest metrics for class `c`. Any zero denominator yields 0.
pub fn class_metrics(cm: &ConfusionMatrix, c: usize) -> ClassMetrics {
    let tp = cm.get(c, c);
    let fp = cm.col_sum(c) - tp;
    let fn_ = cm.row_sum(c) - tp;
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    ClassMetrics { precision, recall, f1, accuracy: ratio(tp, cm.row_sum(c)) }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub label_names: Vec<String>,
    pub per_class: Vec<ClassMetrics>,
    pub support: Vec<u64>,
    pub precision: f64,
    pub recall: f64,
    /// Mean of the per-class F1 scores.
    pub f1: f64,
    /// Trace over total.
    pub overall_accuracy: f64,
}

/// Unweighted means of per-class precision, recall and F1, plus overall accuracy.
pub fn macro_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(LvitError::Contract("confusion matrix is empty".into()));
    }
    let k = cm.num_classes();
    let per_class: Vec<ClassMetrics> = (0..k).map(|c| class_metrics(cm, c)).collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k as f64;
    Ok(MetricsReport {
        label_names: cm.label_names().to_vec(),
        support: (0..k).map(|c| cm.row_sum(c)).collect(),
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
        overall_accuracy: cm.trace() as f64 / total as f64,
        per_class,
    })
}

impl MetricsReport {
    /// Plain-text report. Numbers use shortest round-trip formatting so they reparse exactly.
    pub fn to_text(&self) -> String {
        let width = self.label_names.iter().map(String::len).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>22}  {:>22}  {:>22}  {:>22}  {:>7}", "class", "precision", "recall", "f1", "accuracy", "support");
        for ((name, m), n) in self.label_names.iter().zip(&self.per_class).zip(&self.support) {
            let _ = writeln!(
                s,
                "{name:<width$}  {:>22}  {:>22}  {:>22}  {:>22}  {n:>7}",
                m.precision, m.recall, m.f1, m.accuracy
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "macro_precision={}", self.precision);
        let _ = writeln!(s, "macro_recall={}", self.recall);
        let _ = writeln!(s, "macro_f1={}", self.f1);
        let _ = writeln!(s, "overall_accuracy={}", self.overall_accuracy);
        s
    }
}

/// Colour scale used by [`render_heatmap`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HeatmapScale {
    /// Each row divided by its sum.
    #[default]
    RowNormalized,
    /// Raw counts divided by the largest count.
    Counts,
}

pub const HEATMAP_CELL_PX: u32 = 24;
const LOW_COLOR: [f64; 3] = [255.0, 255.0, 255.0];
const HIGH_COLOR: [f64; 3] = [8.0, 48.0, 107.0];

/// Linear white-to-blue ramp for `v` in `[0, 1]`.
pub fn ramp_color(v: f64) -> Rgb<u8> {
    let v = v.clamp(0.0, 1.0);
    let ch = |i: usize| (LOW_COLOR[i] + v * (HIGH_COLOR[i] - LOW_COLOR[i])).round() as u8;
    Rgb([ch(0), ch(1), ch(2)])
}

/// Per-cell intensities in `[0, 1]` for the chosen scale.
pub fn heatmap_values(cm: &ConfusionMatrix, scale: HeatmapScale) -> Vec<Vec<f64>> {
    let k = cm.num_classes();
    let max = cm.counts().iter().flatten().copied().max().unwrap_or(0);
    (0..k)
        .map(|t| {
            let row = cm.row_sum(t);
            (0..k)
                .map(|p| match scale {
                    HeatmapScale::RowNormalized => ratio(cm.get(t, p), row),
                    HeatmapScale::Counts => ratio(cm.get(t, p), max),
                })
                .collect()
        })
        .collect()
}

/// Heatmap raster, one square block per matrix cell.
pub fn heatmap_image(cm: &ConfusionMatrix, scale: HeatmapScale) -> RgbImage {
    let k = cm.num_classes() as u32;
    let values = heatmap_values(cm, scale);
    RgbImage::from_fn(k * HEATMAP_CELL_PX, k * HEATMAP_CELL_PX, |x, y| {
        ramp_color(values[(y / HEATMAP_CELL_PX) as usize][(x / HEATMAP_CELL_PX) as usize])
    })
}

/// Write the heatmap (`.ppm` as binary P6, `.png` as PNG) and a `.csv` sidecar of the counts.
pub fn render_heatmap(cm: &ConfusionMatrix, path: &Path, scale: HeatmapScale) -> Result<()> {
    let format = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("ppm") => ImageFormat::Pnm,
        Some("png") => ImageFormat::Png,
        _ => {
            return Err(LvitError::Config(format!(
                "heatmap path {} must end in .ppm or .png",
                path.display()
            )))
        }
    };
    let img = heatmap_image(cm, scale);
    let mut bytes = Vec::new();
    if format == ImageFormat::Pnm {
        // image's default PNM subtype for RGB is binary P6.
        let encoder = image::codecs::pnm::PnmEncoder::new(&mut bytes)
            .with_subtype(image::codecs::pnm::PnmSubtype::Pixmap(image::codecs::pnm::SampleEncoding::Binary));
        img.write_with_encoder(encoder).map_err(|e| LvitError::io(path, std::io::Error::other(e)))?;
    } else {
        img.write_to(&mut std::io::Cursor::new(&mut bytes), format)
            .map_err(|e| LvitError::io(path, std::io::Error::other(e)))?;
    }
    write_confusion_csv(cm, &path.with_extension("csv"))?;
    write_atomic(path, &bytes)
}

const CSV_CORNER: &str = "true\\predicted";

pub fn confusion_to_csv(cm: &ConfusionMatrix) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| LvitError::Format(format!("csv: {e}"));
    let mut header = vec![CSV_CORNER.to_string()];
    header.extend(cm.label_names().iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for (name, row) in cm.label_names().iter().zip(cm.counts()) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(u64::to_string));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| LvitError::Format(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| LvitError::Format(e.to_string()))
}

pub fn confusion_from_csv(text: &str) -> Result<ConfusionMatrix> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let csv_err = |e: csv::Error| LvitError::Format(format!("csv: {e}"));
    let header = r.headers().map_err(csv_err)?.clone();
    let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut counts = Vec::with_capacity(names.len());
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        if rec.get(0) != names.get(i).map(String::as_str) {
            return Err(LvitError::Format(format!("row {i} label does not match header")));
        }
        let row = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<u64>().map_err(|_| LvitError::Format(format!("bad count `{v}` in row {i}"))))
            .collect::<Result<Vec<_>>>()?;
        counts.push(row);
    }
    ConfusionMatrix::from_counts(counts, names)
}

pub fn write_confusion_csv(cm: &ConfusionMatrix, path: &Path) -> Result<()> {
    write_atomic(path, confusion_to_csv(cm)?.as_bytes())
}

pub fn read_confusion_csv(path: &Path) -> Result<ConfusionMatrix> {
    let text = std::fs::read_to_string(path).map_err(|e| LvitError::io(path, e))?;
    confusion_from_csv(&text)
}

/// Per-class accuracy percentages for one method.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodRow {
    pub name: String,
    pub class_accuracy: Vec<f64>,
    /// Average as printed by the source, if any.
    pub reported_average: Option<f64>,
}

/// Methods × classes grid of accuracy percentages with a computed Average row.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTable {
    pub class_names: Vec<String>,
    pub methods: Vec<MethodRow>,
}

pub fn comparison_table(class_names: Vec<String>, methods: Vec<MethodRow>) -> Result<ComparisonTable> {
    if let Some(m) = methods.iter().find(|m| m.class_accuracy.len() != class_names.len()) {
        return Err(LvitError::Contract(format!(
            "method `{}` has {} class values, table has {} classes",
            m.name,
            m.class_accuracy.len(),
            class_names.len()
        )));
    }
    Ok(ComparisonTable { class_names, methods })
}

impl ComparisonTable {
    /// Unweighted mean over classes for method `i`.
    pub fn average(&self, i: usize) -> f64 {
        let v = &self.methods[i].class_accuracy;
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn method(&self, name: &str) -> Option<usize> {
        self.methods.iter().position(|m| m.name == name)
    }

    fn has_reported(&self) -> bool {
        self.methods.iter().any(|m| m.reported_average.is_some())
    }

    fn grid(&self) -> Vec<Vec<String>> {
        let mut rows = Vec::new();
        let mut header = vec!["Methods".to_string()];
        header.extend(self.methods.iter().map(|m| m.name.clone()));
        rows.push(header);
        for (c, class) in self.class_names.iter().enumerate() {
            let mut row = vec![class.clone()];
            row.extend(self.methods.iter().map(|m| format!("{:.2}", m.class_accuracy[c])));
            rows.push(row);
        }
        let mut avg = vec!["Average".to_string()];
        avg.extend((0..self.methods.len()).map(|i| format!("{:.2}", self.average(i))));
        rows.push(avg);
        if self.has_reported() {
            let mut rep = vec!["Reported average".to_string()];
            rep.extend(self.methods.iter().map(|m| m.reported_average.map_or(String::new(), |v| format!("{v:.2}"))));
            rows.push(rep);
        }
        rows
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in self.grid() {
            w.write_record(&row).map_err(|e| LvitError::Format(format!("csv: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| LvitError::Format(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| LvitError::Format(e.to_string()))
    }

    /// Column-aligned plain text.
    pub fn to_text(&self) -> String {
        let grid = self.grid();
        let cols = grid[0].len();
        let widths: Vec<usize> = (0..cols).map(|c| grid.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
        let mut s = String::new();
        for row in &grid {
            let line: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(c, v)| if c == 0 { format!("{v:<w$}", w = widths[c]) } else { format!("{v:>w$}", w = widths[c]) })
                .collect();
            let _ = writeln!(s, "{}", line.join("  ").trim_end());
        }
        s
    }
}

/// Class order of the published MSTAR comparison.
pub const REFERENCE_CLASSES: [&str; 10] =
    ["ZSU23/4", "2S1", "BMP2", "BTR70", "T72", "BTR60", "D7", "T62", "BRDM2", "ZIL131"];

/// Published per-class accuracies (percent) and printed averages, in [`REFERENCE_CLASSES`] order.
pub const REFERENCE_RESULTS: [(&str, [f64; 10], f64); 6] = [
    ("CDSPP", [97.81, 88.69, 96.94, 80.58, 94.87, 85.74, 97.08, 98.18, 95.99, 94.87], 91.01),
    ("CNN-SVM", [96.35, 82.12, 96.94, 78.46, 89.74, 100.00, 95.99, 97.08, 89.78, 90.11], 91.66),
    ("Autoencoder", [87.34, 90.39, 88.96, 90.05, 89.10, 69.85, 96.08, 77.15, 92.12, 95.15], 87.62),
    ("EDR-Autoencoder", [94.53, 93.80, 92.86, 87.90, 91.79, 79.55, 98.91, 99.64, 96.72, 94.14], 91.29),
    ("MKSFF-CNN", [97.81, 93.80, 94.36, 99.49, 100.00, 98.46, 99.27, 95.24, 97.45, 99.27], 97.44),
    ("LViT", [89.73, 98.89, 98.47, 99.27, 98.47, 95.97, 100.00, 97.06, 100.00, 89.71], 97.75),
];

/// Reference headline metrics reported for the trained LViT on MSTAR (percent).
pub const REFERENCE_LVIT_RECALL: f64 = 97.42;
pub const REFERENCE_LVIT_PRECISION: f64 = 97.49;
pub const REFERENCE_LVIT_F1: f64 = 97.45;
pub const REFERENCE_LVIT_OVERALL: f64 = 97.75;

/// The built-in reference comparison table.
pub fn reference_table() -> ComparisonTable {
    let methods = REFERENCE_RESULTS
        .iter()
        .map(|(name, acc, avg)| MethodRow {
            name: name.to_string(),
            class_accuracy: acc.to_vec(),
            reported_average: Some(*avg),
        })
        .collect();
    comparison_table(REFERENCE_CLASSES.iter().map(|s| s.to_string()).collect(), methods)
        .expect("reference rows are complete")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn confusion_basics() {
        let cm = confusion(&[0, 1, 2], &[0, 1, 2], &names(3)).unwrap();
        assert_eq!(cm.trace(), 3);
        assert_eq!(cm.total(), 3);
        let cm = confusion(&[2], &[5], &names(6)).unwrap();
        assert_eq!(cm.get(2, 5), 1);
        assert_eq!(cm.total(), 1);
        assert!(confusion(&[0, 1], &[0], &names(2)).is_err());
        assert!(confusion(&[0, 2], &[0, 1], &names(2)).is_err());
    }

    #[test]
    fn hand_computed_class_metrics() {
        let cm = ConfusionMatrix::from_counts(vec![vec![5, 1, 0], vec![2, 6, 0], vec![0, 0, 4]], names(3)).unwrap();
        let m = class_metrics(&cm, 0);
        let (p, r) = (5.0 / 7.0, 5.0 / 6.0);
        assert!((m.precision - p).abs() < 1e-15);
        assert!((m.recall - r).abs() < 1e-15);
        assert!((m.f1 - 2.0 * p * r / (p + r)).abs() < 1e-15);
        assert_eq!(m.accuracy, m.recall);
    }

    #[test]
    fn degenerate_class_is_zero() {
        let cm = ConfusionMatrix::from_counts(vec![vec![3, 0], vec![0, 0]], names(2)).unwrap();
        let m = class_metrics(&cm, 1);
        assert_eq!((m.precision, m.recall, m.f1, m.accuracy), (0.0, 0.0, 0.0, 0.0));
        let d = class_metrics(&cm, 0);
        assert_eq!((d.precision, d.recall, d.f1, d.accuracy), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn macro_metrics_perfect_and_empty() {
        let t: Vec<usize> = (0..10).flat_map(|c| [c, c]).collect();
        let cm = confusion(&t, &t, &names(10)).unwrap();
        let r = macro_metrics(&cm).unwrap();
        assert_eq!((r.precision, r.recall, r.f1, r.overall_accuracy), (1.0, 1.0, 1.0, 1.0));
        let empty = ConfusionMatrix::from_counts(vec![vec![0; 2]; 2], names(2)).unwrap();
        assert!(matches!(macro_metrics(&empty), Err(LvitError::Contract(_))));
    }

    #[test]
    fn metrics_text_reparses() {
        let cm = ConfusionMatrix::from_counts(vec![vec![5, 1], vec![2, 6]], names(2)).unwrap();
        let r = macro_metrics(&cm).unwrap();
        let text = r.to_text();
        let get = |k: &str| {
            text.lines().find_map(|l| l.strip_prefix(&format!("{k}="))).unwrap().parse::<f64>().unwrap()
        };
        assert_eq!(get("macro_f1"), r.f1);
        assert_eq!(get("overall_accuracy"), r.overall_accuracy);
    }

    #[test]
    fn csv_round_trip() {
        let cm = ConfusionMatrix::from_counts(vec![vec![5, 1, 0], vec![2, 6, 0], vec![0, 0, 4]], vec![
            "a,b".into(),
            "2S1".into(),
            "ZSU23/4".into(),
        ])
        .unwrap();
        assert_eq!(confusion_from_csv(&confusion_to_csv(&cm).unwrap()).unwrap(), cm);
    }

    #[test]
    fn heatmap_structure() {
        let zero = ConfusionMatrix::from_counts(vec![vec![0; 3]; 3], names(3)).unwrap();
        let img = heatmap_image(&zero, HeatmapScale::RowNormalized);
        assert!(img.pixels().all(|p| *p == Rgb([255, 255, 255])));

        let ident = confusion(&[0, 1, 2], &[0, 1, 2], &names(3)).unwrap();
        for scale in [HeatmapScale::RowNormalized, HeatmapScale::Counts] {
            let img = heatmap_image(&ident, scale);
            let c = HEATMAP_CELL_PX / 2;
            for t in 0..3u32 {
                for p in 0..3u32 {
                    let px = img.get_pixel(p * HEATMAP_CELL_PX + c, t * HEATMAP_CELL_PX + c);
                    let want = if t == p { Rgb([8, 48, 107]) } else { Rgb([255, 255, 255]) };
                    assert_eq!(*px, want);
                }
            }
        }
    }

    #[test]
    fn table_rules() {
        let row = |name: &str, v: Vec<f64>| MethodRow { name: name.into(), class_accuracy: v, reported_average: None };
        let t = comparison_table(names(3), vec![row("perfect", vec![100.0; 3])]).unwrap();
        assert_eq!(t.average(0), 100.0);
        assert!(comparison_table(names(3), vec![row("ragged", vec![1.0; 2])]).is_err());
        let text = t.to_text();
        assert!(text.lines().last().unwrap().starts_with("Average"));
        assert!(t.to_csv().unwrap().contains("Average,100.00"));
    }

    #[test]
    fn reference_table_rows() {
        let t = reference_table();
        assert_eq!(t.class_names.len(), 10);
        // These two printed averages are the unweighted means of their rows.
        for name in ["CNN-SVM", "Autoencoder"] {
            let i = t.method(name).unwrap();
            assert!((t.average(i) - t.methods[i].reported_average.unwrap()).abs() < 0.01, "{name}");
        }
    }

    #[test]
    fn reference_mksff_average() {
        let t = reference_table();
        let i = t.method("MKSFF-CNN").unwrap();
        let avg = t.average(i);
        assert!((avg - 97.44).abs() < 0.03, "MKSFF-CNN unweighted average is {avg}, printed 97.44");
    }

    #[test]
    fn reference_lvit_average() {
        let t = reference_table();
        let i = t.method("LViT").unwrap();
        let avg = t.average(i);
        assert!((avg - 97.75).abs() < 0.01, "LViT unweighted average is {avg}, printed 97.75");
    }
}
