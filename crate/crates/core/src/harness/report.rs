//! Results file, table rendering and figures.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{DefenseKind, SeedConfig};
use super::dataset::contact_sheet;
use crate::error::Result;
use crate::image::{read_image_set, Image, Shape};
use crate::metrics::{colorize, fourier_spectrum, perturbation_heatmap, MetricsReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub version: String,
    pub seeds: SeedConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    #[serde(flatten)]
    pub metrics: MetricsReport,
    /// Mean ISM against the held-out references of every other identity.
    pub cross_ism: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub defense: DefenseKind,
    pub purifier: String,
    pub cell_hash: String,
    /// Empty when the cell failed.
    pub conditions: Vec<ConditionResult>,
    /// High-frequency energy of each fine-tuning input image.
    pub input_hf_energy: Vec<f64>,
    /// Artifact directories relative to the output directory.
    pub protected_dir: Option<String>,
    pub purified_dir: Option<String>,
    pub error: Option<String>,
}

impl CellReport {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }

    pub fn condition(&self, name: &str) -> Option<&ConditionResult> {
        self.conditions.iter().find(|c| c.metrics.condition == name)
    }
}

/// Contents of `results.json`. Holds no wall-clock data, so identical
/// configurations give identical files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub provenance: Provenance,
    /// High-frequency energy of each clean image in the protect set.
    pub clean_hf_energy: Vec<f64>,
    pub cells: Vec<CellReport>,
}

impl ExperimentReport {
    pub fn cell(&self, defense: DefenseKind, purifier: &str) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.defense == defense && c.purifier == purifier)
    }

    pub fn any_failed(&self) -> bool {
        self.cells.iter().any(CellReport::failed)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Column headers; the arrow points toward stronger protection.
pub const COLUMNS: [&str; 4] = ["FDFR↑", "ISM↓", "SER-FQA↓", "BRISQUE ↑"];
const HIGHER_IS_STRONGER: [bool; 4] = [true, false, false, true];
/// Shown for a missing value, e.g. ISM when no face was detected.
pub const ABSENT: &str = "–";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub value: Option<f64>,
    pub decimals: usize,
}

impl Cell {
    pub fn text(&self) -> String {
        match self.value {
            Some(v) => format!("{v:.*}", self.decimals),
            None => ABSENT.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub purification: String,
    /// Four cells per group, in [`COLUMNS`] order.
    pub cells: Vec<Cell>,
}

/// One block of four metric columns per group (condition).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub groups: Vec<String>,
    pub rows: Vec<TableRow>,
}

impl Table {
    pub fn from_report(report: &ExperimentReport) -> Self {
        let mut groups: Vec<String> = Vec::new();
        for c in report.cells.iter().flat_map(|c| &c.conditions) {
            if !groups.contains(&c.metrics.condition) {
                groups.push(c.metrics.condition.clone());
            }
        }
        let rows = report
            .cells
            .iter()
            .map(|cell| {
                let method = if cell.defense == DefenseKind::None { "clean" } else { cell.defense.name() };
                let mut purification = match (cell.defense, cell.purifier.as_str()) {
                    (DefenseKind::None, "none") => "-".to_string(),
                    (_, "none") => "No".to_string(),
                    (_, p) => p.to_string(),
                };
                if cell.failed() {
                    purification.push_str(" (failed)");
                }
                let cells = groups
                    .iter()
                    .flat_map(|g| {
                        let m = cell.condition(g).map(|c| &c.metrics);
                        [
                            Cell { value: m.map(|m| m.fdfr), decimals: 2 },
                            Cell { value: m.and_then(|m| m.ism), decimals: 3 },
                            Cell { value: m.and_then(|m| m.face_quality), decimals: 3 },
                            Cell { value: m.map(|m| m.quality), decimals: 2 },
                        ]
                    })
                    .collect();
                TableRow { method: method.to_string(), purification, cells }
            })
            .collect();
        Self { groups, rows }
    }

    /// Cells holding the strongest-protection value of their column within
    /// each method. Columns where every row ties are left unmarked.
    fn best(&self) -> Vec<Vec<bool>> {
        let mut marks: Vec<Vec<bool>> = self.rows.iter().map(|r| vec![false; r.cells.len()]).collect();
        let mut start = 0;
        while start < self.rows.len() {
            let method = &self.rows[start].method;
            let end = start + self.rows[start..].iter().take_while(|r| &r.method == method).count();
            for col in 0..self.groups.len() * COLUMNS.len() {
                let higher = HIGHER_IS_STRONGER[col % COLUMNS.len()];
                let vals: Vec<Option<f64>> = (start..end).map(|r| self.rows[r].cells.get(col).and_then(|c| c.value)).collect();
                let present: Vec<f64> = vals.iter().flatten().copied().collect();
                let Some(best) = present.iter().copied().reduce(|a, b| if (b > a) == higher { b } else { a }) else { continue };
                if present.len() == vals.len() && present.iter().all(|&v| v == best) {
                    continue;
                }
                for (i, v) in vals.iter().enumerate() {
                    if *v == Some(best) {
                        marks[start + i][col] = true;
                    }
                }
            }
            start = end;
        }
        marks
    }

    /// A Markdown table; the first header of each group is prefixed with the
    /// group name and the best value per method is bold.
    pub fn render(&self) -> String {
        let mut header = vec!["Method".to_string(), "Purification".to_string()];
        for g in &self.groups {
            for (i, c) in COLUMNS.iter().enumerate() {
                header.push(if i == 0 { format!("{g}: {c}") } else { c.to_string() });
            }
        }
        let line = |cells: &[String]| format!("| {} |\n", cells.join(" | "));
        let mut out = line(&header);
        out += &line(&vec!["---".to_string(); header.len()]);
        for (row, marks) in self.rows.iter().zip(self.best()) {
            let mut cells = vec![row.method.clone(), row.purification.clone()];
            cells.extend(row.cells.iter().zip(marks).map(|(c, b)| if b { format!("**{}**", c.text()) } else { c.text() }));
            out += &line(&cells);
        }
        out
    }
}

/// Splits a rendered table back into cell strings (bold markers removed),
/// header and separator included.
pub fn parse_table(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .filter(|l| l.starts_with('|'))
        .map(|l| l.trim().trim_matches('|').split('|').map(|c| c.trim().trim_matches('*').to_string()).collect())
        .collect()
}

pub struct RenderedReport {
    pub table: String,
    pub figures: Vec<PathBuf>,
}

fn gray_to_rgb(x: &Image) -> Image {
    let g = x.to_gray();
    Image::from_fn(Shape::new(g.height(), g.width(), 3), |y, xx, _| g.get(y, xx, 0))
}

fn color_spectrum(x: &Image) -> Image {
    let s = fourier_spectrum(x);
    Image::from_fn(Shape::new(s.height(), s.width(), 3), |y, xx, c| colorize(s.get(y, xx, 0))[c])
}

fn enlarge(x: &Image, k: usize) -> Image {
    x.resize_nearest(x.height() * k, x.width() * k)
}

/// Renders the table and, for each defended cell whose artifacts exist under
/// `artifacts`, a spectrum triptych (clean / protected / purified, images
/// above their log spectra) and a heatmap panel (|protected − clean|,
/// |purified − clean|, |purified − protected|) into `figure_dir`.
pub fn render_report(report: &ExperimentReport, artifacts: &Path, figure_dir: &Path) -> Result<RenderedReport> {
    let table = Table::from_report(report).render();
    let mut figures = Vec::new();
    for cell in report.cells.iter().filter(|c| c.defense != DefenseKind::None && !c.failed()) {
        let (Some(pd), Some(qd)) = (&cell.protected_dir, &cell.purified_dir) else { continue };
        let (Ok(clean), Ok(prot), Ok(pure)) = (
            read_image_set(artifacts.join(pd).join("originals.pimg")),
            read_image_set(artifacts.join(pd).join("images.pimg")),
            read_image_set(artifacts.join(qd).join("images.pimg")),
        ) else {
            continue;
        };
        let (Some(c), Some(p), Some(q)) = (clean.first(), prot.first(), pure.first()) else { continue };
        std::fs::create_dir_all(figure_dir)?;
        let stem = format!("{}-{}", cell.defense.name().replace('+', "_"), cell.purifier);
        let mut panels: Vec<Image> = [c, p, q].iter().map(|x| gray_to_rgb(x)).collect();
        panels.extend([c, p, q].iter().map(|x| color_spectrum(x)));
        let tri = artifacts_path(figure_dir, &stem, "spectrum");
        enlarge(&contact_sheet(&panels, 3)?, 4).save_png(&tri)?;
        let heat = [perturbation_heatmap(c, p, None)?, perturbation_heatmap(c, q, None)?, perturbation_heatmap(p, q, None)?];
        let hp = artifacts_path(figure_dir, &stem, "heatmap");
        enlarge(&contact_sheet(&heat, 3)?, 4).save_png(&hp)?;
        figures.extend([tri, hp]);
    }
    Ok(RenderedReport { table, figures })
}

fn artifacts_path(dir: &Path, stem: &str, kind: &str) -> PathBuf {
    dir.join(format!("{stem}-{kind}.png"))
}
