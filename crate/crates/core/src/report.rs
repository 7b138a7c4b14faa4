//! Side-by-side T-only / V+T comparison tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::evaluate::{SplitPair, SummaryRow};
use crate::metrics::{delta_cell, CellDelta};
use crate::record::ModalityMode;
use crate::scores::MethodLabel;
use crate::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model_id: String,
    pub method: MethodLabel,
    /// One entry per [`ReportTable::pairs`] element.
    pub cells: Vec<CellDelta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub pairs: Vec<SplitPair>,
    pub rows: Vec<ReportRow>,
}

/// Builds the table from summary rows. Rows follow first appearance of each
/// (model, method); every pair seen anywhere in the summary must be present
/// for both modalities of every row.
pub fn build_report(summary: &[SummaryRow]) -> Result<ReportTable, Error> {
    let pairs: Vec<SplitPair> = summary
        .iter()
        .map(|s| s.split_pair)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut keys: Vec<(&str, MethodLabel)> = Vec::new();
    let mut aucs: BTreeMap<(&str, MethodLabel, ModalityMode, SplitPair), f64> = BTreeMap::new();
    for s in summary {
        let key = (s.model_id.as_str(), s.method);
        if !keys.contains(&key) {
            keys.push(key);
        }
        aucs.insert((&s.model_id, s.method, s.modality, s.split_pair), s.auc);
    }

    let mut rows = Vec::with_capacity(keys.len());
    for (model_id, method) in keys {
        let mut cells = Vec::with_capacity(pairs.len());
        for &pair in &pairs {
            let get = |modality| {
                aucs.get(&(model_id, method, modality, pair))
                    .copied()
                    .ok_or_else(|| Error::MissingCell {
                        model_id: model_id.to_string(),
                        method: method.to_string(),
                        modality,
                        split_pair: pair.to_string(),
                    })
            };
            let cell = delta_cell(get(ModalityMode::TextOnly)?, get(ModalityMode::VisionText)?)?;
            cells.push(cell);
        }
        rows.push(ReportRow {
            model_id: model_id.to_string(),
            method,
            cells,
        });
    }
    Ok(ReportTable { pairs, rows })
}

fn fmt3(x: f64) -> String {
    format!("{x:.3}")
}

impl ReportTable {
    /// Aligned text. AUCs to 3 decimals, deltas with a +/-/= marker.
    pub fn render_text(&self) -> String {
        let mut header = vec!["model".to_string(), "method".to_string()];
        for p in &self.pairs {
            let h = p.heading();
            header.push(format!("{h} T-only"));
            header.push(format!("{h} V+T"));
            header.push(format!("{h} delta"));
        }
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut line = vec![r.model_id.clone(), r.method.to_string()];
                for c in &r.cells {
                    line.push(fmt3(c.text_only_auc));
                    line.push(fmt3(c.vt_auc));
                    line.push(format!("{} {}", fmt3(c.delta), c.marker.symbol()));
                }
                line
            })
            .collect();

        let widths: Vec<usize> = (0..header.len())
            .map(|i| {
                body.iter()
                    .map(|l| l[i].len())
                    .chain([header[i].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        for line in std::iter::once(&header).chain(&body) {
            let cols: Vec<String> = line
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (s, &w))| if i < 2 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", cols.join("  ").trim_end());
        }
        out
    }

    /// Wide CSV with full-precision values.
    pub fn write_csv(&self, path: &Path) -> Result<(), Error> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        let mut header = vec!["model_id".to_string(), "method".to_string()];
        for p in &self.pairs {
            for col in ["t_only_auc", "v_t_auc", "delta", "marker"] {
                header.push(format!("{p}_{col}"));
            }
        }
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.model_id.clone(), r.method.to_string()];
            for c in &r.cells {
                rec.push(c.text_only_auc.to_string());
                rec.push(c.vt_auc.to_string());
                rec.push(c.delta.to_string());
                rec.push(c.marker.as_str().to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
