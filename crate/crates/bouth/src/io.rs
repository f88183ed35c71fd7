//! On-disk formats: taxonomy-table input, edge-list tree dumps, result
//! tables, and the metrics table. Everything is tab-separated with a fixed
//! header; numeric fields print with 13 significant digits so they parse
//! back losslessly at 12.

use std::io::{BufRead, Write};

use crate::baselines::BaselineReport;
use crate::bottomup::NodeResult;
use crate::error::{Error, Result};
use crate::sim::MetricRow;
use crate::tree::{EdgeRow, LeafPValues, LineageRow, TaxTree};

pub const TAXONOMY_HEADER: &str = "leaf_id\tlineage\tp_value";
pub const EDGE_HEADER: &str = "node_id\tparent_id\tlevel";
pub const RESULT_HEADER: &str = "node_id\tlevel\tp_value\tdetected\tauto_detected\tdriver";
pub const METRICS_HEADER: &str = "scenario\tmethod\tmetric\tvalue\tmc_se\treps";

/// Parse the taxonomy table (`leaf_id\tlineage\tp_value`, lineage tokens
/// joined by `;`). Line numbers in errors refer to the file, header
/// included.
pub fn read_taxonomy<R: BufRead>(reader: R) -> Result<Vec<LineageRow>> {
    let mut lines = reader.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::invalid("empty taxonomy file"))?;
    let header = header?;
    if header.trim_end() != TAXONOMY_HEADER {
        return Err(Error::row(
            1,
            format!("expected header `{TAXONOMY_HEADER}`, found `{header}`"),
        ));
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::row(
                line_no,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        let p_value: f64 = fields[2]
            .parse()
            .map_err(|_| Error::row(line_no, format!("p_value `{}` is not a number", fields[2])))?;
        rows.push(LineageRow {
            leaf_id: fields[0].to_string(),
            lineage: fields[1].split(';').map(str::to_string).collect(),
            p_value,
        });
    }
    if rows.is_empty() {
        return Err(Error::invalid("taxonomy file has no data rows"));
    }
    Ok(rows)
}

/// Read the taxonomy table and build the tree; row diagnostics carry file
/// line numbers.
pub fn load_taxonomy<R: BufRead>(reader: R) -> Result<(TaxTree, LeafPValues)> {
    let rows = read_taxonomy(reader)?;
    TaxTree::build_from_lineages(&rows).map_err(|e| match e {
        // the builder numbers data rows from 1; shift past the header
        Error::Row { line, msg } => Error::Row {
            line: line + 1,
            msg,
        },
        other => other,
    })
}

/// Edge-list dump: `node_id\tparent_id\tlevel`, root's parent printed as `-`.
pub fn write_edge_list<W: Write>(mut w: W, tree: &TaxTree) -> Result<()> {
    writeln!(w, "{EDGE_HEADER}")?;
    for row in tree.to_edges() {
        writeln!(
            w,
            "{}\t{}\t{}",
            row.id,
            row.parent_id.as_deref().unwrap_or("-"),
            row.level
        )?;
    }
    Ok(())
}

pub fn read_edge_list<R: BufRead>(reader: R) -> Result<TaxTree> {
    let mut lines = reader.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::invalid("empty edge-list file"))?;
    let header = header?;
    if header.trim_end() != EDGE_HEADER {
        return Err(Error::row(
            1,
            format!("expected header `{EDGE_HEADER}`, found `{header}`"),
        ));
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::row(
                line_no,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        let level: u32 = fields[2]
            .parse()
            .map_err(|_| Error::row(line_no, format!("level `{}` is not an integer", fields[2])))?;
        rows.push(EdgeRow {
            id: fields[0].to_string(),
            parent_id: (fields[1] != "-").then(|| fields[1].to_string()),
            level,
        });
    }
    TaxTree::from_edges(&rows)
}

/// p-value column: `NA` for nodes never tested, `<1e-16` below reporting
/// precision, otherwise 13 significant digits.
pub fn format_p(p: Option<f64>) -> String {
    match p {
        None => "NA".to_string(),
        Some(p) if p < 1e-16 => "<1e-16".to_string(),
        Some(p) => format!("{p:.12e}"),
    }
}

fn write_result_line<W: Write>(
    w: &mut W,
    tree: &TaxTree,
    r: &NodeResult,
    prefix: &str,
) -> Result<()> {
    writeln!(
        w,
        "{prefix}{}\t{}\t{}\t{}\t{}\t{}",
        tree.node(r.node).id,
        r.level,
        format_p(r.p_value),
        r.detected as u8,
        r.auto_detected as u8,
        r.driver as u8
    )?;
    Ok(())
}

/// One-stage result table.
pub fn write_results<W: Write>(mut w: W, tree: &TaxTree, results: &[NodeResult]) -> Result<()> {
    writeln!(w, "{RESULT_HEADER}")?;
    for r in results {
        write_result_line(&mut w, tree, r, "")?;
    }
    Ok(())
}

/// Two-stage result table: a `stage` column tags the two sections.
pub fn write_results_staged<W: Write>(
    mut w: W,
    tree: &TaxTree,
    stage1: &[NodeResult],
    stage2: &[NodeResult],
) -> Result<()> {
    writeln!(w, "stage\t{RESULT_HEADER}")?;
    for r in stage1 {
        write_result_line(&mut w, tree, r, "1\t")?;
    }
    for r in stage2 {
        write_result_line(&mut w, tree, r, "2\t")?;
    }
    Ok(())
}

/// Baseline result table: the shared schema with a `method` column
/// prepended. Baselines never auto-detect, so that column is always 0.
pub fn write_baseline_report<W: Write>(
    mut w: W,
    tree: &TaxTree,
    report: &BaselineReport,
) -> Result<()> {
    writeln!(w, "method\t{RESULT_HEADER}")?;
    let name = report.method.as_str();
    for n in 0..tree.num_nodes() {
        writeln!(
            w,
            "{name}\t{}\t{}\t{}\t{}\t0\t{}",
            tree.node(n).id,
            tree.node(n).level,
            format_p(Some(report.node_ps[n])),
            report.detected[n] as u8,
            report.drivers[n] as u8
        )?;
    }
    Ok(())
}

/// Aggregated metrics table.
pub fn write_metrics<W: Write>(mut w: W, rows: &[MetricRow]) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{}\t{}\t{}\t{:.12e}\t{:.12e}\t{}",
            r.scenario, r.method, r.metric, r.value, r.mc_se, r.reps
        )?;
    }
    Ok(())
}
