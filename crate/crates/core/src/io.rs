//! CSV and JSON output in long format: one row per time, node and field.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::analysis::SweepRow;
use crate::discretize::Grid;
use crate::dynamics::{AdjointTrajectory, ControlFunction, Trajectory};
use crate::model::ProblemSpec;

pub type IoResult<T> = std::result::Result<T, Box<dyn std::error::Error + Send + Sync>>;

fn header(grid: &Grid) -> Vec<&'static str> {
    if grid.dim() == 1 {
        vec!["t", "x", "field", "value"]
    } else {
        vec!["t", "x", "y", "field", "value"]
    }
}

/// Writes `fields[k].1[n]` at time `times[n]` for every node.
pub fn write_fields_csv<W: Write>(out: W, grid: &Grid, times: &[f64], fields: &[(&str, &[Vec<f64>])]) -> IoResult<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(grid))?;
    for (n, t) in times.iter().enumerate() {
        for (name, steps) in fields {
            for (idx, value) in steps[n].iter().enumerate() {
                let p = grid.coords(idx);
                let mut rec = vec![t.to_string(), p[0].to_string()];
                if grid.dim() == 2 {
                    rec.push(p[1].to_string());
                }
                rec.push((*name).to_string());
                rec.push((value + 0.0).to_string());
                w.write_record(&rec)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Fields `v`, `ue` (and `ui` when present) at `t_0 .. t_N`.
pub fn write_trajectory_csv<W: Write>(out: W, problem: &ProblemSpec, traj: &Trajectory) -> IoResult<()> {
    let times: Vec<f64> = (0..=traj.n_steps()).map(|n| problem.time(n)).collect();
    let mut fields: Vec<(&str, &[Vec<f64>])> = vec![("v", &traj.v), ("ue", &traj.ue)];
    if let Some(ui) = &traj.ui {
        fields.push(("ui", ui));
    }
    write_fields_csv(out, problem.grid(), &times, &fields)
}

/// Fields `phi`, `phi_e` at `t_0 .. t_N`.
pub fn write_adjoint_csv<W: Write>(out: W, problem: &ProblemSpec, adj: &AdjointTrajectory) -> IoResult<()> {
    let times: Vec<f64> = (0..=adj.n_steps()).map(|n| problem.time(n)).collect();
    write_fields_csv(out, problem.grid(), &times, &[("phi", &adj.phi), ("phi_e", &adj.phi_e)])
}

/// Field `f` at the step midpoints `t_n + dt/2`.
pub fn write_control_csv<W: Write>(out: W, problem: &ProblemSpec, control: &ControlFunction) -> IoResult<()> {
    let times: Vec<f64> = (0..problem.n_steps()).map(|n| problem.mid_time(n)).collect();
    write_fields_csv(out, problem.grid(), &times, &[("f", control.steps())])
}

/// A named field stored as one row of node values per time.
pub type NamedField = (String, Vec<Vec<f64>>);

/// Reads a long-format CSV back into `(times, field name -> steps)`, keeping
/// the order of first appearance.
pub fn read_fields_csv(path: &Path, grid: &Grid) -> IoResult<(Vec<f64>, Vec<NamedField>)> {
    let mut r = csv::Reader::from_path(path)?;
    let value_col = if grid.dim() == 1 { 3 } else { 4 };
    let mut times: Vec<f64> = Vec::new();
    let mut fields: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let t: f64 = rec[0].parse()?;
        let name = &rec[value_col - 1];
        let value: f64 = rec[value_col].parse()?;
        if times.last() != Some(&t) {
            times.push(t);
        }
        let k = match fields.iter().position(|(n, _)| n == name) {
            Some(k) => k,
            None => {
                fields.push((name.to_string(), Vec::new()));
                fields.len() - 1
            }
        };
        let steps = &mut fields[k].1;
        if steps.len() < times.len() {
            steps.push(Vec::with_capacity(grid.len()));
        }
        steps.last_mut().expect("pushed above").push(value);
    }
    Ok((times, fields))
}

pub fn write_sweep_csv<W: Write>(out: W, rows: &[SweepRow]) -> IoResult<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    if rows.is_empty() {
        w.write_record([
            "epsilon",
            "control_norm",
            "bound_ratio",
            "term_v",
            "term_ue",
            "c_obs",
            "carleman_ratio_M",
            "carleman_ratio_Mi",
            "dist_to_limit",
            "converged",
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> IoResult<()> {
    let mut f = File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn create(path: &Path) -> IoResult<std::io::BufWriter<File>> {
    Ok(std::io::BufWriter::new(File::create(path)?))
}
