//! CSV writers shared by the command-line tools.

use std::io::Write;

use crate::error::Result;
use crate::sde::{PathEnsemble, TimeGrid};
use crate::variation::MalliavinMatrix;

/// `path,step,t,x_0..x_{m-1}` for every node of the first `max_paths` paths.
pub fn write_paths_csv<W: Write>(ens: &PathEnsemble, max_paths: usize, mut w: W) -> Result<()> {
    let m = ens.dim();
    let cols: Vec<String> = (0..m).map(|j| format!("x_{j}")).collect();
    writeln!(w, "path,step,t,{}", cols.join(","))?;
    for i in 0..ens.n_paths.min(max_paths) {
        for k in 0..ens.grid.n_nodes() {
            write!(w, "{i},{k},{:.16e}", ens.grid.time(k))?;
            for v in ens.state(i, k) {
                write!(w, ",{v:.16e}")?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

/// `step,t,gamma_ij...` with the matrix flattened row-major.
pub fn write_gamma_csv<W: Write>(grid: &TimeGrid, gamma: &MalliavinMatrix, mut w: W) -> Result<()> {
    let m = gamma.m;
    let cols: Vec<String> = (0..m * m).map(|e| format!("gamma_{}{}", e / m, e % m)).collect();
    writeln!(w, "step,t,{}", cols.join(","))?;
    for k in 0..gamma.n_nodes() {
        write!(w, "{k},{:.16e}", grid.time(k))?;
        for v in gamma.at(k) {
            write!(w, ",{v:.16e}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// `path,step,t,x_0..` for reverse trajectories stored `n × nodes × m`,
/// where node `j` sits at `times[j]`.
pub fn write_trajectories_csv<W: Write>(traj: &[f64], m: usize, times: &[f64], mut w: W) -> Result<()> {
    let cols: Vec<String> = (0..m).map(|j| format!("x_{j}")).collect();
    writeln!(w, "path,step,t,{}", cols.join(","))?;
    let per = times.len() * m;
    for (i, path) in traj.chunks(per).enumerate() {
        for (k, x) in path.chunks(m).enumerate() {
            write!(w, "{i},{k},{:.16e}", times[k])?;
            for v in x {
                write!(w, ",{v:.16e}")?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

/// Row-major `n × m` points with header `x_0..x_{m-1}`.
pub fn write_points_csv<W: Write>(points: &[f64], m: usize, mut w: W) -> Result<()> {
    let cols: Vec<String> = (0..m).map(|j| format!("x_{j}")).collect();
    writeln!(w, "{}", cols.join(","))?;
    for p in points.chunks(m) {
        let row: Vec<String> = p.iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Reads a headed numeric CSV of points; returns `(points, m)`.
pub fn read_points_csv<R: std::io::Read>(r: R) -> Result<(Vec<f64>, usize)> {
    let mut rdr = csv::Reader::from_reader(r);
    let m = rdr.headers()?.len();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        for f in rec.iter() {
            out.push(
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| crate::Error::InvalidParameter(format!("bad number {f:?}: {e}")))?,
            );
        }
    }
    Ok((out, m))
}
