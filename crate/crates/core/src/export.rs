//! CSV artifacts. All real numbers are written with 17 significant digits
//! and a '.' decimal separator, so identical runs produce identical bytes.

use std::io::{self, Write};

use crate::abse::IterationReport;
use crate::bsde::SolutionSurface;
use crate::chain::ChainPath;
use crate::compare::SweepOutcome;

pub fn format_real(x: f64) -> String {
    format!("{x:.16e}")
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

/// `t,state,u,z_1,...,z_N` per node and state.
pub fn write_surface_csv<W: Write>(w: &mut W, surface: &SolutionSurface) -> io::Result<()> {
    let n = surface.n_states();
    write!(w, "t,state,u")?;
    for j in 1..=n {
        write!(w, ",z_{j}")?;
    }
    writeln!(w)?;
    for k in 0..surface.grid().n_nodes() {
        let t = surface.grid().node(k);
        for i in 0..n {
            write!(w, "{},{i},{}", format_real(t), format_real(surface.u_at(k, i)))?;
            let z = surface.z_at(k, i);
            for j in 0..n {
                write!(w, ",{}", format_real(z[j]))?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

/// `time,state` rows for one path: the initial state and every jump.
pub fn write_path_csv<W: Write>(w: &mut W, path: &ChainPath) -> io::Result<()> {
    writeln!(w, "time,state")?;
    writeln!(w, "{},{}", format_real(0.0), path.initial_state)?;
    for (t, s) in path.jump_times.iter().zip(&path.post_jump_states) {
        writeln!(w, "{},{s}", format_real(*t))?;
    }
    Ok(())
}

/// `time,xhat` rows of one simulated delay-equation trajectory.
pub fn write_sdde_path_csv<W: Write>(w: &mut W, path: &crate::sdde::SddePath) -> io::Result<()> {
    writeln!(w, "time,xhat")?;
    for (t, x) in path.times.iter().zip(&path.xhat) {
        writeln!(w, "{},{}", format_real(*t), format_real(*x))?;
    }
    Ok(())
}

/// `path,time,state` rows for a batch of paths.
pub fn write_paths_csv<W: Write>(w: &mut W, paths: &[ChainPath]) -> io::Result<()> {
    writeln!(w, "path,time,state")?;
    for (p, path) in paths.iter().enumerate() {
        writeln!(w, "{p},{},{}", format_real(0.0), path.initial_state)?;
        for (t, s) in path.jump_times.iter().zip(&path.post_jump_states) {
            writeln!(w, "{p},{},{s}", format_real(*t))?;
        }
    }
    Ok(())
}

/// `iteration,diff,ratio` from a Picard run; the first row has no ratio.
pub fn write_iterations_csv<W: Write>(w: &mut W, report: &IterationReport) -> io::Result<()> {
    writeln!(w, "iteration,diff,ratio")?;
    for (k, d) in report.diffs.iter().enumerate() {
        let ratio = if k == 0 || report.diffs[k - 1] == 0.0 {
            String::new()
        } else {
            format_real(d / report.diffs[k - 1])
        };
        writeln!(w, "{},{},{ratio}", k + 1, format_real(*d))?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct DualityRow {
    pub setting: String,
    pub initial_state: usize,
    pub solver_y: f64,
    pub mc_estimate: f64,
    pub std_error: f64,
}

impl DualityRow {
    pub fn abs_gap(&self) -> f64 {
        (self.solver_y - self.mc_estimate).abs()
    }

    pub fn within_three_se(&self) -> bool {
        self.abs_gap() <= 3.0 * self.std_error
    }
}

pub fn write_duality_csv<W: Write>(w: &mut W, rows: &[DualityRow]) -> io::Result<()> {
    writeln!(
        w,
        "setting,initial_state,solver_y,mc_estimate,std_error,abs_gap,within_3se"
    )?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            quote(&r.setting),
            r.initial_state,
            format_real(r.solver_y),
            format_real(r.mc_estimate),
            format_real(r.std_error),
            format_real(r.abs_gap()),
            r.within_three_se()
        )?;
    }
    Ok(())
}

pub fn write_comparison_csv<W: Write>(w: &mut W, rows: &[SweepOutcome]) -> io::Result<()> {
    writeln!(w, "instance_id,accepted,reason,max_violation,t,state")?;
    for r in rows {
        let (t, state) = match r.location {
            Some((t, s)) => (format_real(t), s.to_string()),
            None => (String::new(), String::new()),
        };
        let violation = if r.max_violation.is_finite() {
            format_real(r.max_violation)
        } else {
            String::new()
        };
        writeln!(
            w,
            "{},{},{},{violation},{t},{state}",
            r.instance_id,
            r.accepted,
            quote(&r.reason)
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct EstimateRow {
    pub instance: u64,
    pub lhs: f64,
    pub rhs: f64,
    pub c: f64,
    pub holds: bool,
}

pub fn write_estimate_csv<W: Write>(w: &mut W, rows: &[EstimateRow]) -> io::Result<()> {
    writeln!(w, "instance,lhs,rhs,c,holds")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.instance,
            format_real(r.lhs),
            format_real(r.rhs),
            format_real(r.c),
            r.holds
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reals_carry_seventeen_significant_digits() {
        let s = format_real(std::f64::consts::PI);
        assert_eq!(s, "3.1415926535897931e0");
        assert!(format_real(-1.0 / 3.0).starts_with("-3.3333333333333331e-1"));
    }

    #[test]
    fn quoting_escapes_embedded_quotes() {
        assert_eq!(quote("a\"b"), "\"a\"\"b\"");
    }

    #[test]
    fn single_path_csv_shape() {
        let path = ChainPath {
            initial_state: 1,
            jump_times: vec![0.25, 0.5],
            post_jump_states: vec![0, 1],
            horizon: 1.0,
        };
        let mut buf = Vec::new();
        write_path_csv(&mut buf, &path).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "time,state");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].ends_with(",1"));
        assert!(lines[2].ends_with(",0"));
    }

    #[test]
    fn duality_row_verdict() {
        let row = DualityRow {
            setting: "s".into(),
            initial_state: 0,
            solver_y: 1.0,
            mc_estimate: 1.001,
            std_error: 0.001,
        };
        assert!(row.within_three_se());
        let mut buf = Vec::new();
        write_duality_csv(&mut buf, &[row]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("setting,initial_state"));
        assert!(text.contains("true"));
    }
}
