//! Output files. Formats:
//!
//! * `G*.mtx`: Matrix Market coordinate, real general, 1-based indices.
//! * `b*.csv`: `knot,row,b,variance,n,h,extrapolations,row_sum,row_sum_se,resampled,failed`.
//! * `u*.csv`: `knot,row,x,y,u[,exact,error]`, one line per unknown.
//! * `field*.csv`: `x,y,u[,exact,error]` on a uniform lattice.
//! * `calibration.json`, `metrics.json`: pretty-printed JSON.
//!
//! Floats are written with Rust's shortest round-trip `{:e}` formatting, so
//! identical values give identical bytes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Result;
use crate::geometry::DiscretisationPlan;
use crate::problem::EllipticProblem;

/// Creates `dir/name` and hands a buffered writer to `body`.
pub fn write_file(dir: &Path, name: &str, body: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join(name))?);
    body(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Nodal solution CSV, with exact values and errors when known.
pub fn write_nodal_csv(
    out: &mut impl Write,
    plan: &DiscretisationPlan,
    problem: &EllipticProblem,
    u: &[f64],
) -> Result<()> {
    let exact = problem.u_exact.as_ref();
    if exact.is_some() {
        writeln!(out, "knot,row,x,y,u,exact,error")?;
    } else {
        writeln!(out, "knot,row,x,y,u")?;
    }
    for (row, &k) in plan.unknowns.iter().enumerate() {
        let p = plan.knot(k).position;
        match exact {
            Some(f) => {
                let e = f(p);
                writeln!(out, "{k},{row},{:e},{:e},{:e},{:e},{:e}", p.x, p.y, u[row], e, u[row] - e)?
            }
            None => writeln!(out, "{k},{row},{:e},{:e},{:e}", p.x, p.y, u[row])?,
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_discretisation, GridSpec};
    use crate::point::Point2;
    use crate::problem::laplace_const;

    #[test]
    fn nodal_csv_has_one_line_per_unknown() {
        let plan = build_discretisation(&GridSpec {
            origin: Point2::new(0.0, 0.0),
            square_side: 1.0,
            nx: 2,
            ny: 2,
            knots_per_interface: 2,
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let u = vec![7.0; plan.n()];
        write_file(dir.path(), "u.csv", |w| write_nodal_csv(w, &plan, &laplace_const(7.0), &u)).unwrap();
        let text = std::fs::read_to_string(dir.path().join("u.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "knot,row,x,y,u,exact,error");
        assert_eq!(lines.len(), plan.n() + 1);
        assert!(lines[1].ends_with(",7e0,7e0,0e0"));
    }
}
