//! File contracts: CSV series and their readers.
//!
//! Column layouts:
//!   trajectory.csv  replica,t,point_id,x_1..x_d,logdet_bv,logdet_mart
//!   particles.csv   replica,t,particle_id,x_1..x_d
//!   liouville.csv   replica,t,point_id,det_jacobian,discrepancy
//!   moments.csv     p,t,M_p,ln_M_p            (pooled: geometric mean over replicas)
//!   moments_by_replica.csv  replica,p,t,M_p,ln_M_p
//!   profile.csv     point_id,t,x_1..x_d,density
//!
//! Floats are written with Rust's shortest round-trip formatting, so re-parsing
//! is exact and reruns are byte-identical.

use crate::density::{DensityModel, MomentSeries};
use crate::detcalc::liouville_consistency;
use crate::error::{Error, Result};
use crate::flow::{PointState, Snapshot, Trajectory};
use crate::linalg::Mat;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

fn write_file(path: &Path, content: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(content.as_bytes())?;
    Ok(())
}

fn x_header(d: usize) -> String {
    (1..=d).map(|i| format!("x_{i}")).collect::<Vec<_>>().join(",")
}

pub fn write_trajectory_csv(path: &Path, trajectories: &[Trajectory]) -> Result<()> {
    let d = trajectories.first().map(|t| t.d).unwrap_or(1);
    let mut out = String::new();
    let _ = writeln!(out, "replica,t,point_id,{},logdet_bv,logdet_mart", x_header(d));
    for traj in trajectories {
        for snap in &traj.snapshots {
            for (pid, st) in snap.points.iter().enumerate() {
                let _ = write!(out, "{},{},{}", traj.replica, snap.t, pid);
                for v in &st.x {
                    let _ = write!(out, ",{v}");
                }
                let _ = writeln!(out, ",{},{}", st.bv, st.mart);
            }
        }
    }
    write_file(path, &out)
}

pub fn write_particles_csv(path: &Path, trajectories: &[Trajectory]) -> Result<()> {
    let d = trajectories.first().map(|t| t.d).unwrap_or(1);
    let mut out = String::new();
    let _ = writeln!(out, "replica,t,particle_id,{}", x_header(d));
    for traj in trajectories {
        for snap in &traj.snapshots {
            let n = snap.particles.len() / d;
            for i in 0..n {
                let _ = write!(out, "{},{},{}", traj.replica, snap.t, i);
                for j in 0..d {
                    let _ = write!(out, ",{}", snap.particles[i * d + j]);
                }
                out.push('\n');
            }
        }
    }
    write_file(path, &out)
}

/// Determinant of the propagated Jacobian against exp(bv + mart), per saved
/// state. A non-positive determinant is written as an empty discrepancy.
pub fn write_liouville_csv(path: &Path, trajectories: &[Trajectory]) -> Result<()> {
    let mut out = String::new();
    out.push_str("replica,t,point_id,det_jacobian,discrepancy\n");
    for traj in trajectories {
        for snap in &traj.snapshots {
            for (pid, st) in snap.points.iter().enumerate() {
                let det = st.jac.det();
                match liouville_consistency(&st.jac, st.bv, st.mart) {
                    Ok(disc) => {
                        let _ = writeln!(out, "{},{},{},{},{}", traj.replica, snap.t, pid, det, disc);
                    }
                    Err(_) => {
                        let _ = writeln!(out, "{},{},{},{},", traj.replica, snap.t, pid, det);
                    }
                }
            }
        }
    }
    write_file(path, &out)
}

/// Pooled moments: the geometric mean of M_p over replicas per (p, t), i.e.
/// exp of the mean log-moment, which is the quantity whose slope is the
/// pooled moment Lyapunov exponent.
pub fn write_moments_csv(path: &Path, series_by_replica: &[MomentSeries]) -> Result<()> {
    let mut out = String::new();
    out.push_str("p,t,M_p,ln_M_p\n");
    if let Some(first) = series_by_replica.first() {
        let n_rep = series_by_replica.len() as f64;
        for (pi, &p) in first.p_values.iter().enumerate() {
            for (ti, &t) in first.times.iter().enumerate() {
                let mean_ln = series_by_replica
                    .iter()
                    .map(|s| s.values[pi][ti].ln())
                    .sum::<f64>()
                    / n_rep;
                let _ = writeln!(out, "{},{},{},{}", p, t, mean_ln.exp(), mean_ln);
            }
        }
    }
    write_file(path, &out)
}

pub fn write_moments_by_replica_csv(path: &Path, series_by_replica: &[MomentSeries]) -> Result<()> {
    let mut out = String::new();
    out.push_str("replica,p,t,M_p,ln_M_p\n");
    for (r, series) in series_by_replica.iter().enumerate() {
        for (pi, &p) in series.p_values.iter().enumerate() {
            for (ti, &t) in series.times.iter().enumerate() {
                let v = series.values[pi][ti];
                let _ = writeln!(out, "{},{},{},{},{}", r, p, t, v, v.ln());
            }
        }
    }
    write_file(path, &out)
}

/// Transported density along the flow lines of one replica's tracked points.
pub fn write_profile_csv(path: &Path, traj: &Trajectory, density: &DensityModel) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "point_id,t,{},density", x_header(traj.d));
    for snap in &traj.snapshots {
        for (pid, st) in snap.points.iter().enumerate() {
            let p0 = density.eval(&traj.point_inits[pid]);
            let value = if p0 == 0.0 { 0.0 } else { p0 * (-(st.bv + st.mart)).exp() };
            let _ = write!(out, "{},{}", pid, snap.t);
            for v in &st.x {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(out, ",{value}");
        }
    }
    write_file(path, &out)
}

fn parse_f64(path: &Path, line_no: usize, field: &str) -> Result<f64> {
    field.parse::<f64>().map_err(|_| Error::Parse {
        path: path.display().to_string(),
        detail: format!("line {line_no}: bad float '{field}'"),
    })
}

fn parse_usize(path: &Path, line_no: usize, field: &str) -> Result<usize> {
    field.parse::<usize>().map_err(|_| Error::Parse {
        path: path.display().to_string(),
        detail: format!("line {line_no}: bad integer '{field}'"),
    })
}

/// Read a trajectory dump back for stage-separated analysis.
///
/// Jacobians are not part of the trajectory contract, so the snapshots carry
/// identity placeholders; analyses that need determinants (the Liouville
/// consistency) run at simulation time. Initial points are recovered from the
/// t = 0 rows. Particle positions live in particles.csv and can be attached
/// with [`attach_particles`].
pub fn read_trajectory_csv(path: &Path) -> Result<Vec<Trajectory>> {
    let text = std::fs::read_to_string(path).map_err(|_| {
        Error::StageDependency(format!("{} (run `simulate` first)", path.display()))
    })?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        path: path.display().to_string(),
        detail: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 6 || cols[0] != "replica" {
        return Err(Error::Parse {
            path: path.display().to_string(),
            detail: format!("unexpected header '{header}'"),
        });
    }
    let d = cols.len() - 5;

    // replica -> (ordered times, per-time point states)
    type ReplicaRows = Vec<(f64, Vec<PointState>)>;
    let mut replicas: Vec<(usize, ReplicaRows)> = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                detail: format!("line {line_no}: expected {} fields, got {}", cols.len(), fields.len()),
            });
        }
        let replica = parse_usize(path, line_no, fields[0])?;
        let t = parse_f64(path, line_no, fields[1])?;
        let point_id = parse_usize(path, line_no, fields[2])?;
        let mut x = Vec::with_capacity(d);
        for j in 0..d {
            x.push(parse_f64(path, line_no, fields[3 + j])?);
        }
        let bv = parse_f64(path, line_no, fields[3 + d])?;
        let mart = parse_f64(path, line_no, fields[4 + d])?;

        let rep_entry = match replicas.iter_mut().find(|(r, _)| *r == replica) {
            Some(e) => e,
            None => {
                replicas.push((replica, Vec::new()));
                replicas.last_mut().unwrap()
            }
        };
        let snaps = &mut rep_entry.1;
        let snap_entry = match snaps.iter_mut().find(|(st, _)| *st == t) {
            Some(e) => e,
            None => {
                snaps.push((t, Vec::new()));
                snaps.last_mut().unwrap()
            }
        };
        if snap_entry.1.len() != point_id {
            return Err(Error::Parse {
                path: path.display().to_string(),
                detail: format!("line {line_no}: point_id {point_id} out of order"),
            });
        }
        snap_entry.1.push(PointState { x, jac: Mat::identity(d), bv, mart });
    }

    replicas.sort_by_key(|(r, _)| *r);
    let mut out = Vec::with_capacity(replicas.len());
    for (replica, snaps) in replicas {
        let point_inits: Vec<Vec<f64>> = snaps
            .first()
            .map(|(_, pts)| pts.iter().map(|p| p.x.clone()).collect())
            .unwrap_or_default();
        let dt = if snaps.len() > 1 { snaps[1].0 - snaps[0].0 } else { 0.0 };
        let snapshots = snaps
            .into_iter()
            .map(|(t, points)| Snapshot { step: 0, t, mean: vec![0.0; d], particles: Vec::new(), points })
            .collect();
        out.push(Trajectory { replica, d, dt, point_inits, snapshots });
    }
    Ok(out)
}

/// Fill snapshot particle positions from a particles.csv dump.
pub fn attach_particles(path: &Path, trajectories: &mut [Trajectory]) -> Result<()> {
    let text = std::fs::read_to_string(path).map_err(|_| {
        Error::StageDependency(format!("{} (run `simulate` first)", path.display()))
    })?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        path: path.display().to_string(),
        detail: "empty file".into(),
    })?;
    let d = header.split(',').count() - 3;
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        let replica = parse_usize(path, line_no, fields[0])?;
        let t = parse_f64(path, line_no, fields[1])?;
        let traj = trajectories
            .iter_mut()
            .find(|tr| tr.replica == replica)
            .ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                detail: format!("line {line_no}: replica {replica} not in trajectory dump"),
            })?;
        if let Some(snap) = traj.snapshots.iter_mut().find(|s| s.t == t) {
            for j in 0..d {
                snap.particles.push(parse_f64(path, line_no, fields[3 + j])?);
            }
        }
    }
    Ok(())
}

/// Read the pooled or per-replica moment CSV back into series.
pub fn read_moments_by_replica_csv(path: &Path) -> Result<Vec<MomentSeries>> {
    let text = std::fs::read_to_string(path).map_err(|_| {
        Error::StageDependency(format!("{} (run `moments` first)", path.display()))
    })?;
    let mut lines = text.lines().enumerate();
    lines.next();
    // replica -> series under construction
    let mut reps: Vec<(usize, MomentSeries)> = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                detail: format!("line {line_no}: expected 5 fields"),
            });
        }
        let replica = parse_usize(path, line_no, fields[0])?;
        let p = parse_f64(path, line_no, fields[1])?;
        let t = parse_f64(path, line_no, fields[2])?;
        let m = parse_f64(path, line_no, fields[3])?;
        let entry = match reps.iter_mut().find(|(r, _)| *r == replica) {
            Some(e) => e,
            None => {
                reps.push((replica, MomentSeries { p_values: Vec::new(), times: Vec::new(), values: Vec::new() }));
                reps.last_mut().unwrap()
            }
        };
        let series = &mut entry.1;
        let pi = match series.p_values.iter().position(|&q| q == p) {
            Some(pi) => pi,
            None => {
                series.p_values.push(p);
                series.values.push(Vec::new());
                series.p_values.len() - 1
            }
        };
        if pi == 0 {
            series.times.push(t);
        }
        series.values[pi].push(m);
    }
    reps.sort_by_key(|(r, _)| *r);
    Ok(reps.into_iter().map(|(_, s)| s).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{run_replica_from, ParticleEnsemble, SimConfig};
    use crate::kernels::{DiffusionFamily, InteractionKernel, ModelSpec};

    fn tiny_run() -> Trajectory {
        let model = ModelSpec::new(
            1,
            InteractionKernel::linear(Mat::scalar(1.0), 1.0),
            DiffusionFamily::none(),
        )
        .unwrap();
        let ensemble = ParticleEnsemble::from_positions(1, vec![0.0, 0.5]).unwrap();
        let sim = SimConfig { dt: 0.25, t_horizon: 1.0, n_particles: 2, n_replicas: 1, seed: 1, save_every: 2 };
        run_replica_from(&model, ensemble, &[vec![1.0], vec![0.2]], &sim, 0).unwrap()
    }

    #[test]
    fn trajectory_roundtrip() {
        let traj = tiny_run();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trajectory.csv");
        write_trajectory_csv(&path, std::slice::from_ref(&traj)).unwrap();
        let back = read_trajectory_csv(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].point_inits, traj.point_inits);
        assert_eq!(back[0].snapshots.len(), traj.snapshots.len());
        for (a, b) in back[0].snapshots.iter().zip(&traj.snapshots) {
            assert_eq!(a.t, b.t);
            for (pa, pb) in a.points.iter().zip(&b.points) {
                assert_eq!(pa.x, pb.x);
                assert_eq!(pa.bv, pb.bv);
                assert_eq!(pa.mart, pb.mart);
            }
        }
    }

    #[test]
    fn particles_attach() {
        let traj = tiny_run();
        let dir = tempfile::tempdir().unwrap();
        let tpath = dir.path().join("trajectory.csv");
        let ppath = dir.path().join("particles.csv");
        write_trajectory_csv(&tpath, std::slice::from_ref(&traj)).unwrap();
        write_particles_csv(&ppath, std::slice::from_ref(&traj)).unwrap();
        let mut back = read_trajectory_csv(&tpath).unwrap();
        attach_particles(&ppath, &mut back).unwrap();
        for (a, b) in back[0].snapshots.iter().zip(&traj.snapshots) {
            assert_eq!(a.particles, b.particles);
        }
    }

    #[test]
    fn missing_file_is_stage_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = read_trajectory_csv(&dir.path().join("nope.csv")).unwrap_err();
        assert!(matches!(err, Error::StageDependency(_)));
    }
}
