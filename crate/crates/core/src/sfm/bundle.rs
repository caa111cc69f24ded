//! Levenberg-Marquardt bundle adjustment with a Huber kernel, solved
//! through the reduced camera system.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6x3, Vector2, Vector3, Vector6};

use super::SfmReconstruction;
use crate::error::{Error, Result};
use crate::geometry::{perspective_jacobian, projection_jacobian_at, CameraIntrinsics, CameraPose};

const INITIAL_DAMPING: f64 = 1e-4;
const MAX_DAMPING: f64 = 1e10;
const MAX_SOLVE_ESCALATIONS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct BundleReport {
    /// Robust cost before the first and after every accepted step.
    pub cost_trace: Vec<f64>,
    pub iterations: usize,
    pub final_damping: f64,
}

impl BundleReport {
    pub fn initial_cost(&self) -> f64 {
        self.cost_trace[0]
    }

    pub fn final_cost(&self) -> f64 {
        *self.cost_trace.last().expect("trace is never empty")
    }
}

/// `rho(e)` for a residual of norm `e`: quadratic inside `delta`, linear outside.
pub fn huber_cost(e: f64, delta: f64) -> f64 {
    if e <= delta {
        e * e
    } else {
        2.0 * delta * e - delta * delta
    }
}

fn huber_weight(e: f64, delta: f64) -> f64 {
    if e <= delta {
        1.0
    } else {
        delta / e
    }
}

struct Obs {
    point: usize,
    image: usize,
    pixel: Vector2<f64>,
}

fn residual(
    pose: &CameraPose,
    x: &Vector3<f64>,
    px: &Vector2<f64>,
    k: &CameraIntrinsics,
) -> Option<(Vector2<f64>, Vector3<f64>)> {
    let pc = pose.transform(x);
    if pc.z <= 0.0 {
        return None;
    }
    Some((
        Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy) - px,
        pc,
    ))
}

fn total_cost(
    poses: &BTreeMap<usize, CameraPose>,
    points: &[Vector3<f64>],
    obs: &[Obs],
    k: &CameraIntrinsics,
    delta: f64,
) -> f64 {
    let mut cost = 0.0;
    for o in obs {
        match residual(&poses[&o.image], &points[o.point], &o.pixel, k) {
            Some((r, _)) => cost += huber_cost(r.norm(), delta),
            None => return f64::INFINITY,
        }
    }
    cost
}

/// Scale the scene about the reference centre so the reference-to-anchor
/// baseline returns to `baseline`. Reprojections are unchanged.
fn fix_scale(
    poses: &mut BTreeMap<usize, CameraPose>,
    points: &mut [Vector3<f64>],
    reference: usize,
    anchor: usize,
    baseline: f64,
) {
    let c = poses[&reference].center();
    let current = (poses[&anchor].center() - c).norm();
    if !(current > 0.0) || !current.is_finite() {
        return;
    }
    let s = baseline / current;
    for (&id, pose) in poses.iter_mut() {
        if id == reference {
            continue;
        }
        let r = pose.rotation_matrix();
        pose.translation = s * pose.translation + (s - 1.0) * (r * c);
    }
    for x in points.iter_mut() {
        *x = c + s * (*x - c);
    }
}

/// Jointly refines every non-reference pose and every point. The
/// reference pose is frozen; when `recon.scale_anchor` is set, the
/// distance between the reference and anchor centres is held fixed.
pub fn bundle_adjust(
    recon: &SfmReconstruction,
    k: &CameraIntrinsics,
    max_iterations: usize,
    huber_delta: f64,
) -> Result<(SfmReconstruction, BundleReport)> {
    if recon.poses.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: recon.poses.len(),
        });
    }
    if !recon.poses.contains_key(&recon.reference) {
        return Err(Error::InvalidArgument(format!(
            "reference image {} is not registered",
            recon.reference
        )));
    }
    if !(huber_delta > 0.0) {
        return Err(Error::InvalidArgument("Huber scale must be positive".into()));
    }
    let cams: Vec<usize> = recon.poses.keys().copied().filter(|&i| i != recon.reference).collect();
    let cam_slot: BTreeMap<usize, usize> = cams.iter().enumerate().map(|(s, &i)| (i, s)).collect();
    let mut obs = Vec::new();
    for (p, track) in recon.tracks.iter().enumerate() {
        for o in track {
            if recon.poses.contains_key(&o.image) {
                obs.push(Obs {
                    point: p,
                    image: o.image,
                    pixel: o.pixel,
                });
            }
        }
    }
    let anchor = recon
        .scale_anchor
        .filter(|a| *a != recon.reference && recon.poses.contains_key(a));
    let baseline = anchor.map(|a| (recon.poses[&a].center() - recon.poses[&recon.reference].center()).norm());

    let mut poses = recon.poses.clone();
    let mut points = recon.points.clone();
    let mut cost = total_cost(&poses, &points, &obs, k, huber_delta);
    if !cost.is_finite() {
        return Err(Error::InvalidArgument("an observation lies behind its camera".into()));
    }
    let mut report = BundleReport {
        cost_trace: vec![cost],
        iterations: 0,
        final_damping: INITIAL_DAMPING,
    };
    let nc = cams.len();
    let np = points.len();
    let mut lambda = INITIAL_DAMPING;

    for _ in 0..max_iterations {
        if cost <= 1e-24 {
            break;
        }
        report.iterations += 1;
        let mut u = vec![nalgebra::Matrix6::<f64>::zeros(); nc];
        let mut gc = vec![Vector6::<f64>::zeros(); nc];
        let mut v = vec![Matrix3::<f64>::zeros(); np];
        let mut gp = vec![Vector3::<f64>::zeros(); np];
        let mut w: Vec<Option<(usize, Matrix6x3<f64>)>> = Vec::with_capacity(obs.len());
        for o in &obs {
            let pose = &poses[&o.image];
            let x = &points[o.point];
            let (r, pc) = residual(pose, x, &o.pixel, k).expect("accepted states have positive depth");
            let wt = huber_weight(r.norm(), huber_delta);
            let jp = perspective_jacobian(&pc, k) * pose.rotation_matrix();
            v[o.point] += wt * jp.transpose() * jp;
            gp[o.point] += wt * jp.transpose() * r;
            match cam_slot.get(&o.image) {
                Some(&c) => {
                    let jc = projection_jacobian_at(x, &pc, pose, k);
                    u[c] += wt * jc.transpose() * jc;
                    gc[c] += wt * jc.transpose() * r;
                    w.push(Some((c, wt * jc.transpose() * jp)));
                }
                None => w.push(None),
            }
        }
        let g_norm =
            gc.iter().map(|g| g.norm_squared()).sum::<f64>() + gp.iter().map(|g| g.norm_squared()).sum::<f64>();
        if g_norm.sqrt() <= 1e-14 * (1.0 + cost) {
            break;
        }

        let mut improved = false;
        let mut escalations = 0;
        while lambda <= MAX_DAMPING {
            let Some((dc, dp)) = solve_reduced(&u, &gc, &v, &gp, &w, &obs, nc, lambda) else {
                escalations += 1;
                lambda *= 10.0;
                if escalations > MAX_SOLVE_ESCALATIONS {
                    return Err(Error::RankDeficient { damping: lambda });
                }
                continue;
            };
            let mut cand_poses = poses.clone();
            for (s, &id) in cams.iter().enumerate() {
                let p = cand_poses.get_mut(&id).expect("registered");
                *p = p.apply_increment(&dc.fixed_rows::<6>(6 * s).into_owned(), 1.0);
            }
            let mut cand_points: Vec<Vector3<f64>> = points.iter().enumerate().map(|(i, x)| x + dp[i]).collect();
            if let (Some(a), Some(b)) = (anchor, baseline) {
                fix_scale(&mut cand_poses, &mut cand_points, recon.reference, a, b);
            }
            let cand_cost = total_cost(&cand_poses, &cand_points, &obs, k, huber_delta);
            if cand_cost < cost {
                let rel = (cost - cand_cost) / cost;
                poses = cand_poses;
                points = cand_points;
                cost = cand_cost;
                report.cost_trace.push(cost);
                lambda = (lambda / 10.0).max(1e-12);
                improved = rel > 1e-12;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    report.final_damping = lambda;
    let mut out = recon.clone();
    out.poses = poses;
    out.points = points;
    Ok((out, report))
}

#[allow(clippy::too_many_arguments)]
fn solve_reduced(
    u: &[nalgebra::Matrix6<f64>],
    gc: &[Vector6<f64>],
    v: &[Matrix3<f64>],
    gp: &[Vector3<f64>],
    w: &[Option<(usize, Matrix6x3<f64>)>],
    obs: &[Obs],
    nc: usize,
    lambda: f64,
) -> Option<(DVector<f64>, Vec<Vector3<f64>>)> {
    let damp3 = |m: &Matrix3<f64>| {
        let mut d = *m;
        for i in 0..3 {
            d[(i, i)] += lambda * m[(i, i)].max(1e-9);
        }
        d
    };
    let v_inv: Vec<Matrix3<f64>> = v.iter().map(|m| damp3(m).try_inverse()).collect::<Option<_>>()?;
    // Observations grouped by point so each point's camera pairs can be formed.
    let mut by_point: Vec<Vec<usize>> = vec![Vec::new(); v.len()];
    for (i, o) in obs.iter().enumerate() {
        if w[i].is_some() {
            by_point[o.point].push(i);
        }
    }
    let mut s = DMatrix::<f64>::zeros(6 * nc, 6 * nc);
    let mut rhs = DVector::<f64>::zeros(6 * nc);
    for c in 0..nc {
        let mut uc = u[c];
        for i in 0..6 {
            uc[(i, i)] += lambda * u[c][(i, i)].max(1e-9);
        }
        s.fixed_view_mut::<6, 6>(6 * c, 6 * c).copy_from(&uc);
        rhs.fixed_rows_mut::<6>(6 * c).copy_from(&(-gc[c]));
    }
    for (p, list) in by_point.iter().enumerate() {
        for &i in list {
            let (ci, wi) = w[i].as_ref().expect("filtered");
            let wv = wi * v_inv[p];
            let mut r = rhs.fixed_rows_mut::<6>(6 * ci);
            r += wv * gp[p];
            for &j in list {
                let (cj, wj) = w[j].as_ref().expect("filtered");
                let mut blk = s.fixed_view_mut::<6, 6>(6 * ci, 6 * cj);
                blk -= wv * wj.transpose();
            }
        }
    }
    let dc = if nc == 0 {
        DVector::zeros(0)
    } else {
        s.cholesky()?.solve(&rhs)
    };
    let mut back = gp.to_vec();
    for (i, o) in obs.iter().enumerate() {
        if let Some((c, wi)) = &w[i] {
            back[o.point] += wi.transpose() * dc.fixed_rows::<6>(6 * c);
        }
    }
    let dp = back.iter().zip(&v_inv).map(|(b, vi)| -(vi * b)).collect();
    Some((dc, dp))
}
