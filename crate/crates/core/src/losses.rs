//! Symmetric Chamfer distance, nearest-neighbour color loss, and the
//! combined reconstruction objective.
//!
//! Both a plain evaluation (`chamfer`, `color_loss`, `aux_loss`) and a
//! differentiable batched version (`aux_loss_graph`) are provided. The graph
//! version treats nearest-neighbour assignments as constants at the current
//! iterate, so gradients flow only through the predicted coordinates and
//! colors.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{invalid, Result};
use crate::geometry::{dist2, Point3};

/// Points of one patch, centroid-relative, with optional colors.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPoints {
    pub positions: Vec<Point3>,
    pub colors: Option<Vec<Point3>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub predicted: PatchPoints,
    pub ground_truth: PatchPoints,
}

/// Index of the nearest point in `to` for each point of `from`; ties go to
/// the lowest index.
pub fn nearest_indices(from: &[Point3], to: &[Point3]) -> Vec<usize> {
    from.iter()
        .map(|p| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, q) in to.iter().enumerate() {
                let d = dist2(*p, *q);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn check_non_empty(pair: &PatchPair) -> Result<()> {
    if pair.predicted.positions.is_empty() || pair.ground_truth.positions.is_empty() {
        return Err(invalid("chamfer distance needs non-empty point sets"));
    }
    Ok(())
}

/// Mean squared distance to the nearest neighbour, summed over both directions.
pub fn chamfer(pair: &PatchPair) -> Result<f64> {
    check_non_empty(pair)?;
    let pd = &pair.predicted.positions;
    let gt = &pair.ground_truth.positions;
    let to_gt: f64 = pd
        .iter()
        .zip(nearest_indices(pd, gt))
        .map(|(p, j)| dist2(*p, gt[j]))
        .sum::<f64>()
        / pd.len() as f64;
    let to_pd: f64 = gt
        .iter()
        .zip(nearest_indices(gt, pd))
        .map(|(q, i)| dist2(*q, pd[i]))
        .sum::<f64>()
        / gt.len() as f64;
    Ok(to_gt + to_pd)
}

/// Squared color error against the geometrically nearest ground-truth point,
/// averaged over channels and predicted points.
pub fn color_loss(pair: &PatchPair) -> Result<f64> {
    check_non_empty(pair)?;
    let (Some(pc), Some(gc)) = (&pair.predicted.colors, &pair.ground_truth.colors) else {
        return Err(invalid("color loss needs colors on both sides"));
    };
    let nn = nearest_indices(&pair.predicted.positions, &pair.ground_truth.positions);
    let total: f64 = pc
        .iter()
        .zip(nn)
        .map(|(c, j)| (0..3).map(|a| (c[a] - gc[j][a]).powi(2)).sum::<f64>() / 3.0)
        .sum();
    Ok(total / pc.len() as f64)
}

/// Mean over patches of Chamfer plus (optionally) color loss.
pub fn aux_loss(pairs: &[PatchPair], color_enabled: bool) -> Result<f64> {
    if pairs.is_empty() {
        return Err(invalid("aux loss over zero patches"));
    }
    let mut total = 0.0;
    for pair in pairs {
        total += chamfer(pair)?;
        if color_enabled {
            total += color_loss(pair)?;
        }
    }
    Ok(total / pairs.len() as f64)
}

/// Ground-truth patches for a batch of predictions, patch-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTargets {
    pub positions: Vec<Point3>,
    pub colors: Option<Vec<Point3>>,
    pub k: usize,
}

impl PatchTargets {
    pub fn num_patches(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.positions.len() / self.k
        }
    }
}

/// Scalar parts of a batched reconstruction loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AuxBreakdown {
    pub chamfer: f64,
    pub color: f64,
}

/// Differentiable reconstruction loss.
///
/// `pred` is `[patches * k_pred, F]` with `F = 3` (xyz) or `6` (xyz rgb),
/// patch-major. Returns the loss node and its parts.
pub fn aux_loss_graph(
    g: &mut Graph,
    pred: Var,
    k_pred: usize,
    targets: &PatchTargets,
    color_weight: Option<f64>,
) -> Result<(Var, AuxBreakdown)> {
    let (rows, f) = g.value(pred).dims2()?;
    let patches = targets.num_patches();
    if k_pred == 0 || targets.k == 0 || patches == 0 {
        return Err(invalid("aux loss needs non-empty patches"));
    }
    if rows != patches * k_pred {
        return Err(invalid(format!("{rows} predicted points for {patches} patches of {k_pred}")));
    }
    if f != 3 && f != 6 {
        return Err(invalid(format!("predicted feature width {f}, expected 3 or 6")));
    }
    if color_weight.is_some() && (f != 6 || targets.colors.is_none()) {
        return Err(invalid("color loss needs predicted and ground-truth colors"));
    }
    let kg = targets.k;
    let pv = g.value(pred).data();
    let pred_pos: Vec<Point3> = (0..rows).map(|r| [pv[r * f], pv[r * f + 1], pv[r * f + 2]]).collect();

    let mut nn_pd = Vec::with_capacity(rows);
    let mut nn_gt = Vec::with_capacity(patches * kg);
    for p in 0..patches {
        let pd = &pred_pos[p * k_pred..(p + 1) * k_pred];
        let gt = &targets.positions[p * kg..(p + 1) * kg];
        nn_pd.extend(nearest_indices(pd, gt).into_iter().map(|j| p * kg + j));
        nn_gt.extend(nearest_indices(gt, pd).into_iter().map(|i| p * k_pred + i));
    }

    let xyz = if f == 3 { pred } else { g.slice_cols(pred, 0, 3)? };
    let matched_gt: Vec<f64> = nn_pd.iter().flat_map(|&j| targets.positions[j]).collect();
    let matched_gt = g.constant(Tensor::matrix(rows, 3, matched_gt)?);
    let d1 = g.sub(xyz, matched_gt)?;
    let d1 = g.square(d1);
    let d1 = g.sum_cols(d1)?;
    let term_pd = g.mean(d1);

    let gathered = g.gather_rows(xyz, &nn_gt)?;
    let gt_all = g.constant(Tensor::matrix(patches * kg, 3, targets.positions.iter().flatten().copied().collect())?);
    let d2 = g.sub(gt_all, gathered)?;
    let d2 = g.square(d2);
    let d2 = g.sum_cols(d2)?;
    let term_gt = g.mean(d2);

    let mut loss = g.add(term_pd, term_gt)?;
    let mut parts = AuxBreakdown { chamfer: g.value(loss).item(), color: 0.0 };

    if let Some(w) = color_weight {
        let gc = targets.colors.as_ref().expect("checked above");
        let rgb = g.slice_cols(pred, 3, 6)?;
        let target: Vec<f64> = nn_pd.iter().flat_map(|&j| gc[j]).collect();
        let target = g.constant(Tensor::matrix(rows, 3, target)?);
        let dc = g.sub(rgb, target)?;
        let dc = g.square(dc);
        let color = g.mean(dc);
        parts.color = g.value(color).item();
        let weighted = g.scale(color, w);
        loss = g.add(loss, weighted)?;
    }
    Ok((loss, parts))
}
