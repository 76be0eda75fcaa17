//! Evaluation metrics: rollout error scales (RMSE, MAE, MNAD), per-step
//! Pearson correlation and the high-correlation time derived from it, energy
//! spectra, and wall-time benchmarking.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::fft::fft2;
use crate::grid::{FieldState, Trajectory};
use crate::solver::vorticity;

/// Which field the correlation metrics operate on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Observable {
    /// All state channels, flattened together.
    State,
    /// The scalar vorticity field derived from the velocities.
    Vorticity,
}

impl Observable {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "state" => Ok(Observable::State),
            "vorticity" => Ok(Observable::Vorticity),
            other => Err(Error::InvalidArgument(format!(
                "unknown observable {other:?}; expected state or vorticity"
            ))),
        }
    }
}

fn check_pair(pred: &Trajectory, label: &Trajectory) -> Result<()> {
    if pred.states.len() != label.states.len() {
        return Err(Error::ShapeMismatch(format!(
            "prediction has {} states, labels {}",
            pred.states.len(),
            label.states.len()
        )));
    }
    for (p, l) in pred.states.iter().zip(&label.states) {
        if p.grid != l.grid {
            return Err(Error::GridMismatch);
        }
        if p.num_channels() != l.num_channels() {
            return Err(Error::ShapeMismatch("channel count mismatch".into()));
        }
    }
    Ok(())
}

fn check_sets(preds: &[Trajectory], labels: &[Trajectory]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory set".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    for (p, l) in preds.iter().zip(labels) {
        check_pair(p, l)?;
    }
    Ok(())
}

fn traj_fold<F: FnMut(f64, f64)>(pred: &Trajectory, label: &Trajectory, mut f: F) {
    for (p, l) in pred.states.iter().zip(&label.states) {
        for ((_, a), (_, b)) in p.channels().zip(l.channels()) {
            for (x, y) in a.iter().zip(b.iter()) {
                f(*x, *y);
            }
        }
    }
}

/// Root of the mean (over trajectories) of each trajectory's mean squared
/// error over its full spatiotemporal tensor.
pub fn rmse(preds: &[Trajectory], labels: &[Trajectory]) -> Result<f64> {
    check_sets(preds, labels)?;
    let mut acc = 0.0;
    for (p, l) in preds.iter().zip(labels) {
        let mut sq = 0.0;
        let mut count = 0usize;
        traj_fold(p, l, |x, y| {
            let d = x - y;
            sq += d * d;
            count += 1;
        });
        acc += sq / count as f64;
    }
    Ok((acc / preds.len() as f64).sqrt())
}

/// Mean (over trajectories) of the elementwise mean absolute difference.
pub fn mae(preds: &[Trajectory], labels: &[Trajectory]) -> Result<f64> {
    check_sets(preds, labels)?;
    let mut acc = 0.0;
    for (p, l) in preds.iter().zip(labels) {
        let mut abs = 0.0;
        let mut count = 0usize;
        traj_fold(p, l, |x, y| {
            abs += (x - y).abs();
            count += 1;
        });
        acc += abs / count as f64;
    }
    Ok(acc / preds.len() as f64)
}

/// Mean absolute difference normalized by the prediction's value range,
/// averaged over trajectories. `None` when any prediction tensor is constant
/// (zero range), which leaves the metric undefined.
pub fn mnad(preds: &[Trajectory], labels: &[Trajectory]) -> Result<Option<f64>> {
    check_sets(preds, labels)?;
    let mut acc = 0.0;
    for (p, l) in preds.iter().zip(labels) {
        let mut abs = 0.0;
        let mut count = 0usize;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        traj_fold(p, l, |x, y| {
            abs += (x - y).abs();
            count += 1;
            lo = lo.min(x);
            hi = hi.max(x);
        });
        let range = hi - lo;
        if range == 0.0 {
            return Ok(None);
        }
        acc += abs / count as f64 / range;
    }
    Ok(Some(acc / preds.len() as f64))
}

/// Pearson correlation of two equally sized samples; `None` when either side
/// has (numerically) zero variance.
fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    let mut msx = 0.0;
    let mut msy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
        msx += x * x;
        msy += y * y;
    }
    // a constant field has only round-off deviations; treat it as undefined
    let tiny_x = 1e-24 * msx.max(1e-300);
    let tiny_y = 1e-24 * msy.max(1e-300);
    if vx <= tiny_x || vy <= tiny_y {
        return None;
    }
    Some(cov / (vx.sqrt() * vy.sqrt()))
}

fn flatten(state: &FieldState, obs: Observable) -> Vec<f64> {
    match obs {
        Observable::State => state
            .channels()
            .flat_map(|(_, a)| a.iter().copied().collect::<Vec<f64>>())
            .collect(),
        Observable::Vorticity => vorticity(state).into_iter().collect(),
    }
}

/// Per-step Pearson correlation between prediction and label, over flattened
/// cells (and channels for the state observable).
pub fn pcc_series(
    pred: &Trajectory,
    label: &Trajectory,
    obs: Observable,
) -> Result<Vec<Option<f64>>> {
    check_pair(pred, label)?;
    Ok(pred
        .states
        .iter()
        .zip(&label.states)
        .map(|(p, l)| pearson(&flatten(p, obs), &flatten(l, obs)))
        .collect())
}

/// High-correlation time: the summed indicator of steps whose correlation
/// exceeds the threshold, times the step size. Undefined steps never count.
pub fn hct(series: &[Option<f64>], dt: f64, threshold: f64) -> f64 {
    dt * series
        .iter()
        .filter(|p| matches!(p, Some(v) if *v > threshold))
        .count() as f64
}

/// Kinetic-energy spectrum with integer-shell binning; returns the shell
/// wavenumbers and the energy per shell. The shell sums satisfy Parseval:
/// their total equals the kinetic energy density.
pub fn energy_spectrum(state: &FieldState) -> Result<(Vec<f64>, Vec<f64>)> {
    let grid = state.grid;
    let u = state
        .channel(crate::grid::CH_U)
        .ok_or_else(|| Error::InvalidArgument("state has no velocity channels".into()))?;
    let v = state
        .channel(crate::grid::CH_V)
        .ok_or_else(|| Error::InvalidArgument("state has no velocity channels".into()))?;
    let n = (grid.nx * grid.ny) as f64;
    let uh = fft2(u);
    let vh = fft2(v);
    let half = |len: usize, idx: usize| -> isize {
        if idx <= len / 2 { idx as isize } else { idx as isize - len as isize }
    };
    let max_shell = (((grid.nx / 2) * (grid.nx / 2) + (grid.ny / 2) * (grid.ny / 2)) as f64)
        .sqrt()
        .round() as usize;
    let mut e = vec![0.0; max_shell + 1];
    for j in 0..grid.ny {
        let ky = half(grid.ny, j);
        for i in 0..grid.nx {
            let kx = half(grid.nx, i);
            let shell = (((kx * kx + ky * ky) as f64).sqrt()).round() as usize;
            let eu = uh[[j, i]].norm_sqr() / (n * n);
            let ev = vh[[j, i]].norm_sqr() / (n * n);
            e[shell] += 0.5 * (eu + ev);
        }
    }
    let k = (0..=max_shell).map(|s| s as f64).collect();
    Ok((k, e))
}

/// Wall-seconds per simulated physical second: one untimed warmup run, then
/// the median of `runs` (at least 3) timed runs of the workload.
pub fn bench_speed<F: FnMut() -> Result<()>>(
    mut workload: F,
    horizon_seconds: f64,
    runs: usize,
) -> Result<f64> {
    if !(horizon_seconds > 0.0) {
        return Err(Error::InvalidArgument(
            "benchmark horizon must cover at least one step".into(),
        ));
    }
    let runs = runs.max(3);
    workload()?;
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t = Instant::now();
        workload()?;
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let median = if times.len() % 2 == 1 {
        times[times.len() / 2]
    } else {
        0.5 * (times[times.len() / 2 - 1] + times[times.len() / 2])
    };
    Ok(median / horizon_seconds)
}

/// Aggregate evaluation report for one model on one dataset split.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub model_id: String,
    pub dataset_id: String,
    pub n_trajectories: usize,
    pub observable: Observable,
    pub rmse: f64,
    pub mae: f64,
    pub mnad: Option<f64>,
    pub hct_seconds: f64,
    /// Per-step correlation averaged across trajectories; null where every
    /// trajectory's step was undefined.
    pub pcc_series: Vec<Option<f64>>,
}

/// Build the full report. The per-step correlation is averaged over
/// trajectories (undefined steps excluded) and the high-correlation time is
/// computed from that averaged series.
pub fn report(
    preds: &[Trajectory],
    labels: &[Trajectory],
    obs: Observable,
    threshold: f64,
    model_id: &str,
    dataset_id: &str,
) -> Result<MetricReport> {
    check_sets(preds, labels)?;
    let steps = preds[0].states.len();
    let mut sums = vec![0.0; steps];
    let mut counts = vec![0usize; steps];
    for (p, l) in preds.iter().zip(labels) {
        if p.states.len() != steps {
            return Err(Error::ShapeMismatch(
                "trajectories in the set have different lengths".into(),
            ));
        }
        for (k, val) in pcc_series(p, l, obs)?.into_iter().enumerate() {
            if let Some(v) = val {
                sums[k] += v;
                counts[k] += 1;
            }
        }
    }
    let series: Vec<Option<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c > 0 { Some(s / c as f64) } else { None })
        .collect();
    let dt = preds[0].dt;
    Ok(MetricReport {
        model_id: model_id.to_string(),
        dataset_id: dataset_id.to_string(),
        n_trajectories: preds.len(),
        observable: obs,
        rmse: rmse(preds, labels)?,
        mae: mae(preds, labels)?,
        mnad: mnad(preds, labels)?,
        hct_seconds: hct(&series, dt, threshold),
        pcc_series: series,
    })
}
