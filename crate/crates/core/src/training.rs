//! Training: sample construction from coarse trajectories, autoregressive
//! rollouts of the learned solver, the rollout MSE loss, reverse-mode
//! gradients through the unrolled solver, Adam updates, and the fit loop.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::engine::{Engine, TapeEngine};
use crate::equations::EquationSystem;
use crate::error::{Error, Result};
use crate::fluxblock::{AblationSwitches, ModelParams, ModelVars, SpectralHyper};
use crate::grid::{FieldState, Trajectory};
use crate::solver::{download_state, upload_state, LearnedFlux, StateVars};
use crate::temporal::{step_hybrid, HistoryBuffer};

/// One training sample: an initial state and the next k_s coarse states.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub initial: FieldState,
    /// Reference states at steps 1 ..= k_s after the initial state.
    pub labels: Vec<FieldState>,
    pub source_id: usize,
    /// Index of the initial state within the source trajectory.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Sample length k_s: labelled steps per sample.
    pub sample_length: usize,
    pub seed: u64,
    pub switches: AblationSwitches,
    /// Optional global-norm gradient clip.
    pub grad_clip: Option<f64>,
    /// Epochs between intermediate checkpoints; 0 keeps only the final one.
    pub checkpoint_interval: usize,
    /// Batch-parallel gradient workers; 1 is fully serial.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            epochs: 500,
            batch_size: 20,
            sample_length: 32,
            seed: 0,
            switches: AblationSwitches::default(),
            grad_clip: None,
            checkpoint_interval: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be > 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.sample_length == 0 {
            return Err(Error::InvalidArgument(
                "epochs, batch size, and sample length must be >= 1".into(),
            ));
        }
        if self.threads == 0 {
            return Err(Error::InvalidArgument("threads must be >= 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::InvalidArgument("gradient clip must be > 0".into()));
            }
        }
        self.switches.validate()
    }
}

/// Partition a trajectory into non-overlapping samples of length k_s; the
/// trailing remainder is dropped.
pub fn make_samples(traj: &Trajectory, k_s: usize, source_id: usize) -> Result<Vec<TrainSample>> {
    if k_s == 0 {
        return Err(Error::InvalidArgument("sample length must be >= 1".into()));
    }
    let n = traj.states.len();
    if n < k_s + 1 {
        return Err(Error::InvalidArgument(format!(
            "trajectory has {n} states; need at least {} for sample length {k_s}",
            k_s + 1
        )));
    }
    let count = (n - 1) / k_s;
    let mut out = Vec::with_capacity(count);
    for j in 0..count {
        let offset = j * k_s;
        out.push(TrainSample {
            initial: traj.states[offset].clone(),
            labels: traj.states[offset + 1..=offset + k_s].to_vec(),
            source_id,
            offset,
        });
    }
    Ok(out)
}

/// Roll the learned solver forward on any engine, returning states 1..=steps.
#[allow(clippy::too_many_arguments)]
pub fn rollout_vars<E: Engine>(
    e: &E,
    initial: &StateVars<E::T>,
    steps: usize,
    vars: &ModelVars<E::T>,
    k_c: usize,
    hyper: &SpectralHyper,
    sys: &EquationSystem,
    switches: &AblationSwitches,
    dt: f64,
) -> Result<Vec<StateVars<E::T>>> {
    let flux = LearnedFlux { vars, hyper: *hyper, switches: *switches };
    let correcting = switches.enable_temporal_correction && vars.corrector.is_some();
    let mut buffer = HistoryBuffer::new(if correcting { k_c } else { 2 }, initial.grid)?;
    let mut out = Vec::with_capacity(steps);
    let mut state = initial.clone();
    for k in 1..=steps {
        state = step_hybrid(
            e,
            &state,
            k,
            &mut buffer,
            sys,
            &flux,
            vars.corrector.as_ref(),
            hyper,
            switches,
            dt,
        )
        .map_err(|err| match err {
            Error::Diverged { step, detail } => Error::Diverged {
                step: k,
                detail: format!("{detail} (RK4 stage {step})"),
            },
            other => other,
        })?;
        out.push(state.clone());
    }
    Ok(out)
}

/// Autoregressive rollout of the learned solver; returns states 1..=steps.
pub fn rollout(
    initial: &FieldState,
    steps: usize,
    params: &ModelParams,
    sys: &EquationSystem,
    switches: &AblationSwitches,
    dt: f64,
) -> Result<Vec<FieldState>> {
    let e = crate::engine::RawEngine;
    let vars = params.upload(&e, false);
    let init = upload_state(&e, initial);
    let states = rollout_vars(
        &e,
        &init,
        steps,
        &vars,
        params.k_c,
        &params.hyper,
        sys,
        switches,
        dt,
    )?;
    states.iter().map(|s| download_state(&e, s)).collect()
}

/// Mean squared error over time steps, channels, and cells of one rollout.
pub fn loss(pred: &[FieldState], labels: &[FieldState]) -> Result<f64> {
    if pred.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "prediction has {} states, labels {}",
            pred.len(),
            labels.len()
        )));
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for (p, l) in pred.iter().zip(labels) {
        if p.grid != l.grid {
            return Err(Error::GridMismatch);
        }
        if p.num_channels() != l.num_channels() {
            return Err(Error::ShapeMismatch("channel count mismatch".into()));
        }
        for ((_, a), (_, b)) in p.channels().zip(l.channels()) {
            for (x, y) in a.iter().zip(b.iter()) {
                let d = x - y;
                acc += d * d;
            }
            count += a.len();
        }
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(acc / count as f64)
}

/// Gradients in the canonical named-tensor order.
pub type GradientSet = Vec<(String, ArrayD<f64>)>;

fn zero_gradients(params: &ModelParams) -> GradientSet {
    params
        .named_tensors()
        .into_iter()
        .map(|(name, t)| (name, ArrayD::zeros(t.raw_dim())))
        .collect()
}

/// Loss and reverse-mode gradients for one sample.
fn sample_gradients(
    sample: &TrainSample,
    params: &ModelParams,
    sys: &EquationSystem,
    switches: &AblationSwitches,
    dt: f64,
) -> Result<(GradientSet, f64)> {
    if sample.labels.is_empty() {
        return Ok((zero_gradients(params), 0.0));
    }
    let tape = TapeEngine::new();
    let vars = params.upload(&tape, true);
    let init = upload_state(&tape, &sample.initial);
    let states = rollout_vars(
        &tape,
        &init,
        sample.labels.len(),
        &vars,
        params.k_c,
        &params.hyper,
        sys,
        switches,
        dt,
    )?;
    let mut acc = None;
    let mut count = 0usize;
    for (s, lab) in states.iter().zip(&sample.labels) {
        if s.grid != lab.grid {
            return Err(Error::GridMismatch);
        }
        for (ch, (_, arr)) in s.channels.iter().zip(lab.channels()) {
            let diff = tape.sub(ch, &tape.constant(arr.clone().into_dyn()));
            let ss = tape.sum_sq(&diff);
            acc = Some(match acc {
                Some(a) => tape.add(&a, &ss),
                None => ss,
            });
            count += arr.len();
        }
    }
    let loss_node = tape.scale(&acc.expect("non-empty labels"), 1.0 / count as f64);
    let loss_val = tape.value(&loss_node)[IxDyn(&[])];
    let grads = tape.backward(loss_node);
    let mut out = Vec::new();
    for (name, var) in vars.leaves() {
        let shape = tape.value(&var).raw_dim();
        let g = grads
            .get(var)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(shape));
        if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient(format!(
                "gradient of {name} contains {bad}"
            )));
        }
        out.push((name, g));
    }
    Ok((out, loss_val))
}

/// Batch loss and gradients: the mean over samples of each sample's loss and
/// gradient. Samples are evaluated batch-parallel across `threads` workers and
/// reduced in a fixed sample order.
pub fn gradients(
    batch: &[TrainSample],
    params: &ModelParams,
    sys: &EquationSystem,
    switches: &AblationSwitches,
    dt: f64,
    threads: usize,
) -> Result<(GradientSet, f64)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let per_sample: Vec<Result<(GradientSet, f64)>> = if threads <= 1 || batch.len() == 1 {
        batch
            .iter()
            .map(|s| sample_gradients(s, params, sys, switches, dt))
            .collect()
    } else {
        let workers = threads.min(batch.len());
        let mut slots: Vec<Option<Result<(GradientSet, f64)>>> = Vec::new();
        slots.resize_with(batch.len(), || None);
        std::thread::scope(|scope| {
            let mut handles = Vec::with_capacity(workers);
            for w in 0..workers {
                handles.push(scope.spawn(move || {
                    let mut mine = Vec::new();
                    for (i, s) in batch.iter().enumerate() {
                        if i % workers == w {
                            mine.push((i, sample_gradients(s, params, sys, switches, dt)));
                        }
                    }
                    mine
                }));
            }
            for h in handles {
                for (i, r) in h.join().expect("gradient worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots.into_iter().map(|s| s.expect("all slots filled")).collect()
    };

    let inv_b = 1.0 / batch.len() as f64;
    let mut total: Option<GradientSet> = None;
    let mut loss_sum = 0.0;
    for r in per_sample {
        let (gs, lv) = r?;
        loss_sum += lv * inv_b;
        match &mut total {
            None => {
                total = Some(
                    gs.into_iter()
                        .map(|(name, g)| (name, g.mapv(|x| x * inv_b)))
                        .collect(),
                );
            }
            Some(acc) => {
                for ((_, a), (_, g)) in acc.iter_mut().zip(&gs) {
                    a.zip_mut_with(g, |x, y| *x += y * inv_b);
                }
            }
        }
    }
    Ok((total.expect("non-empty batch"), loss_sum))
}

/// Adam first/second-moment state, one pair per named tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    names: Vec<String>,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let tensors = params.named_tensors();
        AdamState {
            step: 0,
            names: tensors.iter().map(|(n, _)| n.clone()).collect(),
            m: tensors.iter().map(|(_, t)| ArrayD::zeros(t.raw_dim())).collect(),
            v: tensors.iter().map(|(_, t)| ArrayD::zeros(t.raw_dim())).collect(),
        }
    }
}

/// One bias-corrected Adam step, in place.
pub fn adam_update(
    params: &mut ModelParams,
    grads: &GradientSet,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    let mut tensors = params.named_tensors_mut();
    if tensors.len() != grads.len() || tensors.len() != state.names.len() {
        return Err(Error::ShapeMismatch(format!(
            "parameter/gradient/moment counts differ: {} / {} / {}",
            tensors.len(),
            grads.len(),
            state.names.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, (name, p)) in tensors.iter_mut().enumerate() {
        let (gname, g) = &grads[i];
        if gname != name || g.shape() != p.shape() {
            return Err(Error::ShapeMismatch(format!(
                "gradient {gname} {:?} does not match parameter {name} {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        m.zip_mut_with(g, |mi, gi| *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi);
        v.zip_mut_with(g, |vi, gi| *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi);
        for ((pi, mi), vi) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            *pi -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

fn clip_gradients(grads: &mut GradientSet, clip: f64) {
    let norm = grads
        .iter()
        .map(|(_, g)| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > clip {
        let s = clip / norm;
        for (_, g) in grads.iter_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub wall_ms: f64,
}

#[derive(Debug)]
pub struct FitOutcome {
    pub params: ModelParams,
    pub history: Vec<LossRecord>,
    pub checkpoint: PathBuf,
}

/// Full training loop: deterministic seeded shuffling, batched Adam updates,
/// a streamed loss-history CSV, periodic checkpoints, and a final checkpoint.
/// On divergence the last finite parameter set is written to
/// `last_good.ldfv` before the error is returned.
pub fn fit(
    trajs: &[Trajectory],
    sys: &EquationSystem,
    init: ModelParams,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<FitOutcome> {
    config.validate()?;
    if trajs.is_empty() {
        return Err(Error::InvalidArgument("empty training dataset".into()));
    }
    let dt = trajs[0].dt;
    for t in trajs {
        if t.dt != dt {
            return Err(Error::InvalidArgument(
                "training trajectories disagree on dt".into(),
            ));
        }
    }
    let mut samples = Vec::new();
    for (id, t) in trajs.iter().enumerate() {
        samples.extend(make_samples(t, config.sample_length, id)?);
    }

    std::fs::create_dir_all(out_dir)?;
    let mut csv = std::io::BufWriter::new(std::fs::File::create(out_dir.join("loss.csv"))?);
    writeln!(csv, "epoch,batch,loss,wall_ms")?;

    let hyper = init.hyper;
    let k_c = init.k_c;
    let with_corrector = init.corrector.is_some();
    let meta = move |step: u64| CheckpointMeta {
        hyper,
        k_c,
        with_corrector,
        kind: sys.kind.name().to_string(),
        seed: config.seed,
        step,
    };

    let mut params = init;
    params.check_finite()?;
    let mut last_good = params.clone();
    let mut adam = AdamState::new(&params);
    let mut history = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut indices: Vec<usize> = (0..samples.len()).collect();

    let abort = |last_good: &ModelParams, step: u64, err: Error| -> Error {
        let path = out_dir.join("last_good.ldfv");
        if let Err(e) = save_checkpoint(&path, last_good, &meta(step)) {
            return Error::InvalidArgument(format!(
                "training diverged ({err}) and the fallback checkpoint failed: {e}"
            ));
        }
        err
    };

    for epoch in 0..config.epochs {
        indices.shuffle(&mut rng);
        for (batch_idx, chunk) in indices.chunks(config.batch_size).enumerate() {
            let started = Instant::now();
            let batch: Vec<TrainSample> =
                chunk.iter().map(|&i| samples[i].clone()).collect();
            let (mut grads, loss_val) = gradients(
                &batch,
                &params,
                sys,
                &config.switches,
                dt,
                config.threads,
            )
            .map_err(|e| abort(&last_good, adam.step, e))?;
            if let Some(c) = config.grad_clip {
                clip_gradients(&mut grads, c);
            }
            adam_update(&mut params, &grads, &mut adam, config.learning_rate)?;
            params
                .check_finite()
                .map_err(|e| abort(&last_good, adam.step, e))?;
            last_good = params.clone();
            let wall_ms = started.elapsed().as_secs_f64() * 1e3;
            history.push(LossRecord { epoch, batch: batch_idx, loss: loss_val, wall_ms });
            writeln!(csv, "{epoch},{batch_idx},{loss_val},{wall_ms}")?;
        }
        csv.flush()?;
        if config.checkpoint_interval > 0 && (epoch + 1) % config.checkpoint_interval == 0 {
            let path = out_dir.join(format!("ckpt_{:05}.ldfv", epoch + 1));
            save_checkpoint(&path, &params, &meta(adam.step))?;
        }
    }
    csv.flush()?;
    let checkpoint = out_dir.join("final.ldfv");
    save_checkpoint(&checkpoint, &params, &meta(adam.step))?;
    Ok(FitOutcome { params, history, checkpoint })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::solver::classical_rollout;
    use ndarray::Array2;
    use rand::Rng;

    fn grid(n: usize) -> Grid {
        Grid::new(n, n, 2.0 * std::f64::consts::PI, 2.0 * std::f64::consts::PI).unwrap()
    }

    fn marker_traj(n_states: usize, dt: f64) -> Trajectory {
        let g = grid(8);
        let states = (0..n_states)
            .map(|i| {
                FieldState::velocity(
                    g,
                    Array2::from_elem((8, 8), i as f64),
                    Array2::zeros((8, 8)),
                )
                .unwrap()
            })
            .collect();
        Trajectory::new(states, dt, 0.0).unwrap()
    }

    fn random_state(g: Grid, seed: u64, amp: f64) -> FieldState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Array2::from_shape_fn((g.ny, g.nx), |_| rng.gen_range(-amp..amp));
        let v = Array2::from_shape_fn((g.ny, g.nx), |_| rng.gen_range(-amp..amp));
        FieldState::velocity(g, u, v).unwrap()
    }

    #[test]
    fn make_samples_window_bookkeeping() {
        let traj = marker_traj(41, 0.1);
        let samples = make_samples(&traj, 20, 3).unwrap();
        assert_eq!(samples.len(), 2);
        for (j, s) in samples.iter().enumerate() {
            assert_eq!(s.source_id, 3);
            assert_eq!(s.offset, j * 20);
            assert_eq!(s.labels.len(), 20);
            assert_eq!(s.initial.channel("u").unwrap()[[0, 0]], (j * 20) as f64);
            for (k, lab) in s.labels.iter().enumerate() {
                assert_eq!(lab.channel("u").unwrap()[[0, 0]], (j * 20 + k + 1) as f64);
            }
        }

        let samples = make_samples(&marker_traj(21, 0.1), 20, 0).unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].labels[19].channel("u").unwrap()[[0, 0]], 20.0);

        // Table-scale arithmetic: 2401 states, windows of 32
        let count = (2401 - 1) / 32;
        assert_eq!(count, 75);
    }

    #[test]
    fn make_samples_rejects_short_trajectories() {
        assert!(make_samples(&marker_traj(20, 0.1), 20, 0).is_err());
    }

    #[test]
    fn rollout_zero_steps_is_empty() {
        let sys = EquationSystem::burgers(0.05).unwrap();
        let hyper = SpectralHyper { layers: 1, channels: 2, k_max: 2, init_scale: 1e-3 };
        let params = ModelParams::init(1, hyper, 4, false).unwrap();
        let init = random_state(grid(16), 2, 0.5);
        let out = rollout(&init, 0, &params, &sys, &AblationSwitches::default(), 1e-3).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn zero_weight_rollout_matches_classical_bitwise() {
        for sys in [
            EquationSystem::burgers(0.05).unwrap(),
            EquationSystem::decaying(200.0).unwrap(),
        ] {
            let hyper = SpectralHyper { layers: 1, channels: 2, k_max: 2, init_scale: 0.0 };
            let params = ModelParams::zeros(hyper, 4, true).unwrap();
            let g = grid(16);
            let init = crate::solver::project_state(&random_state(g, 5, 0.3), 1.0).unwrap();
            let dt = 1e-3;
            let steps = 6;
            let learned =
                rollout(&init, steps, &params, &sys, &AblationSwitches::default(), dt).unwrap();
            let classical = classical_rollout(&init, &sys, dt, steps).unwrap();
            assert_eq!(learned.len(), steps);
            for (k, pred) in learned.iter().enumerate() {
                let truth = &classical.states[k + 1];
                for ((_, a), (_, b)) in pred.channels().zip(truth.channels()) {
                    for (x, y) in a.iter().zip(b.iter()) {
                        assert_eq!(x.to_bits(), y.to_bits(), "step {}", k + 1);
                    }
                }
            }
        }
    }

    #[test]
    fn single_step_rollout_matches_hybrid_step() {
        let sys = EquationSystem::burgers(0.05).unwrap();
        let hyper = SpectralHyper { layers: 1, channels: 2, k_max: 2, init_scale: 1e-3 };
        let params = ModelParams::init(7, hyper, 4, false).unwrap();
        let init = random_state(grid(16), 8, 0.4);
        let dt = 1e-3;
        let out = rollout(&init, 1, &params, &sys, &AblationSwitches::default(), dt).unwrap();
        assert_eq!(out.len(), 1);

        let e = crate::engine::RawEngine;
        let vars = params.upload(&e, false);
        let flux = LearnedFlux {
            vars: &vars,
            hyper,
            switches: AblationSwitches::default(),
        };
        let sv = upload_state(&e, &init);
        let expected = crate::solver::step_projected(&e, &sv, &sys, &flux, dt).unwrap();
        let expected = download_state(&e, &expected).unwrap();
        for ((_, a), (_, b)) in out[0].channels().zip(expected.channels()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn loss_oracles() {
        let g = grid(8);
        let s1 = random_state(g, 1, 1.0);
        assert_eq!(loss(&[s1.clone()], &[s1.clone()]).unwrap(), 0.0);

        let shifted = FieldState::velocity(
            g,
            s1.channel("u").unwrap() + 0.5,
            s1.channel("v").unwrap() + 0.5,
        )
        .unwrap();
        let l = loss(&[s1.clone()], &[shifted]).unwrap();
        assert!((l - 0.25).abs() < 1e-14);

        // hand-computed toy case on a 4x4 single pair
        let a = Array2::from_shape_fn((4, 4), |(j, i)| (j * 4 + i) as f64);
        let b = Array2::from_shape_fn((4, 4), |(j, i)| (j * 4 + i) as f64 * 2.0);
        let g4 = Grid::new(4, 4, 1.0, 1.0).unwrap();
        let p = FieldState::velocity(g4, a.clone(), Array2::zeros((4, 4))).unwrap();
        let q = FieldState::velocity(g4, b, Array2::zeros((4, 4))).unwrap();
        // squared error = sum over u of (i)^2 (v channel identical) / 32
        let expected: f64 = (0..16).map(|i| (i as f64).powi(2)).sum::<f64>() / 32.0;
        assert!((loss(&[p], &[q]).unwrap() - expected).abs() < 1e-12);

        // shape mismatch
        assert!(loss(&[s1], &[]).is_err());
    }

    fn fd_check(params: &ModelParams, sys: &EquationSystem, sample: &TrainSample, dt: f64, coords_per_tensor: usize) {
        let switches = AblationSwitches::default();
        let (grads, _) = gradients(
            std::slice::from_ref(sample),
            params,
            sys,
            &switches,
            dt,
            1,
        )
        .unwrap();
        let eval = |p: &ModelParams| {
            let pred = rollout(&sample.initial, sample.labels.len(), p, sys, &switches, dt)
                .unwrap();
            loss(&pred, &sample.labels).unwrap()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let eps = 1e-6;
        for (name, g) in &grads {
            let picks = coords_per_tensor.min(g.len());
            for _ in 0..picks {
                let flat = rng.gen_range(0..g.len());
                let ix: Vec<usize> = {
                    let mut rem = flat;
                    let mut out = vec![0; g.ndim()];
                    for (d, &s) in g.shape().iter().enumerate().rev() {
                        out[d] = rem % s;
                        rem /= s;
                    }
                    out
                };
                let bump = |delta: f64| {
                    let mut p2 = params.clone();
                    for (n2, t) in p2.named_tensors_mut() {
                        if &n2 == name {
                            t[IxDyn(&ix)] += delta;
                        }
                    }
                    eval(&p2)
                };
                let fd = (bump(eps) - bump(-eps)) / (2.0 * eps);
                let got = g[IxDyn(&ix)];
                let denom = fd.abs().max(got.abs()).max(1e-7);
                assert!(
                    (got - fd).abs() / denom < 1e-4,
                    "{name}[{ix:?}]: grad {got} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_through_full_rollout() {
        // forced flow exercises the Poisson solve, the forcing terms, the
        // flux block, and the temporal correction in one backward pass
        let g = grid(16);
        let sys = EquationSystem::forced(100.0, Default::default()).unwrap();
        let hyper = SpectralHyper { layers: 1, channels: 2, k_max: 2, init_scale: 1e-2 };
        let params = ModelParams::init(21, hyper, 2, true).unwrap();
        let init = crate::solver::project_state(&random_state(g, 22, 0.4), 1.0).unwrap();
        let labels: Vec<FieldState> = classical_rollout(&init, &sys, 1e-2, 3)
            .unwrap()
            .states[1..]
            .to_vec();
        let sample = TrainSample { initial: init, labels, source_id: 0, offset: 0 };
        fd_check(&params, &sys, &sample, 1e-2, 3);
    }

    #[test]
    fn gradients_match_finite_differences_burgers() {
        let g = grid(16);
        let sys = EquationSystem::burgers(0.05).unwrap();
        let hyper = SpectralHyper { layers: 2, channels: 2, k_max: 2, init_scale: 1e-2 };
        let params = ModelParams::init(31, hyper, 2, false).unwrap();
        let init = random_state(g, 32, 0.4);
        let labels: Vec<FieldState> =
            classical_rollout(&init, &sys, 1e-2, 2).unwrap().states[1..].to_vec();
        let sample = TrainSample { initial: init, labels, source_id: 0, offset: 0 };
        fd_check(&params, &sys, &sample, 1e-2, 3);
    }

    #[test]
    fn zero_length_labels_give_zero_gradients() {
        let sys = EquationSystem::burgers(0.05).unwrap();
        let hyper = SpectralHyper { layers: 1, channels: 2, k_max: 2, init_scale: 1e-3 };
        let params = ModelParams::init(1, hyper, 2, false).unwrap();
        let sample = TrainSample {
            initial: random_state(grid(16), 2, 0.5),
            labels: vec![],
            source_id: 0,
            offset: 0,
        };
        let (grads, l) = gradients(
            &[sample],
            &params,
            &sys,
            &AblationSwitches::default(),
            1e-3,
            1,
        )
        .unwrap();
        assert_eq!(l, 0.0);
        assert!(grads.iter().all(|(_, g)| g.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn doubling_the_error_doubles_the_gradients() {
        let g = grid(16);
        let sys = EquationSystem::burgers(0.05).unwrap();
        let hyper = SpectralHyper { layers: 1, channels: 2, k_max: 2, init_scale: 1e-2 };
        let params = ModelParams::init(41, hyper, 2, false).unwrap();
        let init = random_state(g, 42, 0.4);
        let switches = AblationSwitches::default();
        let dt = 1e-2;
        let pred = rollout(&init, 2, &params, &sys, &switches, dt).unwrap();
        let labels1: Vec<FieldState> =
            classical_rollout(&init, &sys, dt, 2).unwrap().states[1..].to_vec();
        // labels2 = 2 * labels1 - pred doubles the pointwise error
        let labels2: Vec<FieldState> = labels1
            .iter()
            .zip(&pred)
            .map(|(l, p)| {
                FieldState::velocity(
                    g,
                    &(l.channel("u").unwrap() * 2.0) - p.channel("u").unwrap(),
                    &(l.channel("v").unwrap() * 2.0) - p.channel("v").unwrap(),
                )
                .unwrap()
            })
            .collect();
        let s1 = TrainSample { initial: init.clone(), labels: labels1, source_id: 0, offset: 0 };
        let s2 = TrainSample { initial: init, labels: labels2, source_id: 0, offset: 0 };
        let (g1, l1) = gradients(&[s1], &params, &sys, &switches, dt, 1).unwrap();
        let (g2, l2) = gradients(&[s2], &params, &sys, &switches, dt, 1).unwrap();
        assert!((l2 - 4.0 * l1).abs() <= 1e-12 * l1.abs().max(1e-30) * 4.0 + 1e-30);
        for ((_, a), (_, b)) in g1.iter().zip(&g2) {
            for (x, y) in a.iter().zip(b.iter()) {
                let scale = x.abs().max(y.abs()).max(1e-300);
                assert!((y - 2.0 * x).abs() / scale < 1e-11, "{y} vs 2*{x}");
            }
        }
    }

    #[test]
    fn parallel_gradients_match_serial() {
        let g = grid(16);
        let sys = EquationSystem::burgers(0.05).unwrap();
        let hyper = SpectralHyper { layers: 1, channels: 2, k_max: 2, init_scale: 1e-2 };
        let params = ModelParams::init(51, hyper, 2, false).unwrap();
        let switches = AblationSwitches::default();
        let dt = 1e-2;
        let batch: Vec<TrainSample> = (0..4)
            .map(|i| {
                let init = random_state(g, 60 + i, 0.4);
                let labels =
                    classical_rollout(&init, &sys, dt, 2).unwrap().states[1..].to_vec();
                TrainSample { initial: init, labels, source_id: i as usize, offset: 0 }
            })
            .collect();
        let (gs, ls) = gradients(&batch, &params, &sys, &switches, dt, 1).unwrap();
        let (gp, lp) = gradients(&batch, &params, &sys, &switches, dt, 3).unwrap();
        assert!((ls - lp).abs() <= 1e-12 * ls.abs());
        for ((_, a), (_, b)) in gs.iter().zip(&gp) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-300));
            }
        }
    }

    #[test]
    fn adam_single_step_oracle() {
        let hyper = SpectralHyper { layers: 1, channels: 1, k_max: 1, init_scale: 0.0 };
        let mut params = ModelParams::zeros(hyper, 2, false).unwrap();
        let mut adam = AdamState::new(&params);
        let lr = 1e-3;
        let grads: GradientSet = params
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, ArrayD::from_elem(t.raw_dim(), 0.5)))
            .collect();
        adam_update(&mut params, &grads, &mut adam, lr).unwrap();
        // from zero moments: m = (1-b1) g, v = (1-b2) g^2; bias correction
        // recovers mhat = g, vhat = g^2, so the step is -lr * g / (|g| + eps)
        let g0 = 0.5_f64;
        let expected = -lr * g0 / (g0.abs() + ADAM_EPS);
        for (_, t) in params.named_tensors() {
            for &x in t.iter() {
                assert!((x - expected).abs() < 1e-15, "{x} vs {expected}");
            }
        }
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn adam_zero_gradient_is_a_noop() {
        let hyper = SpectralHyper { layers: 1, channels: 2, k_max: 2, init_scale: 1e-2 };
        let mut params = ModelParams::init(71, hyper, 2, false).unwrap();
        let before: Vec<ArrayD<f64>> =
            params.named_tensors().iter().map(|(_, t)| (*t).clone()).collect();
        let grads: GradientSet = params
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, ArrayD::zeros(t.raw_dim())))
            .collect();
        let mut adam = AdamState::new(&params);
        adam_update(&mut params, &grads, &mut adam, 1e-3).unwrap();
        for ((_, t), b) in params.named_tensors().iter().zip(&before) {
            for (x, y) in t.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    fn tiny_fit_setup() -> (Vec<Trajectory>, EquationSystem, ModelParams, TrainConfig) {
        let g = grid(8);
        let sys = EquationSystem::burgers(0.05).unwrap();
        let dt = 1e-2;
        let init = random_state(g, 80, 0.4);
        let traj = classical_rollout(&init, &sys, dt, 8).unwrap();
        let hyper = SpectralHyper { layers: 1, channels: 2, k_max: 2, init_scale: 1e-2 };
        let params = ModelParams::init(81, hyper, 2, false).unwrap();
        let config = TrainConfig {
            learning_rate: 1e-3,
            epochs: 2,
            batch_size: 2,
            sample_length: 2,
            seed: 3,
            threads: 1,
            ..TrainConfig::default()
        };
        (vec![traj], sys, params, config)
    }

    #[test]
    fn fit_bookkeeping_and_checkpoint_round_trip() {
        let (trajs, sys, params, config) = tiny_fit_setup();
        let dir = tempfile::tempdir().unwrap();
        let outcome = fit(&trajs, &sys, params, &config, dir.path()).unwrap();
        // 4 samples, batches of 2, 2 epochs -> 4 records
        assert_eq!(outcome.history.len(), 4);
        let csv = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,batch,loss,wall_ms");
        assert_eq!(lines.len(), 5);

        let (loaded, m) = crate::checkpoint::load_checkpoint(&outcome.checkpoint).unwrap();
        assert_eq!(m.step, 4);
        assert_eq!(m.kind, "burgers");
        for ((_, a), (_, b)) in outcome.params.named_tensors().iter().zip(loaded.named_tensors())
        {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn fit_is_deterministic_for_fixed_seed() {
        let (trajs, sys, params, config) = tiny_fit_setup();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let o1 = fit(&trajs, &sys, params.clone(), &config, d1.path()).unwrap();
        let o2 = fit(&trajs, &sys, params, &config, d2.path()).unwrap();
        for ((_, a), (_, b)) in o1.params.named_tensors().iter().zip(o2.params.named_tensors()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        for (r1, r2) in o1.history.iter().zip(&o2.history) {
            assert_eq!(r1.loss.to_bits(), r2.loss.to_bits());
        }
    }
}
