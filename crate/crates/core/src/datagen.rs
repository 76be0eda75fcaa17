//! Reference-data production: band-limited random initial conditions, warmup,
//! fine-grid DNS runs, and coarse-grained train/test datasets on disk.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::equations::EquationSystem;
use crate::error::{Error, Result};
use crate::grid::{downsample_spatial, downsample_temporal, FieldState, Grid, Trajectory};
use crate::io::save_trajectory;
use crate::solver::{classical_step, classical_rollout, project_state};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetSpec {
    pub system: EquationSystem,
    pub fine_nx: usize,
    pub fine_ny: usize,
    pub lx: f64,
    pub ly: f64,
    pub fine_dt: f64,
    pub spatial_factor: usize,
    pub temporal_factor: usize,
    /// Warmup duration in seconds; the warmed-up segment is discarded.
    pub warmup: f64,
    /// Recorded fine steps after warmup.
    pub steps: usize,
    pub train_count: usize,
    pub test_count: usize,
    /// First seed of the training split; seeds are consecutive.
    pub train_seed: u64,
    /// First seed of the testing split; seeds are consecutive.
    pub test_seed: u64,
    /// Inclusive integer-shell band that carries the initial energy.
    pub ic_band_low: usize,
    pub ic_band_high: usize,
    /// Target RMS of each initial velocity channel.
    pub ic_amplitude: f64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.spatial_factor == 0 || self.temporal_factor == 0 {
            return Err(Error::InvalidArgument("downsample factors must be >= 1".into()));
        }
        if self.fine_nx % self.spatial_factor != 0 || self.fine_ny % self.spatial_factor != 0 {
            return Err(Error::InvalidArgument(format!(
                "fine grid {}x{} is not divisible by the spatial factor {}",
                self.fine_nx, self.fine_ny, self.spatial_factor
            )));
        }
        if !(self.warmup >= 0.0) {
            return Err(Error::InvalidArgument("warmup must be >= 0".into()));
        }
        if !(self.fine_dt > 0.0) {
            return Err(Error::InvalidArgument("fine dt must be > 0".into()));
        }
        if self.ic_band_low == 0 || self.ic_band_high < self.ic_band_low {
            return Err(Error::InvalidArgument(format!(
                "initial-condition band [{}, {}] is invalid",
                self.ic_band_low, self.ic_band_high
            )));
        }
        if !(self.ic_amplitude > 0.0) {
            return Err(Error::InvalidArgument("ic amplitude must be > 0".into()));
        }
        self.fine_grid()?;
        self.seed_ranges_disjoint()?;
        Ok(())
    }

    pub fn fine_grid(&self) -> Result<Grid> {
        Grid::new(self.fine_nx, self.fine_ny, self.lx, self.ly)
    }

    pub fn coarse_grid(&self) -> Result<Grid> {
        Grid::new(
            self.fine_nx / self.spatial_factor,
            self.fine_ny / self.spatial_factor,
            self.lx,
            self.ly,
        )
    }

    pub fn coarse_dt(&self) -> f64 {
        self.fine_dt * self.temporal_factor as f64
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup / self.fine_dt).round() as usize
    }

    pub fn train_seeds(&self) -> Vec<u64> {
        (0..self.train_count as u64).map(|i| self.train_seed + i).collect()
    }

    pub fn test_seeds(&self) -> Vec<u64> {
        (0..self.test_count as u64).map(|i| self.test_seed + i).collect()
    }

    fn seed_ranges_disjoint(&self) -> Result<()> {
        let train = self.train_seeds();
        for s in self.test_seeds() {
            if train.contains(&s) {
                return Err(Error::InvalidArgument(format!(
                    "seed {s} appears in both the train and test splits"
                )));
            }
        }
        Ok(())
    }
}

/// One standard normal draw (Box–Muller over the ChaCha stream).
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Smooth weight over the configured band: zero at the edges, one mid-band.
fn band_weight(shell: f64, low: f64, high: f64) -> f64 {
    if shell < low || shell > high {
        return 0.0;
    }
    let t = (shell - low + 0.5) / (high - low + 1.0);
    (std::f64::consts::PI * t).sin()
}

fn random_channel(rng: &mut ChaCha8Rng, grid: &Grid, low: usize, high: usize, amp: f64) -> Array2<f64> {
    let mut field = Array2::<f64>::zeros((grid.ny, grid.nx));
    let kmax = high as isize;
    for ky in -kmax..=kmax {
        for kx in 0..=kmax {
            // one half-plane is enough for a real field; skip the conjugate
            // duplicates on the kx = 0 axis
            if kx == 0 && ky <= 0 {
                continue;
            }
            let shell = ((kx * kx + ky * ky) as f64).sqrt();
            let w = band_weight(shell.round(), low as f64, high as f64);
            if w == 0.0 {
                continue;
            }
            let a = w * gaussian(rng);
            let phase = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
            let fx = 2.0 * std::f64::consts::PI * kx as f64 / grid.lx;
            let fy = 2.0 * std::f64::consts::PI * ky as f64 / grid.ly;
            for j in 0..grid.ny {
                let y = grid.y_center(j);
                for i in 0..grid.nx {
                    let x = grid.x_center(i);
                    field[[j, i]] += a * (fx * x + fy * y + phase).cos();
                }
            }
        }
    }
    let rms = (field.iter().map(|x| x * x).sum::<f64>() / field.len() as f64).sqrt();
    if rms > 0.0 {
        field.mapv_inplace(|x| x * amp / rms);
    }
    field
}

/// Band-limited Gaussian random field per channel, divergence-free for the
/// NSE kinds; a pure function of the seed.
pub fn random_initial_condition(seed: u64, spec: &DatasetSpec) -> Result<FieldState> {
    let grid = spec.fine_grid()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = random_channel(&mut rng, &grid, spec.ic_band_low, spec.ic_band_high, spec.ic_amplitude);
    let v = random_channel(&mut rng, &grid, spec.ic_band_low, spec.ic_band_high, spec.ic_amplitude);
    let mut channels = vec![
        (crate::grid::CH_U.to_string(), u),
        (crate::grid::CH_V.to_string(), v),
    ];
    if spec.system.kind.has_scalar() {
        let s = random_channel(
            &mut rng,
            &grid,
            spec.ic_band_low,
            spec.ic_band_high,
            spec.ic_amplitude,
        );
        channels.push((crate::grid::CH_S.to_string(), s));
    }
    let state = FieldState::new(grid, channels)?;
    if spec.system.kind.is_nse() {
        project_state(&state, 1.0)
    } else {
        Ok(state)
    }
}

/// IC, discarded warmup, recorded fine DNS, and its coarse-grained twin.
pub fn generate_trajectory(seed: u64, spec: &DatasetSpec) -> Result<(Trajectory, Trajectory)> {
    spec.validate()?;
    let mut state = random_initial_condition(seed, spec)?;
    let warmup_steps = spec.warmup_steps();
    for k in 0..warmup_steps {
        state = classical_step(&state, &spec.system, spec.fine_dt).map_err(|e| match e {
            Error::Diverged { detail, .. } => Error::Diverged {
                step: k,
                detail: format!("during warmup: {detail}, max |field| {:.3e}", state.max_abs()),
            },
            other => other,
        })?;
    }
    let fine = classical_rollout(&state, &spec.system, spec.fine_dt, spec.steps)?;
    let coarse_states: Vec<FieldState> = fine
        .states
        .iter()
        .map(|s| downsample_spatial(s, spec.spatial_factor))
        .collect::<Result<_>>()?;
    let coarse_full = Trajectory::new(coarse_states, fine.dt, fine.t0)?;
    let coarse = downsample_temporal(&coarse_full, spec.temporal_factor)?;
    Ok((fine, coarse))
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub seed: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub train: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

fn build_split(
    dir: &Path,
    split: &str,
    seeds: &[u64],
    spec: &DatasetSpec,
) -> Result<Vec<ManifestEntry>> {
    let split_dir = dir.join(split);
    std::fs::create_dir_all(&split_dir)?;
    let mut entries = Vec::with_capacity(seeds.len());
    for (i, &seed) in seeds.iter().enumerate() {
        let (_, coarse) = generate_trajectory(seed, spec)?;
        let file = format!("{split}/{i:03}.ldfv");
        let path = dir.join(&file);
        save_trajectory(&path, &coarse)?;
        entries.push(ManifestEntry { file, seed, sha256: sha256_file(&path)? });
    }
    Ok(entries)
}

/// Generate the full dataset directory: manifest.json plus per-trajectory
/// coarse files under train/ and test/, from disjoint seed splits.
pub fn build_dataset(spec: &DatasetSpec, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    spec.validate()?;
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let manifest = Manifest {
        spec: spec.clone(),
        train: build_split(dir, "train", &spec.train_seeds(), spec)?,
        test: build_split(dir, "test", &spec.test_seeds(), spec)?,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}

pub fn load_manifest(dataset_dir: impl AsRef<Path>) -> Result<Manifest> {
    let text = std::fs::read_to_string(dataset_dir.as_ref().join("manifest.json"))?;
    Ok(serde_json::from_str(&text)?)
}

/// Load one split ("train" or "test") of a dataset directory.
pub fn load_split(dataset_dir: impl AsRef<Path>, split: &str) -> Result<Vec<Trajectory>> {
    let dir = dataset_dir.as_ref();
    let manifest = load_manifest(dir)?;
    let entries = match split {
        "train" => &manifest.train,
        "test" => &manifest.test,
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown split {other:?}; expected train or test"
            )))
        }
    };
    entries
        .iter()
        .map(|e| crate::io::load_trajectory(dir.join(&e.file)))
        .collect()
}

pub fn dataset_paths(dataset_dir: impl AsRef<Path>, manifest: &Manifest) -> Vec<PathBuf> {
    let dir = dataset_dir.as_ref();
    manifest
        .train
        .iter()
        .chain(&manifest.test)
        .map(|e| dir.join(&e.file))
        .collect()
}
