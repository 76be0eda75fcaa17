//! Plain-text run configuration: `[section]` headers with `key = value`
//! lines. Unknown keys are hard errors, and every offending line is reported
//! at once so typos cannot silently fall back to defaults.

use std::path::{Path, PathBuf};

use crate::datagen::DatasetSpec;
use crate::equations::{EquationSystem, FlowKind, Forcing};
use crate::error::{Error, Result};
use crate::fluxblock::{AblationSwitches, SpectralHyper};
use crate::training::TrainConfig;

/// Everything one run needs: dataset recipe, model layout, ablation switches,
/// training hyperparameters, and output plumbing.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub out: PathBuf,
    pub seed: u64,
    pub threads: usize,
    pub dataset: DatasetSpec,
    pub hyper: SpectralHyper,
    /// Temporal-correction interval.
    pub k_c: usize,
    pub with_corrector: bool,
    pub switches: AblationSwitches,
    pub train: TrainConfig,
    /// Steps for the rollout command when not given on the command line.
    pub rollout_steps: usize,
    /// Correlation threshold for the high-correlation time.
    pub pcc_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out: PathBuf::from("out"),
            seed: 0,
            threads: 1,
            dataset: DatasetSpec {
                system: EquationSystem::burgers(0.05).expect("valid default"),
                fine_nx: 100,
                fine_ny: 100,
                lx: 2.0 * std::f64::consts::PI,
                ly: 2.0 * std::f64::consts::PI,
                fine_dt: 1e-3,
                spatial_factor: 4,
                temporal_factor: 4,
                warmup: 0.1,
                steps: 1800,
                train_count: 5,
                test_count: 10,
                train_seed: 0,
                test_seed: 1000,
                ic_band_low: 3,
                ic_band_high: 6,
                ic_amplitude: 1.0,
            },
            hyper: SpectralHyper::default(),
            k_c: 4,
            with_corrector: false,
            switches: AblationSwitches::default(),
            train: TrainConfig::default(),
            rollout_steps: 100,
            pcc_threshold: 0.8,
        }
    }
}

/// Raw per-kind physics knobs collected during parsing; the equation system
/// is assembled once every key has been seen.
#[derive(Debug, Clone)]
struct SystemDraft {
    kind: FlowKind,
    viscosity: Option<f64>,
    reynolds: Option<f64>,
    diffusivity: Option<f64>,
    forcing: Forcing,
}

impl SystemDraft {
    fn from_system(sys: &EquationSystem) -> Self {
        SystemDraft {
            kind: sys.kind,
            viscosity: Some(sys.viscosity),
            reynolds: None,
            diffusivity: sys.diffusivity,
            forcing: sys.forcing.unwrap_or_default(),
        }
    }

    fn build(&self) -> Result<EquationSystem> {
        let nu = match (self.reynolds, self.viscosity) {
            (Some(re), _) => 1.0 / re,
            (None, Some(nu)) => nu,
            (None, None) => {
                return Err(Error::Config(
                    "system needs either reynolds or viscosity".into(),
                ))
            }
        };
        match self.kind {
            FlowKind::Burgers => EquationSystem::burgers(nu),
            FlowKind::Decaying => EquationSystem::decaying(1.0 / nu),
            FlowKind::Forced => EquationSystem::forced(1.0 / nu, self.forcing),
            FlowKind::Shear => {
                EquationSystem::shear(1.0 / nu, self.diffusivity.unwrap_or(1e-3))
            }
        }
    }
}

struct Parser {
    cfg: RunConfig,
    system: SystemDraft,
    offenders: Vec<String>,
}

impl Parser {
    fn complain(&mut self, line_no: usize, msg: String) {
        self.offenders.push(format!("line {line_no}: {msg}"));
    }

    fn apply(&mut self, line_no: usize, section: &str, key: &str, value: &str) {
        macro_rules! set {
            ($field:expr, $ty:ty) => {
                match value.parse::<$ty>() {
                    Ok(v) => $field = v,
                    Err(e) => self.complain(
                        line_no,
                        format!("{section}.{key}: cannot parse {value:?}: {e}"),
                    ),
                }
            };
        }
        macro_rules! set_opt {
            ($field:expr, $ty:ty) => {
                match value.parse::<$ty>() {
                    Ok(v) => $field = Some(v),
                    Err(e) => self.complain(
                        line_no,
                        format!("{section}.{key}: cannot parse {value:?}: {e}"),
                    ),
                }
            };
        }
        match (section, key) {
            ("run", "out") => self.cfg.out = PathBuf::from(value),
            ("run", "seed") => set!(self.cfg.seed, u64),
            ("run", "threads") => set!(self.cfg.threads, usize),
            ("run", "rollout_steps") => set!(self.cfg.rollout_steps, usize),
            ("run", "pcc_threshold") => set!(self.cfg.pcc_threshold, f64),

            ("system", "kind") => match FlowKind::parse(value) {
                Ok(k) => self.system.kind = k,
                Err(e) => self.complain(line_no, format!("system.kind: {e}")),
            },
            ("system", "viscosity") => set_opt!(self.system.viscosity, f64),
            ("system", "reynolds") => set_opt!(self.system.reynolds, f64),
            ("system", "diffusivity") => set_opt!(self.system.diffusivity, f64),
            ("system", "forcing_amplitude") => set!(self.system.forcing.amplitude, f64),
            ("system", "forcing_wavenumber") => set!(self.system.forcing.wavenumber, f64),
            ("system", "forcing_drag") => set!(self.system.forcing.drag, f64),

            ("dataset", "fine_nx") => set!(self.cfg.dataset.fine_nx, usize),
            ("dataset", "fine_ny") => set!(self.cfg.dataset.fine_ny, usize),
            ("dataset", "lx") => set!(self.cfg.dataset.lx, f64),
            ("dataset", "ly") => set!(self.cfg.dataset.ly, f64),
            ("dataset", "fine_dt") => set!(self.cfg.dataset.fine_dt, f64),
            ("dataset", "spatial_factor") => set!(self.cfg.dataset.spatial_factor, usize),
            ("dataset", "temporal_factor") => set!(self.cfg.dataset.temporal_factor, usize),
            ("dataset", "warmup") => set!(self.cfg.dataset.warmup, f64),
            ("dataset", "steps") => set!(self.cfg.dataset.steps, usize),
            ("dataset", "train_count") => set!(self.cfg.dataset.train_count, usize),
            ("dataset", "test_count") => set!(self.cfg.dataset.test_count, usize),
            ("dataset", "train_seed") => set!(self.cfg.dataset.train_seed, u64),
            ("dataset", "test_seed") => set!(self.cfg.dataset.test_seed, u64),
            ("dataset", "ic_band_low") => set!(self.cfg.dataset.ic_band_low, usize),
            ("dataset", "ic_band_high") => set!(self.cfg.dataset.ic_band_high, usize),
            ("dataset", "ic_amplitude") => set!(self.cfg.dataset.ic_amplitude, f64),

            ("model", "layers") => set!(self.cfg.hyper.layers, usize),
            ("model", "channels") => set!(self.cfg.hyper.channels, usize),
            ("model", "k_max") => set!(self.cfg.hyper.k_max, usize),
            ("model", "init_scale") => set!(self.cfg.hyper.init_scale, f64),
            ("model", "k_c") => set!(self.cfg.k_c, usize),
            ("model", "corrector") => set!(self.cfg.with_corrector, bool),

            ("ablation", "physics") => set!(self.cfg.switches.enable_physics, bool),
            ("ablation", "learnable") => set!(self.cfg.switches.enable_learnable, bool),
            ("ablation", "spectral") => set!(self.cfg.switches.enable_spectral, bool),
            ("ablation", "temporal") => {
                set!(self.cfg.switches.enable_temporal_correction, bool)
            }

            ("train", "learning_rate") => set!(self.cfg.train.learning_rate, f64),
            ("train", "epochs") => set!(self.cfg.train.epochs, usize),
            ("train", "batch_size") => set!(self.cfg.train.batch_size, usize),
            ("train", "sample_length") => set!(self.cfg.train.sample_length, usize),
            ("train", "seed") => set!(self.cfg.train.seed, u64),
            ("train", "grad_clip") => set_opt!(self.cfg.train.grad_clip, f64),
            ("train", "checkpoint_interval") => {
                set!(self.cfg.train.checkpoint_interval, usize)
            }
            ("train", "threads") => set!(self.cfg.train.threads, usize),

            _ => self.complain(line_no, format!("unknown key {section}.{key}")),
        }
    }
}

/// Parse configuration text over the defaults. Every unknown key and
/// unparsable value is collected and reported together.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let base = RunConfig::default();
    let system = SystemDraft::from_system(&base.dataset.system);
    let mut p = Parser { cfg: base, system, offenders: Vec::new() };
    let mut section = String::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(inner) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            section = inner.trim().to_string();
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) => {
                if section.is_empty() {
                    p.complain(line_no, format!("key {} appears before any [section]", k.trim()));
                } else {
                    let section = section.clone();
                    p.apply(line_no, &section, k.trim(), v.trim());
                }
            }
            None => p.complain(line_no, format!("not a key = value pair: {line:?}")),
        }
    }
    if !p.offenders.is_empty() {
        return Err(Error::Config(p.offenders.join("; ")));
    }
    p.cfg.dataset.system = p.system.build()?;
    p.cfg.train.switches = p.cfg.switches;
    p.cfg.validate()?;
    Ok(p.cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.hyper.validate()?;
        self.switches.validate()?;
        self.train.validate()?;
        if self.threads == 0 {
            return Err(Error::Config("run.threads must be >= 1".into()));
        }
        if self.with_corrector && self.k_c < 2 {
            return Err(Error::Config(
                "model.k_c must be >= 2 when the corrector is enabled".into(),
            ));
        }
        Ok(())
    }

    /// Render the effective configuration, defaults included, in the same
    /// format `parse_config` reads; used for the per-run config echo.
    pub fn to_text(&self) -> String {
        let sys = &self.dataset.system;
        let mut s = String::new();
        s.push_str("[run]\n");
        s.push_str(&format!("out = {}\n", self.out.display()));
        s.push_str(&format!("seed = {}\n", self.seed));
        s.push_str(&format!("threads = {}\n", self.threads));
        s.push_str(&format!("rollout_steps = {}\n", self.rollout_steps));
        s.push_str(&format!("pcc_threshold = {}\n\n", self.pcc_threshold));

        s.push_str("[system]\n");
        s.push_str(&format!("kind = {}\n", sys.kind.name()));
        s.push_str(&format!("viscosity = {}\n", sys.viscosity));
        if let Some(d) = sys.diffusivity {
            s.push_str(&format!("diffusivity = {d}\n"));
        }
        if let Some(f) = sys.forcing {
            s.push_str(&format!("forcing_amplitude = {}\n", f.amplitude));
            s.push_str(&format!("forcing_wavenumber = {}\n", f.wavenumber));
            s.push_str(&format!("forcing_drag = {}\n", f.drag));
        }
        s.push('\n');

        let d = &self.dataset;
        s.push_str("[dataset]\n");
        s.push_str(&format!("fine_nx = {}\n", d.fine_nx));
        s.push_str(&format!("fine_ny = {}\n", d.fine_ny));
        s.push_str(&format!("lx = {}\n", d.lx));
        s.push_str(&format!("ly = {}\n", d.ly));
        s.push_str(&format!("fine_dt = {}\n", d.fine_dt));
        s.push_str(&format!("spatial_factor = {}\n", d.spatial_factor));
        s.push_str(&format!("temporal_factor = {}\n", d.temporal_factor));
        s.push_str(&format!("warmup = {}\n", d.warmup));
        s.push_str(&format!("steps = {}\n", d.steps));
        s.push_str(&format!("train_count = {}\n", d.train_count));
        s.push_str(&format!("test_count = {}\n", d.test_count));
        s.push_str(&format!("train_seed = {}\n", d.train_seed));
        s.push_str(&format!("test_seed = {}\n", d.test_seed));
        s.push_str(&format!("ic_band_low = {}\n", d.ic_band_low));
        s.push_str(&format!("ic_band_high = {}\n", d.ic_band_high));
        s.push_str(&format!("ic_amplitude = {}\n\n", d.ic_amplitude));

        s.push_str("[model]\n");
        s.push_str(&format!("layers = {}\n", self.hyper.layers));
        s.push_str(&format!("channels = {}\n", self.hyper.channels));
        s.push_str(&format!("k_max = {}\n", self.hyper.k_max));
        s.push_str(&format!("init_scale = {}\n", self.hyper.init_scale));
        s.push_str(&format!("k_c = {}\n", self.k_c));
        s.push_str(&format!("corrector = {}\n\n", self.with_corrector));

        s.push_str("[ablation]\n");
        s.push_str(&format!("physics = {}\n", self.switches.enable_physics));
        s.push_str(&format!("learnable = {}\n", self.switches.enable_learnable));
        s.push_str(&format!("spectral = {}\n", self.switches.enable_spectral));
        s.push_str(&format!(
            "temporal = {}\n\n",
            self.switches.enable_temporal_correction
        ));

        let t = &self.train;
        s.push_str("[train]\n");
        s.push_str(&format!("learning_rate = {}\n", t.learning_rate));
        s.push_str(&format!("epochs = {}\n", t.epochs));
        s.push_str(&format!("batch_size = {}\n", t.batch_size));
        s.push_str(&format!("sample_length = {}\n", t.sample_length));
        s.push_str(&format!("seed = {}\n", t.seed));
        if let Some(c) = t.grad_clip {
            s.push_str(&format!("grad_clip = {c}\n"));
        }
        s.push_str(&format!("checkpoint_interval = {}\n", t.checkpoint_interval));
        s.push_str(&format!("threads = {}\n", t.threads));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        let parsed = parse_config(&cfg.to_text()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn overrides_are_applied() {
        let text = "
[system]
kind = forced
reynolds = 100
forcing_drag = 0.2

[dataset]
fine_nx = 128
fine_ny = 128
steps = 320
temporal_factor = 32

[model]
corrector = true

[train]
epochs = 7
";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.dataset.system.kind, FlowKind::Forced);
        assert!((cfg.dataset.system.viscosity - 0.01).abs() < 1e-15);
        assert_eq!(cfg.dataset.system.forcing.unwrap().drag, 0.2);
        assert_eq!(cfg.dataset.fine_nx, 128);
        assert_eq!(cfg.train.epochs, 7);
        assert!(cfg.with_corrector);
        // round trip of the modified config too
        assert_eq!(parse_config(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_all_reported() {
        let text = "
[run]
seed = 1
sed = 2
[dataset]
fine_nx = 64
fine_nz = 64
[typo_section]
x = 1
";
        let err = parse_config(text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("run.sed"), "{msg}");
        assert!(msg.contains("dataset.fine_nz"), "{msg}");
        assert!(msg.contains("typo_section.x"), "{msg}");
        assert!(!msg.contains("fine_nx ="), "{msg}");
    }

    #[test]
    fn bad_values_and_stray_lines_are_reported() {
        let text = "
seed = 1
[train]
epochs = many
batch_size
";
        let err = parse_config(text).unwrap_err().to_string();
        assert!(err.contains("before any [section]"), "{err}");
        assert!(err.contains("train.epochs"), "{err}");
        assert!(err.contains("batch_size"), "{err}");
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let text = "
# a comment
[run]
seed = 9   # trailing comment
";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn semantic_validation_runs_after_parsing() {
        let text = "
[dataset]
fine_nx = 100
spatial_factor = 3
";
        assert!(parse_config(text).is_err());
    }
}
