//! Run configuration as flat `section.key = value` text.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::refine::RefineConfig;
use crate::synth::{NoiseSpec, OrbitParams};

/// Scene kind produced by the `synth` command.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneKind {
    Sphere,
    BumpySphere,
}

impl FromStr for SceneKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sphere" => Ok(Self::Sphere),
            "bumpy_sphere" => Ok(Self::BumpySphere),
            _ => Err(format!("unknown scene kind {s:?} (expected sphere or bumpy_sphere)")),
        }
    }
}

impl std::fmt::Display for SceneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sphere => "sphere",
            Self::BumpySphere => "bumpy_sphere",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub scene: SceneKind,
    pub orbit: OrbitParams,
    pub noise: NoiseSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            scene: SceneKind::BumpySphere,
            orbit: OrbitParams::default(),
            noise: NoiseSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Voxel size of the noise-free reference fusion.
    pub reference_voxel_size: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            reference_voxel_size: 0.001,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,
    /// Worker threads; 0 uses all cores.
    pub threads: usize,
    pub synth: SynthConfig,
    pub refine: RefineConfig,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 0,
            synth: SynthConfig::default(),
            refine: RefineConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

macro_rules! config_keys {
    ($( $key:literal => $($field:tt).+ : $kind:ident ),* $(,)?) => {
        /// Every recognized key, in canonical order.
        pub const KEYS: &[&str] = &[$($key),*];

        impl Config {
            /// Sets one key from its text value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key {
                    $( $key => { self.$($field).+ = config_keys!(@parse $kind, key, value); } )*
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }

            /// Text value of one key.
            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $( $key => Some(self.$($field).+.to_string()), )*
                    _ => None,
                }
            }
        }
    };
    (@parse bool, $key:ident, $value:ident) => { parse_bool($key, $value)? };
    (@parse value, $key:ident, $value:ident) => { parse($key, $value)? };
}

config_keys! {
    "seed" => seed: value,
    "threads" => threads: value,
    "synth.scene" => synth.scene: value,
    "synth.views" => synth.orbit.views: value,
    "synth.radius" => synth.orbit.radius: value,
    "synth.amplitude" => synth.orbit.amplitude: value,
    "synth.frequency" => synth.orbit.frequency: value,
    "synth.distance" => synth.orbit.distance: value,
    "synth.width" => synth.orbit.width: value,
    "synth.height" => synth.orbit.height: value,
    "synth.focal" => synth.orbit.focal: value,
    "synth.depth_sigma" => synth.noise.depth_sigma: value,
    "synth.rot_sigma_deg" => synth.noise.rot_sigma_deg: value,
    "synth.trans_sigma" => synth.noise.trans_sigma: value,
    "synth.intensity_sigma" => synth.noise.intensity_sigma: value,
    "synth.bilateral" => synth.noise.bilateral: bool,
    "refine.voxel_size" => refine.voxel_size: value,
    "refine.grid_levels" => refine.grid_levels: value,
    "refine.image_levels" => refine.image_levels: value,
    "refine.t_kf" => refine.t_kf: value,
    "refine.t_best" => refine.t_best: value,
    "refine.t_sv" => refine.t_sv: value,
    "refine.trunc_multiplier" => refine.trunc_multiplier: value,
    "refine.t_shell_coarse" => refine.t_shell.0: value,
    "refine.t_shell_fine" => refine.t_shell.1: value,
    "refine.lambda_g" => refine.weights.lambda_g: value,
    "refine.lambda_v_start" => refine.weights.lambda_v.0: value,
    "refine.lambda_v_end" => refine.weights.lambda_v.1: value,
    "refine.lambda_s_start" => refine.weights.lambda_s.0: value,
    "refine.lambda_s_end" => refine.weights.lambda_s.1: value,
    "refine.lambda_a" => refine.weights.lambda_a: value,
    "refine.t_rob" => refine.weights.t_rob: value,
    "refine.lambda_diffuse" => refine.lambda_diffuse: value,
    "refine.lm_iterations" => refine.lm_iterations: value,
    "refine.optimize_poses" => refine.optimize_poses: bool,
    "refine.optimize_intrinsics" => refine.optimize_intrinsics: bool,
    "solver.initial_damping" => refine.solver.initial_damping: value,
    "solver.damping_increase" => refine.solver.damping_increase: value,
    "solver.damping_decrease" => refine.solver.damping_decrease: value,
    "solver.gradient_tolerance" => refine.solver.gradient_tolerance: value,
    "solver.relative_cost_tolerance" => refine.solver.relative_cost_tolerance: value,
    "solver.cg_tolerance" => refine.solver.cg_tolerance: value,
    "solver.cg_max_iterations" => refine.solver.cg_max_iterations: value,
    "solver.cg_failure_residual" => refine.solver.cg_failure_residual: value,
    "eval.reference_voxel_size" => eval.reference_voxel_size: value,
}

impl Config {
    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    /// Every key with its value, one per line; parses back to an equal config.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.refine.validate()?;
        let o = &self.synth.orbit;
        if o.views == 0 || o.width == 0 || o.height == 0 {
            return Err(Error::Config("synth views and image size must be positive".into()));
        }
        if !(o.radius > 0.0 && o.distance > o.radius && o.focal > 0.0) {
            return Err(Error::Config(
                "synth radius and focal length must be positive, cameras outside the object".into(),
            ));
        }
        if !(self.eval.reference_voxel_size > 0.0) {
            return Err(Error::Config("eval.reference_voxel_size must be positive".into()));
        }
        Ok(())
    }
}
