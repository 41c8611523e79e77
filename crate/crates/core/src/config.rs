//! Flat `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Recognized keys:
//!
//! ```text
//! domain          = unit_square
//! level           = 4                # simulate, energy
//! levels          = 2,3,4,5          # study
//! reference_level = 6
//! T               = 0.05
//! steps           = 64
//! samples         = 16
//! seed            = 0
//! sample_index    = 0
//! snapshot_stride = 1
//! noise           = default          # default | boundary_vanishing | none
//! noise_scale     = 1.0
//! mode.0          = rotation 0.25    # replaces the named family when present
//! mode.1          = poly(0,1,1.0;2,0,-0.5) 0.1
//! u0              = bump 64          # zero | <stream> <amplitude> | file:<path>
//! nonlinearity    = on
//! ito_correction  = on
//! noise_on        = on
//! kappa_level     = 4
//! energy_level    = 3
//! energy_steps    = 64               # coarsest step count of the energy study
//! energy_refinements = 4
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::experiments::StudyConfig;
use crate::integrator::{Flags, InitialVelocity, SimConfig, DEFAULT_U0_AMPLITUDE};
use crate::noise::{
    boundary_vanishing_specs, default_specs, ModeSpec, NoiseModel, Polynomial, StreamFunction,
};
use crate::operator_lab::{estimate_kappa, OperatorLab};

#[derive(Debug, Clone, PartialEq)]
pub enum U0Spec {
    Zero,
    Stream(ModeSpec),
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub level: usize,
    pub levels: Vec<usize>,
    pub reference_level: usize,
    pub t_final: f64,
    pub steps: usize,
    pub samples: usize,
    pub seed: u64,
    pub sample_index: u64,
    pub snapshot_stride: usize,
    pub noise_family: String,
    pub noise_scale: f64,
    pub modes: Vec<ModeSpec>,
    pub u0: U0Spec,
    pub flags: Flags,
    pub kappa_level: usize,
    pub energy_level: usize,
    pub energy_steps: usize,
    pub energy_refinements: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            level: 4,
            levels: vec![2, 3, 4, 5],
            reference_level: 6,
            t_final: 0.05,
            steps: 64,
            samples: 16,
            seed: 0,
            sample_index: 0,
            snapshot_stride: 1,
            noise_family: "default".into(),
            noise_scale: 1.0,
            modes: Vec::new(),
            u0: U0Spec::Stream(ModeSpec {
                stream: StreamFunction::Named("bump".into()),
                amplitude: DEFAULT_U0_AMPLITUDE,
            }),
            flags: Flags::default(),
            kappa_level: 4,
            energy_level: 3,
            energy_steps: 64,
            energy_refinements: 4,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn parse_switch(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected on/off, got '{v}'"))),
    }
}

/// `<stream> <amplitude>` where stream is a builtin name or `poly(i,j,c;...)`.
pub fn parse_mode(key: &str, v: &str) -> Result<ModeSpec> {
    let (stream, amp) = v.rsplit_once(char::is_whitespace).ok_or_else(|| {
        Error::Config(format!("{key}: expected '<stream> <amplitude>', got '{v}'"))
    })?;
    let stream = stream.trim();
    let amplitude: f64 = parse_num(key, amp.trim())?;
    let stream = if let Some(inner) = stream
        .strip_prefix("poly(")
        .and_then(|s| s.strip_suffix(')'))
    {
        StreamFunction::Coefficients(Polynomial::parse_coefficients(inner)?)
    } else {
        let s = StreamFunction::Named(stream.to_string());
        s.polynomial()?;
        s
    };
    Ok(ModeSpec { stream, amplitude })
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut modes: BTreeMap<usize, ModeSpec> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let key = key.trim();
            let v = value.trim();
            match key {
                "domain" => {
                    if v != "unit_square" {
                        return Err(Error::Config(format!(
                            "domain: only 'unit_square' is supported, got '{v}'"
                        )));
                    }
                }
                "level" => cfg.level = parse_num(key, v)?,
                "levels" => {
                    cfg.levels = v
                        .split(',')
                        .map(|s| parse_num(key, s.trim()))
                        .collect::<Result<Vec<usize>>>()?
                }
                "reference_level" => cfg.reference_level = parse_num(key, v)?,
                "T" => cfg.t_final = parse_num(key, v)?,
                "steps" => cfg.steps = parse_num(key, v)?,
                "samples" => cfg.samples = parse_num(key, v)?,
                "seed" => cfg.seed = parse_num(key, v)?,
                "sample_index" => cfg.sample_index = parse_num(key, v)?,
                "snapshot_stride" => cfg.snapshot_stride = parse_num(key, v)?,
                "noise" => {
                    if !["default", "boundary_vanishing", "none"].contains(&v) {
                        return Err(Error::Config(format!(
                            "noise: expected default, boundary_vanishing or none, got '{v}'"
                        )));
                    }
                    cfg.noise_family = v.into();
                }
                "noise_scale" => cfg.noise_scale = parse_num(key, v)?,
                "u0" => {
                    cfg.u0 = if v == "zero" {
                        U0Spec::Zero
                    } else if let Some(p) = v.strip_prefix("file:") {
                        U0Spec::File(PathBuf::from(p.trim()))
                    } else {
                        U0Spec::Stream(parse_mode(key, v)?)
                    }
                }
                "nonlinearity" => cfg.flags.nonlinearity = parse_switch(key, v)?,
                "ito_correction" => cfg.flags.ito_correction = parse_switch(key, v)?,
                "noise_on" => cfg.flags.noise = parse_switch(key, v)?,
                "kappa_level" => cfg.kappa_level = parse_num(key, v)?,
                "energy_level" => cfg.energy_level = parse_num(key, v)?,
                "energy_steps" => cfg.energy_steps = parse_num(key, v)?,
                "energy_refinements" => cfg.energy_refinements = parse_num(key, v)?,
                k if k.starts_with("mode.") => {
                    let idx: usize = parse_num(key, &k[5..])?;
                    if modes.insert(idx, parse_mode(key, v)?).is_some() {
                        return Err(Error::Config(format!("{key} given twice")));
                    }
                }
                _ => {
                    return Err(Error::Config(format!(
                        "line {}: unknown key '{key}'",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.modes = modes.into_values().collect();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_final > 0.0) || !self.t_final.is_finite() {
            return Err(Error::Config("T must be positive".into()));
        }
        if self.steps == 0 || self.samples == 0 || self.snapshot_stride == 0 {
            return Err(Error::Config(
                "steps, samples and snapshot_stride must be positive".into(),
            ));
        }
        if self.levels.is_empty() {
            return Err(Error::Config("levels must not be empty".into()));
        }
        if !(self.noise_scale.is_finite()) {
            return Err(Error::Config("noise_scale must be finite".into()));
        }
        if self.energy_refinements < 2 {
            return Err(Error::Config(
                "energy_refinements must be at least 2".into(),
            ));
        }
        Ok(())
    }

    /// Mode list: explicit `mode.k` entries, else the named family, scaled.
    pub fn noise_model(&self) -> Result<NoiseModel> {
        let specs = if !self.modes.is_empty() {
            self.modes.clone()
        } else {
            match self.noise_family.as_str() {
                "default" => default_specs(),
                "boundary_vanishing" => boundary_vanishing_specs(),
                _ => Vec::new(),
            }
        };
        NoiseModel::build(specs)?.scaled(self.noise_scale)
    }

    pub fn initial_velocity(&self) -> Result<InitialVelocity> {
        Ok(match &self.u0 {
            U0Spec::Zero => InitialVelocity::Zero,
            U0Spec::Stream(m) => InitialVelocity::Stream(m.clone()),
            U0Spec::File(p) => {
                InitialVelocity::Coefficients(crate::integrator::read_coefficients(p)?)
            }
        })
    }

    /// Normalized text form; equal configurations give equal strings.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        let join = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let sw = |b: bool| if b { "on" } else { "off" }.to_string();
        kv("domain", "unit_square".into());
        kv("level", self.level.to_string());
        kv("levels", join(&self.levels));
        kv("reference_level", self.reference_level.to_string());
        kv("T", format!("{:e}", self.t_final));
        kv("steps", self.steps.to_string());
        kv("samples", self.samples.to_string());
        kv("seed", self.seed.to_string());
        kv("sample_index", self.sample_index.to_string());
        kv("snapshot_stride", self.snapshot_stride.to_string());
        kv("noise", self.noise_family.clone());
        kv("noise_scale", format!("{:e}", self.noise_scale));
        for (i, m) in self.modes.iter().enumerate() {
            kv(
                &format!("mode.{i}"),
                format!("{} {:e}", m.stream, m.amplitude),
            );
        }
        kv(
            "u0",
            match &self.u0 {
                U0Spec::Zero => "zero".into(),
                U0Spec::Stream(m) => format!("{} {:e}", m.stream, m.amplitude),
                U0Spec::File(p) => format!("file:{}", p.display()),
            },
        );
        kv("nonlinearity", sw(self.flags.nonlinearity));
        kv("ito_correction", sw(self.flags.ito_correction));
        kv("noise_on", sw(self.flags.noise));
        kv("kappa_level", self.kappa_level.to_string());
        kv("energy_level", self.energy_level.to_string());
        kv("energy_steps", self.energy_steps.to_string());
        kv("energy_refinements", self.energy_refinements.to_string());
        s
    }

    /// Hex SHA-256 of the canonical form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl Config {
    /// Noise model with its smallness surrogate measured on `kappa_level`.
    pub fn noise_with_kappa(&self) -> Result<NoiseModel> {
        let mut noise = self.noise_model()?;
        let lab = OperatorLab::new(self.kappa_level);
        noise.kappa_estimate = Some(estimate_kappa(&noise, &lab, self.kappa_level)?);
        Ok(noise)
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        Ok(SimConfig {
            t_final: self.t_final,
            steps: self.steps,
            level: self.level,
            u0: self.initial_velocity()?,
            seed: self.seed,
            sample_index: self.sample_index,
            flags: self.flags,
            snapshot_stride: self.snapshot_stride,
            forcing: None,
        })
    }

    pub fn study_config(&self, noise: NoiseModel) -> Result<StudyConfig> {
        Ok(StudyConfig {
            levels: self.levels.clone(),
            reference_level: self.reference_level,
            t_final: self.t_final,
            steps: self.steps,
            samples: self.samples,
            base_seed: self.seed,
            noise,
            u0: self.initial_velocity()?,
            flags: self.flags,
            snapshot_stride: self.snapshot_stride,
        })
    }
}
