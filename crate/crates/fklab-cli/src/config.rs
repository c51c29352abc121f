use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fklab_core::dynamics::{NonlinearitySpec, ThetaProfile};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Typical,
    Linear,
}

impl Nonlinearity {
    pub fn spec(self) -> NonlinearitySpec {
        match self {
            Nonlinearity::Typical => NonlinearitySpec::typical(),
            Nonlinearity::Linear => NonlinearitySpec::linear(),
        }
    }
}

/// Named initial profiles, scaled by `amplitude`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// `1 + cos πx`.
    Bump,
    /// `cos(πx/2) + x/2`, made boundary-compatible before use.
    Cosine,
    /// Leading eigenvector of `A(θ(σ0))`, normalized to sup norm 1.
    Mode,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialData {
    pub preset: Preset,
    pub amplitude: f64,
    pub sigma0: f64,
}

impl Default for InitialData {
    fn default() -> Self {
        InitialData {
            preset: Preset::Bump,
            amplitude: 0.1,
            sigma0: 0.5,
        }
    }
}

/// `count` equispaced values from `start` to `end` inclusive, written `a:b:k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ThetaSweep {
    pub start: f64,
    pub end: f64,
    pub count: usize,
}

impl ThetaSweep {
    pub fn values(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![self.start];
        }
        let step = (self.end - self.start) / (self.count - 1) as f64;
        (0..self.count).map(|k| self.start + k as f64 * step).collect()
    }
}

impl FromStr for ThetaSweep {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        let [a, b, k] = parts[..] else {
            return Err(format!("theta sweep `{s}` is not of the form start:end:count"));
        };
        let num = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("theta sweep `{s}`: {e}"));
        Ok(ThetaSweep {
            start: num(a)?,
            end: num(b)?,
            count: k.trim().parse().map_err(|e| format!("theta sweep `{s}`: {e}"))?,
        })
    }
}

impl TryFrom<String> for ThetaSweep {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<ThetaSweep> for String {
    fn from(s: ThetaSweep) -> String {
        s.to_string()
    }
}

impl fmt::Display for ThetaSweep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}:{:?}:{}", self.start, self.end, self.count)
    }
}

/// Sample points `r e^{iφ}` for the resolvent command, moduli log-spaced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SectorGrid {
    pub angles: Vec<f64>,
    pub min_modulus: f64,
    pub max_modulus: f64,
    pub moduli: usize,
}

impl Default for SectorGrid {
    fn default() -> Self {
        SectorGrid {
            angles: vec![-0.75 * PI, 0.0, 0.75 * PI],
            min_modulus: 0.1,
            max_modulus: 1e3,
            moduli: 10,
        }
    }
}

impl SectorGrid {
    pub fn modulus_values(&self) -> Vec<f64> {
        if self.moduli == 1 {
            return vec![self.min_modulus];
        }
        let (a, b) = (self.min_modulus.ln(), self.max_modulus.ln());
        (0..self.moduli)
            .map(|k| (a + (b - a) * k as f64 / (self.moduli - 1) as f64).exp())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub n: usize,
    pub theta: f64,
    pub theta_sweep: Option<ThetaSweep>,
    /// Eigenvalues compared against the oracle per θ.
    pub modes: usize,
    pub profile: ThetaProfile,
    /// Replaces `profile` by a constant θ when set.
    pub frozen_theta: Option<f64>,
    pub nonlinearity: Nonlinearity,
    pub initial: InitialData,
    pub p: f64,
    pub q: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub dt: f64,
    /// Row stride of the simulate table.
    pub sample_every: usize,
    pub resolvent: SectorGrid,
    pub seed: u64,
    /// Worker threads; 0 lets the pool pick.
    pub jobs: usize,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n: 200,
            theta: 0.5,
            theta_sweep: None,
            modes: 3,
            profile: ThetaProfile::default(),
            frozen_theta: None,
            nonlinearity: Nonlinearity::Typical,
            initial: InitialData::default(),
            p: 2.0,
            q: 2.0,
            horizon: 0.05,
            dt: 5e-4,
            sample_every: 1,
            resolvent: SectorGrid::default(),
            seed: 20240611,
            jobs: 0,
            out: PathBuf::from("fklab-out"),
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn validate(&self) -> Result<(), String> {
        let unit = |t: f64| (0.0..=1.0).contains(&t);
        check(self.n.is_multiple_of(2) && (8..=2000).contains(&self.n), || {
            format!("n = {} must be even and within [8, 2000]", self.n)
        })?;
        check(unit(self.theta), || format!("theta = {} outside [0, 1]", self.theta))?;
        if let Some(s) = self.theta_sweep {
            check(unit(s.start) && unit(s.end) && (1..=1000).contains(&s.count), || {
                format!("theta sweep {s} needs endpoints in [0, 1] and 1..=1000 points")
            })?;
        }
        if let Some(t) = self.frozen_theta {
            check(unit(t), || format!("frozen theta = {t} outside [0, 1]"))?;
        }
        check((1..=50).contains(&self.modes), || {
            format!("modes = {} outside [1, 50]", self.modes)
        })?;
        self.profile.validate().map_err(|e| e.to_string())?;
        for (name, v) in [("p", self.p), ("q", self.q)] {
            check(v.is_finite() && v > 1.0, || {
                format!("{name} = {v} must be finite and > 1")
            })?;
        }
        check(
            self.dt > 0.0 && self.horizon >= self.dt && self.horizon <= 100.0,
            || format!("need 0 < dt <= T <= 100, got dt = {}, T = {}", self.dt, self.horizon),
        )?;
        let steps = (self.horizon / self.dt).round();
        check((steps * self.dt - self.horizon).abs() <= 1e-9 * self.horizon, || {
            format!("T = {} is not a multiple of dt = {}", self.horizon, self.dt)
        })?;
        check(self.sample_every >= 1, || "sample_every must be >= 1".into())?;
        let init = &self.initial;
        check(init.amplitude.is_finite() && init.sigma0.is_finite(), || {
            "initial amplitude and sigma0 must be finite".into()
        })?;
        let r = &self.resolvent;
        check(!r.angles.is_empty() && r.angles.iter().all(|a| a.abs() < PI), || {
            "resolvent angles must be non-empty and inside (-pi, pi)".into()
        })?;
        check(
            r.min_modulus > 0.0 && r.max_modulus >= r.min_modulus && r.max_modulus.is_finite() && r.moduli >= 1,
            || "resolvent moduli need 0 < min <= max and at least one point".into(),
        )?;
        check(self.jobs <= 256, || format!("jobs = {} exceeds 256", self.jobs))
    }

    pub fn thetas(&self) -> Vec<f64> {
        self.theta_sweep.map_or_else(|| vec![self.theta], |s| s.values())
    }

    pub fn profile(&self) -> ThetaProfile {
        self.frozen_theta
            .map_or(self.profile, |theta| ThetaProfile::Constant { theta })
    }

    /// Config echo for outputs; leaves out settings that must not change results.
    pub fn echo(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = v.as_object_mut() {
            map.remove("out");
            map.remove("jobs");
        }
        v
    }
}
