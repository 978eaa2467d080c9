//! Point-mass world with scripted velocity fields. A composite skill's
//! controller is the sum of its subskills' fields, so composition is exact.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Trajectory;
use crate::noise::NoiseSource;
use crate::objectives::CompositionSpec;
use crate::tensor::Tensor;

pub const D_STATE: usize = 2;
pub const D_ACTION: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointMassConfig {
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_t", rename = "T")]
    pub t: usize,
    #[serde(default = "default_obs_noise")]
    pub obs_noise_std: f64,
}

fn default_dt() -> f64 {
    0.05
}
fn default_t() -> usize {
    50
}
fn default_obs_noise() -> f64 {
    0.01
}

impl Default for PointMassConfig {
    fn default() -> Self {
        PointMassConfig {
            dt: default_dt(),
            t: default_t(),
            obs_noise_std: default_obs_noise(),
        }
    }
}

impl PointMassConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::Config(format!("dt must be > 0, got {}", self.dt)));
        }
        if self.t == 0 {
            return Err(Error::Config("T must be at least 1".into()));
        }
        if !(self.obs_noise_std.is_finite() && self.obs_noise_std >= 0.0) {
            return Err(Error::Config(format!(
                "obs_noise_std must be >= 0, got {}",
                self.obs_noise_std
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
}

/// Commanded velocity as a function of the 0-based step index and state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum VelocityField {
    Constant { vx: f64, vy: f64 },
    /// `amplitude · sin(2π · frequency · t · dt)` along `axis`, zero on the other.
    Sinusoid { axis: Axis, amplitude: f64, frequency: f64 },
}

impl VelocityField {
    pub fn eval(&self, t: usize, dt: f64, _state: &[f64]) -> [f64; 2] {
        match *self {
            VelocityField::Constant { vx, vy } => [vx, vy],
            VelocityField::Sinusoid {
                axis,
                amplitude,
                frequency,
            } => {
                let v = amplitude * (2.0 * PI * frequency * t as f64 * dt).sin();
                match axis {
                    Axis::X => [v, 0.0],
                    Axis::Y => [0.0, v],
                }
            }
        }
    }

    fn is_finite(&self) -> bool {
        match *self {
            VelocityField::Constant { vx, vy } => vx.is_finite() && vy.is_finite(),
            VelocityField::Sinusoid {
                amplitude, frequency, ..
            } => amplitude.is_finite() && frequency.is_finite(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubskillSpec {
    pub skill_id: String,
    pub velocity_field: VelocityField,
}

impl SubskillSpec {
    pub fn new(skill_id: impl Into<String>, velocity_field: VelocityField) -> Self {
        SubskillSpec {
            skill_id: skill_id.into(),
            velocity_field,
        }
    }
}

/// Sum of velocity fields.
#[derive(Clone, Debug, PartialEq)]
pub struct Controller(pub Vec<VelocityField>);

impl Controller {
    pub fn eval(&self, t: usize, dt: f64, state: &[f64]) -> [f64; 2] {
        self.0.iter().fold([0.0, 0.0], |acc, f| {
            let v = f.eval(t, dt, state);
            [acc[0] + v[0], acc[1] + v[1]]
        })
    }
}

impl From<VelocityField> for Controller {
    fn from(f: VelocityField) -> Self {
        Controller(vec![f])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub subskills: Vec<SubskillSpec>,
    pub compositions: Vec<CompositionSpec>,
    pub demos_per_skill: usize,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.subskills.is_empty() {
            return Err(Error::Validation("manifest declares no subskills".into()));
        }
        if self.demos_per_skill == 0 {
            return Err(Error::Validation("demos_per_skill must be at least 1".into()));
        }
        let mut ids: Vec<&str> = Vec::new();
        for s in &self.subskills {
            if s.skill_id.is_empty() {
                return Err(Error::Validation("empty skill id".into()));
            }
            if ids.contains(&s.skill_id.as_str()) {
                return Err(Error::Validation(format!("subskill '{}' declared twice", s.skill_id)));
            }
            if !s.velocity_field.is_finite() {
                return Err(Error::Validation(format!(
                    "subskill '{}' has non-finite field parameters",
                    s.skill_id
                )));
            }
            ids.push(&s.skill_id);
        }
        for c in &self.compositions {
            c.validate()?;
            if ids.contains(&c.composite_id.as_str()) {
                return Err(Error::Validation(format!(
                    "composite '{}' reuses an existing skill id",
                    c.composite_id
                )));
            }
            for id in &c.subskill_ids {
                if !self.subskills.iter().any(|s| &s.skill_id == id) {
                    return Err(Error::Validation(format!(
                        "composition '{}' references undeclared subskill '{id}'",
                        c.composite_id
                    )));
                }
            }
            ids.push(&c.composite_id);
        }
        Ok(())
    }

    pub fn subskill(&self, id: &str) -> Option<&SubskillSpec> {
        self.subskills.iter().find(|s| s.skill_id == id)
    }

    /// Labels in generation order: subskills, then composites.
    pub fn skill_ids(&self) -> Vec<&str> {
        self.subskills
            .iter()
            .map(|s| s.skill_id.as_str())
            .chain(self.compositions.iter().map(|c| c.composite_id.as_str()))
            .collect()
    }

    fn controller(&self, id: &str) -> Controller {
        if let Some(s) = self.subskill(id) {
            return s.velocity_field.into();
        }
        let comp = self
            .compositions
            .iter()
            .find(|c| c.composite_id == id)
            .expect("validated skill id");
        Controller(
            comp.subskill_ids
                .iter()
                .map(|s| self.subskill(s).expect("validated subskill").velocity_field)
                .collect(),
        )
    }
}

fn default_subskills() -> Vec<SubskillSpec> {
    vec![
        SubskillSpec::new("move_right", VelocityField::Constant { vx: 1.0, vy: 0.0 }),
        SubskillSpec::new("move_up", VelocityField::Constant { vx: 0.0, vy: 1.0 }),
        SubskillSpec::new(
            "oscillate_x",
            VelocityField::Sinusoid {
                axis: Axis::X,
                amplitude: 1.0,
                frequency: 1.0,
            },
        ),
    ]
}

pub const DEFAULT_DEMOS_PER_SKILL: usize = 16;

/// Named task presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    /// Three subskills and the composite of all three.
    DiagWiggle,
    /// `move_right` and `move_up` and their composite.
    Diag,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diag_wiggle" => Ok(Task::DiagWiggle),
            "diag" => Ok(Task::Diag),
            _ => Err(Error::InvalidInput(format!("unknown task '{s}'"))),
        }
    }
}

impl Task {
    pub fn manifest(self, demos_per_skill: usize, seed: u64) -> DatasetManifest {
        let all = default_subskills();
        let (subskills, comp) = match self {
            Task::DiagWiggle => (
                all,
                CompositionSpec {
                    composite_id: "diag_wiggle".into(),
                    subskill_ids: vec!["move_right".into(), "move_up".into(), "oscillate_x".into()],
                },
            ),
            Task::Diag => (
                all.into_iter().take(2).collect(),
                CompositionSpec {
                    composite_id: "diag".into(),
                    subskill_ids: vec!["move_right".into(), "move_up".into()],
                },
            ),
        };
        DatasetManifest {
            subskills,
            compositions: vec![comp],
            demos_per_skill,
            seed,
        }
    }
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Task::DiagWiggle.manifest(DEFAULT_DEMOS_PER_SKILL, 0)
    }
}

/// Euler rollout `s_{t+1} = s_t + dt·a_t + ε_t` with `a_t = field(t, s_t)`.
pub fn simulate(config: &PointMassConfig, controller: &Controller, s1: [f64; 2], seed: u64) -> Result<Trajectory> {
    simulate_labeled(config, controller, s1, &mut NoiseSource::new(seed), "")
}

fn simulate_labeled(
    config: &PointMassConfig,
    controller: &Controller,
    s1: [f64; 2],
    noise: &mut NoiseSource,
    label: &str,
) -> Result<Trajectory> {
    config.validate()?;
    let t_len = config.t;
    let mut states = Vec::with_capacity(t_len * D_STATE);
    let mut actions = Vec::with_capacity(t_len * D_ACTION);
    let mut s = s1;
    for t in 0..t_len {
        let a = controller.eval(t, config.dt, &s);
        if !(a[0].is_finite() && a[1].is_finite()) {
            return Err(Error::Simulation {
                step: t,
                message: format!("controller returned ({}, {})", a[0], a[1]),
            });
        }
        states.extend_from_slice(&s);
        actions.extend_from_slice(&a);
        if t + 1 < t_len {
            for d in 0..D_STATE {
                s[d] += config.dt * a[d] + config.obs_noise_std * noise.normal();
            }
        }
    }
    Trajectory::new(
        Tensor::from_vec(t_len, D_STATE, states),
        Tensor::from_vec(t_len, D_ACTION, actions),
        label,
    )
}

/// Labeled trajectories plus the compositions they were generated for.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub compositions: Vec<CompositionSpec>,
}

impl Dataset {
    pub fn by_skill(&self, id: &str) -> Vec<&Trajectory> {
        self.trajectories.iter().filter(|t| t.skill_id == id).collect()
    }

    pub fn skill_counts(&self) -> BTreeMap<&str, usize> {
        let mut m = BTreeMap::new();
        for t in &self.trajectories {
            *m.entry(t.skill_id.as_str()).or_insert(0) += 1;
        }
        m
    }

    /// Every skill referenced by a composition has at least one demonstration.
    pub fn validate(&self) -> Result<()> {
        let counts = self.skill_counts();
        for c in &self.compositions {
            c.validate()?;
            for id in &c.subskill_ids {
                if !counts.contains_key(id.as_str()) {
                    return Err(Error::Validation(format!(
                        "dataset has no demonstration of subskill '{id}' used by '{}'",
                        c.composite_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn is_subskill(&self, id: &str) -> bool {
        self.compositions.iter().any(|c| c.subskill_ids.iter().any(|s| s == id))
    }

    pub fn is_composite(&self, id: &str) -> bool {
        self.compositions.iter().any(|c| c.composite_id == id)
    }
}

/// `demos_per_skill` trajectories for every subskill and every composite, all
/// starting at the origin. Trajectory `k` of skill `j` draws its noise from
/// stream `j · demos_per_skill + k` of the manifest seed.
pub fn generate_dataset(manifest: &DatasetManifest, config: &PointMassConfig) -> Result<Dataset> {
    manifest.validate()?;
    config.validate()?;
    let mut trajectories = Vec::new();
    for (j, id) in manifest.skill_ids().into_iter().enumerate() {
        let controller = manifest.controller(id);
        for k in 0..manifest.demos_per_skill {
            let stream = (j * manifest.demos_per_skill + k) as u64;
            let mut noise = NoiseSource::derived(manifest.seed, stream);
            trajectories.push(simulate_labeled(config, &controller, [0.0, 0.0], &mut noise, id)?);
        }
    }
    Ok(Dataset {
        trajectories,
        compositions: manifest.compositions.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(dt: f64, t: usize) -> PointMassConfig {
        PointMassConfig {
            dt,
            t,
            obs_noise_std: 0.0,
        }
    }

    #[test]
    fn constant_field_euler_steps() {
        let tr = simulate(&quiet(0.1, 3), &VelocityField::Constant { vx: 1.0, vy: 0.0 }.into(), [0.0, 0.0], 0).unwrap();
        let expected = [[0.0, 0.0], [0.1, 0.0], [0.2, 0.0]];
        for (t, e) in expected.iter().enumerate() {
            assert!((tr.states.get(t, 0) - e[0]).abs() < 1e-15);
            assert!((tr.states.get(t, 1) - e[1]).abs() < 1e-15);
            assert_eq!(tr.actions.row(t), &[1.0, 0.0]);
        }
    }

    #[test]
    fn fields_add() {
        let c = Controller(vec![
            VelocityField::Constant { vx: 1.0, vy: 0.0 },
            VelocityField::Constant { vx: 0.0, vy: 1.0 },
        ]);
        let tr = simulate(&quiet(0.1, 5), &c, [0.0, 0.0], 0).unwrap();
        for t in 1..5 {
            for d in 0..2 {
                let step = tr.states.get(t, d) - tr.states.get(t - 1, d);
                assert!((step - 0.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sinusoid_matches_independent_integrator() {
        let cfg = quiet(0.05, 50);
        let field = VelocityField::Sinusoid {
            axis: Axis::X,
            amplitude: 1.0,
            frequency: 1.0,
        };
        let tr = simulate(&cfg, &field.into(), [0.3, -0.2], 0).unwrap();
        let (mut x, y) = (0.3f64, -0.2f64);
        for t in 0..50 {
            assert!((tr.states.get(t, 0) - x).abs() < 1e-12);
            assert!((tr.states.get(t, 1) - y).abs() < 1e-12);
            let time = t as f64 * 0.05;
            let v = (2.0 * PI * time).sin();
            assert!((tr.actions.get(t, 0) - v).abs() < 1e-12);
            x += 0.05 * v;
        }
    }

    #[test]
    fn composition_is_exact_stepwise_sum() {
        let cfg = quiet(0.05, 30);
        let f = VelocityField::Constant { vx: 0.7, vy: -0.2 };
        let g = VelocityField::Sinusoid {
            axis: Axis::Y,
            amplitude: 2.0,
            frequency: 0.5,
        };
        let both = simulate(&cfg, &Controller(vec![f, g]), [0.0, 0.0], 0).unwrap();
        for t in 0..30 {
            let a = f.eval(t, 0.05, &[]);
            let b = g.eval(t, 0.05, &[]);
            assert_eq!(both.actions.row(t), &[a[0] + b[0], a[1] + b[1]]);
        }
    }

    #[test]
    fn simulate_rejects_bad_config_and_controller() {
        assert!(simulate(&quiet(0.0, 3), &VelocityField::Constant { vx: 1.0, vy: 0.0 }.into(), [0.0; 2], 0).is_err());
        let bad = VelocityField::Constant { vx: f64::NAN, vy: 0.0 };
        assert!(matches!(
            simulate(&quiet(0.1, 3), &bad.into(), [0.0; 2], 0),
            Err(Error::Simulation { step: 0, .. })
        ));
    }

    #[test]
    fn dataset_counts_and_determinism() {
        let m = Task::DiagWiggle.manifest(5, 3);
        let cfg = PointMassConfig::default();
        let d = generate_dataset(&m, &cfg).unwrap();
        assert_eq!(d.trajectories.len(), 20);
        assert_eq!(d.skill_counts().len(), 4);
        assert!(d.skill_counts().values().all(|&c| c == 5));
        assert_eq!(d, generate_dataset(&m, &cfg).unwrap());
        for t in &d.trajectories {
            t.validate().unwrap();
            assert_eq!(t.first_state(), &[0.0, 0.0]);
        }
        let other = generate_dataset(&Task::DiagWiggle.manifest(5, 4), &cfg).unwrap();
        assert_ne!(d, other);
    }

    #[test]
    fn manifest_validation() {
        let mut m = Task::Diag.manifest(2, 0);
        m.validate().unwrap();
        m.compositions[0].subskill_ids.push("oscillate_x".into());
        assert!(matches!(generate_dataset(&m, &PointMassConfig::default()), Err(Error::Validation(_))));
        let mut m = Task::Diag.manifest(0, 0);
        assert!(m.validate().is_err());
        m.demos_per_skill = 1;
        m.subskills.push(m.subskills[0].clone());
        assert!(m.validate().is_err());
    }

    #[test]
    fn composite_mean_tracks_noise_free_path() {
        let n = 100;
        let cfg = PointMassConfig::default();
        let m = Task::DiagWiggle.manifest(n, 11);
        let d = generate_dataset(&m, &cfg).unwrap();
        let quiet_cfg = PointMassConfig {
            obs_noise_std: 0.0,
            ..cfg.clone()
        };
        let clean = simulate(&quiet_cfg, &m.controller("diag_wiggle"), [0.0, 0.0], 0).unwrap();
        let demos = d.by_skill("diag_wiggle");
        for t in 0..cfg.t {
            // Process noise accumulates: s_t carries t independent draws.
            let tol = 3.0 * cfg.obs_noise_std * (t.max(1) as f64).sqrt() / (n as f64).sqrt();
            for dim in 0..2 {
                let mean = demos.iter().map(|tr| tr.states.get(t, dim)).sum::<f64>() / n as f64;
                assert!((mean - clean.states.get(t, dim)).abs() <= tol, "t={t} dim={dim}");
            }
        }
    }
}
