//! Run configuration: a TOML file, flag overrides, and desk-scale divisors.

use std::path::Path;

use adann_core::dataset_io::DEFAULT_SPLIT;
use adann_core::{InitialLaw, Preset, SweepMode, TrainConfig};
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

/// Divisors applied to the full-scale budgets. `--full` sets them all to 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scale {
    pub data_divisor: usize,
    pub step_divisor: usize,
    pub run_divisor: usize,
}

impl Default for Scale {
    fn default() -> Self {
        Self {
            data_divisor: 32,
            step_divisor: 8,
            run_divisor: 5,
        }
    }
}

impl Scale {
    pub const FULL: Scale = Scale {
        data_divisor: 1,
        step_divisor: 1,
        run_divisor: 1,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Full-scale sample count.
    pub samples: usize,
    /// Train, validation, selection and test fractions.
    pub split: [f64; 4],
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            samples: 1 << 19,
            split: DEFAULT_SPLIT,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub mode: SweepMode,
    /// Full-scale run count of the adaptive sweep.
    pub runs: usize,
    pub exploit_probability: f64,
    pub error_scale_samples: usize,
    pub base: TrainConfig,
    pub difference: TrainConfig,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            mode: SweepMode::Grid,
            runs: 50,
            exploit_probability: 0.5,
            error_scale_samples: 2048,
            base: TrainConfig {
                learning_rate: 1e-4,
                steps: 16_000,
                ..TrainConfig::default()
            },
            difference: TrainConfig {
                learning_rate: 1e-3,
                steps: 16_000,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Cn,
    Ann,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    pub method: Method,
    /// Classical step counts; the preset's list when absent.
    pub steps: Option<Vec<usize>>,
    pub ann: TrainConfig,
    /// Independent ANN trainings; the best on the selection split is reported.
    pub ann_runs: usize,
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self {
            method: Method::Cn,
            steps: None,
            ann: TrainConfig {
                steps: 16_000,
                ..TrainConfig::default()
            },
            ann_runs: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub problem: Preset,
    /// Replaces the preset's initial law, e.g. a different mode count.
    pub law: Option<InitialLaw>,
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    pub scale: Scale,
    pub data: DataSection,
    pub sweep: SweepSection,
    pub baseline: BaselineSection,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            problem: Preset::Rd1d,
            law: None,
            seed: 0,
            workers: 0,
            scale: Scale::default(),
            data: DataSection::default(),
            sweep: SweepSection::default(),
            baseline: BaselineSection::default(),
        }
    }
}

/// Budgets after the divisors, as actually used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Effective {
    pub samples: usize,
    pub adaptive_runs: usize,
    pub base_steps: usize,
    pub difference_steps: usize,
    pub ann_steps: usize,
}

fn divide(v: usize, d: usize) -> usize {
    (v / d.max(1)).max(1)
}

impl CliConfig {
    /// Keys absent from `text` keep the values of `CliConfig::default()`, also
    /// inside partially given tables. An echoed `[effective]` table is ignored, so
    /// echoed configurations load back unchanged.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut user: toml::Table = toml::from_str(text).context("parsing configuration")?;
        user.remove("effective");
        let mut merged = toml::Table::try_from(Self::default())?;
        overlay(&mut merged, user);
        let cfg: Self = merged.try_into().context("parsing configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading configuration {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.scale;
        if s.data_divisor == 0 || s.step_divisor == 0 || s.run_divisor == 0 {
            bail!("scale divisors must be positive");
        }
        if self.data.samples == 0 {
            bail!("data.samples must be positive");
        }
        if self.sweep.runs == 0 || self.sweep.error_scale_samples == 0 {
            bail!("sweep.runs and sweep.error_scale_samples must be positive");
        }
        if !(0.0..=1.0).contains(&self.sweep.exploit_probability) {
            bail!("sweep.exploit_probability must lie in [0, 1]");
        }
        if self.baseline.ann_runs == 0 {
            bail!("baseline.ann_runs must be positive");
        }
        if matches!(&self.baseline.steps, Some(v) if v.is_empty() || v.contains(&0)) {
            bail!("baseline.steps must be a non-empty list of positive counts");
        }
        let total: f64 = self.data.split.iter().sum();
        if self.data.split.iter().any(|f| !(*f >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            bail!("data.split must be non-negative and sum to 1");
        }
        for (name, t) in [
            ("sweep.base", &self.sweep.base),
            ("sweep.difference", &self.sweep.difference),
            ("baseline.ann", &self.baseline.ann),
        ] {
            t.validate().with_context(|| format!("in [{name}]"))?;
        }
        Ok(())
    }

    pub fn effective(&self) -> Effective {
        let s = &self.scale;
        Effective {
            samples: divide(self.data.samples, s.data_divisor),
            adaptive_runs: divide(self.sweep.runs, s.run_divisor),
            base_steps: divide(self.sweep.base.steps, s.step_divisor),
            difference_steps: divide(self.sweep.difference.steps, s.step_divisor),
            ann_steps: divide(self.baseline.ann.steps, s.step_divisor),
        }
    }

    pub fn initial_law(&self) -> InitialLaw {
        self.law.unwrap_or_else(|| self.problem.initial_law())
    }

    pub fn baseline_steps(&self) -> Vec<usize> {
        self.baseline
            .steps
            .clone()
            .unwrap_or_else(|| self.problem.baseline_steps())
    }

    /// The configuration plus its effective budgets, as TOML.
    pub fn echo(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Echo<'a> {
            #[serde(flatten)]
            config: &'a CliConfig,
            effective: Effective,
        }
        Ok(toml::to_string(&Echo {
            config: self,
            effective: self.effective(),
        })?)
    }
}

fn overlay(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => overlay(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses `20`, `15,16,20`, `15..20` or `15..=20` (ranges are inclusive).
pub fn parse_steps(s: &str) -> Result<Vec<usize>> {
    let s = s.trim();
    let out: Vec<usize> = if let Some((a, b)) = s.split_once("..") {
        let b = b.strip_prefix('=').unwrap_or(b);
        let (a, b): (usize, usize) = (a.trim().parse()?, b.trim().parse()?);
        if a > b {
            bail!("empty step range '{s}'");
        }
        (a..=b).collect()
    } else {
        s.split(',')
            .map(|t| t.trim().parse::<usize>().with_context(|| format!("bad step count '{t}'")))
            .collect::<Result<_>>()?
    };
    if out.is_empty() || out.contains(&0) {
        bail!("step counts must be positive");
    }
    Ok(out)
}
