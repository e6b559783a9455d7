use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keygen::Scheme;
use crate::lm::MarkovSpec;
use crate::stats::StatisticKind;

/// One of the four attack scenarios.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Setting {
    /// Fully watermarked text.
    Clean = 1,
    /// Plain tokens inserted in the middle.
    Insertion = 2,
    /// A middle range replaced by plain tokens.
    Substitution = 3,
    /// A substitution followed by an insertion further on.
    Mixed = 4,
}

impl TryFrom<u8> for Setting {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Setting::Clean),
            2 => Ok(Setting::Insertion),
            3 => Ok(Setting::Substitution),
            4 => Ok(Setting::Mixed),
            _ => Err(Error::Config(format!("setting must be 1, 2, 3 or 4, got {v}"))),
        }
    }
}

impl From<Setting> for u8 {
    fn from(s: Setting) -> u8 {
        s as u8
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", *self as u8)
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let v: u8 = s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("setting must be 1, 2, 3 or 4, got `{s}`")))?;
        Setting::try_from(v)
    }
}

/// Complete description of an experiment. Every output is a pure function
/// of these fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub setting: Setting,
    pub scheme: Scheme,
    /// Statistics compared on the same texts, keys and null draws; empty
    /// selects the scheme's defaults.
    pub statistics: Vec<StatisticKind>,
    /// Number of watermarked tokens generated.
    pub n: usize,
    /// Length of the prompt preceding the generated text.
    pub prompt_len: usize,
    /// p-value window `B` (even).
    pub window: usize,
    /// Bootstrap block length `B'`.
    pub block: usize,
    /// Null key replicates per p-value.
    pub null_replicates: usize,
    /// Bootstrap replicates per interval.
    pub bootstrap_replicates: usize,
    pub decay: f64,
    pub zeta: f64,
    /// Shrinkage weight on empty-prompt NTP estimates.
    pub lambda: f64,
    /// Shrinkage baseline.
    pub p0: f64,
    /// Minimum split distance from interval ends; `0` means `B/2`.
    pub margin: usize,
    /// Shortest interval tested; `0` means `2B`.
    pub min_interval: usize,
    pub replications: usize,
    /// Longest insertion; the actual length is uniform on
    /// `[insert_min_frac * L, L]`. `0` uses 250 for setting 2 and 100 for
    /// setting 4.
    pub insert_len: usize,
    pub insert_min_frac: f64,
    pub vocab: usize,
    pub order: usize,
    pub temperature: f64,
    /// Dirichlet concentration of the model rows.
    pub concentration: f64,
    pub model_seed: u64,
    /// Seed of a separate model used for NTP estimation; unset means the
    /// generating model with an empty prompt.
    pub estimator_seed: Option<u64>,
    pub key_seed: u64,
    pub null_seed: u64,
    pub bootstrap_seed: u64,
    pub attack_seed: u64,
}

pub const DEFAULT_TEMPERATURE: f64 = 0.7;

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            setting: Setting::Substitution,
            scheme: Scheme::Ems,
            statistics: Vec::new(),
            n: 500,
            prompt_len: 10,
            window: 20,
            block: 20,
            null_replicates: 99,
            bootstrap_replicates: 999,
            decay: std::f64::consts::FRAC_1_SQRT_2,
            zeta: 0.01,
            lambda: 0.5,
            p0: 0.5,
            margin: 0,
            min_interval: 0,
            replications: 100,
            insert_len: 0,
            insert_min_frac: 0.8,
            vocab: 50,
            order: 1,
            temperature: DEFAULT_TEMPERATURE,
            concentration: 0.2,
            model_seed: 42,
            estimator_seed: None,
            key_seed: 1,
            null_seed: 2,
            bootstrap_seed: 3,
            attack_seed: 4,
        }
    }
}

fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

impl ExperimentConfig {
    pub fn model_spec(&self) -> MarkovSpec {
        MarkovSpec {
            vocab: self.vocab,
            order: self.order,
            temperature: self.temperature,
            alpha: self.concentration,
            seed: self.model_seed,
        }
    }

    /// Configured statistics, or the scheme's defaults when none are set.
    pub fn effective_statistics(&self) -> Vec<StatisticKind> {
        if !self.statistics.is_empty() {
            return self.statistics.clone();
        }
        match self.scheme {
            Scheme::Ems => vec![StatisticKind::EmsLr, StatisticKind::EmsShrink, StatisticKind::EmsBase],
            Scheme::Its => vec![StatisticKind::ItsHuber, StatisticKind::ItsBase],
        }
    }

    pub fn effective_margin(&self) -> usize {
        if self.margin == 0 {
            (self.window / 2).max(1)
        } else {
            self.margin
        }
    }

    pub fn effective_min_interval(&self) -> usize {
        if self.min_interval == 0 {
            2 * self.window
        } else {
            self.min_interval
        }
    }

    /// Longest insertion for the configured setting.
    pub fn max_insert_len(&self) -> usize {
        match (self.insert_len, self.setting) {
            (0, Setting::Insertion) => 250,
            (0, Setting::Mixed) => 100,
            (0, _) => 0,
            (l, _) => l,
        }
    }

    /// Rejects out-of-range fields.
    pub fn validate(&self) -> Result<()> {
        if let Some(k) = self.statistics.iter().find(|k| k.scheme() != self.scheme) {
            return config_err(format!("statistic {k} does not belong to scheme {}", self.scheme));
        }
        for (i, k) in self.statistics.iter().enumerate() {
            if self.statistics[..i].contains(k) {
                return config_err(format!("statistic {k} listed twice"));
            }
        }
        if self.vocab < 2 {
            return config_err("vocab must be at least 2");
        }
        if !(1..=2).contains(&self.order) {
            return config_err("order must be 1 or 2");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return config_err("temperature must be positive");
        }
        if !(self.concentration > 0.0 && self.concentration.is_finite()) {
            return config_err("concentration must be positive");
        }
        if self.window < 2 || self.window % 2 != 0 {
            return config_err(format!("window must be an even number >= 2, got {}", self.window));
        }
        if self.block == 0 {
            return config_err("block must be positive");
        }
        if self.null_replicates == 0 || self.bootstrap_replicates == 0 {
            return config_err("replicate counts must be positive");
        }
        if self.replications == 0 {
            return config_err("replications must be positive");
        }
        if !(0.5..1.0).contains(&self.decay) {
            return config_err(format!("decay must lie in [0.5, 1), got {}", self.decay));
        }
        if !(self.zeta > 0.0 && self.zeta <= 1.0) {
            return config_err(format!("zeta must lie in (0, 1], got {}", self.zeta));
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return config_err(format!("lambda must lie in (0, 1), got {}", self.lambda));
        }
        if !(self.p0 > 0.0 && self.p0 < 1.0) {
            return config_err(format!("p0 must lie in (0, 1), got {}", self.p0));
        }
        if !(self.insert_min_frac > 0.0 && self.insert_min_frac <= 1.0) {
            return config_err("insert_min_frac must lie in (0, 1]");
        }
        Ok(())
    }

    /// [`Self::validate`] plus the checks that tie `n` to the attack
    /// setting and the segmentation lengths.
    pub fn validate_experiment(&self) -> Result<()> {
        self.validate()?;
        let min_n = match self.setting {
            Setting::Clean => 1,
            Setting::Insertion => 251,
            Setting::Substitution | Setting::Mixed => 300,
        };
        if self.n < min_n {
            return config_err(format!("setting {} needs n >= {min_n}, got {}", self.setting, self.n));
        }
        if self.window + 1 > self.n {
            return config_err(format!("window {} too large for n = {}", self.window, self.n));
        }
        if matches!(self.setting, Setting::Insertion | Setting::Mixed) && self.max_insert_len() == 0 {
            return config_err("insertion settings need a positive insert_len");
        }
        let need = self.effective_min_interval().max(self.block).max(2 * self.effective_margin());
        if need > self.n {
            return config_err(format!("minimum interval {need} exceeds n = {}", self.n));
        }
        Ok(())
    }
}

/// `floor(3 n^{1/3})` rounded down to an even number, at least 2.
pub fn window_rule(n: usize) -> usize {
    let raw = (3.0 * (n as f64).cbrt() + 1e-9).floor() as usize;
    (raw - raw % 2).max(2)
}
