use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agents::AgentParams;
use crate::data::{load_csv, synth_gen, Dataset, Selector, DEFAULT_DIMS};
use crate::digest::Hash32;
use crate::federation::DEFAULT_PRIVATE_CHAIN_THRESHOLD;
use crate::identity::DEFAULT_TOKEN_TTL;
use crate::model::TrainConfig;
use crate::unlearning::{UnlearnConfig, VerificationCriteria};

use super::clock::CostModel;

/// A configuration problem, located by its field path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioError {
    pub path: String,
    pub message: String,
}

impl ScenarioError {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self { path: path.into(), message: message.into() }
    }
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            f.write_str(&self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

impl std::error::Error for ScenarioError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic { items: usize },
    Csv { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrgSpec {
    pub id: String,
    #[serde(default = "one")]
    pub agents: usize,
    pub dataset: DatasetSpec,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalTraining {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for LocalTraining {
    fn default() -> Self {
        Self { learning_rate: 0.5, epochs: 2, batch_size: 8 }
    }
}

impl LocalTraining {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig { learning_rate: self.learning_rate, epochs: self.epochs, batch_size: self.batch_size, seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnlearnRequestSpec {
    pub org: String,
    /// Global round after whose training the request is handled.
    pub round: usize,
    pub selector: Selector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<UnlearnConfig>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnlearningSpec {
    /// Hyperparameters for requests that name none.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<UnlearnConfig>,
    pub criteria: VerificationCriteria,
    pub requests: Vec<UnlearnRequestSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    #[serde(default = "two")]
    pub classes: usize,
    #[serde(default = "default_dims")]
    pub feature_dims: usize,
    pub global_epochs: usize,
    pub private_epochs: usize,
    #[serde(default = "default_threshold")]
    pub private_chain_threshold: usize,
    #[serde(default = "default_ttl")]
    pub token_ttl: u64,
    #[serde(default)]
    pub train: LocalTraining,
    #[serde(default)]
    pub agents: AgentParams,
    pub validation: DatasetSpec,
    pub orgs: Vec<OrgSpec>,
    #[serde(default)]
    pub unlearning: UnlearningSpec,
    #[serde(default)]
    pub cost: CostModel,
}

fn two() -> usize {
    2
}

fn default_dims() -> usize {
    DEFAULT_DIMS
}

fn default_threshold() -> usize {
    DEFAULT_PRIVATE_CHAIN_THRESHOLD
}

fn default_ttl() -> u64 {
    DEFAULT_TOKEN_TTL
}

/// Independent sub-seed for a named purpose.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let h = Hash32::of(format!("{master}/{tag}").as_bytes());
    u64::from_le_bytes(h.as_bytes()[..8].try_into().expect("8 bytes"))
}

impl Scenario {
    /// Parses and validates; errors carry the offending field path.
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let scenario: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ScenarioError::new(if path == "." { String::new() } else { path }, e.into_inner().to_string())
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    /// Reads a scenario file. Relative CSV paths resolve against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScenarioError::new("", format!("cannot read {}: {e}", path.display())))?;
        let mut s = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |spec: &mut DatasetSpec| {
            if let DatasetSpec::Csv { path } = spec {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        resolve(&mut s.validation);
        for org in &mut s.orgs {
            resolve(&mut org.dataset);
        }
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes") + "\n"
    }

    pub fn org(&self, id: &str) -> Option<&OrgSpec> {
        self.orgs.iter().find(|o| o.id == id)
    }

    /// Hyperparameters a request runs with.
    pub fn unlearn_config(&self, request: &UnlearnRequestSpec) -> UnlearnConfig {
        request.config.or(self.unlearning.config).unwrap_or_default()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let err = |p: &str, m: String| Err(ScenarioError::new(p, m));
        if self.name.trim().is_empty() {
            return err("name", "must not be empty".into());
        }
        if self.classes < 2 {
            return err("classes", format!("must be at least 2, got {}", self.classes));
        }
        if !self.feature_dims.is_power_of_two() {
            return err("feature_dims", format!("must be a power of two, got {}", self.feature_dims));
        }
        if self.global_epochs == 0 {
            return err("global_epochs", "must be at least 1".into());
        }
        if self.private_epochs == 0 {
            return err("private_epochs", "must be at least 1".into());
        }
        if self.token_ttl == 0 {
            return err("token_ttl", "must be positive".into());
        }
        if let Err(e) = self.train.with_seed(0).validate() {
            return err("train", e.to_string());
        }
        if let Err(e) = self.agents.validate() {
            return err("agents", e);
        }
        if let DatasetSpec::Synthetic { items } = self.validation {
            if items < self.classes {
                return err("validation.synthetic.items", format!("must be at least {}, got {items}", self.classes));
            }
        }
        if self.orgs.is_empty() {
            return err("orgs", "must list at least one organization".into());
        }
        let mut seen = BTreeSet::new();
        for (i, org) in self.orgs.iter().enumerate() {
            let at = |f: &str| format!("orgs[{i}].{f}");
            if org.id.is_empty() || !org.id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                return err(&at("id"), format!("{:?} must be non-empty ASCII letters, digits, '-' or '_'", org.id));
            }
            if !seen.insert(org.id.as_str()) {
                return err(&at("id"), format!("duplicate organization {:?}", org.id));
            }
            if org.agents == 0 {
                return err(&at("agents"), "must be at least 1".into());
            }
            if let DatasetSpec::Synthetic { items } = org.dataset {
                if items < org.agents.max(self.classes) {
                    return err(
                        &at("dataset.synthetic.items"),
                        format!("must be at least {}, got {items}", org.agents.max(self.classes)),
                    );
                }
                self.check_topology(i, items)?;
            }
        }
        if let Some(c) = &self.unlearning.config {
            if let Err(e) = c.validate() {
                return err("unlearning.config", e.to_string());
            }
        }
        if let Err(e) = self.unlearning.criteria.validate() {
            return err("unlearning.criteria", e);
        }
        for (i, r) in self.unlearning.requests.iter().enumerate() {
            let at = |f: &str| format!("unlearning.requests[{i}].{f}");
            if self.org(&r.org).is_none() {
                return err(&at("org"), format!("unknown organization {:?}", r.org));
            }
            if r.round == 0 || r.round > self.global_epochs {
                return err(&at("round"), format!("must lie in 1..={}, got {}", self.global_epochs, r.round));
            }
            if let Err(e) = r.selector.validate(self.classes) {
                return err(&at("selector"), e.to_string());
            }
            if let Some(c) = &r.config {
                if let Err(e) = c.validate() {
                    return err(&at("config"), e.to_string());
                }
            }
        }
        Ok(())
    }

    /// Organizations without a private chain submit directly through a
    /// single agent.
    fn check_topology(&self, index: usize, items: usize) -> Result<(), ScenarioError> {
        let org = &self.orgs[index];
        if items < self.private_chain_threshold && org.agents != 1 {
            return Err(ScenarioError::new(
                format!("orgs[{index}].agents"),
                format!(
                    "{} holds {items} samples, below private_chain_threshold {}, and so needs exactly 1 agent, got {}",
                    org.id, self.private_chain_threshold, org.agents
                ),
            ));
        }
        Ok(())
    }

    /// Loads or generates every dataset. Returns the org datasets in
    /// declaration order and the validation set.
    pub fn materialize(&self) -> Result<(Vec<Dataset>, Dataset), ScenarioError> {
        let load = |spec: &DatasetSpec, tag: &str, path: &str| -> Result<Dataset, ScenarioError> {
            match spec {
                DatasetSpec::Synthetic { items } => synth_gen(*items, self.classes, derive_seed(self.seed, tag))
                    .map_err(|e| ScenarioError::new(path, e.to_string())),
                DatasetSpec::Csv { path: file } => load_csv(file, self.classes)
                    .map_err(|e| ScenarioError::new(path, format!("{}: {e}", file.display()))),
            }
        };
        let mut orgs = Vec::with_capacity(self.orgs.len());
        for (i, org) in self.orgs.iter().enumerate() {
            let path = format!("orgs[{i}].dataset");
            let d = load(&org.dataset, &format!("data/{}", org.id), &path)?;
            if d.len() < org.agents.max(1) {
                return Err(ScenarioError::new(path, format!("holds {} items, fewer than its {} agents", d.len(), org.agents)));
            }
            self.check_topology(i, d.len())?;
            orgs.push(d);
        }
        let validation = load(&self.validation, "data/validation", "validation")?;
        if validation.is_empty() {
            return Err(ScenarioError::new("validation", "is empty"));
        }
        Ok((orgs, validation))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "name": "t", "seed": 1, "global_epochs": 1, "private_epochs": 1,
        "validation": {"synthetic": {"items": 20}},
        "orgs": [{"id": "a", "dataset": {"synthetic": {"items": 30}}}]
    }"#;

    #[test]
    fn minimal_parses_with_defaults() {
        let s = Scenario::from_json(MINIMAL).unwrap();
        assert_eq!(s.classes, 2);
        assert_eq!(s.private_chain_threshold, 1000);
        assert_eq!(s.orgs[0].agents, 1);
        assert_eq!(Scenario::from_json(&s.to_json()).unwrap(), s);
    }

    fn with(field: &str, value: &str) -> String {
        let mut v: serde_json::Value = serde_json::from_str(MINIMAL).unwrap();
        let mut at = &mut v;
        let parts: Vec<&str> = field.split('.').collect();
        for p in &parts[..parts.len() - 1] {
            at = match p.parse::<usize>() {
                Ok(i) => &mut at[i],
                Err(_) => &mut at[*p],
            };
        }
        at[parts[parts.len() - 1]] = serde_json::from_str(value).unwrap();
        v.to_string()
    }

    #[test]
    fn errors_name_the_field() {
        let e = Scenario::from_json(&with("global_epochs", "0")).unwrap_err();
        assert_eq!(e.path, "global_epochs");
        let e = Scenario::from_json(&with("orgs.0.agents", "3")).unwrap_err();
        assert_eq!(e.path, "orgs[0].agents");
        let e = Scenario::from_json(&with("orgs.0.agents", "\"x\"")).unwrap_err();
        assert_eq!(e.path, "orgs[0].agents");
        let e = Scenario::from_json(&with("orgs.0.bogus", "1")).unwrap_err();
        assert!(e.message.contains("bogus"), "{e}");
        let e = Scenario::from_json(
            &with("unlearning", r#"{"requests": [{"org": "zz", "round": 1, "selector": "label:0"}]}"#),
        )
        .unwrap_err();
        assert_eq!(e.path, "unlearning.requests[0].org");
        let e = Scenario::from_json(
            &with("unlearning", r#"{"requests": [{"org": "a", "round": 1, "selector": "label:9"}]}"#),
        )
        .unwrap_err();
        assert_eq!(e.path, "unlearning.requests[0].selector");
    }

    #[test]
    fn missing_seed_is_an_error() {
        let mut v: serde_json::Value = serde_json::from_str(MINIMAL).unwrap();
        v.as_object_mut().unwrap().remove("seed");
        assert!(Scenario::from_json(&v.to_string()).unwrap_err().message.contains("seed"));
    }

    #[test]
    fn materialize_is_deterministic() {
        let s = Scenario::from_json(MINIMAL).unwrap();
        assert_eq!(s.materialize().unwrap(), s.materialize().unwrap());
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
    }

    #[test]
    fn unlearn_config_precedence() {
        let mut s = Scenario::from_json(MINIMAL).unwrap();
        let req = UnlearnRequestSpec { org: "a".into(), round: 1, selector: Selector::Label(0), config: None };
        assert_eq!(s.unlearn_config(&req), UnlearnConfig::default());
        let scenario_cfg = UnlearnConfig { epochs: 3, ..Default::default() };
        s.unlearning.config = Some(scenario_cfg);
        assert_eq!(s.unlearn_config(&req), scenario_cfg);
        let own = UnlearnConfig { epochs: 7, ..Default::default() };
        assert_eq!(s.unlearn_config(&UnlearnRequestSpec { config: Some(own), ..req }), own);
    }
}
