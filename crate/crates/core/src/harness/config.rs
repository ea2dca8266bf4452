//! Experiment configuration files and the manifest written next to each run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::curriculum::{CurriculumConfig, TeacherConfig};
use crate::error::{Error, Result};
use crate::gossip::GossipConfig;
use crate::language::LanguageConfig;

/// Environment variable naming the dataset root.
pub const DATA_DIR_ENV: &str = "GGRAD_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Subcommand {
    Gossip,
    Curriculum,
    Language,
    TrainTeacher,
    Eval,
}

impl Subcommand {
    pub fn as_str(self) -> &'static str {
        match self {
            Subcommand::Gossip => "gossip",
            Subcommand::Curriculum => "curriculum",
            Subcommand::Language => "language",
            Subcommand::TrainTeacher => "train-teacher",
            Subcommand::Eval => "eval",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset root holding `mnist/`; `$GGRAD_DATA_DIR` or `data` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    /// Rows held out of the MNIST training file for validation.
    pub valid_size: usize,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            valid_size: 10_000,
            split_seed: 1,
        }
    }
}

impl DataConfig {
    pub fn root(&self) -> PathBuf {
        self.root
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"))
    }

    pub fn mnist_dir(&self) -> PathBuf {
        self.root().join("mnist")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Valid,
    #[default]
    Test,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Model checkpoint; the teacher checkpoint when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub split: EvalSplit,
}

/// One run of the `ggrad` binary.
///
/// Only the section belonging to `experiment` is kept after resolution; the
/// teacher section is also kept for curriculum runs whose metric needs one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Subcommand,
    #[serde(default)]
    pub data: DataConfig,
    /// Cached teacher weights; `<data root>/teacher.ggrad` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gossip: Option<GossipConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curriculum: Option<CurriculumConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<TeacherConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<LanguageConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalConfig>,
}

impl ExperimentConfig {
    pub fn new(experiment: Subcommand) -> Self {
        ExperimentConfig {
            experiment,
            data: DataConfig::default(),
            teacher_checkpoint: None,
            gossip: None,
            curriculum: None,
            teacher: None,
            language: None,
            eval: None,
        }
    }

    /// Parses TOML; a missing `experiment` key is taken from `default` when given.
    pub fn from_toml(text: &str, default: Option<Subcommand>) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| toml_error(&e))?;
        if let Some(sub) = default {
            match table.get("experiment") {
                None => {
                    table.insert("experiment".into(), sub.as_str().into());
                }
                Some(v) if v.as_str() != Some(sub.as_str()) => {
                    return Err(Error::config(
                        "experiment",
                        format!("file describes {v} but the `{}` subcommand was invoked", sub.as_str()),
                    ));
                }
                Some(_) => {}
            }
        }
        let cfg: ExperimentConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| toml_error(&e))?;
        cfg.resolved()
    }

    pub fn from_file(path: &Path, default: Option<Subcommand>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, default)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("cannot serialize config: {e}")))
    }

    /// Fills every default the run will use, drops unused sections and validates.
    pub fn resolved(mut self) -> Result<Self> {
        let root = self.data.root();
        self.data.root = Some(root.clone());
        match self.experiment {
            Subcommand::Gossip => {
                let mut g = self.gossip.take().unwrap_or_default();
                g.p = Some(g.neighbors());
                g.validate()?;
                self = ExperimentConfig {
                    gossip: Some(g),
                    ..ExperimentConfig::new(self.experiment)
                }
                .with_data(self.data);
            }
            Subcommand::Curriculum => {
                let c = self.curriculum.take().unwrap_or_default();
                c.validate()?;
                let teacher = c.needs_teacher().then(|| self.teacher.take().unwrap_or_default());
                if let Some(t) = &teacher {
                    t.validate()?;
                }
                let ckpt = teacher.as_ref().map(|_| self.teacher_path());
                self = ExperimentConfig {
                    curriculum: Some(c),
                    teacher,
                    teacher_checkpoint: ckpt,
                    ..ExperimentConfig::new(self.experiment)
                }
                .with_data(self.data);
            }
            Subcommand::TrainTeacher => {
                let t = self.teacher.take().unwrap_or_default();
                t.validate()?;
                self = ExperimentConfig {
                    teacher: Some(t),
                    teacher_checkpoint: Some(self.teacher_path()),
                    ..ExperimentConfig::new(self.experiment)
                }
                .with_data(self.data);
            }
            Subcommand::Language => {
                let l = self.language.take().unwrap_or_default().resolved();
                l.validate()?;
                self = ExperimentConfig {
                    language: Some(l),
                    ..ExperimentConfig::new(self.experiment)
                }
                .with_data(self.data);
            }
            Subcommand::Eval => {
                let mut e = self.eval.take().unwrap_or_default();
                if e.checkpoint.is_none() {
                    e.checkpoint = Some(self.teacher_path());
                }
                self = ExperimentConfig {
                    eval: Some(e),
                    ..ExperimentConfig::new(self.experiment)
                }
                .with_data(self.data);
            }
        }
        Ok(self)
    }

    fn with_data(mut self, data: DataConfig) -> Self {
        self.data = data;
        self
    }

    pub fn teacher_path(&self) -> PathBuf {
        self.teacher_checkpoint
            .clone()
            .unwrap_or_else(|| self.data.root().join("teacher.ggrad"))
    }

    /// Replaces the master seed; a language run then uses that seed alone.
    pub fn set_seed(&mut self, seed: u64) {
        if let Some(g) = &mut self.gossip {
            g.seed = seed;
        }
        if let Some(c) = &mut self.curriculum {
            c.seed = seed;
        }
        if let Some(l) = &mut self.language {
            l.seeds = vec![seed];
        }
        if self.experiment == Subcommand::TrainTeacher {
            if let Some(t) = &mut self.teacher {
                t.seed = seed;
            }
        }
    }
}

fn toml_error(e: &toml::de::Error) -> Error {
    let msg = e.message().to_string();
    let key = msg
        .split('`')
        .nth(1)
        .filter(|_| msg.starts_with("unknown field"))
        .unwrap_or("config")
        .to_string();
    Error::config(key, msg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curriculum::Metric;
    use crate::gossip::PayloadKind;
    use crate::language::CommLevel;
    use proptest::prelude::*;

    #[test]
    fn empty_gossip_config_takes_defaults() {
        let c = ExperimentConfig::from_toml("", Some(Subcommand::Gossip)).unwrap();
        let g = c.gossip.unwrap();
        assert_eq!((g.nodes, g.p, g.p_c, g.payload_kind, g.temperature), (10, Some(9), 0.5, PayloadKind::Labels, 1.0));
    }

    #[test]
    fn rejects_bad_input_naming_the_key() {
        let e = ExperimentConfig::from_toml("[gossip]\nnodes = 4\np = 4\n", Some(Subcommand::Gossip)).unwrap_err();
        assert!(matches!(e, Error::Config { ref key, .. } if key == "p"), "{e}");
        let e = ExperimentConfig::from_toml("[gossip]\nnodez = 4\n", Some(Subcommand::Gossip)).unwrap_err();
        assert!(matches!(e, Error::Config { ref key, .. } if key == "nodez"), "{e}");
        let e = ExperimentConfig::from_toml("colour = 1\n", Some(Subcommand::Gossip)).unwrap_err();
        assert!(matches!(e, Error::Config { ref key, .. } if key == "colour"), "{e}");
        let e = ExperimentConfig::from_toml("[gossip]\nnodes = \"ten\"\n", Some(Subcommand::Gossip)).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e = ExperimentConfig::from_toml("experiment = \"language\"\n", Some(Subcommand::Gossip)).unwrap_err();
        assert!(matches!(e, Error::Config { ref key, .. } if key == "experiment"));
        assert!(ExperimentConfig::from_toml("", None).is_err());
    }

    #[test]
    fn resolution_keeps_only_the_used_sections() {
        let text = "experiment = \"curriculum\"\n[curriculum]\nmetric = \"random\"\n[language]\nlength = 8\n";
        let c = ExperimentConfig::from_toml(text, None).unwrap();
        assert!(c.language.is_none() && c.teacher.is_none() && c.teacher_checkpoint.is_none());
        let text = "experiment = \"curriculum\"\n[curriculum]\nmetric = \"euclidean\"\n";
        let c = ExperimentConfig::from_toml(text, None).unwrap();
        assert_eq!(c.curriculum.as_ref().unwrap().metric, Metric::Euclidean);
        assert!(c.teacher.is_some() && c.teacher_checkpoint.is_some());
        let c = ExperimentConfig::from_toml("[language]\nlevel = \"both\"\n", Some(Subcommand::Language)).unwrap();
        let l = c.language.unwrap();
        assert_eq!((l.level, l.likelihood_weight), (CommLevel::BothFeedback, Some(0.005)));
    }

    #[test]
    fn seed_override() {
        let mut c = ExperimentConfig::from_toml("", Some(Subcommand::Language)).unwrap();
        c.set_seed(9);
        assert_eq!(c.language.unwrap().seeds, vec![9]);
    }

    fn any_subcommand() -> impl Strategy<Value = Subcommand> {
        prop_oneof![
            Just(Subcommand::Gossip),
            Just(Subcommand::Curriculum),
            Just(Subcommand::Language),
            Just(Subcommand::TrainTeacher),
            Just(Subcommand::Eval),
        ]
    }

    proptest! {
        #[test]
        fn parse_serialize_parse_is_identity(sub in any_subcommand(), seed in 0u64..1000, nodes in 2usize..20, tau in 0.05f64..5.0, n in 1usize..6) {
            let body = match sub {
                Subcommand::Gossip => format!("[gossip]\nnodes = {nodes}\ntemperature = {tau}\nseed = {seed}\npayload_kind = \"logits\"\n"),
                Subcommand::Curriculum => format!("[curriculum]\nmetric = \"cross_entropy\"\nstack_n = {n}\nsoft_temperature = {tau}\nseed = {seed}\n"),
                Subcommand::Language => format!("[language]\nlevel = \"teacher_feedback\"\nseeds = [{seed}, {}]\nnoise = {}\n", seed + 1, tau / 10.0),
                Subcommand::TrainTeacher => format!("[teacher]\nseed = {seed}\npatience = {n}\n"),
                Subcommand::Eval => "[eval]\nsplit = \"valid\"\n".to_string(),
            };
            let first = ExperimentConfig::from_toml(&body, Some(sub)).unwrap();
            let text = first.to_toml().unwrap();
            let second = ExperimentConfig::from_toml(&text, None).unwrap();
            prop_assert_eq!(&first, &second);
            prop_assert_eq!(text, second.to_toml().unwrap());
        }
    }
}
