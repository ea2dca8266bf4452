//! Named configurations for the reference experiments.

use crate::curriculum::{CurriculumConfig, Metric, TargetMode, TeacherConfig};
use crate::ensemble::FusionMode;
use crate::error::{Error, Result};
use crate::gossip::{GossipConfig, PayloadKind};
use crate::harness::config::{ExperimentConfig, Subcommand};
use crate::language::{CommLevel, LanguageConfig};

pub const PRESETS: [&str; 13] = [
    "table2-10n-labels",
    "table2-10n-logits",
    "table2-10n-features",
    "table2-10n-none",
    "table3-baseline",
    "table3-stack5-ce-true",
    "table3-stack2-ce-true",
    "table3-stack2-euclid-true",
    "table3-stack2-random-soft",
    "table4-baseline",
    "table4-receive",
    "table4-teacher_feedback",
    "table4-both",
];

/// Ten-node complete graph on a small training pool, shared by every gossip preset.
pub fn gossip_base() -> GossipConfig {
    GossipConfig {
        nodes: 10,
        p: Some(9),
        train_size: Some(1500),
        rounds: 3000,
        eval_every: 500,
        eval_size: Some(5000),
        hidden: vec![32, 32],
        fusion: FusionMode::Literal,
        ..GossipConfig::default()
    }
}

pub fn teacher_preset() -> TeacherConfig {
    TeacherConfig::default()
}

fn curriculum(metric: Metric, target_mode: TargetMode, stack_n: usize) -> ExperimentConfig {
    let c = CurriculumConfig {
        metric,
        target_mode,
        stack_n,
        ..CurriculumConfig::default()
    };
    ExperimentConfig {
        teacher: c.needs_teacher().then(teacher_preset),
        curriculum: Some(c),
        ..ExperimentConfig::new(Subcommand::Curriculum)
    }
}

/// Resolved configuration of a named preset.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let cfg = if let Some(kind) = name.strip_prefix("table2-10n-") {
        let (payload_kind, temperature) = match kind {
            "labels" => (PayloadKind::Labels, 1.0),
            "logits" => (PayloadKind::Logits, 0.3),
            "features" => (PayloadKind::Features, 1.0),
            "none" => (PayloadKind::None, 1.0),
            _ => return Err(unknown(name)),
        };
        ExperimentConfig {
            gossip: Some(GossipConfig {
                payload_kind,
                temperature,
                ..gossip_base()
            }),
            ..ExperimentConfig::new(Subcommand::Gossip)
        }
    } else if let Some(level) = name.strip_prefix("table4-") {
        let level = CommLevel::ALL
            .into_iter()
            .find(|l| l.as_str() == level)
            .ok_or_else(|| unknown(name))?;
        ExperimentConfig {
            language: Some(LanguageConfig {
                level,
                ..LanguageConfig::default()
            }),
            ..ExperimentConfig::new(Subcommand::Language)
        }
    } else {
        match name {
            "table3-baseline" => curriculum(Metric::Random, TargetMode::TrueLabels, 1),
            "table3-stack5-ce-true" => curriculum(Metric::CrossEntropy, TargetMode::TrueLabels, 5),
            "table3-stack2-ce-true" => curriculum(Metric::CrossEntropy, TargetMode::TrueLabels, 2),
            "table3-stack2-euclid-true" => curriculum(Metric::Euclidean, TargetMode::TrueLabels, 2),
            "table3-stack2-random-soft" => curriculum(Metric::Random, TargetMode::SoftLabels, 2),
            _ => return Err(unknown(name)),
        }
    };
    cfg.resolved()
}

fn unknown(name: &str) -> Error {
    Error::config("preset", format!("unknown preset `{name}`; known: {}", PRESETS.join(", ")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_listed_preset_resolves() {
        for name in PRESETS {
            let cfg = preset(name).unwrap();
            let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap(), None).unwrap();
            assert_eq!(again, cfg, "{name}");
        }
        assert!(matches!(preset("table9"), Err(Error::Config { ref key, .. }) if key == "preset"));
        assert!(preset("table2-10n-gossip").is_err());
    }

    #[test]
    fn documented_examples() {
        let b = preset("table3-baseline").unwrap().curriculum.unwrap();
        assert_eq!((b.metric, b.stack_n, b.target_mode), (Metric::Random, 1, TargetMode::TrueLabels));
        let g = preset("table2-10n-labels").unwrap().gossip.unwrap();
        assert_eq!((g.nodes, g.p, g.payload_kind), (10, Some(9), PayloadKind::Labels));
        let l = preset("table4-both").unwrap().language.unwrap();
        assert_eq!((l.level, l.weight()), (CommLevel::BothFeedback, 0.005));
        assert!(preset("table3-stack5-ce-true").unwrap().teacher.is_some());
        assert!(preset("table3-baseline").unwrap().teacher.is_none());
    }
}
