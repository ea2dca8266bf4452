//! Executes a resolved [`ExperimentConfig`] and writes its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::curriculum::{dataset_accuracy, run_curriculum, train_teacher, Teacher, TeacherConfig};
use crate::dataio::{load_mnist_dir, split_train_valid, Dataset, MnistSplit};
use crate::error::{Error, Result};
use crate::gossip::run_gossip;
use crate::harness::config::{DataConfig, EvalSplit, ExperimentConfig, Subcommand};
use crate::harness::metrics::{emit_metrics, write, EmittedFiles, Summary};
use crate::language::run_language_seeds;
use crate::numcore::{checkpoint, Activation, Mlp};

/// Training, validation and test splits.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

pub fn load_splits(data: &DataConfig) -> Result<Splits> {
    let dir = data.mnist_dir();
    let full = load_mnist_dir(&dir, MnistSplit::Train)?;
    let test = load_mnist_dir(&dir, MnistSplit::Test)?;
    let (train, valid) = split_train_valid(&full, data.valid_size, data.split_seed)?;
    Ok(Splits { train, valid, test })
}

/// What a run left on disk.
#[derive(Debug)]
pub struct RunOutput {
    pub manifest: PathBuf,
    pub metrics: Vec<EmittedFiles>,
    /// Overall summary; for language runs the seed average.
    pub summary: Summary,
    pub summary_path: PathBuf,
}

/// Identifies which configuration and split a cached teacher was trained with.
#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct TeacherStamp {
    valid_size: usize,
    split_seed: u64,
    teacher: TeacherConfig,
}

fn stamp_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".toml");
    PathBuf::from(s)
}

/// Loads the teacher at `ckpt` when its stamp matches, otherwise trains and caches it.
///
/// Returns the model and whether it was freshly trained.
pub fn obtain_teacher(cfg: &TeacherConfig, data: &DataConfig, ckpt: &Path, splits: &Splits) -> Result<(Mlp<f32>, bool)> {
    let stamp = TeacherStamp {
        valid_size: data.valid_size,
        split_seed: data.split_seed,
        teacher: cfg.clone(),
    };
    let mut model = cfg.build(splits.train.dim(), splits.train.classes())?;
    let cached = fs::read_to_string(stamp_path(ckpt))
        .ok()
        .and_then(|t| toml::from_str::<TeacherStamp>(&t).ok());
    if cached.as_ref() == Some(&stamp) && ckpt.exists() {
        checkpoint::load(&mut model, ckpt)?;
        return Ok((model, false));
    }
    let run = train_teacher(cfg, &splits.train, &splits.valid)?;
    save_teacher(&run.model, &stamp, ckpt)?;
    Ok((run.model, true))
}

fn save_teacher(model: &Mlp<f32>, stamp: &TeacherStamp, ckpt: &Path) -> Result<()> {
    if let Some(dir) = ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    checkpoint::save(model, ckpt)?;
    let text = toml::to_string(stamp).map_err(|e| Error::invalid(e.to_string()))?;
    write(&stamp_path(ckpt), text.as_bytes())
}

/// Rebuilds a ReLU network with an identity head from a checkpoint's layer shapes.
pub fn load_checkpoint_model(path: &Path) -> Result<Mlp<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let layers = checkpoint::decode(&bytes)?;
    let Some((first, _)) = layers.first() else {
        return Err(Error::data(format!("{} holds no layers", path.display())));
    };
    let mut dims = vec![first.cols()];
    dims.extend(layers.iter().map(|(w, _)| w.rows()));
    let mut model = Mlp::new(&dims, Activation::Relu, Activation::Identity, 0.0, &mut crate::harness::stream(0, "eval/unused"))?;
    checkpoint::load_into(&mut model, layers)?;
    Ok(model)
}

/// Runs `cfg` on data loaded from its data section, writing everything under `out`.
pub fn execute(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutput> {
    let splits = load_splits(&cfg.data)?;
    execute_with(cfg, &splits, out)
}

/// As [`execute`] with the splits supplied by the caller.
pub fn execute_with(cfg: &ExperimentConfig, splits: &Splits, out: &Path) -> Result<RunOutput> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let manifest = out.join("manifest.toml");
    write(&manifest, cfg.to_toml()?.as_bytes())?;
    let missing = |name: &str| Error::config(name, "section missing from a resolved config");
    let (metrics, summary, summary_path) = match cfg.experiment {
        Subcommand::Gossip => {
            let g = cfg.gossip.as_ref().ok_or_else(|| missing("gossip"))?;
            let run = run_gossip(g, &splits.train, &splits.valid)?;
            let files = emit_metrics(&run.metrics, &run.summary, out, &run.metrics.run_id)?;
            let path = files.summary.clone();
            (vec![files], run.summary, path)
        }
        Subcommand::Curriculum => {
            let c = cfg.curriculum.as_ref().ok_or_else(|| missing("curriculum"))?;
            let teacher = match &cfg.teacher {
                Some(t) if c.needs_teacher() => {
                    let (model, _) = obtain_teacher(t, &cfg.data, &cfg.teacher_path(), splits)?;
                    Some(Teacher::from_model(&model, &splits.train)?)
                }
                _ => None,
            };
            let run = run_curriculum(c, teacher.as_ref(), &splits.train, &splits.valid, &splits.test)?;
            let files = emit_metrics(&run.metrics, &run.summary, out, &run.metrics.run_id)?;
            let path = files.summary.clone();
            (vec![files], run.summary, path)
        }
        Subcommand::TrainTeacher => {
            let t = cfg.teacher.as_ref().ok_or_else(|| missing("teacher"))?;
            let run = train_teacher(t, &splits.train, &splits.valid)?;
            let ckpt = cfg.teacher_path();
            let stamp = TeacherStamp {
                valid_size: cfg.data.valid_size,
                split_seed: cfg.data.split_seed,
                teacher: t.clone(),
            };
            save_teacher(&run.model, &stamp, &ckpt)?;
            let mut summary = run.summary.clone();
            summary.add("test_acc", dataset_accuracy(&run.model, &splits.test)?);
            summary.add("checkpoint", ckpt.display());
            let files = emit_metrics(&run.metrics, &summary, out, &run.metrics.run_id)?;
            let path = files.summary.clone();
            (vec![files], summary, path)
        }
        Subcommand::Language => {
            let l = cfg.language.as_ref().ok_or_else(|| missing("language"))?;
            let suite = run_language_seeds(l, &splits.train, &splits.valid, &splits.test)?;
            let files = suite
                .runs
                .iter()
                .map(|r| emit_metrics(&r.metrics, &r.summary, out, &r.metrics.run_id))
                .collect::<Result<Vec<_>>>()?;
            let path = out.join(format!("language-{}_summary.csv", l.level.as_str()));
            write(&path, &suite.summary.to_csv()?)?;
            (files, suite.summary, path)
        }
        Subcommand::Eval => {
            let e = cfg.eval.as_ref().ok_or_else(|| missing("eval"))?;
            let ckpt = e.checkpoint.clone().unwrap_or_else(|| cfg.teacher_path());
            let model = load_checkpoint_model(&ckpt)?;
            let (name, ds) = match e.split {
                EvalSplit::Valid => ("valid", &splits.valid),
                EvalSplit::Test => ("test", &splits.test),
            };
            let mut summary = Summary::default();
            summary.add("checkpoint", ckpt.display());
            summary.add("split", name);
            summary.add("rows", ds.len());
            summary.add("accuracy", dataset_accuracy(&model, ds)?);
            let path = out.join("eval_summary.csv");
            write(&path, &summary.to_csv()?)?;
            (Vec::new(), summary, path)
        }
    };
    Ok(RunOutput {
        manifest,
        metrics,
        summary,
        summary_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::make_synthetic;
    use crate::harness::presets::preset;

    fn synthetic_splits() -> Splits {
        let ds = make_synthetic(700, 20, 4, 2).unwrap();
        let (rest, test) = split_train_valid(&ds, 100, 0).unwrap();
        let (train, valid) = split_train_valid(&rest, 100, 1).unwrap();
        Splits { train, valid, test }
    }

    fn small(cfg: &mut ExperimentConfig) {
        if let Some(g) = &mut cfg.gossip {
            g.nodes = 3;
            g.p = Some(2);
            g.rounds = 40;
            g.eval_every = 20;
            g.train_size = Some(300);
            g.eval_size = Some(100);
            g.hidden = vec![8];
        }
        if let Some(c) = &mut cfg.curriculum {
            c.hidden = vec![8];
            c.max_updates = Some(30);
            c.eval_every = 10;
        }
        if let Some(t) = &mut cfg.teacher {
            t.hidden = vec![16];
            t.max_epochs = 2;
        }
        if let Some(l) = &mut cfg.language {
            l.seeds = vec![0, 1];
            l.steps = 20;
            l.eval_every = 10;
            l.length = 4;
            l.trunk = vec![8, 6];
            l.disc_hidden = vec![6];
        }
    }

    #[test]
    fn manifest_rerun_reproduces_metrics() {
        let splits = synthetic_splits();
        let dir = tempfile::tempdir().unwrap();
        for name in ["table2-10n-logits", "table3-stack5-ce-true", "table4-both"] {
            let mut cfg = preset(name).unwrap();
            cfg.teacher_checkpoint = Some(dir.path().join("teacher.ggrad"));
            small(&mut cfg);
            let cfg = cfg.resolved().unwrap();
            let first = execute_with(&cfg, &splits, &dir.path().join(name).join("a")).unwrap();
            let again = ExperimentConfig::from_file(&first.manifest, None).unwrap();
            assert_eq!(again, cfg);
            let second = execute_with(&again, &splits, &dir.path().join(name).join("b")).unwrap();
            assert!(!first.metrics.is_empty());
            for (a, b) in first.metrics.iter().zip(&second.metrics) {
                assert_eq!(fs::read(&a.csv).unwrap(), fs::read(&b.csv).unwrap(), "{name}");
            }
        }
    }

    #[test]
    fn teacher_cache_follows_its_stamp() {
        let splits = synthetic_splits();
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("t.ggrad");
        let cfg = TeacherConfig {
            hidden: vec![12],
            max_epochs: 2,
            ..TeacherConfig::default()
        };
        let data = DataConfig::default();
        let (m1, fresh) = obtain_teacher(&cfg, &data, &ckpt, &splits).unwrap();
        assert!(fresh);
        let (m2, fresh) = obtain_teacher(&cfg, &data, &ckpt, &splits).unwrap();
        assert!(!fresh);
        assert_eq!(checkpoint::encode(&m1), checkpoint::encode(&m2));
        let other = TeacherConfig { seed: 5, ..cfg };
        assert!(obtain_teacher(&other, &data, &ckpt, &splits).unwrap().1);
    }

    #[test]
    fn eval_rebuilds_the_checkpoint() {
        let splits = synthetic_splits();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::new(Subcommand::TrainTeacher);
        cfg.teacher = Some(TeacherConfig {
            hidden: vec![12, 6],
            max_epochs: 2,
            ..TeacherConfig::default()
        });
        cfg.teacher_checkpoint = Some(dir.path().join("t.ggrad"));
        let cfg = cfg.resolved().unwrap();
        let trained = execute_with(&cfg, &splits, dir.path()).unwrap();
        let mut eval = ExperimentConfig::new(Subcommand::Eval);
        eval.teacher_checkpoint = cfg.teacher_checkpoint.clone();
        let out = execute_with(&eval.resolved().unwrap(), &splits, dir.path()).unwrap();
        assert_eq!(out.summary.get("accuracy"), trained.summary.get("test_acc"));
    }

    #[test]
    fn missing_data_is_a_data_error() {
        let mut cfg = ExperimentConfig::new(Subcommand::Gossip);
        cfg.data.root = Some(PathBuf::from("/nonexistent/ggrad"));
        let e = execute(&cfg.resolved().unwrap(), Path::new("/tmp")).unwrap_err();
        assert_eq!(e.exit_code(), 3, "{e}");
    }
}
