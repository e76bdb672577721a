//! Layered run configuration: profile defaults, then an optional TOML file,
//! then `key.path=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::{Normalization, PreprocessSpec};
use crate::error::{Error, Result};
use crate::losses::{EmdConfig, SkdLossConfig};
use crate::metrics::IerConfig;
use crate::model::{EncoderSpec, HeadSpec, ProjectorSpec};
use crate::score_dist::{BinSpec, Discretization};
use crate::train::{CfaConfig, OptimConfig, ScoreSetup, SkdConfig, SupervisedConfig, TeacherSource, TrainControl};

pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Reference hyperparameters at full image size.
    Full,
    /// Small images, models and schedules for CI.
    Desk,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Profile::Full),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::Config(format!("unknown profile `{other}` (expected full or desk)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// CFA pool or labeled training set.
    #[serde(default)]
    pub train: Option<PathBuf>,
    #[serde(default)]
    pub unlabeled: Option<PathBuf>,
    #[serde(default)]
    pub eval: Option<PathBuf>,
    pub discretization: Discretization,
    /// Where skipped-sample reports go, relative to the run directory.
    pub skip_report: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub resize: u32,
    pub crop: u32,
    pub hflip_prob: f64,
    pub teacher_norm: Normalization,
    pub student_norm: Normalization,
}

impl PreprocessConfig {
    pub fn spec(&self, seed: u64) -> PreprocessSpec {
        PreprocessSpec {
            resize: self.resize,
            crop: self.crop,
            hflip_prob: self.hflip_prob,
            mode: crate::data::Mode::Train,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub student: EncoderSpec,
    /// The frozen encoder students are aligned to.
    pub teacher: EncoderSpec,
    /// Backbone used for the score teacher in phase II.
    pub score_teacher: EncoderSpec,
    pub projector: ProjectorSpec,
    pub head: HeadSpec,
    pub bins: BinSpec,
}

/// Checkpoints to start from instead of a fresh initialization.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    /// Backbone checkpoint for the frozen alignment target.
    #[serde(default)]
    pub cfa_teacher: Option<PathBuf>,
    /// Backbone checkpoint (e.g. a CFA result) for the student.
    #[serde(default)]
    pub student_backbone: Option<PathBuf>,
    /// Backbone checkpoint for the score teacher before fine-tuning.
    #[serde(default)]
    pub teacher_backbone: Option<PathBuf>,
    /// Fine-tuned score model used as the distillation teacher.
    #[serde(default)]
    pub teacher: Option<PathBuf>,
    /// Feature cache for cache-mode alignment.
    #[serde(default)]
    pub feature_cache: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    #[serde(default)]
    pub max_steps: Option<u64>,
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
}

impl ControlConfig {
    pub fn control(&self) -> TrainControl {
        TrainControl {
            max_steps: self.max_steps,
            checkpoint_every: self.checkpoint_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    /// Output directory; commands fall back to a per-command default.
    #[serde(default)]
    pub run_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub init: InitConfig,
    pub cfa: CfaConfig,
    pub finetune: SupervisedConfig,
    pub skd: SkdConfig,
    pub ier: IerConfig,
    pub control: ControlConfig,
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Full => full(),
            Profile::Desk => desk(),
        }
    }

    /// Resolves profile defaults, then `file`, then `overrides` (`a.b=value`,
    /// the value parsed as TOML and falling back to a bare string).
    pub fn resolve(profile: Option<Profile>, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let file_table = match file {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let t: Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                Some(t)
            }
            None => None,
        };
        let profile = match (profile, file_table.as_ref().and_then(|t| t.get("profile"))) {
            (Some(p), _) => p,
            (None, Some(Value::String(s))) => s.parse()?,
            (None, Some(_)) => return Err(Error::Config("`profile` must be a string".into())),
            (None, None) => Profile::Desk,
        };
        let mut table = to_table(&RunConfig::profile(profile))?;
        if let Some(t) = file_table {
            merge(&mut table, t);
        }
        table.insert("profile".into(), Value::String(profile_name(profile).into()));
        for o in overrides {
            let (key, value) = parse_override(o)?;
            set_path(&mut table, &key, value)?;
        }
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.preprocess.spec(self.seed).validate()?;
        self.model.student.validate()?;
        self.model.teacher.validate()?;
        self.model.score_teacher.validate()?;
        for opt in [&self.cfa.optim, &self.finetune.optim, &self.skd.optim] {
            opt.validate()?;
        }
        for emd in [&self.finetune.emd, &self.skd.emd] {
            emd.validate()?;
            if emd.d != self.model.bins.len() {
                return Err(Error::Config(format!(
                    "emd.d = {} but the label bins have {} values",
                    emd.d,
                    self.model.bins.len()
                )));
            }
        }
        self.ier.validate()?;
        if self.cfa.batch_size == 0 || self.finetune.batch_size == 0 || self.skd.b_s == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config does not serialize: {e}")))
    }

    /// Writes the resolved config into a run directory.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::resolve(None, Some(path), &[])
    }

    pub fn score_setup(&self, student_side: bool) -> ScoreSetup {
        ScoreSetup {
            preprocess: self.preprocess.spec(self.seed),
            norm: if student_side {
                self.preprocess.student_norm
            } else {
                self.preprocess.teacher_norm
            },
            discretization: self.data.discretization,
            ier: self.ier,
            seed: self.seed,
        }
    }
}

fn profile_name(p: Profile) -> &'static str {
    match p {
        Profile::Full => "full",
        Profile::Desk => "desk",
    }
}

fn to_table(cfg: &RunConfig) -> Result<Table> {
    match Value::try_from(cfg) {
        Ok(Value::Table(t)) => Ok(t),
        Ok(_) => unreachable!("structs serialize to tables"),
        Err(e) => Err(Error::Config(format!("config does not serialize: {e}"))),
    }
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) if !is_tagged(&o) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

// a table naming its variant replaces the old one wholesale, so fields of a
// different variant do not leak through
fn is_tagged(t: &Table) -> bool {
    t.contains_key("family") || t.contains_key("kind")
}

fn parse_override(s: &str) -> Result<(String, Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override `{s}` has an empty key segment")));
    }
    let value = match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed"),
        Err(_) => Value::String(raw.to_string()),
    };
    Ok((key.to_string(), value))
}

fn set_path(t: &mut Table, key: &str, value: Value) -> Result<()> {
    let (parents, last) = match key.rsplit_once('.') {
        Some((p, l)) => (Some(p), l),
        None => (None, key),
    };
    let mut cur = t;
    if let Some(parents) = parents {
        for p in parents.split('.') {
            let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
            cur = entry
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a table")))?;
        }
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn full() -> RunConfig {
    let optim = OptimConfig::default();
    RunConfig {
        profile: Profile::Full,
        seed: 0,
        run_dir: None,
        data: DataConfig {
            train: None,
            unlabeled: None,
            eval: None,
            discretization: Discretization::LinearSplit,
            skip_report: "skipped.jsonl".into(),
        },
        preprocess: PreprocessConfig {
            resize: 256,
            crop: 224,
            hflip_prob: 0.5,
            teacher_norm: Normalization::CLIP,
            student_norm: Normalization::IMAGENET,
        },
        model: ModelConfig {
            student: EncoderSpec::TinyTransformer {
                image_size: 224,
                patch: 16,
                width: 192,
                depth: 12,
                heads: 3,
                feature_dim: 192,
            },
            teacher: EncoderSpec::TinyTransformer {
                image_size: 224,
                patch: 16,
                width: 384,
                depth: 12,
                heads: 6,
                feature_dim: 512,
            },
            score_teacher: EncoderSpec::TinyTransformer {
                image_size: 224,
                patch: 16,
                width: 192,
                depth: 12,
                heads: 3,
                feature_dim: 192,
            },
            projector: ProjectorSpec::default(),
            head: HeadSpec::default(),
            bins: BinSpec::default(),
        },
        init: InitConfig::default(),
        cfa: CfaConfig {
            optim: optim.clone(),
            batch_size: 64,
            alignment: Default::default(),
            teacher_source: TeacherSource::Cache,
        },
        finetune: SupervisedConfig {
            optim: optim.clone(),
            batch_size: 16,
            emd: EmdConfig::default(),
        },
        skd: SkdConfig {
            optim,
            b_s: 8,
            loss: SkdLossConfig::default(),
            emd: EmdConfig::default(),
        },
        ier: IerConfig::default(),
        control: ControlConfig::default(),
    }
}

fn desk() -> RunConfig {
    let optim = OptimConfig {
        lr: 1e-3,
        decay_epochs: vec![3],
        total_epochs: 4,
        ..OptimConfig::default()
    };
    let small = |width, feature_dim| EncoderSpec::TinyTransformer {
        image_size: 32,
        patch: 8,
        width,
        depth: 2,
        heads: 2,
        feature_dim,
    };
    let mut cfg = full();
    cfg.profile = Profile::Desk;
    cfg.preprocess.resize = 36;
    cfg.preprocess.crop = 32;
    cfg.model.student = small(32, 32);
    cfg.model.teacher = small(48, 64);
    cfg.model.score_teacher = small(48, 48);
    cfg.model.head = HeadSpec { hidden: vec![32] };
    cfg.cfa.optim = optim.clone();
    cfg.cfa.batch_size = 16;
    cfg.cfa.teacher_source = TeacherSource::Live;
    cfg.finetune.optim = optim.clone();
    cfg.finetune.batch_size = 8;
    cfg.skd.optim = optim;
    cfg.skd.b_s = 4;
    cfg.skd.loss = SkdLossConfig { beta: 1.0, mu: 4 };
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_profile_matches_recipe() {
        let c = RunConfig::profile(Profile::Full);
        assert_eq!(c.cfa.optim.lr, 1e-4);
        assert_eq!(c.cfa.optim.decay_factor, 0.1);
        assert_eq!(c.cfa.optim.total_epochs, 16);
        assert_eq!((c.preprocess.resize, c.preprocess.crop), (256, 224));
        assert_eq!(c.preprocess.hflip_prob, 0.5);
        assert_eq!((c.skd.loss.mu, c.skd.loss.beta), (15, 15.0));
        assert_eq!(c.ier.t, 0.5);
        c.validate().unwrap();
    }

    #[test]
    fn toml_roundtrip() {
        for p in [Profile::Full, Profile::Desk] {
            let c = RunConfig::profile(p);
            let dir = tempfile::tempdir().unwrap();
            let path = c.save(dir.path()).unwrap();
            assert_eq!(RunConfig::load(&path).unwrap(), c);
        }
    }

    #[test]
    fn layers_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "seed = 5\n[skd.loss]\nbeta = 2.0\n").unwrap();
        let c = RunConfig::resolve(
            Some(Profile::Desk),
            Some(&path),
            &["skd.loss.beta=3.5".into(), "data.train=/tmp/m.jsonl".into()],
        )
        .unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.skd.loss.beta, 3.5);
        assert_eq!(c.skd.loss.mu, 4);
        assert_eq!(c.data.train, Some(PathBuf::from("/tmp/m.jsonl")));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::resolve(None, None, &["cfa.optim.lrate=0.1".into()]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("lrate"), "{err}");
        let err = RunConfig::resolve(None, None, &["seed".into()]).unwrap_err();
        assert!(err.to_string().contains("key=value"));
    }

    #[test]
    fn variant_switch_replaces_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(
            &path,
            "[model.student]\nfamily = \"tiny-conv\"\nimage_size = 32\nchannels = [8]\nfeature_dim = 16\n",
        )
        .unwrap();
        let c = RunConfig::resolve(None, Some(&path), &[]).unwrap();
        assert!(!c.model.student.is_transformer());
    }

    #[test]
    fn mismatched_bins_rejected() {
        let err = RunConfig::resolve(None, None, &["skd.emd.d=5".into()]).unwrap_err();
        assert!(err.to_string().contains("emd.d"));
    }
}
