//! The four subcommands. Each reads only the config (plus a checkpoint
//! where needed) and writes only under the experiment's output directory.

use std::path::{Path, PathBuf};

use maml_core::data::{case_rng, generate_synthetic, write_dataset};
use maml_core::engine::{
    evaluate, predict_multimodal, train, Checkpoint, EvalMode, Flow, JsonlLog, MamlModel, Network, Report,
    SingleModel, StepRecord, TrainObserver, TrainState, TrainedModel,
};
use maml_core::fusion::export_attention;
use maml_core::io::VolumeFormat;
use maml_core::{Error, Result};

use crate::config::{DataSource, ExperimentConfig, ModelKind};

/// Stream id for weight initialisation, distinct from per-case streams.
const INIT_STREAM: u64 = 0x1417;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.into(), source }
}

fn is_nonempty_dir(dir: &Path) -> bool {
    std::fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if is_nonempty_dir(dir) {
        if !force {
            return Err(Error::Config(format!(
                "{} already exists and is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
        std::fs::remove_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

pub struct SynthSummary {
    pub cases: usize,
    pub lesions: usize,
    pub foreground_fraction: f64,
    pub manifest: PathBuf,
}

/// Writes the synthetic dataset to `<output_dir>/data`.
pub fn synth(cfg: &ExperimentConfig, force: bool) -> Result<SynthSummary> {
    let DataSource::Synthetic(spec) = &cfg.data else {
        return Err(Error::Config("synth needs a `kind = \"synthetic\"` data section".into()));
    };
    let dir = cfg.output_dir.join("data");
    prepare_dir(&dir, force)?;
    let cases = generate_synthetic(spec)?;
    write_dataset(&dir, cases.iter().map(|c| (&c.case, Some(c.lesions.len()))), VolumeFormat::Nifti)?;
    let voxels: usize = cases.iter().map(|c| c.case.mask().data().len()).sum();
    let fg: usize = cases.iter().map(|c| c.case.mask().count()).sum();
    Ok(SynthSummary {
        cases: cases.len(),
        lesions: cases.iter().map(|c| c.lesions.len()).sum(),
        foreground_fraction: fg as f64 / voxels as f64,
        manifest: dir.join("manifest.csv"),
    })
}

/// Streams step records to JSONL and snapshots the model every epoch.
struct RunObserver<'a> {
    log: JsonlLog,
    cfg: &'a ExperimentConfig,
    snapshot: serde_json::Value,
}

impl RunObserver<'_> {
    fn save<M: Network<f32>>(&self, s: &TrainState<'_, M>, name: &str) -> Result<()> {
        let ckpt = Checkpoint::capture(s.model, Some(s.optimizer), s.epoch, s.step, &self.cfg.train, self.snapshot.clone());
        ckpt.save(&self.cfg.checkpoint_dir().join(name))
    }
}

impl<M: Network<f32>> TrainObserver<M> for RunObserver<'_> {
    fn on_step(&mut self, record: &StepRecord) -> Result<()> {
        self.log.write(record)
    }

    fn on_epoch(&mut self, s: &TrainState<'_, M>) -> Result<Flow> {
        self.log.flush()?;
        self.save(s, "last.json")?;
        let every = self.cfg.checkpoint_every;
        if every > 0 && s.epoch.is_multiple_of(every) {
            self.save(s, &format!("epoch_{:04}.json", s.epoch))?;
        }
        Ok(Flow::Continue)
    }

    fn on_divergence(&mut self, s: &TrainState<'_, M>) -> Result<()> {
        self.log.flush()?;
        self.save(s, "diverged.json")
    }
}

pub struct TrainSummary {
    pub epochs: usize,
    pub steps: u64,
    pub final_loss: Option<f64>,
    pub checkpoint: PathBuf,
}

pub fn train_cmd(cfg: &ExperimentConfig, force: bool) -> Result<TrainSummary> {
    let (train_cases, _) = cfg.split(cfg.load_cases()?);
    prepare_dir(&cfg.checkpoint_dir(), force)?;
    let config_path = cfg.output_dir.join("config.toml");
    std::fs::write(&config_path, cfg.to_toml()).map_err(io_err(&config_path))?;
    let mut obs = RunObserver {
        log: JsonlLog::create(&cfg.output_dir.join("train.jsonl"))?,
        cfg,
        snapshot: serde_json::to_value(cfg).expect("config is plain data"),
    };
    let mut rng = case_rng(cfg.train.seed, INIT_STREAM);
    let outcome = match &cfg.model {
        ModelKind::Maml => {
            let mut m = MamlModel::<f32>::new(&cfg.modalities, &cfg.backbone, &cfg.fusion, &mut rng)?;
            train(&mut m, &train_cases, &cfg.train, &mut obs)?
        }
        ModelKind::Single(id) => {
            let mut m = SingleModel::<f32>::new(id, &cfg.backbone, &mut rng)?;
            train(&mut m, &train_cases, &cfg.train, &mut obs)?
        }
    };
    Ok(TrainSummary {
        epochs: outcome.epochs,
        steps: outcome.steps,
        final_loss: outcome.epoch_losses.last().copied(),
        checkpoint: cfg.last_checkpoint(),
    })
}

/// Loads a checkpoint and checks it against the experiment's modalities.
pub fn load_model(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<TrainedModel> {
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| cfg.last_checkpoint());
    let model = Checkpoint::load(&path)?.model()?;
    let expected = cfg.canonical_modalities();
    let ok = match &model {
        TrainedModel::Maml(m) => m.modalities() == expected.as_slice(),
        TrainedModel::Single(m) => expected.contains(m.modality()),
    };
    if !ok {
        return Err(Error::Config(format!(
            "checkpoint {} covers {:?} but the experiment lists {expected:?}",
            path.display(),
            model.modalities()
        )));
    }
    Ok(model)
}

pub fn default_mode(model: &TrainedModel) -> EvalMode {
    match model {
        TrainedModel::Maml(_) => EvalMode::Multimodal,
        TrainedModel::Single(m) => EvalMode::Single(m.modality().clone()),
    }
}

/// Evaluates the held-out split and writes `reports/<mode>.{csv,txt}`.
pub fn eval_cmd(cfg: &ExperimentConfig, checkpoint: Option<&Path>, mode: Option<EvalMode>) -> Result<(Report, PathBuf)> {
    let model = load_model(cfg, checkpoint)?;
    let mode = mode.unwrap_or_else(|| default_mode(&model));
    let (_, test) = cfg.split(cfg.load_cases()?);
    let report = evaluate(&test, &model, &mode, cfg.window())?;
    let dir = cfg.output_dir.join("reports");
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let stem = ExperimentConfig::report_stem(&mode);
    report.write(&dir, &stem)?;
    Ok((report, dir.join(format!("{stem}.csv"))))
}

/// Writes one attention volume per modality to `attention/`.
pub fn export_attention_cmd(cfg: &ExperimentConfig, checkpoint: Option<&Path>, case_id: &str) -> Result<Vec<PathBuf>> {
    let TrainedModel::Maml(model) = load_model(cfg, checkpoint)? else {
        return Err(Error::Config("attention maps need a fused (maml) checkpoint".into()));
    };
    let cases = cfg.load_cases()?;
    let case = cases
        .iter()
        .find(|c| c.case_id() == case_id)
        .ok_or_else(|| Error::Config(format!("unknown case id `{case_id}`")))?;
    let pred = predict_multimodal(case, &model, cfg.window())?;
    let dir = cfg.output_dir.join("attention");
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let format = VolumeFormat::Nifti;
    pred.attention
        .iter()
        .map(|(m, att)| {
            let p = dir.join(format!("{case_id}_{m}.{}", format.extension()));
            export_attention(att, case, &p, format)?;
            Ok(p)
        })
        .collect()
}
