use std::fs::File;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use super::{run_training, BatchSampler, TaskSampler, TokenSource, TrainConfig, TrainError, TrainJob, TrainOutcome, METRICS_FILE};
use crate::architectures::{Built, ParamStore};
use crate::objectives::Task;

/// One curriculum stage.
#[derive(Debug, Clone)]
pub struct Stage {
    pub task: Arc<dyn Task>,
    pub config: TrainConfig,
}

/// Trains the stages in order, each starting from the previous stage's
/// parameters. Every stage gets its own directory `stage-{k}-{task}` with
/// checkpoint and metrics; the concatenated records (steps counted across
/// stages, each tagged with its stage) go to `out_dir/metrics.jsonl`.
#[allow(clippy::too_many_arguments)]
pub fn run_curriculum(
    model: &Built,
    model_config: serde_json::Value,
    stages: &[Stage],
    params: ParamStore,
    train: &dyn TokenSource,
    held_out: &dyn TokenSource,
    evals: &[Arc<dyn Task>],
    out_dir: Option<PathBuf>,
    deterministic: bool,
) -> Result<TrainOutcome, TrainError> {
    if stages.is_empty() {
        return Err(TrainError::Config("a curriculum needs at least one stage".into()));
    }
    // Reject incompatible stages before any training.
    let mut samplers = Vec::with_capacity(stages.len());
    for s in stages {
        s.config.validate()?;
        samplers.push(TaskSampler::new(s.task.clone(), model, train)?);
    }
    let eval_samplers =
        evals.iter().map(|t| TaskSampler::new(t.clone(), model, held_out)).collect::<Result<Vec<_>, _>>()?;
    let eval_refs: Vec<&dyn BatchSampler> = eval_samplers.iter().map(|s| s as &dyn BatchSampler).collect();

    let mut params = params;
    let mut records = Vec::new();
    let mut offset = 0;
    for (k, (stage, sampler)) in stages.iter().zip(&samplers).enumerate() {
        let name = format!("stage-{k}-{}", stage.task.name());
        let job = TrainJob {
            model,
            config: &stage.config,
            model_config: model_config.clone(),
            train: sampler,
            evals: eval_refs.clone(),
            out_dir: out_dir.as_ref().map(|d| d.join(&name)),
            deterministic,
            stage: Some(name),
            step_offset: offset,
        };
        let out = run_training(&job, params)?;
        params = out.params;
        records.extend(out.records);
        offset += stage.config.total_steps;
    }
    if let Some(dir) = &out_dir {
        let path = dir.join(METRICS_FILE);
        let mut f = File::create(&path).map_err(|source| TrainError::Io { path: path.clone(), source })?;
        for r in &records {
            let line = serde_json::to_string(r).map_err(|e| TrainError::Config(e.to_string()))?;
            writeln!(f, "{line}").map_err(|source| TrainError::Io { path: path.clone(), source })?;
        }
    }
    Ok(TrainOutcome { params, records })
}
