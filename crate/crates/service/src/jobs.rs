use std::fs;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use crate::error::{ApiError, ApiResult};
use crate::workspace::{new_id, write_atomic, Workspace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Run,
    Influence,
    Segment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

/// `result_ref` is set exactly when the job is done, `error` exactly when it
/// failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub kind: JobKind,
    pub state: JobState,
    pub progress: f64,
    pub result_ref: Option<String>,
    pub error: Option<String>,
}

/// Handle given to job bodies for progress reports.
pub struct Progress {
    ws: Workspace,
    job: Job,
}

impl Progress {
    pub fn job_id(&self) -> &str {
        &self.job.id
    }

    pub fn report(&mut self, fraction: f64) {
        self.job.progress = fraction.clamp(0.0, 1.0);
        if let Err(e) = store(&self.ws, &self.job) {
            log::warn!("job {}: progress not saved: {e}", self.job.id);
        }
    }
}

fn store(ws: &Workspace, job: &Job) -> std::io::Result<()> {
    let bytes = serde_json::to_vec_pretty(job).expect("job serializes");
    write_atomic(&ws.job_path(&job.id), &bytes)
}

pub fn load(ws: &Workspace, id: &str) -> ApiResult<Job> {
    Ok(serde_json::from_slice(&ws.read_job_bytes(id)?)?)
}

/// Runs blocking job bodies with at most `workers` in flight.
#[derive(Clone)]
pub struct JobPool {
    ws: Workspace,
    permits: Arc<Semaphore>,
}

impl JobPool {
    /// Jobs left queued or running by a previous process can never finish,
    /// so they are marked failed before the pool accepts work.
    pub fn new(ws: Workspace, workers: usize) -> std::io::Result<Self> {
        for entry in fs::read_dir(ws.root().join("jobs"))? {
            let path = entry?.path();
            if path.extension().is_none_or(|e| e != "json") {
                continue;
            }
            let Ok(mut job) = serde_json::from_slice::<Job>(&fs::read(&path)?) else {
                continue;
            };
            if matches!(job.state, JobState::Queued | JobState::Running) {
                job.state = JobState::Failed;
                job.error = Some("interrupted by service restart".into());
                job.result_ref = None;
                store(&ws, &job)?;
            }
        }
        Ok(Self {
            ws,
            permits: Arc::new(Semaphore::new(workers.max(1))),
        })
    }

    /// Queues `work`, which returns the result reference on success.
    pub fn submit<F>(&self, kind: JobKind, work: F) -> ApiResult<Job>
    where
        F: FnOnce(&mut Progress) -> ApiResult<String> + Send + 'static,
    {
        let job = Job {
            id: new_id(),
            kind,
            state: JobState::Queued,
            progress: 0.0,
            result_ref: None,
            error: None,
        };
        store(&self.ws, &job).map_err(ApiError::from)?;
        let ws = self.ws.clone();
        let permits = self.permits.clone();
        let queued = job.clone();
        tokio::spawn(async move {
            let _permit = permits.acquire_owned().await.expect("semaphore is never closed");
            let mut running = queued;
            running.state = JobState::Running;
            if let Err(e) = store(&ws, &running) {
                log::error!("job {}: {e}", running.id);
            }
            let fallback = running.clone();
            let mut progress = Progress { ws: ws.clone(), job: running };
            let outcome = tokio::task::spawn_blocking(move || {
                let r = work(&mut progress);
                (progress.job, r)
            })
            .await;
            let (mut job, result) = match outcome {
                Ok(pair) => pair,
                Err(e) => (fallback, Err(ApiError::Internal(format!("worker panicked: {e}")))),
            };
            match result {
                Ok(reference) => {
                    job.state = JobState::Done;
                    job.progress = 1.0;
                    job.result_ref = Some(reference);
                }
                Err(e) => {
                    log::warn!("job {} failed: {e}", job.id);
                    job.state = JobState::Failed;
                    job.error = Some(e.to_string());
                }
            }
            if let Err(e) = store(&ws, &job) {
                log::error!("job {}: {e}", job.id);
            }
        });
        Ok(job)
    }
}
