use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::thread;
use std::time::{SystemTime, UNIX_EPOCH};

use super::journal::{latest_by_key, read_journal, write_sorted_predictions, Journal};
use super::{
    parse_prediction, AbstainReason, Backend, ParseStatus, PredictionKey, PredictionRecord,
    JOURNAL_FILE, PREDICTIONS_FILE,
};
use crate::corpus::{Corpus, SignalTask, Slice};
use crate::error::{Error, Result};
use crate::promptkit::{Configuration, ModelDialect, PromptCompiler};

/// One backend per model dialect.
#[derive(Clone, Default)]
pub struct BackendSet {
    backends: BTreeMap<ModelDialect, Arc<dyn Backend>>,
}

impl BackendSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, dialect: ModelDialect, backend: Arc<dyn Backend>) -> Self {
        self.backends.insert(dialect, backend);
        self
    }

    /// The same backend for every dialect.
    pub fn uniform(backend: Arc<dyn Backend>) -> Self {
        ModelDialect::ALL
            .into_iter()
            .fold(Self::new(), |s, d| s.with(d, backend.clone()))
    }

    pub fn get(&self, dialect: ModelDialect) -> Option<&Arc<dyn Backend>> {
        self.backends.get(&dialect)
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub max_in_flight: usize,
    /// Stop after scheduling this many new keys (the rest stay pending).
    pub max_new_keys: Option<usize>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            max_in_flight: 1,
            max_new_keys: None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    /// Latest record per key, sorted.
    pub records: Vec<PredictionRecord>,
    pub pending_before: usize,
    pub new_records: usize,
    pub backend_calls: usize,
    pub abstentions: usize,
    pub transport_errors: usize,
}

struct WorkItem<'a> {
    slice: &'a Slice,
    task: &'static SignalTask,
    config: Configuration,
}

fn now_ms() -> Option<u64> {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .ok()
        .map(|d| d.as_millis() as u64)
}

fn execute(item: &WorkItem<'_>, compiler: &PromptCompiler, backend: &dyn Backend) -> (PredictionRecord, bool) {
    let mut record = PredictionRecord {
        visit_id: item.slice.visit_id.clone(),
        slice_index: item.slice.slice_index,
        signal_id: item.task.signal_id.to_string(),
        config_id: item.config.config_id(),
        prediction: None,
        parse_status: ParseStatus::Abstain,
        abstain_reason: None,
        raw_text: String::new(),
        positive_logprob: None,
        negative_logprob: None,
        error: None,
        timestamp_ms: None,
    };
    let prompt = match compiler.compile(item.config, item.task, item.slice) {
        Ok(p) => p,
        Err(e) => {
            record.abstain_reason = Some(AbstainReason::PromptUnavailable);
            record.error = Some(e.to_string());
            record.timestamp_ms = now_ms();
            return (record, false);
        }
    };
    match backend.generate(&prompt) {
        Ok(resp) => {
            let parsed = parse_prediction(&resp, &prompt.parse_plan);
            record.prediction = parsed.prediction;
            record.parse_status = parsed.status;
            record.abstain_reason = parsed.abstain_reason;
            record.raw_text = resp.text;
            if let Some(lp) = resp.candidate_logprobs {
                record.positive_logprob = Some(lp.positive);
                record.negative_logprob = Some(lp.negative);
            }
        }
        Err(e) => {
            record.parse_status = ParseStatus::TransportError;
            record.error = Some(e.to_string());
        }
    }
    record.timestamp_ms = now_ms();
    (record, true)
}

/// Runs every (labeled slice, task, configuration) key not yet answered in
/// the journal under `run_dir`.
///
/// Records are appended to the journal as they complete; keys whose latest
/// record is a transport error are retried. On return the sorted prediction
/// file is rewritten from the journal.
pub fn run_experiment(
    corpus: &Corpus,
    configs: &[Configuration],
    tasks: &[&'static SignalTask],
    backends: &BackendSet,
    compiler: &PromptCompiler,
    run_dir: &Path,
    options: &RunOptions,
) -> Result<RunSummary> {
    if options.max_in_flight == 0 {
        return Err(Error::Config("max_in_flight must be at least 1".into()));
    }
    for c in configs {
        if !c.is_valid() {
            return Err(Error::Config(format!("configuration {c} is not evaluated")));
        }
        if backends.get(c.dialect).is_none() {
            return Err(Error::Config(format!(
                "no backend configured for dialect `{}`",
                c.dialect.key()
            )));
        }
    }
    let journal_path = run_dir.join(JOURNAL_FILE);
    let done: BTreeSet<PredictionKey> = latest_by_key(read_journal(&journal_path)?)
        .into_iter()
        .filter(|r| r.parse_status != ParseStatus::TransportError)
        .map(|r| r.key())
        .collect();

    let task_ids: BTreeSet<&str> = tasks.iter().map(|t| t.signal_id).collect();
    let slices: BTreeMap<(&str, usize), &Slice> = corpus
        .slices
        .iter()
        .map(|s| ((s.visit_id.as_str(), s.slice_index), s))
        .collect();
    let mut work = Vec::new();
    for key in corpus.labels.labels.keys() {
        if !task_ids.contains(key.signal_id.as_str()) {
            continue;
        }
        let Some(slice) = slices.get(&(key.visit_id.as_str(), key.slice_index)) else {
            continue;
        };
        let task = tasks
            .iter()
            .find(|t| t.signal_id == key.signal_id)
            .expect("task id filtered above");
        for &config in configs {
            let pk = PredictionKey {
                visit_id: key.visit_id.clone(),
                slice_index: key.slice_index,
                signal_id: key.signal_id.clone(),
                config_id: config.config_id(),
            };
            if !done.contains(&pk) {
                work.push(WorkItem {
                    slice,
                    task,
                    config,
                });
            }
        }
    }
    let pending_before = work.len();
    if let Some(limit) = options.max_new_keys {
        work.truncate(limit);
    }

    let mut journal = Journal::open(&journal_path)?;
    let next = AtomicUsize::new(0);
    let calls = AtomicUsize::new(0);
    let mut summary = RunSummary {
        pending_before,
        ..Default::default()
    };
    let workers = options.max_in_flight.min(work.len()).max(1);
    let write_result: Result<()> = thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<PredictionRecord>();
        for _ in 0..workers {
            let tx = tx.clone();
            let (work, next, calls) = (&work, &next, &calls);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(item) = work.get(i) else { break };
                let backend = backends.get(item.config.dialect).expect("checked above");
                let (record, called) = execute(item, compiler, backend.as_ref());
                if called {
                    calls.fetch_add(1, Ordering::SeqCst);
                }
                if tx.send(record).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for record in rx {
            match record.parse_status {
                ParseStatus::Abstain => summary.abstentions += 1,
                ParseStatus::TransportError => summary.transport_errors += 1,
                _ => {}
            }
            summary.new_records += 1;
            if let Err(e) = journal.append(&record) {
                // Stop handing out work; in-flight items finish and are dropped.
                next.store(usize::MAX / 2, Ordering::SeqCst);
                return Err(e);
            }
        }
        Ok(())
    });
    write_result?;
    summary.backend_calls = calls.load(Ordering::SeqCst);
    summary.records = latest_by_key(read_journal(&journal_path)?);
    write_sorted_predictions(run_dir.join(PREDICTIONS_FILE), &summary.records)?;
    Ok(summary)
}
