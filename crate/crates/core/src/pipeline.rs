//! Asynchronous fine-tuning: generators fill a bounded cache of trajectory
//! batches, one optimizer consumes it and publishes versioned checkpoints,
//! and a validator scores each new checkpoint to select the final model.
//!
//! Checkpoints move between roles through the filesystem. A version is
//! written into a hidden temporary directory and renamed into place before
//! the `LATEST` pointer (itself replaced atomically) names it, so a reader
//! sees either a complete version or none.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Catalog, EvalCase};
use crate::error::{Error, IoContext, Result};
use crate::evalkit::{case_histories, csv_io, metrics, recommend, Strategy};
use crate::nnet::{decode_checkpoint, encode_checkpoint, write_atomic, ModelParams};
use crate::ppo::{
    ppo_update, sample_trajectories, EpisodeCase, PpoConfig, PpoOptimizer, Trajectory, UpdateStats,
};
use crate::reward::{list_metric, RewardKind, RewardSpec};

/// Trajectories produced together by one generator from one policy version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryBatch {
    pub generator: u64,
    /// Position of this batch in its generator's output.
    pub sequence: u64,
    pub policy_version: u64,
    pub trajectories: Vec<Trajectory>,
}

struct CacheState {
    batches: VecDeque<Arc<TrajectoryBatch>>,
    max_len_seen: usize,
    pushes: u64,
}

/// Holds the last `capacity` batches; pushing into a full cache evicts the
/// oldest. Many producers, one consumer.
pub struct RecommendationCache {
    capacity: usize,
    state: Mutex<CacheState>,
    ready: Condvar,
}

impl RecommendationCache {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("cache capacity M must be positive".into()));
        }
        Ok(Self {
            capacity,
            state: Mutex::new(CacheState {
                batches: VecDeque::with_capacity(capacity),
                max_len_seen: 0,
                pushes: 0,
            }),
            ready: Condvar::new(),
        })
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, CacheState> {
        // a panicking holder cannot leave the deque half-updated
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&self, batch: TrajectoryBatch) {
        let mut s = self.lock();
        if s.batches.len() == self.capacity {
            s.batches.pop_front();
        }
        s.batches.push_back(Arc::new(batch));
        s.pushes += 1;
        s.max_len_seen = s.max_len_seen.max(s.batches.len());
        drop(s);
        self.ready.notify_all();
    }

    /// A uniform draw over the held batches, waiting up to `timeout` for the
    /// cache to become non-empty.
    pub fn sample(&self, rng: &mut ChaCha8Rng, timeout: Duration) -> Option<Arc<TrajectoryBatch>> {
        let guard = self.lock();
        let (s, _) = self
            .ready
            .wait_timeout_while(guard, timeout, |s| s.batches.is_empty())
            .unwrap_or_else(|e| e.into_inner());
        if s.batches.is_empty() {
            return None;
        }
        let i = rng.random_range(0..s.batches.len());
        Some(Arc::clone(&s.batches[i]))
    }

    pub fn len(&self) -> usize {
        self.lock().batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Largest size observed right after any push.
    pub fn max_len_seen(&self) -> usize {
        self.lock().max_len_seen
    }

    pub fn pushes(&self) -> u64 {
        self.lock().pushes
    }

    /// `(generator, sequence)` of the held batches, oldest first.
    pub fn held(&self) -> Vec<(u64, u64)> {
        self.lock()
            .batches
            .iter()
            .map(|b| (b.generator, b.sequence))
            .collect()
    }
}

const POLICY_FILE: &str = "policy.ckpt";
const VALUE_FILE: &str = "value.ckpt";
const SUMS_FILE: &str = "SHA256SUMS";
const LATEST_FILE: &str = "LATEST";

/// A policy/value pair read from the store, with the digests it was
/// verified against.
#[derive(Debug, Clone)]
pub struct StoredVersion {
    pub version: u64,
    pub policy: ModelParams,
    pub value: ModelParams,
    pub policy_sha256: String,
    pub value_sha256: String,
}

/// Versioned checkpoints under `<dir>/v<NNNN>/` with a `LATEST` pointer.
/// One writer; any number of readers, in this or other processes.
pub struct CheckpointStore {
    dir: PathBuf,
    keep_versions: usize,
    corrupt_reads: AtomicU64,
    tmp_counter: AtomicU64,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl CheckpointStore {
    /// Opens (creating if needed) a store that retains the newest
    /// `keep_versions` versions; 0 keeps everything.
    pub fn open(dir: &Path, keep_versions: usize) -> Result<Self> {
        fs::create_dir_all(dir).at(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            keep_versions,
            corrupt_reads: AtomicU64::new(0),
            tmp_counter: AtomicU64::new(0),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn version_dir(&self, version: u64) -> PathBuf {
        self.dir.join(format!("v{version:04}"))
    }

    /// Reads that failed checksum or format verification.
    pub fn corrupt_reads(&self) -> u64 {
        self.corrupt_reads.load(Ordering::Relaxed)
    }

    pub fn latest_version(&self) -> Result<Option<u64>> {
        let path = self.dir.join(LATEST_FILE);
        match fs::read_to_string(&path) {
            Ok(text) => text.trim().parse().map(Some).map_err(|_| {
                Error::Checkpoint(format!("{} does not hold a version number", path.display()))
            }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::Io { path, source: e }),
        }
    }

    /// Writes a complete version and then moves the pointer to it. Versions
    /// must increase.
    pub fn publish(&self, version: u64, policy: &ModelParams, value: &ModelParams) -> Result<()> {
        if let Some(latest) = self.latest_version()? {
            if version <= latest {
                return Err(Error::Checkpoint(format!(
                    "version {version} does not advance past {latest}"
                )));
            }
        }
        let final_dir = self.version_dir(version);
        let tmp = self.dir.join(format!(
            ".v{version:04}.tmp-{}-{}",
            std::process::id(),
            self.tmp_counter.fetch_add(1, Ordering::Relaxed)
        ));
        fs::create_dir_all(&tmp).at(&tmp)?;
        let mut sums = String::new();
        for (name, params) in [(POLICY_FILE, policy), (VALUE_FILE, value)] {
            let bytes = encode_checkpoint(params);
            sums.push_str(&format!("{}  {name}\n", sha256_hex(&bytes)));
            write_atomic(&tmp.join(name), &bytes)?;
        }
        write_atomic(&tmp.join(SUMS_FILE), sums.as_bytes())?;
        fs::rename(&tmp, &final_dir).at(&final_dir)?;
        write_atomic(
            &self.dir.join(LATEST_FILE),
            format!("{version}\n").as_bytes(),
        )?;
        self.prune(version)
    }

    fn prune(&self, latest: u64) -> Result<()> {
        if self.keep_versions == 0 {
            return Ok(());
        }
        let mut versions = self.list_versions()?;
        versions.retain(|&v| v != latest);
        versions.sort_unstable();
        let excess = (versions.len() + 1).saturating_sub(self.keep_versions);
        for v in &versions[..excess.min(versions.len())] {
            let dir = self.version_dir(*v);
            // a reader holding the directory open keeps working on Unix
            if let Err(e) = fs::remove_dir_all(&dir) {
                log::warn!("could not prune {}: {e}", dir.display());
            }
        }
        Ok(())
    }

    /// Published versions present on disk.
    pub fn list_versions(&self) -> Result<Vec<u64>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.dir).at(&self.dir)? {
            let entry = entry.at(&self.dir)?;
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if let Some(v) = name.strip_prefix('v').and_then(|n| n.parse().ok()) {
                out.push(v);
            }
        }
        out.sort_unstable();
        Ok(out)
    }

    /// Loads and verifies one version. A checksum or format failure is
    /// counted as a corrupt read.
    pub fn load(&self, version: u64) -> Result<StoredVersion> {
        let dir = self.version_dir(version);
        let sums_path = dir.join(SUMS_FILE);
        let sums = fs::read_to_string(&sums_path).at(&sums_path)?;
        let expected = |name: &str| {
            sums.lines()
                .find_map(|l| l.strip_suffix(name).map(|h| h.trim().to_string()))
                .ok_or_else(|| {
                    Error::Checkpoint(format!(
                        "{} lists no digest for {name}",
                        sums_path.display()
                    ))
                })
        };
        let read = |name: &str| -> Result<(ModelParams, String)> {
            let path = dir.join(name);
            let bytes = fs::read(&path).at(&path)?;
            let digest = sha256_hex(&bytes);
            let want = expected(name)?;
            if digest != want {
                self.corrupt_reads.fetch_add(1, Ordering::Relaxed);
                return Err(Error::Checkpoint(format!(
                    "{} has digest {digest}, expected {want}",
                    path.display()
                )));
            }
            let params = decode_checkpoint(&bytes).inspect_err(|_| {
                self.corrupt_reads.fetch_add(1, Ordering::Relaxed);
            })?;
            Ok((params, digest))
        };
        let (policy, policy_sha256) = read(POLICY_FILE)?;
        let (value, value_sha256) = read(VALUE_FILE)?;
        Ok(StoredVersion {
            version,
            policy,
            value,
            policy_sha256,
            value_sha256,
        })
    }

    /// Loads whatever `LATEST` names.
    pub fn load_latest(&self) -> Result<StoredVersion> {
        let v = self.latest_version()?.ok_or_else(|| {
            Error::Checkpoint(format!("{} has no published version", self.dir.display()))
        })?;
        self.load(v)
    }
}

/// Retries `load_latest` with exponential backoff (10 ms doubling to 1 s)
/// until it succeeds or `stop` is raised.
fn load_latest_with_retry(store: &CheckpointStore, stop: &AtomicBool) -> Option<StoredVersion> {
    let mut delay = Duration::from_millis(10);
    loop {
        match store.load_latest() {
            Ok(v) => return Some(v),
            Err(e) => {
                log::warn!("checkpoint read failed, retrying in {delay:?}: {e}");
                if stop.load(Ordering::Relaxed) {
                    return None;
                }
                thread::sleep(delay);
                delay = (delay * 2).min(Duration::from_secs(1));
            }
        }
    }
}

/// Cooperative shutdown flags shared by all roles.
#[derive(Debug, Default)]
pub struct Shutdown {
    pub stop: AtomicBool,
    pub generators_alive: AtomicUsize,
}

impl Shutdown {
    pub fn raise(&self) {
        self.stop.store(true, Ordering::Relaxed);
    }

    pub fn raised(&self) -> bool {
        self.stop.load(Ordering::Relaxed)
    }
}

/// Random stream of generator `id`; distinct ids never share a stream.
pub fn generator_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1000 + id);
    rng
}

fn optimizer_rngs(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut cache_rng = ChaCha8Rng::seed_from_u64(seed);
    cache_rng.set_stream(1);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    shuffle_rng.set_stream(2);
    (cache_rng, shuffle_rng)
}

/// Episode sources and reward shared by the generators.
pub struct GeneratorInputs<'a> {
    pub cases: &'a [EpisodeCase],
    pub spec: &'a RewardSpec,
    pub catalog: &'a Catalog,
    pub batch_size: usize,
}

/// Samples `batch_size` distinct cases (or all, if fewer) and plays them.
fn generate_batch(
    inputs: &GeneratorInputs<'_>,
    policy: &ModelParams,
    value: &ModelParams,
    policy_version: u64,
    generator: u64,
    sequence: u64,
    rng: &mut ChaCha8Rng,
) -> Result<TrajectoryBatch> {
    let n = inputs.cases.len();
    let picks = sample_indices(rng, n, inputs.batch_size.min(n));
    let cases: Vec<&EpisodeCase> = picks.iter().map(|i| &inputs.cases[i]).collect();
    let trajectories = sample_trajectories(
        policy,
        value,
        inputs.spec,
        inputs.catalog,
        &cases,
        policy_version,
        rng,
    )?;
    Ok(TrajectoryBatch {
        generator,
        sequence,
        policy_version,
        trajectories,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorReport {
    pub batches: u64,
    pub refreshes: u64,
}

/// Produces batches until `shutdown` is raised, switching to each newly
/// published checkpoint. Read failures are retried and never end the run.
pub fn run_generator(
    cache: &RecommendationCache,
    store: &CheckpointStore,
    inputs: &GeneratorInputs<'_>,
    generator: u64,
    seed: u64,
    shutdown: &Shutdown,
) -> Result<GeneratorReport> {
    if inputs.cases.is_empty() || inputs.batch_size == 0 {
        return Err(Error::Config(
            "generators need episode cases and a positive batch size".into(),
        ));
    }
    let mut rng = generator_rng(seed, generator);
    let mut report = GeneratorReport::default();
    let Some(mut current) = load_latest_with_retry(store, &shutdown.stop) else {
        return Ok(report);
    };
    while !shutdown.raised() {
        if let Ok(Some(latest)) = store.latest_version() {
            if latest > current.version {
                match store.load(latest) {
                    Ok(fresh) => {
                        current = fresh;
                        report.refreshes += 1;
                    }
                    // possibly pruned already; the next round sees a newer one
                    Err(e) => {
                        log::warn!("generator {generator}: could not load version {latest}: {e}")
                    }
                }
            }
        }
        let batch = generate_batch(
            inputs,
            &current.policy,
            &current.value,
            current.version,
            generator,
            report.batches,
            &mut rng,
        )?;
        cache.push(batch);
        report.batches += 1;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSettings {
    pub ppo: PpoConfig,
    pub publish_every: usize,
    pub seed: u64,
    /// How long one wait for a non-empty cache lasts before a warning.
    pub sample_timeout_ms: u64,
    /// Keep every consumed batch and its statistics for replay.
    pub record_journal: bool,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            ppo: PpoConfig::default(),
            publish_every: 16,
            seed: 0,
            sample_timeout_ms: 5_000,
            record_journal: false,
        }
    }
}

/// One optimizer step as recorded for replay.
#[derive(Debug, Clone)]
pub struct JournalEntry {
    pub batch: Arc<TrajectoryBatch>,
    pub stats: UpdateStats,
}

/// One row of the fine-tuning log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub mean_total_reward: f64,
    pub clip_fraction: f64,
    pub value_loss: f64,
    pub policy_loss: f64,
    pub val_metric: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct OptimizerReport {
    pub initial_version: u64,
    pub final_version: u64,
    pub steps: usize,
    pub published: Vec<u64>,
    pub max_staleness: u64,
    pub mean_staleness: f64,
    pub journal: Vec<JournalEntry>,
}

struct StepLog {
    writer: Option<(csv::Writer<fs::File>, PathBuf)>,
}

impl StepLog {
    fn open(path: Option<&Path>) -> Result<Self> {
        Ok(Self {
            writer: match path {
                Some(p) => Some((
                    csv::Writer::from_path(p).map_err(|e| csv_io(e, p))?,
                    p.to_path_buf(),
                )),
                None => None,
            },
        })
    }

    fn write(&mut self, record: &StepRecord) -> Result<()> {
        if let Some((w, path)) = self.writer.as_mut() {
            w.serialize(record)?;
            w.flush().at(path.as_path())?;
        }
        Ok(())
    }
}

/// Optimizer-side state shared by the asynchronous and single-threaded modes.
struct Learner {
    policy: ModelParams,
    value: ModelParams,
    adam: PpoOptimizer,
    cache_rng: ChaCha8Rng,
    shuffle_rng: ChaCha8Rng,
    version: u64,
    report: OptimizerReport,
    staleness_sum: u64,
}

impl Learner {
    fn new(start: StoredVersion, seed: u64) -> Self {
        let (cache_rng, shuffle_rng) = optimizer_rngs(seed);
        Self {
            adam: PpoOptimizer::new(&start.policy, &start.value),
            policy: start.policy,
            value: start.value,
            cache_rng,
            shuffle_rng,
            version: start.version,
            report: OptimizerReport {
                initial_version: start.version,
                final_version: start.version,
                ..OptimizerReport::default()
            },
            staleness_sum: 0,
        }
    }

    fn step(
        &mut self,
        batch: Arc<TrajectoryBatch>,
        settings: &OptimizerSettings,
    ) -> Result<UpdateStats> {
        let stale = self.version.saturating_sub(batch.policy_version);
        self.report.max_staleness = self.report.max_staleness.max(stale);
        self.staleness_sum += stale;
        let stats = ppo_update(
            &mut self.policy,
            &mut self.value,
            &mut self.adam,
            &batch.trajectories,
            &settings.ppo,
            &mut self.shuffle_rng,
        )?;
        self.report.steps += 1;
        if settings.record_journal {
            self.report.journal.push(JournalEntry { batch, stats });
        }
        Ok(stats)
    }

    fn publish(&mut self, store: &CheckpointStore) -> Result<u64> {
        self.version += 1;
        store.publish(self.version, &self.policy, &self.value)?;
        self.report.published.push(self.version);
        self.report.final_version = self.version;
        log::info!(
            "published version {} after {} steps (max staleness {})",
            self.version,
            self.report.steps,
            self.report.max_staleness
        );
        Ok(self.version)
    }

    fn finish(mut self) -> (ModelParams, ModelParams, OptimizerReport) {
        if self.report.steps > 0 {
            self.report.mean_staleness = self.staleness_sum as f64 / self.report.steps as f64;
        }
        (self.policy, self.value, self.report)
    }
}

fn record(step: usize, stats: &UpdateStats, val_metric: Option<f64>) -> StepRecord {
    StepRecord {
        step,
        mean_total_reward: stats.mean_total_reward,
        clip_fraction: stats.clip_fraction,
        value_loss: stats.value_loss,
        policy_loss: stats.policy_loss,
        val_metric,
    }
}

/// Consumes cached batches for `steps` updates (or until `deadline`),
/// publishing every `publish_every` steps and once more at the end. Starts
/// from the latest published version; zero steps publish nothing.
pub fn run_optimizer(
    cache: &RecommendationCache,
    store: &CheckpointStore,
    settings: &OptimizerSettings,
    steps: usize,
    deadline: Option<Instant>,
    shutdown: &Shutdown,
    log_path: Option<&Path>,
) -> Result<OptimizerReport> {
    settings.ppo.validate()?;
    if settings.publish_every == 0 {
        return Err(Error::Config("publish_every must be positive".into()));
    }
    let mut learner = Learner::new(store.load_latest()?, settings.seed);
    let mut log = StepLog::open(log_path)?;
    let timeout = Duration::from_millis(settings.sample_timeout_ms.max(1));
    while learner.report.steps < steps && deadline.is_none_or(|d| Instant::now() < d) {
        let batch = loop {
            if let Some(b) = cache.sample(&mut learner.cache_rng, timeout) {
                break b;
            }
            if shutdown.generators_alive.load(Ordering::SeqCst) == 0 {
                return Err(Error::InvalidInput(
                    "the cache is empty and no generator is running".into(),
                ));
            }
            log::warn!("optimizer waited {timeout:?} on an empty cache");
        };
        let stats = learner.step(batch, settings)?;
        log.write(&record(learner.report.steps, &stats, None))?;
        if learner.report.steps.is_multiple_of(settings.publish_every) {
            learner.publish(store)?;
        }
    }
    if !learner.report.steps.is_multiple_of(settings.publish_every) {
        learner.publish(store)?;
    }
    Ok(learner.finish().2)
}

/// Re-applies the journaled batches in order from `policy`/`value` with the
/// same minibatch shuffling stream; returns the statistics of each step.
pub fn replay_updates(
    policy: &ModelParams,
    value: &ModelParams,
    journal: &[JournalEntry],
    settings: &OptimizerSettings,
) -> Result<Vec<UpdateStats>> {
    let start = StoredVersion {
        version: 0,
        policy: policy.clone(),
        value: value.clone(),
        policy_sha256: String::new(),
        value_sha256: String::new(),
    };
    let mut learner = Learner::new(start, settings.seed);
    let quiet = OptimizerSettings {
        record_journal: false,
        ..settings.clone()
    };
    journal
        .iter()
        .map(|e| learner.step(Arc::clone(&e.batch), &quiet))
        .collect()
}

/// One validator row: `version,metric_R,ndcg10,secondary_metric`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub version: u64,
    #[serde(rename = "metric_R")]
    pub metric_r: f64,
    pub ndcg10: f64,
    /// ILD@K for the diversity objective, PCOUNT@K otherwise.
    pub secondary_metric: f64,
}

/// Scores checkpoints on validation users with Next-K lists of length K.
pub struct ValidationSet<'a> {
    pub cases: &'a [EvalCase],
    pub catalog: &'a Catalog,
    pub spec: &'a RewardSpec,
}

impl ValidationSet<'_> {
    pub fn score(&self, version: u64, policy: &ModelParams) -> Result<ValidationRecord> {
        if self.cases.is_empty() {
            return Err(Error::Config("validation needs at least one user".into()));
        }
        let k = self.spec.k;
        let lists = recommend(
            policy,
            &case_histories(self.cases),
            k,
            Strategy::NextK,
            false,
        )?;
        let mut r = 0.0;
        for (list, case) in lists.iter().zip(self.cases) {
            r += list_metric(self.spec, case.holdout, list, self.catalog)?;
        }
        let report = metrics(&lists, self.cases, self.catalog, k)?;
        let ndcg10 = if k <= 10 {
            report.ndcg.mean
        } else {
            let cut: Vec<Vec<_>> = lists.iter().map(|l| l[..10].to_vec()).collect();
            metrics(&cut, self.cases, self.catalog, 10)?.ndcg.mean
        };
        let secondary_metric = match (self.spec.kind, &report.ild) {
            (RewardKind::NdcgPlusDiversity, Some(ild)) => ild.mean,
            _ => report.pcount.mean,
        };
        Ok(ValidationRecord {
            version,
            metric_r: r / self.cases.len() as f64,
            ndcg10,
            secondary_metric,
        })
    }
}

/// Arg-max of the validation metric; on a tie the lower version stays.
#[derive(Debug, Clone, Default)]
pub struct BestTracker {
    pub best: Option<(u64, f64)>,
}

impl BestTracker {
    /// Returns whether `version` became the new best.
    pub fn offer(&mut self, version: u64, metric: f64) -> bool {
        let better = match self.best {
            None => true,
            Some((v, m)) => metric > m || (metric == m && version < v),
        };
        if better && metric.is_finite() {
            self.best = Some((version, metric));
            return true;
        }
        false
    }
}

#[derive(Debug, Clone)]
pub struct ValidatorReport {
    pub records: Vec<ValidationRecord>,
    pub best_version: Option<u64>,
    pub best_metric: f64,
    /// Copy of the best version, held outside the store.
    pub best: Option<StoredVersion>,
}

struct ValidationLog {
    writer: Option<(csv::Writer<fs::File>, PathBuf)>,
}

impl ValidationLog {
    fn open(path: Option<&Path>) -> Result<Self> {
        Ok(Self {
            writer: match path {
                Some(p) => Some((
                    csv::Writer::from_path(p).map_err(|e| csv_io(e, p))?,
                    p.to_path_buf(),
                )),
                None => None,
            },
        })
    }

    fn write(&mut self, record: &ValidationRecord) -> Result<()> {
        if let Some((w, path)) = self.writer.as_mut() {
            w.serialize(record)?;
            w.flush().at(path.as_path())?;
        }
        Ok(())
    }
}

/// Evaluates every newly published version it observes, polling every
/// `poll_interval`, and after `shutdown` makes one last pass so the final
/// version is always scored. Never writes to the store.
pub fn run_validator(
    store: &CheckpointStore,
    validation: &ValidationSet<'_>,
    poll_interval: Duration,
    shutdown: &Shutdown,
    log_path: Option<&Path>,
) -> Result<ValidatorReport> {
    let mut log = ValidationLog::open(log_path)?;
    let mut tracker = BestTracker::default();
    let mut records = Vec::new();
    let mut best = None;
    let mut last_seen: Option<u64> = None;
    loop {
        let stopping = shutdown.raised();
        match store.latest_version() {
            Ok(Some(latest)) if last_seen.is_none_or(|s| latest > s) => match store.load(latest) {
                Ok(loaded) => {
                    last_seen = Some(latest);
                    match validation.score(latest, &loaded.policy) {
                        Ok(rec) => {
                            log::info!(
                                "validated version {latest}: R {:.5}, NDCG@10 {:.5}",
                                rec.metric_r,
                                rec.ndcg10
                            );
                            log.write(&rec)?;
                            records.push(rec);
                            if tracker.offer(latest, rec.metric_r) {
                                best = Some(loaded);
                            }
                        }
                        Err(e) => log::warn!("skipping version {latest}: evaluation failed: {e}"),
                    }
                    continue;
                }
                Err(e) => log::warn!("validator could not read version {latest}: {e}"),
            },
            Ok(_) => {}
            Err(e) => log::warn!("validator could not read the latest pointer: {e}"),
        }
        if stopping {
            break;
        }
        thread::sleep(poll_interval);
    }
    Ok(ValidatorReport {
        best_version: tracker.best.map(|b| b.0),
        best_metric: tracker.best.map_or(f64::NEG_INFINITY, |b| b.1),
        records,
        best,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub optimizer: OptimizerSettings,
    pub generators: usize,
    /// Cache capacity M in batches.
    pub cache_m: usize,
    /// Episodes per generated batch.
    pub batch_size: usize,
    pub validator_poll_ms: u64,
    /// Versions kept in the store; 0 keeps all.
    pub keep_versions: usize,
    /// Interleave generation and optimisation in the calling thread.
    pub single_threaded: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerSettings::default(),
            generators: 2,
            cache_m: 16,
            batch_size: 64,
            validator_poll_ms: 200,
            keep_versions: 8,
            single_threaded: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.ppo.validate()?;
        if self.cache_m == 0 || self.batch_size == 0 || self.optimizer.publish_every == 0 {
            return Err(Error::Config(
                "cache_m, batch_size and publish_every must be positive".into(),
            ));
        }
        if !self.single_threaded && self.generators == 0 {
            return Err(Error::Config(
                "the asynchronous mode needs at least one generator".into(),
            ));
        }
        Ok(())
    }
}

/// Where the pipeline reads and writes.
pub struct PipelinePaths<'a> {
    pub store: &'a Path,
    /// Receives `finetune_log.csv` and `validation.csv` when set.
    pub logs: Option<&'a Path>,
}

/// Everything a fine-tuning task needs besides the models.
pub struct PipelineInputs<'a> {
    pub cases: &'a [EpisodeCase],
    pub validation: &'a [EvalCase],
    pub catalog: &'a Catalog,
    pub spec: &'a RewardSpec,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub best_version: u64,
    pub best_metric: f64,
    pub best_policy: ModelParams,
    pub best_value: ModelParams,
    pub validations: Vec<ValidationRecord>,
    pub optimizer: OptimizerReport,
    pub generators: Vec<GeneratorReport>,
    pub max_cache_len: usize,
    pub corrupt_reads: u64,
    pub elapsed: Duration,
}

/// Publishes `policy`/`value` as version 0 and fine-tunes them for `steps`
/// optimizer steps (or until `max_duration`), returning the version with
/// the best validation metric.
pub fn run_pipeline(
    policy: &ModelParams,
    value: &ModelParams,
    inputs: &PipelineInputs<'_>,
    config: &PipelineConfig,
    steps: usize,
    max_duration: Option<Duration>,
    paths: &PipelinePaths<'_>,
) -> Result<PipelineOutcome> {
    config.validate()?;
    inputs.spec.validate(inputs.catalog)?;
    if inputs.cases.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(dir) = paths.logs {
        fs::create_dir_all(dir).at(dir)?;
    }
    let step_log = paths.logs.map(|d| d.join("finetune_log.csv"));
    let val_log = paths.logs.map(|d| d.join("validation.csv"));
    let store = CheckpointStore::open(paths.store, config.keep_versions)?;
    if let Some(v) = store.latest_version()? {
        return Err(Error::Config(format!(
            "checkpoint store {} already holds version {v}; use a fresh directory",
            paths.store.display()
        )));
    }
    store.publish(0, policy, value)?;
    let started = Instant::now();
    let deadline = max_duration.map(|d| started + d);
    let cache = RecommendationCache::new(config.cache_m)?;
    let validation = ValidationSet {
        cases: inputs.validation,
        catalog: inputs.catalog,
        spec: inputs.spec,
    };
    let gen_inputs = GeneratorInputs {
        cases: inputs.cases,
        spec: inputs.spec,
        catalog: inputs.catalog,
        batch_size: config.batch_size,
    };
    let (optimizer, validator, generators) = if config.single_threaded {
        let (opt, val) = single_threaded(
            &cache,
            &store,
            &gen_inputs,
            &validation,
            config,
            steps,
            deadline,
            step_log.as_deref(),
            val_log.as_deref(),
        )?;
        let gen = GeneratorReport {
            batches: opt.steps as u64,
            refreshes: opt.published.len() as u64,
        };
        (opt, val, vec![gen])
    } else {
        asynchronous(
            &cache,
            &store,
            &gen_inputs,
            &validation,
            config,
            steps,
            deadline,
            step_log.as_deref(),
            val_log.as_deref(),
        )?
    };
    let best = validator
        .best
        .ok_or_else(|| Error::Diverged("no checkpoint could be validated".into()))?;
    Ok(PipelineOutcome {
        best_version: best.version,
        best_metric: validator.best_metric,
        best_policy: best.policy,
        best_value: best.value,
        validations: validator.records,
        optimizer,
        generators,
        max_cache_len: cache.max_len_seen(),
        corrupt_reads: store.corrupt_reads(),
        elapsed: started.elapsed(),
    })
}

#[allow(clippy::too_many_arguments)]
fn asynchronous(
    cache: &RecommendationCache,
    store: &CheckpointStore,
    gen_inputs: &GeneratorInputs<'_>,
    validation: &ValidationSet<'_>,
    config: &PipelineConfig,
    steps: usize,
    deadline: Option<Instant>,
    step_log: Option<&Path>,
    val_log: Option<&Path>,
) -> Result<(OptimizerReport, ValidatorReport, Vec<GeneratorReport>)> {
    let shutdown = Shutdown::default();
    shutdown
        .generators_alive
        .store(config.generators, Ordering::SeqCst);
    let poll = Duration::from_millis(config.validator_poll_ms.max(1));
    thread::scope(|s| {
        let generators: Vec<_> = (0..config.generators as u64)
            .map(|id| {
                let shutdown = &shutdown;
                s.spawn(move || {
                    let out = run_generator(
                        cache,
                        store,
                        gen_inputs,
                        id,
                        config.optimizer.seed,
                        shutdown,
                    );
                    shutdown.generators_alive.fetch_sub(1, Ordering::SeqCst);
                    if let Err(e) = &out {
                        log::error!("generator {id} stopped: {e}");
                    }
                    out
                })
            })
            .collect();
        let validator = s.spawn(|| run_validator(store, validation, poll, &shutdown, val_log));
        let optimizer = run_optimizer(
            cache,
            store,
            &config.optimizer,
            steps,
            deadline,
            &shutdown,
            step_log,
        );
        shutdown.raise();
        let generator_reports: Vec<Result<GeneratorReport>> = generators
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::Diverged("a generator panicked".into())))
            })
            .collect();
        let validator = validator
            .join()
            .unwrap_or_else(|_| Err(Error::Diverged("the validator panicked".into())));
        let optimizer = optimizer?;
        let generator_reports = generator_reports.into_iter().collect::<Result<Vec<_>>>()?;
        Ok((optimizer, validator?, generator_reports))
    })
}

/// Generator 0's stream, the optimizer's streams and the validator run in
/// turn on one thread; the result depends only on the seed and inputs.
#[allow(clippy::too_many_arguments)]
fn single_threaded(
    cache: &RecommendationCache,
    store: &CheckpointStore,
    gen_inputs: &GeneratorInputs<'_>,
    validation: &ValidationSet<'_>,
    config: &PipelineConfig,
    steps: usize,
    deadline: Option<Instant>,
    step_log: Option<&Path>,
    val_log: Option<&Path>,
) -> Result<(OptimizerReport, ValidatorReport)> {
    let settings = &config.optimizer;
    let mut gen_rng = generator_rng(settings.seed, 0);
    let start = store.load_latest()?;
    let mut learner = Learner::new(start.clone(), settings.seed);
    let mut steps_log = StepLog::open(step_log)?;
    let mut vlog = ValidationLog::open(val_log)?;
    let mut tracker = BestTracker::default();
    let mut records = Vec::new();

    let mut validate = |version: u64,
                        policy: &ModelParams,
                        value: &ModelParams,
                        best: &mut Option<StoredVersion>|
     -> Result<Option<f64>> {
        match validation.score(version, policy) {
            Ok(rec) => {
                vlog.write(&rec)?;
                records.push(rec);
                if tracker.offer(version, rec.metric_r) {
                    *best = Some(StoredVersion {
                        version,
                        policy: policy.clone(),
                        value: value.clone(),
                        policy_sha256: String::new(),
                        value_sha256: String::new(),
                    });
                }
                Ok(Some(rec.metric_r))
            }
            Err(e) => {
                log::warn!("skipping version {version}: evaluation failed: {e}");
                Ok(None)
            }
        }
    };
    let mut best = None;
    validate(start.version, &start.policy, &start.value, &mut best)?;
    let mut sequence = 0;
    while learner.report.steps < steps && deadline.is_none_or(|d| Instant::now() < d) {
        let batch = generate_batch(
            gen_inputs,
            &learner.policy,
            &learner.value,
            learner.version,
            0,
            sequence,
            &mut gen_rng,
        )?;
        sequence += 1;
        cache.push(batch);
        let batch = cache
            .sample(&mut learner.cache_rng, Duration::ZERO)
            .expect("a batch was just pushed");
        let stats = learner.step(batch, settings)?;
        let at_publish = learner.report.steps.is_multiple_of(settings.publish_every);
        let val_metric = if at_publish {
            let v = learner.publish(store)?;
            validate(v, &learner.policy, &learner.value, &mut best)?
        } else {
            None
        };
        steps_log.write(&record(learner.report.steps, &stats, val_metric))?;
    }
    if !learner.report.steps.is_multiple_of(settings.publish_every) {
        let v = learner.publish(store)?;
        validate(v, &learner.policy, &learner.value, &mut best)?;
    }
    let (_, _, report) = learner.finish();
    Ok((
        report,
        ValidatorReport {
            best_version: tracker.best.map(|b| b.0),
            best_metric: tracker.best.map_or(f64::NEG_INFINITY, |b| b.1),
            records,
            best,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::ModelConfig;
    use crate::reward::StepRewards;

    fn tiny_models(seed: u64) -> (ModelParams, ModelParams) {
        let cfg = ModelConfig {
            embed_dim: 8,
            num_blocks: 1,
            num_heads: 2,
            ff_dim: 16,
            ..ModelConfig::desk(12, 4, 3)
        };
        let p = ModelParams::init(&cfg, seed).unwrap();
        let v = ModelParams::value_from_policy(&p, seed + 1).unwrap();
        (p, v)
    }

    fn catalog() -> Catalog {
        Catalog {
            num_items: 12,
            freq: (0..12).map(|i| (12 - i) as f64 / 78.0).collect(),
            genre_dim: 2,
            genres: (0..12)
                .flat_map(|i| if i % 2 == 0 { [1.0, 0.0] } else { [0.0, 1.0] })
                .collect(),
            has_genres: true,
        }
    }

    fn cases() -> Vec<EpisodeCase> {
        (0..20)
            .map(|u| EpisodeCase {
                history: vec![u % 12, (u + 1) % 12, (u + 2) % 12],
                held_out: (u + 3) % 12,
            })
            .collect()
    }

    fn eval_cases() -> Vec<EvalCase> {
        (0..6)
            .map(|u| EvalCase {
                user_id: format!("u{u}"),
                history: vec![u, u + 1, u + 2],
                holdout: u + 3,
            })
            .collect()
    }

    fn dummy_batch(generator: u64, sequence: u64) -> TrajectoryBatch {
        TrajectoryBatch {
            generator,
            sequence,
            policy_version: 0,
            trajectories: vec![Trajectory {
                history: vec![1],
                held_out: 2,
                generated: vec![3],
                old_logprobs: vec![-1.0],
                rewards: StepRewards {
                    r: vec![0.0],
                    total: 0.0,
                },
                values: vec![0.0],
                policy_version: 0,
            }],
        }
    }

    #[test]
    fn cache_keeps_last_m_batches() {
        let cache = RecommendationCache::new(4).unwrap();
        for s in 0..7 {
            cache.push(dummy_batch(0, s));
            assert!(cache.len() <= 4);
        }
        assert_eq!(cache.held(), vec![(0, 3), (0, 4), (0, 5), (0, 6)]);
        assert_eq!(cache.max_len_seen(), 4);
        assert!(RecommendationCache::new(0).is_err());
    }

    #[test]
    fn cache_sampling_is_roughly_uniform_and_times_out_when_empty() {
        let cache = RecommendationCache::new(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(cache.sample(&mut rng, Duration::from_millis(5)).is_none());
        for s in 0..4 {
            cache.push(dummy_batch(0, s));
        }
        let mut counts = [0usize; 4];
        for _ in 0..4000 {
            counts[cache.sample(&mut rng, Duration::ZERO).unwrap().sequence as usize] += 1;
        }
        assert!(
            counts.iter().all(|&c| (850..1150).contains(&c)),
            "{counts:?}"
        );
    }

    #[test]
    fn store_publish_load_and_prune() {
        let dir = tempfile::tempdir().unwrap();
        let store = CheckpointStore::open(dir.path(), 3).unwrap();
        assert_eq!(store.latest_version().unwrap(), None);
        let (p, v) = tiny_models(1);
        for ver in 0..5 {
            store.publish(ver, &p, &v).unwrap();
        }
        assert_eq!(store.latest_version().unwrap(), Some(4));
        assert_eq!(store.list_versions().unwrap(), vec![2, 3, 4]);
        assert!(dir.path().join("v0004/policy.ckpt").exists());
        let loaded = store.load_latest().unwrap();
        assert_eq!(loaded.policy, p);
        assert_eq!(loaded.value, v);
        assert!(store.publish(4, &p, &v).is_err());
        assert!(store.publish(2, &p, &v).is_err());
        assert_eq!(store.corrupt_reads(), 0);
    }

    #[test]
    fn tampered_checkpoint_is_a_counted_corrupt_read() {
        let dir = tempfile::tempdir().unwrap();
        let store = CheckpointStore::open(dir.path(), 0).unwrap();
        let (p, v) = tiny_models(1);
        store.publish(0, &p, &v).unwrap();
        let path = dir.path().join("v0000/value.ckpt");
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(store.load(0).is_err());
        assert_eq!(store.corrupt_reads(), 1);
    }

    #[test]
    fn best_tracker_argmax_with_lower_version_on_ties() {
        let mut t = BestTracker::default();
        t.offer(1, 0.1);
        t.offer(2, 0.3);
        assert_eq!(t.best, Some((2, 0.3)));
        let mut tie = BestTracker::default();
        tie.offer(1, 0.2);
        tie.offer(2, 0.2);
        assert_eq!(tie.best, Some((1, 0.2)));
        assert!(!tie.offer(3, f64::NAN));
    }

    #[test]
    fn generator_streams_are_distinct() {
        let a: Vec<u64> = (0..4).map(|_| generator_rng(7, 0).random()).collect();
        let mut r0 = generator_rng(7, 0);
        let mut r1 = generator_rng(7, 1);
        let x: Vec<u64> = (0..8).map(|_| r0.random()).collect();
        let y: Vec<u64> = (0..8).map(|_| r1.random()).collect();
        assert!(x.iter().all(|v| !y.contains(v)));
        assert!(a.iter().all(|&v| v == a[0]));
    }

    #[test]
    fn generator_fills_cache_to_m_and_stops() {
        let dir = tempfile::tempdir().unwrap();
        let store = CheckpointStore::open(dir.path(), 0).unwrap();
        let (p, v) = tiny_models(3);
        store.publish(0, &p, &v).unwrap();
        let cache = RecommendationCache::new(4).unwrap();
        let (cases, cat) = (cases(), catalog());
        let spec = RewardSpec::new(RewardKind::Ndcg, 0.0, 3);
        let inputs = GeneratorInputs {
            cases: &cases,
            spec: &spec,
            catalog: &cat,
            batch_size: 4,
        };
        let shutdown = Shutdown::default();
        let report = thread::scope(|s| {
            let h = s.spawn(|| run_generator(&cache, &store, &inputs, 0, 1, &shutdown));
            while cache.pushes() < 10 {
                thread::sleep(Duration::from_millis(1));
            }
            shutdown.raise();
            h.join().unwrap().unwrap()
        });
        assert_eq!(cache.len(), 4);
        assert_eq!(cache.max_len_seen(), 4);
        assert!(report.batches >= 10);
        assert_eq!(cache.pushes(), report.batches);
    }

    #[test]
    fn two_generators_produce_different_trajectories() {
        let (p, v) = tiny_models(3);
        let (cases, cat) = (cases(), catalog());
        let spec = RewardSpec::new(RewardKind::Ndcg, 0.0, 3);
        let inputs = GeneratorInputs {
            cases: &cases,
            spec: &spec,
            catalog: &cat,
            batch_size: 8,
        };
        let mut r0 = generator_rng(5, 0);
        let mut r1 = generator_rng(5, 1);
        let b0 = generate_batch(&inputs, &p, &v, 0, 0, 0, &mut r0).unwrap();
        let b1 = generate_batch(&inputs, &p, &v, 0, 1, 0, &mut r1).unwrap();
        assert_ne!(b0.trajectories, b1.trajectories);
        let again = generate_batch(&inputs, &p, &v, 0, 0, 0, &mut generator_rng(5, 0)).unwrap();
        assert_eq!(b0, again);
    }

    fn run_small(
        single_threaded: bool,
        steps: usize,
        publish_every: usize,
        dir: &Path,
    ) -> PipelineOutcome {
        let (p, v) = tiny_models(4);
        let (cases, cat, val) = (cases(), catalog(), eval_cases());
        let spec = RewardSpec::new(RewardKind::Ndcg, 0.0, 3);
        let config = PipelineConfig {
            optimizer: OptimizerSettings {
                ppo: PpoConfig {
                    minibatch_size: 4,
                    epochs_per_batch: 1,
                    lr_policy: 1e-3,
                    lr_value: 1e-3,
                    ..PpoConfig::default()
                },
                publish_every,
                seed: 3,
                sample_timeout_ms: 50,
                record_journal: true,
            },
            generators: 2,
            cache_m: 4,
            batch_size: 4,
            validator_poll_ms: 5,
            keep_versions: 0,
            single_threaded,
        };
        let inputs = PipelineInputs {
            cases: &cases,
            validation: &val,
            catalog: &cat,
            spec: &spec,
        };
        let paths = PipelinePaths {
            store: &dir.join("store"),
            logs: Some(&dir.join("logs")),
        };
        run_pipeline(&p, &v, &inputs, &config, steps, None, &paths).unwrap()
    }

    #[test]
    fn optimizer_publishes_increasing_versions() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_small(false, 40, 4, dir.path());
        assert_eq!(out.optimizer.steps, 40);
        assert_eq!(out.optimizer.published, (1..=10).collect::<Vec<u64>>());
        assert_eq!(out.optimizer.final_version, 10);
        assert!(out.max_cache_len <= 4);
        assert_eq!(out.corrupt_reads, 0);
        // the final version is always validated
        assert_eq!(out.validations.last().unwrap().version, 10);
        let versions: Vec<u64> = out.validations.iter().map(|r| r.version).collect();
        assert!(versions.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn zero_steps_keep_initial_version() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_small(false, 0, 4, dir.path());
        assert_eq!(out.optimizer.final_version, 0);
        assert!(out.optimizer.published.is_empty());
        assert_eq!(out.best_version, 0);
        let (p, _) = tiny_models(4);
        assert_eq!(out.best_policy, p);
    }

    #[test]
    fn replay_reproduces_async_losses() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_small(false, 12, 4, dir.path());
        let (p, v) = tiny_models(4);
        let settings = OptimizerSettings {
            ppo: PpoConfig {
                minibatch_size: 4,
                epochs_per_batch: 1,
                lr_policy: 1e-3,
                lr_value: 1e-3,
                ..PpoConfig::default()
            },
            publish_every: 4,
            seed: 3,
            sample_timeout_ms: 50,
            record_journal: true,
        };
        let replayed = replay_updates(&p, &v, &out.optimizer.journal, &settings).unwrap();
        let original: Vec<UpdateStats> = out.optimizer.journal.iter().map(|e| e.stats).collect();
        assert_eq!(replayed, original);
    }

    #[test]
    fn single_threaded_mode_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let x = run_small(true, 9, 4, a.path());
        let y = run_small(true, 9, 4, b.path());
        assert_eq!(x.validations, y.validations);
        assert_eq!(x.optimizer.published, vec![1, 2, 3]);
        for f in ["finetune_log.csv", "validation.csv"] {
            let fa = fs::read(a.path().join("logs").join(f)).unwrap();
            let fb = fs::read(b.path().join("logs").join(f)).unwrap();
            assert_eq!(fa, fb, "{f}");
        }
        let log = fs::read_to_string(a.path().join("logs/finetune_log.csv")).unwrap();
        assert!(log
            .starts_with("step,mean_total_reward,clip_fraction,value_loss,policy_loss,val_metric"));
        let val = fs::read_to_string(a.path().join("logs/validation.csv")).unwrap();
        assert!(val.starts_with("version,metric_R,ndcg10,secondary_metric"));
        // versions 0..=3 validated
        assert_eq!(val.lines().count(), 5);
    }

    #[test]
    fn validator_is_read_only() {
        let dir = tempfile::tempdir().unwrap();
        let store = CheckpointStore::open(dir.path(), 0).unwrap();
        let (p, v) = tiny_models(2);
        store.publish(0, &p, &v).unwrap();
        store.publish(1, &p, &v).unwrap();
        let snapshot = |d: &Path| {
            let mut entries: Vec<(PathBuf, Vec<u8>, std::time::SystemTime)> = walk(d)
                .into_iter()
                .map(|f| {
                    let meta = fs::metadata(&f).unwrap();
                    (f.clone(), fs::read(&f).unwrap(), meta.modified().unwrap())
                })
                .collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            entries
        };
        let before = snapshot(dir.path());
        let (val, cat) = (eval_cases(), catalog());
        let spec = RewardSpec::new(RewardKind::Ndcg, 0.0, 3);
        let set = ValidationSet {
            cases: &val,
            catalog: &cat,
            spec: &spec,
        };
        let shutdown = Shutdown::default();
        shutdown.raise();
        let report =
            run_validator(&store, &set, Duration::from_millis(1), &shutdown, None).unwrap();
        assert_eq!(report.best_version, Some(1));
        assert_eq!(snapshot(dir.path()), before);
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }
}
