//! The federated round loop for FedHeN and its two baselines.
//!
//! One round samples active devices, trains them from the current server
//! models, discards non-finite uploads, aggregates, and updates the
//! per-device cache used by the all-device-average reporting mode.
//!
//! Every random draw comes from a stream derived from the experiment seed and
//! the draw's coordinates (round, device, epoch), so client training may run
//! on any number of threads and still reproduce the sequential result bit for
//! bit.

use std::collections::BTreeSet;
use std::fs;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;

use crate::checkpoint;
use crate::client;
use crate::config::{DataSource, ExperimentConfig, Method, ReportMode, SplitKind};
use crate::data::{self, Capacity, Dataset, DevicePartition, SyntheticTask};
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;
use crate::model::{self, build_index_map, IndexSet};
use crate::rng::{self, tag};
use crate::server::{self, RoundUploads};
use crate::tensor::{self, Matrix, WeightVector};

#[derive(Clone, Debug, PartialEq)]
pub struct RoundState {
    /// Number of completed rounds.
    pub round: usize,
    pub w_s: WeightVector,
    pub w_c: WeightVector,
    /// Last model each device uploaded successfully; starts at the initial
    /// server model of the device's capacity.
    pub device_cache: Vec<WeightVector>,
    pub comm_cost: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundOutcome {
    pub round: usize,
    pub active_simple: Vec<usize>,
    pub active_complex: Vec<usize>,
    pub failed: BTreeSet<usize>,
    pub stalled: bool,
    pub cost: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub simple_acc: f64,
    pub complex_acc: f64,
    pub simple_loss: f64,
    pub complex_loss: f64,
}

/// `true` iff every entry is finite.
pub fn nan_guard(w: &[f64]) -> bool {
    w.iter().all(|v| v.is_finite())
}

/// Samples `ceil(rate * N)` devices without replacement and splits them by
/// capacity. Both lists are ascending.
pub fn sample_active(
    cfg: &ExperimentConfig,
    partition: &DevicePartition,
    round: usize,
) -> (Vec<usize>, Vec<usize>) {
    let mut r = rng::stream(cfg.seed, &[tag::SAMPLE, round as u64]);
    let mut picked = index::sample(&mut r, partition.n_devices(), cfg.active_per_round()).into_vec();
    picked.sort_unstable();
    picked
        .into_iter()
        .partition(|&d| partition.capacity(d) == Capacity::Simple)
}

/// Fraction of rows whose arg-max logit equals the label (first max wins).
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| {
            let row = logits.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == y
        })
        .count();
    correct as f64 / labels.len() as f64
}

/// Builds the train/test datasets a config describes.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let k = cfg.arch.n_classes();
    match &cfg.data {
        DataSource::Synthetic {
            n_train,
            n_test,
            n_features,
            noise,
        } => {
            let task = SyntheticTask::new(
                *n_features,
                k,
                *noise,
                &mut rng::stream(cfg.seed, &[tag::DATA, 0]),
            )?;
            let train = task.sample(*n_train, &mut rng::stream(cfg.seed, &[tag::DATA, 1]))?;
            let test = task.sample(*n_test, &mut rng::stream(cfg.seed, &[tag::DATA, 2]))?;
            Ok((train, test))
        }
        DataSource::Csv {
            path,
            test_path,
            test_fraction,
        } => {
            let all = data::load_csv_with_classes(path, k)?;
            if let Some(tp) = test_path {
                return Ok((all, data::load_csv_with_classes(tp, k)?));
            }
            let mut order: Vec<usize> = (0..all.len()).collect();
            order.shuffle(&mut rng::stream(cfg.seed, &[tag::TEST_SPLIT]));
            let n_test = ((all.len() as f64 * test_fraction).round() as usize).clamp(1, all.len() - 1);
            let (test_idx, train_idx) = order.split_at(n_test);
            let pick = |idx: &[usize]| {
                let mut idx = idx.to_vec();
                idx.sort_unstable();
                Dataset::new(
                    all.inputs.select_rows(&idx),
                    idx.iter().map(|&i| all.labels[i]).collect(),
                    k,
                )
            };
            Ok((pick(train_idx)?, pick(test_idx)?))
        }
    }
}

pub fn build_partition(cfg: &ExperimentConfig, train: &Dataset) -> Result<DevicePartition> {
    let mut r = rng::stream(cfg.seed, &[tag::SPLIT]);
    match cfg.split {
        SplitKind::Iid => data::split_iid(train, cfg.n_devices, cfg.n_simple, &mut r),
        SplitKind::Dirichlet { alpha } => {
            data::split_dirichlet(train, cfg.n_devices, cfg.n_simple, alpha, &mut r)
        }
    }
}

/// Running mean; exact when all vectors are equal.
fn running_mean(vectors: &[&WeightVector]) -> WeightVector {
    let mut acc = vectors[0].as_slice().to_vec();
    for (k, v) in vectors.iter().enumerate().skip(1) {
        let n = (k + 1) as f64;
        for (a, x) in acc.iter_mut().zip(v.iter()) {
            *a += (x - *a) / n;
        }
    }
    WeightVector::new(acc)
}

pub struct Simulation<'a> {
    cfg: &'a ExperimentConfig,
    train: &'a Dataset,
    test: &'a Dataset,
    partition: DevicePartition,
    m: IndexSet,
    m_prime: IndexSet,
    state: RoundState,
    faults: BTreeSet<(usize, usize)>,
}

impl<'a> Simulation<'a> {
    /// Partitions the data and initializes both server models, with the
    /// simple model read out of the complex one so the constraint holds from
    /// the start.
    pub fn new(cfg: &'a ExperimentConfig, train: &'a Dataset, test: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        for (name, ds) in [("training", train), ("test", test)] {
            if ds.dim() != cfg.arch.input_dim() {
                return Err(Error::InvalidArgument(format!(
                    "{name} data has {} features, model expects {}",
                    ds.dim(),
                    cfg.arch.input_dim()
                )));
            }
            if ds.n_classes > cfg.arch.n_classes() {
                return Err(Error::InvalidArgument(format!(
                    "{name} data has {} classes, model has {}",
                    ds.n_classes,
                    cfg.arch.n_classes()
                )));
            }
        }
        let partition = build_partition(cfg, train)?;
        let (m, m_prime) = build_index_map(&cfg.arch);
        let w_c = cfg.arch.init_complex(&mut rng::stream(cfg.seed, &[tag::INIT]));
        let w_s = model::project(&w_c, &m)?;
        let device_cache = (0..partition.n_devices())
            .map(|d| match partition.capacity(d) {
                Capacity::Simple => w_s.clone(),
                Capacity::Complex => w_c.clone(),
            })
            .collect();
        Ok(Simulation {
            cfg,
            train,
            test,
            partition,
            m,
            m_prime,
            state: RoundState {
                round: 0,
                w_s,
                w_c,
                device_cache,
                comm_cost: 0,
            },
            faults: BTreeSet::new(),
        })
    }

    /// Forces `device` to return NaN weights in `round` (1-based).
    pub fn inject_failure(&mut self, round: usize, device: usize) {
        self.faults.insert((round, device));
    }

    pub fn state(&self) -> &RoundState {
        &self.state
    }

    pub fn partition(&self) -> &DevicePartition {
        &self.partition
    }

    pub fn index_sets(&self) -> (&IndexSet, &IndexSet) {
        (&self.m, &self.m_prime)
    }

    fn train_device(&self, device: usize, round: usize) -> Result<WeightVector> {
        let cfg = self.cfg;
        let seed = rng::derive_seed(cfg.seed, &[tag::CLIENT, round as u64, device as u64]);
        let shard = self.partition.shard(device);
        let out = match (self.partition.capacity(device), cfg.method) {
            (Capacity::Simple, _) => client::client_training(
                &self.state.w_s,
                self.train,
                shard,
                cfg.arch.simple_spec(),
                &cfg.client,
                seed,
            )?,
            (Capacity::Complex, Method::FedHen) => client::client_training_side_obj(
                &self.state.w_c,
                self.train,
                shard,
                &cfg.arch,
                &cfg.client,
                seed,
            )?,
            (Capacity::Complex, Method::NoSide | Method::Decouple) => {
                client::client_training_complex(
                    &self.state.w_c,
                    self.train,
                    shard,
                    &cfg.arch,
                    &cfg.client,
                    seed,
                )?
            }
        };
        if self.faults.contains(&(round, device)) {
            return Ok(WeightVector::new(vec![f64::NAN; out.len()]));
        }
        Ok(out)
    }

    /// Local models the next round's active devices would upload, ascending
    /// by device id. Does not change the state.
    pub fn local_updates(&self) -> Result<Vec<(usize, WeightVector)>> {
        let round = self.state.round + 1;
        let (zs, zc) = sample_active(self.cfg, &self.partition, round);
        let mut active = zs;
        active.extend(zc);
        active.sort_unstable();
        active
            .par_iter()
            .map(|&d| Ok((d, self.train_device(d, round)?)))
            .collect()
    }

    /// Runs one round and returns what happened in it.
    pub fn run_round(&mut self) -> Result<RoundOutcome> {
        let round = self.state.round + 1;
        let (zs, zc) = sample_active(self.cfg, &self.partition, round);
        let results = self.local_updates()?;

        let mut uploads = RoundUploads::default();
        for (d, w) in results {
            if !nan_guard(&w) {
                uploads.failed.insert(d);
                continue;
            }
            match self.partition.capacity(d) {
                Capacity::Simple => uploads.simple.push((d, w)),
                Capacity::Complex => uploads.complex.push((d, w)),
            }
        }

        let agg = match self.cfg.method {
            Method::FedHen | Method::NoSide => server::aggregate_shared(
                &uploads,
                &self.state.w_s,
                &self.state.w_c,
                &self.m,
                &self.m_prime,
            )?,
            Method::Decouple => {
                server::aggregate_decoupled(&uploads, &self.state.w_s, &self.state.w_c)?
            }
        };

        for (d, w) in uploads.simple.into_iter().chain(uploads.complex) {
            self.state.device_cache[d] = w;
        }
        let cost = 2 * (zs.len() as u64 * self.state.w_s.len() as u64
            + zc.len() as u64 * self.state.w_c.len() as u64);
        self.state.comm_cost += cost;
        self.state.w_s = agg.w_s;
        self.state.w_c = agg.w_c;
        self.state.round = round;

        Ok(RoundOutcome {
            round,
            active_simple: zs,
            active_complex: zc,
            failed: uploads.failed,
            stalled: agg.stalled,
            cost,
        })
    }

    /// The (simple, complex) models scored under the configured report mode.
    pub fn reported_models(&self) -> (WeightVector, WeightVector) {
        match self.cfg.report_mode {
            ReportMode::Server => (self.state.w_s.clone(), self.state.w_c.clone()),
            ReportMode::AllDeviceAverage => {
                let group = |cap| -> Vec<&WeightVector> {
                    self.partition
                        .devices_with(cap)
                        .map(|d| &self.state.device_cache[d])
                        .collect()
                };
                let simple = group(Capacity::Simple);
                let complex = group(Capacity::Complex);
                // A capacity class with no devices falls back to the server model.
                let pick = |g: Vec<&WeightVector>, server: &WeightVector| {
                    if g.is_empty() {
                        server.clone()
                    } else {
                        running_mean(&g)
                    }
                };
                (pick(simple, &self.state.w_s), pick(complex, &self.state.w_c))
            }
        }
    }

    pub fn evaluate(&self) -> Result<Evaluation> {
        let (ws, wc) = self.reported_models();
        let labels = &self.test.labels;
        let simple = tensor::forward_logits(self.cfg.arch.simple_spec(), &ws, &self.test.inputs)?;
        let complex = model::complex_forward(&self.cfg.arch, &wc, &self.test.inputs)?;
        Ok(Evaluation {
            simple_acc: accuracy(&simple, labels),
            complex_acc: accuracy(&complex, labels),
            simple_loss: tensor::cross_entropy(&simple, labels)?,
            complex_loss: tensor::cross_entropy(&complex, labels)?,
        })
    }

    fn record(&self, skipped: usize, stalled: bool) -> Result<MetricsRecord> {
        let e = self.evaluate()?;
        if let Some(dir) = &self.cfg.output.checkpoint_dir {
            fs::create_dir_all(dir).map_err(|err| Error::io(dir, err))?;
            let t = self.state.round;
            checkpoint::save(&self.state.w_s, dir.join(format!("w_s_round{t:05}.fhwv")))?;
            checkpoint::save(&self.state.w_c, dir.join(format!("w_c_round{t:05}.fhwv")))?;
        }
        Ok(MetricsRecord {
            round: self.state.round,
            method: self.cfg.method,
            simple_acc: e.simple_acc,
            complex_acc: e.complex_acc,
            simple_loss: e.simple_loss,
            complex_loss: e.complex_loss,
            cum_params: self.state.comm_cost,
            skipped,
            stalled,
        })
    }

    /// Runs all configured rounds. Records are taken before the first round,
    /// every `eval_every` rounds, and after the last round.
    pub fn run(&mut self) -> Result<Vec<MetricsRecord>> {
        let mut records = vec![self.record(0, false)?];
        let (mut skipped, mut stalled) = (0, false);
        while self.state.round < self.cfg.rounds {
            let out = self.run_round()?;
            skipped += out.failed.len();
            stalled |= out.stalled;
            if out.round % self.cfg.eval_every == 0 || out.round == self.cfg.rounds {
                records.push(self.record(skipped, stalled)?);
                (skipped, stalled) = (0, false);
            }
        }
        Ok(records)
    }
}

/// Partitions, initializes, and runs a full experiment.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<Vec<MetricsRecord>> {
    Simulation::new(cfg, train, test)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    const SMALL: &str = "rounds = 3\nn_devices = 6\nn_simple = 3\nparticipation_rate = 0.5\n\
        trunk = [4, 8]\nexit_head = [8, 3]\nextension = [8, 6]\ncomplex_head = [6, 3]\n\
        n_classes = 3\nn_train = 240\nn_test = 90\nepochs = 1\nbatch_size = 10";

    /// The small test config with the keys in `extra` replaced.
    fn small(extra: &str) -> ExperimentConfig {
        let key = |l: &str| l.split('=').next().unwrap_or("").trim().to_string();
        let overridden: Vec<String> = extra.lines().map(key).collect();
        let mut doc: Vec<&str> = SMALL
            .lines()
            .filter(|l| !overridden.contains(&key(l)))
            .collect();
        doc.extend(extra.lines());
        parse_config(&doc.join("\n")).unwrap()
    }

    #[test]
    fn nan_guard_examples() {
        assert!(nan_guard(&[1.0, 2.0]));
        assert!(!nan_guard(&[1.0, f64::NAN]));
        assert!(!nan_guard(&[1.0, f64::INFINITY]));
    }

    #[test]
    fn full_participation_takes_everyone() {
        let cfg = small("participation_rate = 1.0");
        let (train, _) = load_data(&cfg).unwrap();
        let p = build_partition(&cfg, &train).unwrap();
        let (zs, zc) = sample_active(&cfg, &p, 1);
        assert_eq!(zs, vec![0, 1, 2]);
        assert_eq!(zc, vec![3, 4, 5]);
    }

    #[test]
    fn sampling_size_and_determinism() {
        let cfg = parse_config("n_devices = 100\nn_train = 1000").unwrap();
        let (train, _) = load_data(&cfg).unwrap();
        let p = build_partition(&cfg, &train).unwrap();
        for t in 1..30 {
            let (zs, zc) = sample_active(&cfg, &p, t);
            assert_eq!(zs.len() + zc.len(), 10);
            assert!(zs.iter().all(|&d| d < 50) && zc.iter().all(|&d| d >= 50));
            assert_eq!(sample_active(&cfg, &p, t), (zs, zc));
        }
    }

    #[test]
    fn accuracy_counts_argmax() {
        let logits = Matrix::from_rows(&[[0.1, 0.9], [2.0, -1.0], [0.0, 0.0]]).unwrap();
        assert_eq!(accuracy(&logits, &[1, 1, 0]), 2.0 / 3.0);
    }

    #[test]
    fn initial_models_satisfy_constraint_and_fill_cache() {
        let cfg = small("report_mode = 'all_device_average'");
        let (train, test) = load_data(&cfg).unwrap();
        let sim = Simulation::new(&cfg, &train, &test).unwrap();
        let (m, _) = sim.index_sets();
        let st = sim.state();
        assert_eq!(model::constraint_residual(&st.w_s, &st.w_c, m).unwrap(), 0.0);
        let (rs, rc) = sim.reported_models();
        assert_eq!((rs, rc), (st.w_s.clone(), st.w_c.clone()));
    }

    #[test]
    fn round_updates_cost_and_cache() {
        let cfg = small("");
        let (train, test) = load_data(&cfg).unwrap();
        let mut sim = Simulation::new(&cfg, &train, &test).unwrap();
        let before = sim.state().clone();
        let out = sim.run_round().unwrap();
        let (ns, nc) = (cfg.arch.simple_param_count() as u64, cfg.arch.complex_param_count() as u64);
        let expect = 2 * (out.active_simple.len() as u64 * ns + out.active_complex.len() as u64 * nc);
        assert_eq!(out.cost, expect);
        assert_eq!(sim.state().comm_cost, expect);
        assert_eq!(sim.state().round, 1);
        for d in 0..6 {
            let active = out.active_simple.contains(&d) || out.active_complex.contains(&d);
            assert_eq!(sim.state().device_cache[d] != before.device_cache[d], active, "device {d}");
        }
    }

    #[test]
    fn zero_rounds_gives_initial_record() {
        let cfg = small("rounds = 0");
        let (train, test) = load_data(&cfg).unwrap();
        let recs = run_experiment(&cfg, &train, &test).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!((recs[0].round, recs[0].cum_params), (0, 0));
    }

    #[test]
    fn eval_every_includes_last_round() {
        let cfg = small("rounds = 5\neval_every = 2");
        let (train, test) = load_data(&cfg).unwrap();
        let rounds: Vec<usize> = run_experiment(&cfg, &train, &test)
            .unwrap()
            .iter()
            .map(|r| r.round)
            .collect();
        assert_eq!(rounds, vec![0, 2, 4, 5]);
    }

    #[test]
    fn checkpoints_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small("rounds = 1");
        cfg.output.checkpoint_dir = Some(dir.path().to_path_buf());
        let (train, test) = load_data(&cfg).unwrap();
        run_experiment(&cfg, &train, &test).unwrap();
        let ws = checkpoint::load(dir.path().join("w_s_round00001.fhwv")).unwrap();
        assert_eq!(ws.len(), cfg.arch.simple_param_count());
        assert!(dir.path().join("w_c_round00000.fhwv").exists());
    }

    #[test]
    fn csv_source_with_holdout() {
        use std::io::Write;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for i in 0..40 {
            writeln!(f, "{},{},{},{},{}", i % 3, 0.5, -0.5, i as f64 / 40.0, i % 3).unwrap();
        }
        let cfg = small(&format!("source = 'csv'\npath = '{}'\ntest_fraction = 0.25", f.path().display()));
        let (train, test) = load_data(&cfg).unwrap();
        assert_eq!((train.len(), test.len()), (30, 10));
        assert_eq!(train.dim(), 4);
    }
}
