//! Experiment configuration documents.
//!
//! Documents are TOML:
//!
//! ```text
//! [experiment]
//! method = "fedhen"
//! rounds = 150
//!
//! [model]
//! trunk = [20, 32]
//! exit_head = [32, 10]
//! ```
//!
//! Sections are `experiment`, `model`, `client`, `data` and `output`. Key
//! names are unique across sections, so keys placed before any section header
//! are resolved by name. Every key is optional; see [`ExperimentConfig::default`].

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use toml::{Table, Value};

use crate::client::ClientConfig;
use crate::error::{Error, Result};
use crate::model::NestedArchSpec;
use crate::tensor::Activation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    FedHen,
    NoSide,
    Decouple,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::FedHen, Method::Decouple, Method::NoSide];
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fedhen" => Ok(Method::FedHen),
            "noside" => Ok(Method::NoSide),
            "decouple" => Ok(Method::Decouple),
            other => Err(Error::config("method", format!("unknown method `{other}`"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::FedHen => "fedhen",
            Method::NoSide => "noside",
            Method::Decouple => "decouple",
        })
    }
}

/// Which models `evaluate` scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ReportMode {
    /// The current server models.
    #[default]
    Server,
    /// The mean of every device's last uploaded model, per capacity class.
    AllDeviceAverage,
}

impl FromStr for ReportMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "server" => Ok(ReportMode::Server),
            "all_device_average" => Ok(ReportMode::AllDeviceAverage),
            other => Err(Error::config("report_mode", format!("unknown mode `{other}`"))),
        }
    }
}

impl fmt::Display for ReportMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportMode::Server => "server",
            ReportMode::AllDeviceAverage => "all_device_average",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SplitKind {
    Iid,
    Dirichlet { alpha: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Gaussian blobs; train and test share class means.
    Synthetic {
        n_train: usize,
        n_test: usize,
        n_features: usize,
        noise: f64,
    },
    Csv {
        path: PathBuf,
        /// Without a test file, `test_fraction` of the rows are held out.
        test_path: Option<PathBuf>,
        test_fraction: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct OutputConfig {
    pub metrics: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub method: Method,
    pub rounds: usize,
    pub participation_rate: f64,
    pub n_devices: usize,
    pub n_simple: usize,
    pub arch: NestedArchSpec,
    pub client: ClientConfig,
    pub split: SplitKind,
    pub seed: u64,
    pub report_mode: ReportMode,
    pub eval_every: usize,
    pub data: DataSource,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        parse_config("").expect("defaults are valid")
    }
}

impl ExperimentConfig {
    /// Number of devices sampled each round.
    pub fn active_per_round(&self) -> usize {
        // Guard against products like 0.1 * 30 = 3.0000000000000004.
        let raw = self.participation_rate * self.n_devices as f64;
        ((raw - 1e-9).ceil() as usize).clamp(1, self.n_devices)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_devices == 0 {
            return Err(Error::config("n_devices", "must be at least 1"));
        }
        if self.n_simple < 1 || self.n_simple > self.n_devices {
            return Err(Error::config(
                "n_simple",
                format!("must lie in [1, {}], got {}", self.n_devices, self.n_simple),
            ));
        }
        if !(self.participation_rate > 0.0 && self.participation_rate <= 1.0) {
            return Err(Error::config(
                "participation_rate",
                format!("must lie in (0, 1], got {}", self.participation_rate),
            ));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be at least 1"));
        }
        if let SplitKind::Dirichlet { alpha } = self.split {
            if !(alpha.is_finite() && alpha > 0.0) {
                return Err(Error::config("alpha", "must be positive and finite"));
            }
        }
        match &self.data {
            DataSource::Synthetic {
                n_train,
                n_test,
                n_features,
                noise,
            } => {
                if *n_features != self.arch.input_dim() {
                    return Err(Error::config(
                        "n_features",
                        format!(
                            "{n_features} does not match trunk input width {}",
                            self.arch.input_dim()
                        ),
                    ));
                }
                if *n_train < self.n_devices.max(self.arch.n_classes()) {
                    return Err(Error::config(
                        "n_train",
                        "must be at least the number of devices and classes",
                    ));
                }
                if *n_test < self.arch.n_classes() {
                    return Err(Error::config("n_test", "must be at least the number of classes"));
                }
                if !(noise.is_finite() && *noise >= 0.0) {
                    return Err(Error::config("noise", "must be a finite non-negative number"));
                }
            }
            DataSource::Csv { test_fraction, .. } => {
                if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                    return Err(Error::config("test_fraction", "must lie in (0, 1)"));
                }
            }
        }
        self.client.validate()
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Section {
    Experiment,
    Model,
    Client,
    Data,
    Output,
}

impl Section {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "experiment" => Section::Experiment,
            "model" => Section::Model,
            "client" => Section::Client,
            "data" => Section::Data,
            "output" => Section::Output,
            _ => return None,
        })
    }
}

const KEYS: &[(&str, Section)] = &[
    ("method", Section::Experiment),
    ("rounds", Section::Experiment),
    ("participation_rate", Section::Experiment),
    ("n_devices", Section::Experiment),
    ("n_simple", Section::Experiment),
    ("seed", Section::Experiment),
    ("report_mode", Section::Experiment),
    ("eval_every", Section::Experiment),
    ("trunk", Section::Model),
    ("exit_head", Section::Model),
    ("extension", Section::Model),
    ("complex_head", Section::Model),
    ("n_classes", Section::Model),
    ("activation", Section::Model),
    ("epochs", Section::Client),
    ("eta", Section::Client),
    ("batch_size", Section::Client),
    ("clip_norm", Section::Client),
    ("side_coeff", Section::Client),
    ("split", Section::Data),
    ("alpha", Section::Data),
    ("source", Section::Data),
    ("n_train", Section::Data),
    ("n_test", Section::Data),
    ("n_features", Section::Data),
    ("noise", Section::Data),
    ("path", Section::Data),
    ("test_path", Section::Data),
    ("test_fraction", Section::Data),
    ("metrics", Section::Output),
    ("checkpoint_dir", Section::Output),
];

/// 1-based line of a byte offset.
fn line_of(doc: &str, offset: usize) -> usize {
    doc[..offset.min(doc.len())].matches('\n').count() + 1
}

fn read_pairs(doc: &str) -> Result<BTreeMap<&'static str, Value>> {
    let table: Table = doc.parse().map_err(|e: toml::de::Error| Error::Parse {
        path: "<config>".into(),
        line: e.span().map_or(0, |s| line_of(doc, s.start)),
        message: e.message().to_string(),
    })?;
    let mut out = BTreeMap::new();
    let mut insert = |key: &str, value: Value, section: Option<Section>| -> Result<()> {
        let &(name, home) = KEYS
            .iter()
            .find(|(k, _)| *k == key)
            .ok_or_else(|| Error::config(key, "unknown key"))?;
        if section.is_some_and(|s| s != home) {
            return Err(Error::config(key, "unknown key in this section"));
        }
        if out.insert(name, value).is_some() {
            return Err(Error::config(key, "given more than once"));
        }
        Ok(())
    };
    for (key, value) in table {
        match (Section::parse(&key), value) {
            (Some(section), Value::Table(inner)) => {
                for (k, v) in inner {
                    insert(&k, v, Some(section))?;
                }
            }
            (None, Value::Table(_)) => {
                return Err(Error::config(key, "unknown section"));
            }
            (_, v) => insert(&key, v, None)?,
        }
    }
    Ok(out)
}

/// Conversion from a TOML scalar.
trait FromValue: Sized {
    const EXPECTED: &'static str;
    fn from_value(v: &Value) -> Option<Self>;
}

impl FromValue for usize {
    const EXPECTED: &'static str = "a non-negative integer";
    fn from_value(v: &Value) -> Option<Self> {
        v.as_integer().and_then(|i| usize::try_from(i).ok())
    }
}

impl FromValue for u64 {
    const EXPECTED: &'static str = "a non-negative integer";
    fn from_value(v: &Value) -> Option<Self> {
        v.as_integer().and_then(|i| u64::try_from(i).ok())
    }
}

impl FromValue for f64 {
    const EXPECTED: &'static str = "a number";
    fn from_value(v: &Value) -> Option<Self> {
        v.as_float().or_else(|| v.as_integer().map(|i| i as f64))
    }
}

struct Values(BTreeMap<&'static str, Value>);

impl Values {
    fn get<T: FromValue>(&self, key: &str, default: T) -> Result<T> {
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => T::from_value(v)
                .ok_or_else(|| Error::config(key, format!("expected {}, got `{v}`", T::EXPECTED))),
        }
    }

    fn string(&self, key: &str) -> Result<Option<&str>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(v) => Err(Error::config(key, format!("expected a string, got `{v}`"))),
        }
    }

    fn widths(&self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.0.get(key) {
            None => Ok(default.to_vec()),
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| {
                    usize::from_value(v)
                        .ok_or_else(|| Error::config(key, format!("`{v}` is not a width")))
                })
                .collect(),
            Some(v) => Err(Error::config(key, format!("expected a list of widths, got `{v}`"))),
        }
    }

    fn path(&self, key: &str) -> Result<Option<PathBuf>> {
        Ok(self.string(key)?.filter(|v| !v.is_empty()).map(PathBuf::from))
    }
}

/// Parses a configuration document, applying defaults for absent keys.
pub fn parse_config(doc: &str) -> Result<ExperimentConfig> {
    let v = Values(read_pairs(doc)?);

    let method = match v.string("method")? {
        Some(m) => m.parse()?,
        None => Method::FedHen,
    };
    let n_devices: usize = v.get("n_devices", 100)?;
    let n_simple: usize = v.get("n_simple", n_devices / 2)?;
    let report_mode = match v.string("report_mode")? {
        Some(m) => m.parse()?,
        None => ReportMode::Server,
    };

    let activation = match v.string("activation")? {
        Some(a) => a.parse().map_err(|e: Error| Error::config("activation", e.to_string()))?,
        None => Activation::Relu,
    };
    let arch = NestedArchSpec::new(
        v.widths("trunk", &[20, 32])?,
        v.widths("exit_head", &[32, 10])?,
        v.widths("extension", &[32, 32])?,
        v.widths("complex_head", &[32, 10])?,
        v.get("n_classes", 10)?,
        activation,
    )
    .map_err(|e| Error::config("model", e.to_string()))?;

    let clip_norm = match v.string("clip_norm") {
        Ok(Some(c)) if c.eq_ignore_ascii_case("none") => None,
        Ok(Some(c)) => return Err(Error::config("clip_norm", format!("expected a number or \"none\", got `{c}`"))),
        _ => Some(v.get("clip_norm", 10.0)?),
    };
    let client = ClientConfig {
        epochs: v.get("epochs", 5)?,
        eta: v.get("eta", 0.1)?,
        batch_size: v.get("batch_size", 50)?,
        clip_norm,
        side_coeff: v.get("side_coeff", 1.0)?,
    };

    let alpha: f64 = v.get("alpha", 0.3)?;
    let split = match v.string("split")?.map(str::to_ascii_lowercase).as_deref() {
        None | Some("iid") => SplitKind::Iid,
        Some("dirichlet") => SplitKind::Dirichlet { alpha },
        Some(other) => return Err(Error::config("split", format!("unknown split `{other}`"))),
    };

    let data = match v.string("source")?.map(str::to_ascii_lowercase).as_deref() {
        None | Some("synthetic") => DataSource::Synthetic {
            n_train: v.get("n_train", 10_000)?,
            n_test: v.get("n_test", 2_000)?,
            n_features: v.get("n_features", arch.input_dim())?,
            noise: v.get("noise", crate::data::SYNTHETIC_NOISE)?,
        },
        Some("csv") => DataSource::Csv {
            path: v
                .path("path")?
                .ok_or_else(|| Error::config("path", "required when source is csv"))?,
            test_path: v.path("test_path")?,
            test_fraction: v.get("test_fraction", 0.2)?,
        },
        Some(other) => return Err(Error::config("source", format!("unknown source `{other}`"))),
    };

    let cfg = ExperimentConfig {
        method,
        rounds: v.get("rounds", 1000)?,
        participation_rate: v.get("participation_rate", 0.1)?,
        n_devices,
        n_simple,
        arch,
        client,
        split,
        seed: v.get("seed", 0)?,
        report_mode,
        eval_every: v.get("eval_every", 1)?,
        data,
        output: OutputConfig {
            metrics: v.path("metrics")?,
            checkpoint_dir: v.path("checkpoint_dir")?,
        },
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text).map_err(|e| match e {
        Error::Parse { line, message, .. } => Error::Parse {
            path: path.display().to_string(),
            line,
            message,
        },
        other => other,
    })
}
