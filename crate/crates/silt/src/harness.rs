//! Experiment runner: configuration, seeds, worker pool, persistence.
//!
//! A run is `(experiment, resolved parameters, master seed)`; everything
//! else is presentation. Replica streams derive from the master seed and the
//! experiment name, so no stream is ever reused across experiments, and the
//! worker count only sets the rayon pool size: records are identical for 1
//! or 8 workers.
//!
//! Outputs: `results.jsonl` (one record per line), `summary.csv`, and
//! `meta.txt` (versions, config hash, mollifier constants, wall time). Wall
//! time lives in meta.txt so the JSONL stays byte-identical across runs.

use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Result, SiltError};
use crate::experiments::{find_experiment, registry, ExperimentRecord, ParamValue, Params};
use crate::mollifier::Mollifier;

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub experiment: String,
    pub params: Params,
    pub seed: u64,
    pub workers: usize,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            experiment: String::new(),
            params: Params::default(),
            seed: 0,
            workers: 1,
            out: None,
        }
    }
}

fn toml_to_param(value: &toml::Value) -> Result<ParamValue> {
    Ok(match value {
        toml::Value::Integer(i) => ParamValue::Int(*i),
        toml::Value::Float(f) => ParamValue::Float(*f),
        toml::Value::String(s) => ParamValue::Str(s.clone()),
        toml::Value::Array(items) => {
            if items.iter().all(|v| matches!(v, toml::Value::Integer(_))) {
                ParamValue::IntList(
                    items.iter().map(|v| v.as_integer().unwrap()).collect(),
                )
            } else {
                let mut floats = Vec::with_capacity(items.len());
                for v in items {
                    match v {
                        toml::Value::Integer(i) => floats.push(*i as f64),
                        toml::Value::Float(f) => floats.push(*f),
                        other => {
                            return Err(SiltError::input(format!(
                                "unsupported list element {other:?} in config"
                            )))
                        }
                    }
                }
                ParamValue::FloatList(floats)
            }
        }
        other => return Err(SiltError::input(format!("unsupported config value {other:?}"))),
    })
}

impl RunConfig {
    /// Parse the sectioned key-value config:
    ///
    /// ```toml
    /// [run]
    /// experiment = "eps_scaling"
    /// seed = 42
    /// workers = 2
    /// out = "results/"
    ///
    /// [params]
    /// t = 0.1
    /// eps_list = [0.7, 0.5, 0.45]
    /// ```
    pub fn from_toml(text: &str) -> Result<Self> {
        let doc: toml::Table = text
            .parse()
            .map_err(|e| SiltError::input(format!("config parse error: {e}")))?;
        let mut cfg = RunConfig::default();
        if let Some(run) = doc.get("run") {
            let table = run
                .as_table()
                .ok_or_else(|| SiltError::input("[run] must be a section"))?;
            for (key, value) in table {
                match key.as_str() {
                    "experiment" => {
                        cfg.experiment = value
                            .as_str()
                            .ok_or_else(|| SiltError::input("experiment must be a string"))?
                            .to_string()
                    }
                    "seed" => {
                        cfg.seed = value
                            .as_integer()
                            .ok_or_else(|| SiltError::input("seed must be an integer"))?
                            as u64
                    }
                    "workers" => {
                        let w = value
                            .as_integer()
                            .ok_or_else(|| SiltError::input("workers must be an integer"))?;
                        if w < 1 {
                            return Err(SiltError::input("workers must be >= 1"));
                        }
                        cfg.workers = w as usize;
                    }
                    "out" => {
                        cfg.out = Some(PathBuf::from(
                            value
                                .as_str()
                                .ok_or_else(|| SiltError::input("out must be a path string"))?,
                        ))
                    }
                    other => {
                        return Err(SiltError::input(format!("unknown [run] key '{other}'")))
                    }
                }
            }
        }
        if let Some(params) = doc.get("params") {
            let table = params
                .as_table()
                .ok_or_else(|| SiltError::input("[params] must be a section"))?;
            for (key, value) in table {
                cfg.params.0.insert(key.clone(), toml_to_param(value)?);
            }
        }
        Ok(cfg)
    }

    /// Render the config back to the file format (defaults echo).
    pub fn to_toml(&self) -> String {
        let mut out = String::from("[run]\n");
        out.push_str(&format!("experiment = \"{}\"\n", self.experiment));
        out.push_str(&format!("seed = {}\n", self.seed));
        out.push_str(&format!("workers = {}\n", self.workers));
        if let Some(p) = &self.out {
            out.push_str(&format!("out = \"{}\"\n", p.display()));
        }
        out.push_str("\n[params]\n");
        for (key, value) in &self.params.0 {
            let rendered = match value {
                ParamValue::Int(i) => i.to_string(),
                ParamValue::Float(f) => format_toml_float(*f),
                ParamValue::Str(s) => format!("\"{s}\""),
                ParamValue::IntList(v) => format!(
                    "[{}]",
                    v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(", ")
                ),
                ParamValue::FloatList(v) => format!(
                    "[{}]",
                    v.iter().map(|f| format_toml_float(*f)).collect::<Vec<_>>().join(", ")
                ),
            };
            out.push_str(&format!("{key} = {rendered}\n"));
        }
        out
    }
}

fn format_toml_float(f: f64) -> String {
    let s = format!("{f}");
    if s.contains('.') || s.contains('e') || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        format!("{s}.0")
    }
}

/// Deterministic hash of the fully resolved run (experiment, seed, params).
pub fn config_hash(experiment: &str, seed: u64, params: &Params) -> String {
    let mut hasher = Sha256::new();
    hasher.update(experiment.as_bytes());
    hasher.update(seed.to_le_bytes());
    let canonical = serde_json::to_string(&params.0).expect("params serialize");
    hasher.update(canonical.as_bytes());
    hex::encode(&hasher.finalize()[..16])
}

#[derive(Debug)]
pub struct RunOutput {
    pub records: Vec<ExperimentRecord>,
    pub config_hash: String,
    pub wall_ms: u64,
    pub written: Vec<PathBuf>,
}

/// Execute the named experiment and persist results under `out` (if set).
pub fn run(config: &RunConfig) -> Result<RunOutput> {
    let def = find_experiment(&config.experiment)?;
    let params = def.resolve(&config.params)?;
    let hash = config_hash(def.name, config.seed, &params);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.max(1))
        .build()
        .map_err(|e| SiltError::numerical(format!("worker pool: {e}")))?;
    let started = std::time::Instant::now();
    let records = pool.install(|| (def.run)(&params, config.seed))?;
    let wall_ms = started.elapsed().as_millis() as u64;

    for record in &records {
        record.validate()?;
        def.resolve(&Params(record.params.clone()))?;
    }

    let mut written = Vec::new();
    if let Some(out) = &config.out {
        std::fs::create_dir_all(out)?;
        written.push(write_jsonl(out, &records)?);
        written.push(write_summary_csv(out, &records)?);
        written.push(write_meta(out, config, &hash, wall_ms, records.len())?);
    }
    Ok(RunOutput { records, config_hash: hash, wall_ms, written })
}

fn write_jsonl(out: &Path, records: &[ExperimentRecord]) -> Result<PathBuf> {
    let path = out.join("results.jsonl");
    let mut file = std::io::BufWriter::new(std::fs::File::create(&path)?);
    for record in records {
        let line = serde_json::to_string(record)
            .map_err(|e| SiltError::numerical(format!("record serialize: {e}")))?;
        writeln!(file, "{line}")?;
    }
    Ok(path)
}

fn write_summary_csv(out: &Path, records: &[ExperimentRecord]) -> Result<PathBuf> {
    let path = out.join("summary.csv");
    let mut file = std::io::BufWriter::new(std::fs::File::create(&path)?);
    let mut extra_keys: Vec<String> = records
        .iter()
        .flat_map(|r| r.extra.keys().cloned())
        .collect();
    extra_keys.sort();
    extra_keys.dedup();
    write!(file, "experiment,label,estimate,stderr,seed,replicas,mode")?;
    for key in &extra_keys {
        write!(file, ",{key}")?;
    }
    writeln!(file)?;
    for r in records {
        write!(
            file,
            "{},{},{:.17e},{:.17e},{},{},{}",
            r.experiment,
            r.label,
            r.estimate,
            r.stderr,
            r.seed,
            r.replicas,
            r.mode.as_deref().unwrap_or("")
        )?;
        for key in &extra_keys {
            match r.extra.get(key) {
                Some(v) => write!(file, ",{v:.17e}")?,
                None => write!(file, ",")?,
            }
        }
        writeln!(file)?;
    }
    Ok(path)
}

fn write_meta(
    out: &Path,
    config: &RunConfig,
    hash: &str,
    wall_ms: u64,
    n_records: usize,
) -> Result<PathBuf> {
    let path = out.join("meta.txt");
    let mol = Mollifier::standard();
    let mut file = std::io::BufWriter::new(std::fs::File::create(&path)?);
    writeln!(file, "silt version: {}", env!("CARGO_PKG_VERSION"))?;
    writeln!(file, "experiment: {}", config.experiment)?;
    writeln!(file, "config hash: {hash}")?;
    writeln!(file, "seed: {}", config.seed)?;
    writeln!(file, "workers: {}", config.workers)?;
    writeln!(file, "records: {n_records}")?;
    writeln!(file, "wall ms: {wall_ms}")?;
    writeln!(file, "mollifier C: {:.10}", mol.normalization)?;
    writeln!(file, "mollifier c: {:.10}", mol.grad_energy)?;
    Ok(path)
}

/// Machine-readable experiment schemas.
pub fn list_experiments_json() -> String {
    #[derive(serde::Serialize)]
    struct SchemaView<'a> {
        name: &'a str,
        doc: &'a str,
        params: &'a [crate::experiments::ParamSpec],
    }
    let defs = registry();
    let views: Vec<SchemaView> = defs
        .iter()
        .map(|d| SchemaView { name: d.name, doc: d.doc, params: &d.params })
        .collect();
    serde_json::to_string_pretty(&views).expect("schema serialize")
}

/// Plain-text experiment listing.
pub fn list_experiments_text() -> String {
    let mut out = String::new();
    for def in registry() {
        out.push_str(&format!("{}\n    {}\n", def.name, def.doc));
        for p in &def.params {
            let default = match &p.default {
                ParamValue::Int(i) => i.to_string(),
                ParamValue::Float(f) => format!("{f}"),
                ParamValue::Str(s) => format!("\"{s}\""),
                ParamValue::IntList(v) => format!("{v:?}"),
                ParamValue::FloatList(v) => format!("{v:?}"),
            };
            out.push_str(&format!("    --param {}={default}  {}\n", p.name, p.doc));
        }
    }
    out
}

/// Parse a `key=value` CLI override; integers, floats, comma lists, strings.
pub fn parse_param_override(text: &str) -> Result<(String, ParamValue)> {
    let (key, value) = text
        .split_once('=')
        .ok_or_else(|| SiltError::input(format!("expected key=value, got '{text}'")))?;
    let value = value.trim();
    let parsed = if let Ok(i) = value.parse::<i64>() {
        ParamValue::Int(i)
    } else if let Ok(f) = value.parse::<f64>() {
        ParamValue::Float(f)
    } else if value.contains(',') {
        let parts: Vec<&str> = value.split(',').map(str::trim).collect();
        if parts.iter().all(|p| p.parse::<i64>().is_ok()) {
            ParamValue::IntList(parts.iter().map(|p| p.parse().unwrap()).collect())
        } else {
            let mut floats = Vec::new();
            for p in &parts {
                floats.push(
                    p.parse::<f64>()
                        .map_err(|e| SiltError::input(format!("list element '{p}': {e}")))?,
                );
            }
            ParamValue::FloatList(floats)
        }
    } else {
        ParamValue::Str(value.to_string())
    };
    Ok((key.trim().to_string(), parsed))
}
