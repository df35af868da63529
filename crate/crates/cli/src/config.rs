//! Run configuration: `key = value` lines grouped under `[section]` headers.
//!
//! Every key lives in exactly one section. Keys may also appear before the
//! first header, and `--set key=value` overrides anything from the file.

use std::path::PathBuf;

use setident::eval::Setting;
use setident::training::TrainConfig;

use crate::CliError;

const DATA_KEYS: &[&str] = &[
    "interactions",
    "items",
    "semantic_vectors",
    "synth_seed",
    "d_sem",
    "groups",
    "output_dir",
];
const CF_KEYS: &[&str] = &["cf_dim", "cf_epochs"];
const EVAL_KEYS: &[&str] = &["settings", "ks", "eval_beta"];
const SWEEP_KEYS: &[&str] = &["sweep_beta", "sweep_alpha", "sweep_n_sem"];
const BENCH_KEYS: &[&str] = &["bench_l", "bench_m", "bench_d"];
const BEAM_KEYS: &[&str] = &["beam_decoders", "beam_vocab", "beam_len", "beam_widths"];

fn section_keys(section: &str) -> Option<Vec<&'static str>> {
    Some(match section {
        "data" => DATA_KEYS.to_vec(),
        "model" | "train" => TrainConfig::keys().to_vec(),
        "cf" => CF_KEYS.to_vec(),
        "eval" => EVAL_KEYS.to_vec(),
        "sweep" => SWEEP_KEYS.to_vec(),
        "bench" => BENCH_KEYS.to_vec(),
        "beam" => BEAM_KEYS.to_vec(),
        _ => return None,
    })
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub interactions: Option<PathBuf>,
    pub items: Option<PathBuf>,
    pub semantic_vectors: Option<PathBuf>,
    pub synth_seed: Option<u64>,
    /// Width of synthesized semantic vectors.
    pub d_sem: usize,
    pub groups: usize,
    pub output_dir: PathBuf,
    pub cf_dim: usize,
    pub cf_epochs: usize,
    pub settings: Vec<Setting>,
    pub ks: Vec<usize>,
    /// Grounding weight at evaluation; falls back to the training beta.
    pub eval_beta: Option<f64>,
    pub sweep_beta: Option<Vec<f64>>,
    pub sweep_alpha: Option<Vec<f64>>,
    pub sweep_n_sem: Option<Vec<usize>>,
    pub bench_l: usize,
    pub bench_m: Vec<usize>,
    pub bench_d: usize,
    pub beam_decoders: usize,
    pub beam_vocab: usize,
    pub beam_len: usize,
    pub beam_widths: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            interactions: None,
            items: None,
            semantic_vectors: None,
            synth_seed: None,
            d_sem: 64,
            groups: 4,
            output_dir: PathBuf::from("run"),
            cf_dim: 64,
            cf_epochs: 100,
            settings: Setting::ALL.to_vec(),
            ks: vec![5, 10],
            eval_beta: None,
            sweep_beta: None,
            sweep_alpha: None,
            sweep_n_sem: None,
            bench_l: 32,
            bench_m: vec![2, 4, 6],
            bench_d: 64,
            beam_decoders: 100,
            beam_vocab: 8,
            beam_len: 3,
            beam_widths: vec![1, 2, 4],
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.trim()
        .parse()
        .map_err(|_| usage(format!("bad value for `{key}`: `{v}`")))
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, CliError> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| num(key, s))
        .collect()
}

/// `start:end:step` (inclusive) or a comma-separated list.
pub fn parse_grid(key: &str, v: &str) -> Result<Vec<f64>, CliError> {
    let parts: Vec<&str> = v.split(':').collect();
    if parts.len() == 1 {
        return list(key, v);
    }
    if parts.len() != 3 {
        return Err(usage(format!("`{key}` grid must be start:end:step, got `{v}`")));
    }
    let (a, b, s): (f64, f64, f64) = (num(key, parts[0])?, num(key, parts[1])?, num(key, parts[2])?);
    if s.is_nan() || s <= 0.0 || b < a {
        return Err(usage(format!("`{key}` grid needs start <= end and step > 0")));
    }
    let n = ((b - a) / s + 1e-9).floor() as usize + 1;
    // Round away accumulated error so 0:1:0.1 prints as 0.3, not 0.30000000000000004.
    Ok((0..n).map(|i| ((a + i as f64 * s) * 1e9).round() / 1e9).collect())
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.trim().is_empty()).then(|| PathBuf::from(v.trim()))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), CliError> {
        let v = v.trim();
        match key {
            "interactions" => self.interactions = opt_path(v),
            "items" => self.items = opt_path(v),
            "semantic_vectors" => self.semantic_vectors = opt_path(v),
            "synth_seed" => self.synth_seed = if v.is_empty() { None } else { Some(num(key, v)?) },
            "d_sem" => self.d_sem = num(key, v)?,
            "groups" => self.groups = num(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "cf_dim" => self.cf_dim = num(key, v)?,
            "cf_epochs" => self.cf_epochs = num(key, v)?,
            "settings" => {
                self.settings = v
                    .split(',')
                    .map(|s| s.trim().parse().map_err(|e| usage(format!("settings: {e}"))))
                    .collect::<Result<_, _>>()?
            }
            "ks" => self.ks = list(key, v)?,
            "eval_beta" => self.eval_beta = Some(num(key, v)?),
            "sweep_beta" => self.sweep_beta = Some(parse_grid(key, v)?),
            "sweep_alpha" => self.sweep_alpha = Some(parse_grid(key, v)?),
            "sweep_n_sem" => self.sweep_n_sem = Some(list(key, v)?),
            "bench_l" => self.bench_l = num(key, v)?,
            "bench_m" => self.bench_m = list(key, v)?,
            "bench_d" => self.bench_d = num(key, v)?,
            "beam_decoders" => self.beam_decoders = num(key, v)?,
            "beam_vocab" => self.beam_vocab = num(key, v)?,
            "beam_len" => self.beam_len = num(key, v)?,
            "beam_widths" => self.beam_widths = list(key, v)?,
            _ if TrainConfig::keys().contains(&key) => self.train.set(key, v)?,
            _ => return Err(usage(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        let mut section: Option<(String, Vec<&str>)> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |m: String| usage(format!("config line {}: {m}", i + 1));
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                let keys = section_keys(name).ok_or_else(|| at(format!("unknown section [{name}]")))?;
                section = Some((name.to_string(), keys));
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected key = value, got `{line}`")))?;
            let k = k.trim();
            if let Some((name, keys)) = &section {
                if !keys.contains(&k) {
                    return Err(at(format!("`{k}` does not belong in [{name}]")));
                }
            }
            self.set(k, v).map_err(|e| at(e.to_string()))?;
        }
        Ok(())
    }

    pub fn apply_override(&mut self, kv: &str) -> Result<(), CliError> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects key=value, got `{kv}`")))?;
        self.set(k.trim(), v)
    }

    /// Exactly one semantic source must be configured.
    pub fn check_semantic_source(&self) -> Result<(), CliError> {
        match (&self.semantic_vectors, self.synth_seed) {
            (Some(_), Some(_)) => Err(usage("set only one of `semantic_vectors` and `synth_seed`")),
            (None, None) => Err(usage("set one of `semantic_vectors` or `synth_seed`")),
            _ => Ok(()),
        }
    }
}
