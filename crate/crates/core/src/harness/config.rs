//! Experiment configuration: flat `key = value` text, later keys win.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fgm::DEFAULT_PVE;
use crate::presmooth::SmootherConfig;
use crate::simgen::{Model, Observation, SimSpec};
use crate::threshbase::CvConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    /// Covariance-network testing with the data-driven threshold.
    Mfc,
    /// Graphical-model testing on regression residuals.
    Mfg,
    Bh,
    /// Bonferroni.
    Bc,
    Hard,
    Soft,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Mfc, Method::Mfg, Method::Bh, Method::Bc, Method::Hard, Method::Soft];

    /// Thresholding baselines have no nominal level.
    pub fn uses_alpha(self) -> bool {
        !matches!(self, Method::Hard | Method::Soft)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Mfc => "MFC",
            Method::Mfg => "MFG",
            Method::Bh => "BH",
            Method::Bc => "BC",
            Method::Hard => "hard",
            Method::Soft => "soft",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        Method::ALL
            .into_iter()
            .find(|m| m.to_string().eq_ignore_ascii_case(t))
            .ok_or_else(|| Error::invalid(format!("unknown method {t:?}")))
    }
}

/// Every key the config text understands.
pub const KEYS: [&str; 21] = [
    "model",
    "n",
    "p",
    "observation",
    "T",
    "noise_sd",
    "grid_len",
    "exact_basis",
    "seed",
    "methods",
    "alpha",
    "replications",
    "workers",
    "out",
    "pve",
    "tau_grid_size",
    "tau_ratio",
    "bandwidth_constant",
    "ridge",
    "cv_splits",
    "cv_grid_size",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub sim: SimSpec,
    pub methods: Vec<Method>,
    pub alphas: Vec<f64>,
    pub replications: usize,
    /// Worker threads; 0 lets the pool pick.
    pub workers: usize,
    pub out_dir: Option<PathBuf>,
    pub pve: f64,
    pub tau_grid_size: usize,
    pub tau_ratio: f64,
    pub smoother: SmootherConfig,
    /// The split seed is replaced by the replication seed on every run.
    pub cv: CvConfig,
}

/// Methods run when none are named: the model's own test and every baseline.
pub fn default_methods(model: Model) -> Vec<Method> {
    let main = if model.is_dag() { Method::Mfg } else { Method::Mfc };
    vec![main, Method::Bh, Method::Bc, Method::Hard, Method::Soft]
}

/// Replications per experiment when none are given: the Figure-1 design
/// uses 1000, the tables 100.
pub fn default_replications(model: Model) -> usize {
    match model {
        Model::Figure1 { .. } => 1000,
        _ => 100,
    }
}

/// Parses flat `key = value` lines. `#` starts a comment; blank lines are
/// skipped.
pub fn parse_pairs(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            });
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    parse_pairs(&text, path)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e| Error::invalid(format!("{key} = {value:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse(key, s)).collect()
}

impl ExperimentConfig {
    /// Builds a config from key/value pairs; repeated keys keep the last value.
    pub fn from_pairs<K: AsRef<str>, V: AsRef<str>>(pairs: &[(K, V)]) -> Result<Self> {
        let mut map: BTreeMap<&str, &str> = BTreeMap::new();
        for (k, v) in pairs {
            let k = k.as_ref();
            let key = KEYS
                .iter()
                .find(|c| c.eq_ignore_ascii_case(k))
                .ok_or_else(|| Error::invalid(format!("unknown config key {k:?}")))?;
            map.insert(key, v.as_ref());
        }
        let get = |k: &str| map.get(k).copied();

        let model: Model = get("model").map_or(Ok(Model::Cov1), |v| parse("model", v))?;
        let n = get("n").map_or(Ok(200), |v| parse("n", v))?;
        let p = get("p").map_or(Ok(30), |v| parse("p", v))?;
        let mut sim = SimSpec::new(model, n, p);
        let t = get("T").map_or(Ok(51), |v| parse("T", v))?;
        let noise_sd = get("noise_sd").map_or(Ok(1.0), |v| parse("noise_sd", v))?;
        sim.observation = match get("observation").map(str::to_ascii_lowercase).as_deref() {
            None | Some("full") => Observation::Full,
            Some("discrete") => Observation::Discrete { t, noise_sd },
            Some(other) => return Err(Error::invalid(format!("observation must be full or discrete, got {other:?}"))),
        };
        if let Some(v) = get("grid_len") {
            sim.grid_len = parse("grid_len", v)?;
        }
        if let Some(v) = get("exact_basis") {
            sim.exact_basis = parse("exact_basis", v)?;
        }
        if let Some(v) = get("seed") {
            sim.seed = parse("seed", v)?;
        }

        let mut methods = match get("methods") {
            Some(v) => parse_list::<Method>("methods", v)?,
            None => default_methods(model),
        };
        methods.sort();
        methods.dedup();
        let mut alphas = get("alpha").map_or(Ok(vec![0.1]), |v| parse_list::<f64>("alpha", v))?;
        alphas.sort_by(f64::total_cmp);
        alphas.dedup();

        let mut smoother = SmootherConfig::default();
        if let Some(v) = get("bandwidth_constant") {
            smoother.bandwidth_constant = parse("bandwidth_constant", v)?;
        }
        if let Some(v) = get("ridge") {
            smoother.ridge = parse("ridge", v)?;
        }
        let mut cv = CvConfig::default();
        if let Some(v) = get("cv_splits") {
            cv.splits = parse("cv_splits", v)?;
        }
        if let Some(v) = get("cv_grid_size") {
            cv.grid_size = parse("cv_grid_size", v)?;
        }

        let cfg = Self {
            sim,
            methods,
            alphas,
            replications: get("replications").map_or(Ok(default_replications(model)), |v| parse("replications", v))?,
            workers: get("workers").map_or(Ok(0), |v| parse("workers", v))?,
            out_dir: get("out").map(PathBuf::from),
            pve: get("pve").map_or(Ok(DEFAULT_PVE), |v| parse("pve", v))?,
            tau_grid_size: get("tau_grid_size").map_or(Ok(20), |v| parse("tau_grid_size", v))?,
            tau_ratio: get("tau_ratio").map_or(Ok(100.0), |v| parse("tau_ratio", v))?,
            smoother,
            cv,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        if self.replications == 0 {
            return Err(Error::invalid("replications must be at least 1"));
        }
        if self.methods.is_empty() {
            return Err(Error::invalid("no methods requested"));
        }
        if self.alphas.is_empty() {
            return Err(Error::invalid("no alpha levels given"));
        }
        if let Some(&a) = self.alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return Err(Error::InvalidLevel(a));
        }
        if !(self.pve > 0.0 && self.pve <= 1.0) {
            return Err(Error::invalid(format!("pve must be in (0, 1], got {}", self.pve)));
        }
        if self.tau_grid_size == 0 || !(self.tau_ratio > 0.0) || !self.tau_ratio.is_finite() {
            return Err(Error::invalid("tau grid needs at least one value and a positive ratio"));
        }
        if self.cv.splits == 0 || self.cv.grid_size == 0 {
            return Err(Error::invalid("cross-validation needs at least one split and one grid value"));
        }
        self.smoother.validate()
    }

    /// Every key with its effective value, in [`KEYS`] order. Feeding the
    /// result back to [`from_pairs`](Self::from_pairs) gives the same config.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let join = |v: Vec<String>| v.join(",");
        let (observation, t, noise_sd) = match self.sim.observation {
            Observation::Full => ("full", 51, 1.0),
            Observation::Discrete { t, noise_sd } => ("discrete", t, noise_sd),
        };
        KEYS.iter()
            .map(|&k| {
                let v = match k {
                    "model" => self.sim.model.to_string(),
                    "n" => self.sim.n.to_string(),
                    "p" => self.sim.p.to_string(),
                    "observation" => observation.to_string(),
                    "T" => t.to_string(),
                    "noise_sd" => noise_sd.to_string(),
                    "grid_len" => self.sim.grid_len.to_string(),
                    "exact_basis" => self.sim.exact_basis.to_string(),
                    "seed" => self.sim.seed.to_string(),
                    "methods" => join(self.methods.iter().map(Method::to_string).collect()),
                    "alpha" => join(self.alphas.iter().map(f64::to_string).collect()),
                    "replications" => self.replications.to_string(),
                    "workers" => self.workers.to_string(),
                    "out" => self.out_dir.as_ref().map_or(String::new(), |p| p.display().to_string()),
                    "pve" => self.pve.to_string(),
                    "tau_grid_size" => self.tau_grid_size.to_string(),
                    "tau_ratio" => self.tau_ratio.to_string(),
                    "bandwidth_constant" => self.smoother.bandwidth_constant.to_string(),
                    "ridge" => self.smoother.ridge.to_string(),
                    "cv_splits" => self.cv.splits.to_string(),
                    "cv_grid_size" => self.cv.grid_size.to_string(),
                    _ => unreachable!("key list and match disagree"),
                };
                (k.to_string(), v)
            })
            .filter(|(k, v)| !(k == "out" && v.is_empty()))
            .collect()
    }

    /// Label of a method cell in the output files: `MFC`, or `MFC@0.05` when
    /// several levels run together.
    pub fn label(&self, method: Method, alpha: Option<f64>) -> String {
        match alpha {
            Some(a) if self.alphas.len() > 1 => format!("{method}@{a}"),
            _ => method.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::from_pairs(&parse_pairs(text, Path::new("test.cfg"))?)
    }

    #[test]
    fn defaults_follow_the_model() {
        let c = cfg("model = dag3\n").unwrap();
        assert_eq!(c.methods[0], Method::Mfg);
        assert_eq!(c.replications, 100);
        assert_eq!(cfg("model = figure1:10").unwrap().replications, 1000);
        assert_eq!(c.alphas, vec![0.1]);
    }

    #[test]
    fn later_keys_win_and_comments_are_ignored() {
        let c = cfg("# study\nn = 50  # small\np=5\nn=60\nmethods = mfc, BH\nalpha=0.1,0.05\n").unwrap();
        assert_eq!((c.sim.n, c.sim.p), (60, 5));
        assert_eq!(c.methods, vec![Method::Mfc, Method::Bh]);
        assert_eq!(c.alphas, vec![0.05, 0.1]);
        assert_eq!(c.label(Method::Mfc, Some(0.05)), "MFC@0.05");
        assert_eq!(c.label(Method::Hard, None), "hard");
    }

    #[test]
    fn discrete_arm_reads_t_and_noise() {
        let c = cfg("observation = discrete\nT = 20\nnoise_sd = 0.5").unwrap();
        assert_eq!(c.sim.observation, Observation::Discrete { t: 20, noise_sd: 0.5 });
    }

    #[test]
    fn round_trip_through_pairs() {
        let c = cfg("model=figure1:4\nn=40\np=8\nobservation=discrete\nT=11\nmethods=MFC,soft\nalpha=0.2,0.05\nreplications=3\nout=/tmp/x").unwrap();
        assert_eq!(ExperimentConfig::from_pairs(&c.to_pairs()).unwrap(), c);
    }

    #[test]
    fn bad_input_is_rejected() {
        assert!(matches!(cfg("alpha = 1.5"), Err(Error::InvalidLevel(_))));
        assert!(matches!(cfg("replications = 0"), Err(Error::InvalidArgument(_))));
        assert!(matches!(cfg("colour = red"), Err(Error::InvalidArgument(_))));
        assert!(matches!(cfg("methods = lasso"), Err(Error::InvalidArgument(_))));
        assert!(matches!(cfg("n = 50\njunk"), Err(Error::Parse { line: 2, .. })));
    }
}
