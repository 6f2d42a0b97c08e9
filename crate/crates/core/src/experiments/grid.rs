use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::runs::{read_metrics, run_dir, transfer_in_dir, METRICS_FILE};
use super::transfer::{prepare_transfer, LangMetrics};
use crate::config::RunConfig;
use crate::error::{Error, Result};

/// A named set of config overrides.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Setting {
    pub name: String,
    pub overrides: Vec<(String, String)>,
}

impl Setting {
    pub fn new(name: &str, overrides: &[(&str, &str)]) -> Self {
        Self {
            name: name.to_string(),
            overrides: overrides
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    pub fn apply(&self, base: &RunConfig) -> Result<RunConfig> {
        let mut c = base.clone();
        for (k, v) in &self.overrides {
            c.set(k, v)?;
        }
        Ok(c)
    }
}

pub const ABLATIONS: [&str; 6] = ["mu", "negatives", "projector", "layers", "sharing", "objective"];

pub fn ablation_grid(name: &str) -> Result<Vec<Setting>> {
    let s = Setting::new;
    Ok(match name {
        "mu" => vec![
            s("mu0", &[("mu", "0")]),
            s("mu0.3", &[("mu", "0.3")]),
            s("mu0.5", &[("mu", "0.5")]),
            s("mu0.7", &[("mu", "0.7")]),
            s("no_bias", &[("bias", "none")]),
            s("cross_only", &[("negatives", "cross_only")]),
        ],
        "negatives" => ["64", "128", "256", "512"]
            .iter()
            .map(|n| Setting::new(&format!("cap{n}"), &[("cross_negative_cap", n)]))
            .collect(),
        "projector" => ["none", "shared", "asymmetric"]
            .iter()
            .map(|p| Setting::new(p, &[("projection", p)]))
            .collect(),
        "layers" => ["1", "2", "4", "6"]
            .iter()
            .map(|l| Setting::new(&format!("doc_layers{l}"), &[("doc_layers", l)]))
            .collect(),
        "sharing" => ["share_all", "sep_doc", "sep_doc_head"]
            .iter()
            .map(|m| Setting::new(m, &[("sharing", m)]))
            .collect(),
        "objective" => vec![s("msm", &[]), s("mlm_only", &[("msm_weight", "0")])],
        _ => {
            return Err(Error::UnknownKey {
                key: name.to_string(),
                valid: ABLATIONS.join(", "),
            })
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub setting: String,
    pub seed: u64,
    pub lang: String,
    pub metric: String,
    pub value: f64,
}

/// Per-run metric values with median aggregation over seeds.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

impl ResultTable {
    pub fn push(&mut self, setting: &str, seed: u64, metrics: &LangMetrics) {
        for (lang, vals) in metrics {
            for (m, v) in vals {
                self.rows.push(ResultRow {
                    setting: setting.to_string(),
                    seed,
                    lang: lang.clone(),
                    metric: m.to_string(),
                    value: *v,
                });
            }
        }
    }

    fn settings(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.setting) {
                out.push(r.setting.clone());
            }
        }
        out
    }

    fn columns(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        for r in &self.rows {
            let c = (r.lang.clone(), r.metric.clone());
            if !out.contains(&c) {
                out.push(c);
            }
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Median over seeds of one cell.
    pub fn median_of(&self, setting: &str, lang: &str, metric: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.setting == setting && r.lang == lang && r.metric == metric)
            .map(|r| r.value)
            .collect();
        median(&v)
    }

    fn seeds_of(&self, setting: &str) -> usize {
        let mut s: Vec<u64> = self
            .rows
            .iter()
            .filter(|r| r.setting == setting)
            .map(|r| r.seed)
            .collect();
        s.sort_unstable();
        s.dedup();
        s.len()
    }

    /// One row per setting, one column per (language, metric) median.
    pub fn to_tsv(&self) -> String {
        let cols = self.columns();
        let mut out = String::from("setting\tseeds");
        for (l, m) in &cols {
            write!(out, "\t{l}:{m}").expect("write to string");
        }
        out.push('\n');
        for s in self.settings() {
            write!(out, "{s}\t{}", self.seeds_of(&s)).expect("write to string");
            for (l, m) in &cols {
                match self.median_of(&s, l, m) {
                    Some(v) => write!(out, "\t{v:.4}"),
                    None => write!(out, "\t-"),
                }
                .expect("write to string");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let cols = self.columns();
        let mut out = String::from("| setting | seeds |");
        for (l, m) in &cols {
            write!(out, " {l} {m} |").expect("write to string");
        }
        out.push_str("\n|---|---|");
        out.push_str(&"---|".repeat(cols.len()));
        out.push('\n');
        for s in self.settings() {
            write!(out, "| {s} | {} |", self.seeds_of(&s)).expect("write to string");
            for (l, m) in &cols {
                match self.median_of(&s, l, m) {
                    Some(v) => write!(out, " {v:.4} |"),
                    None => write!(out, " - |"),
                }
                .expect("write to string");
            }
            out.push('\n');
        }
        out
    }
}

/// Runs every setting for every seed under `root/<experiment>/`, skipping
/// finished runs. `progress` receives one line per run.
pub fn run_grid(
    root: &Path,
    experiment: &str,
    base: &RunConfig,
    settings: &[Setting],
    seeds: &[u64],
    mut progress: impl FnMut(&str),
) -> Result<ResultTable> {
    if seeds.is_empty() {
        return Err(Error::invalid("no seeds given"));
    }
    let data = prepare_transfer(base)?;
    let mut table = ResultTable::default();
    for setting in settings {
        for &seed in seeds {
            let mut cfg = setting.apply(base)?;
            cfg.seed = seed;
            let dir = run_dir(root, experiment, &setting.name, seed);
            let metrics = transfer_in_dir(&dir, &format!("ablate {experiment}"), &cfg, &data)?;
            let line = metrics
                .iter()
                .flat_map(|(l, v)| v.first().map(|(m, x)| format!("{l} {m} {x:.4}")))
                .collect::<Vec<_>>()
                .join(", ");
            progress(&format!("{experiment}/{}/{seed}: {line}", setting.name));
            table.push(&setting.name, seed, &metrics);
        }
    }
    Ok(table)
}

pub fn run_ablation(
    root: &Path,
    name: &str,
    base: &RunConfig,
    seeds: &[u64],
    progress: impl FnMut(&str),
) -> Result<ResultTable> {
    run_grid(root, name, base, &ablation_grid(name)?, seeds, progress)
}

/// Reads every finished run under `root/<experiment>/`.
pub fn collect_results(root: &Path, experiment: &str) -> Result<ResultTable> {
    let base = root.join(experiment);
    let list = |p: &Path| -> Result<Vec<std::path::PathBuf>> {
        let mut v: Vec<_> = std::fs::read_dir(p)
            .map_err(|e| Error::io(p, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        v.sort();
        Ok(v)
    };
    let mut table = ResultTable::default();
    let mut found: BTreeMap<String, usize> = BTreeMap::new();
    for sdir in list(&base)? {
        let setting = sdir.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        for rdir in list(&sdir)? {
            let Some(seed) = rdir.file_name().and_then(|s| s.to_str()).and_then(|s| s.parse().ok()) else {
                continue;
            };
            let mpath = rdir.join(METRICS_FILE);
            if mpath.exists() {
                table.push(&setting, seed, &read_metrics(&mpath)?);
                *found.entry(setting.clone()).or_default() += 1;
            }
        }
    }
    if found.is_empty() {
        return Err(Error::invalid(format!("no finished runs under {}", base.display())));
    }
    Ok(table)
}
